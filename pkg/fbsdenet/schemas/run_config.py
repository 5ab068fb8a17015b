from __future__ import annotations

import sys
from pathlib import Path
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from fbsdenet.core.problems import TerminalFunctional
from fbsdenet.core.surrogate import Activation
from fbsdenet.core.timegrid import GridKind
from fbsdenet.errors import ConfigError
from fbsdenet.services.loss import GradientTarget, LossVariant
from fbsdenet.services.mlmc import Marker
from fbsdenet.services.simulate import PathMode
from fbsdenet.services.train import Antithetic
from fbsdenet.utils.hashing import derive_seed

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

# spawn-key slots of the master seed, one per consumer
NETWORK_SEED_SLOT = 0
TRAIN_SEED_SLOT = 1
LATTICE_SEED_SLOT = 2
EVAL_SEED_SLOT = 3


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ProblemSection(_Section):
    name: Literal["bsb", "affine"]
    d: int = Field(1, ge=1)
    T: float = Field(1.0, gt=0.0)
    X0: float = 1.0
    # bsb
    r: float = Field(0.05, ge=0.0)
    sigma: float = Field(0.4, gt=0.0)
    g: TerminalFunctional = TerminalFunctional.SQUARE
    # affine
    c0: float = 0.5
    ct: float = 0.3
    cx: float = 1.0
    b0: float = 0.2
    a0: float = 0.0


class GridSection(_Section):
    kind: GridKind = GridKind.UNIFORM
    N: Optional[int] = Field(None, ge=1)
    L: Optional[int] = Field(None, ge=0)

    @model_validator(mode="after")
    def _one_resolution(self) -> "GridSection":
        if self.N is not None and self.L is not None:
            raise ValueError("give either N or L, not both")
        return self

    @property
    def steps(self) -> int:
        if self.N is not None:
            return self.N
        return 2 ** (4 if self.L is None else self.L)


class NetworkSection(_Section):
    layers: List[int] = Field(default_factory=lambda: [32, 32, 32, 32])
    activation: Activation = Activation.TANH
    init_seed: Optional[int] = Field(None, ge=0)
    state_scale: float = Field(1.0, gt=0.0)


class TrainSection(_Section):
    procedure: Literal["single_level", "multilevel"] = "single_level"
    M: int = Field(256, ge=1)
    L: int = Field(4, ge=0)
    K: int = Field(2000, ge=0)
    learning_rate: float = Field(1e-3, gt=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(1e-8, gt=0.0)
    loss: LossVariant = LossVariant.PATHWISE
    resample_paths: Optional[bool] = None
    seed: Optional[int] = Field(None, ge=0)
    grid_kind: GridKind = GridKind.UNIFORM
    terminal_gradient_weight: float = Field(1.0, ge=0.0)
    terminal_gradient_target: GradientTarget = GradientTarget.GRADIENT
    antithetic: Antithetic = Antithetic.NONE
    weighted_loss: bool = False
    chunk_size: Optional[int] = Field(None, ge=1)
    divergence_factor: float = Field(1e6, gt=1.0)


class ExperimentSection(_Section):
    levels: List[int] = Field(default_factory=lambda: [2, 3, 4, 5, 6, 7, 8], min_length=1)
    M: int = Field(8192, ge=1)
    lattice_seed: Optional[int] = Field(None, ge=0)
    output_dir: Path = Path("runs/default")
    chunk_size: Optional[int] = Field(1024, ge=1)
    paths_mode: PathMode = PathMode.BOTH
    markers: List[Marker] = Field(default_factory=lambda: list(Marker))
    full_grid: bool = False
    eval_points: int = Field(10_000, ge=1)
    eval_box: Tuple[float, float] = (0.5, 2.0)
    max_relative_se: Optional[float] = Field(None, gt=0.0)

    @model_validator(mode="after")
    def _check_levels(self) -> "ExperimentSection":
        if any(level < 0 for level in self.levels):
            raise ValueError("levels must be non-negative")
        if self.eval_box[1] <= self.eval_box[0]:
            raise ValueError("eval_box must be (low, high) with low < high")
        return self


class RunConfig(_Section):
    seed: int = Field(0, ge=0)
    problem: ProblemSection
    grid: GridSection = GridSection()
    network: NetworkSection = NetworkSection()
    train: TrainSection = TrainSection()
    experiment: ExperimentSection = ExperimentSection()

    def network_seed(self) -> int:
        return self.network.init_seed if self.network.init_seed is not None else derive_seed(self.seed, NETWORK_SEED_SLOT)

    def train_seed(self) -> int:
        return self.train.seed if self.train.seed is not None else derive_seed(self.seed, TRAIN_SEED_SLOT)

    def lattice_seed(self) -> int:
        if self.experiment.lattice_seed is not None:
            return self.experiment.lattice_seed
        return derive_seed(self.seed, LATTICE_SEED_SLOT)

    def eval_seed(self) -> int:
        return derive_seed(self.seed, EVAL_SEED_SLOT)

    def resolved_seeds(self) -> dict:
        return {
            "master": self.seed,
            "network": self.network_seed(),
            "train": self.train_seed(),
            "lattice": self.lattice_seed(),
            "eval": self.eval_seed(),
        }


def _describe(error: ValidationError) -> str:
    messages = []
    for item in error.errors():
        key = ".".join(str(part) for part in item["loc"]) or "<root>"
        if item["type"] == "missing":
            messages.append(f"missing required key {key}")
        elif item["type"] == "extra_forbidden":
            messages.append(f"unknown key {key}")
        else:
            messages.append(f"{key}: {item['msg']}")
    return "; ".join(messages)


def parse_config(data: dict, seed_override: Optional[int] = None) -> RunConfig:
    if seed_override is not None:
        data = {**data, "seed": seed_override}
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(_describe(e)) from None


def load_config(path: Path, seed_override: Optional[int] = None) -> RunConfig:
    try:
        with open(path, "rb") as handle:
            data = tomllib.load(handle)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"invalid TOML in {path}: {e}") from None
    return parse_config(data, seed_override)
