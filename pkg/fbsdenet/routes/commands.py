"""
Subcommand handlers for the experiment CLI.

Each handler takes a validated RunConfig and the parsed arguments, writes its
CSV outputs into the output directory and finishes with a manifest.json that
records the config, its hash, every resolved seed, library versions and the
sha256 of every file the command wrote.
"""

import argparse
import logging
import warnings
from pathlib import Path
from typing import Callable, Dict, List, Optional

from fbsdenet.core.brownian import increments_at_level, sample_increments, sample_lattice
from fbsdenet.core.problems import ExactSolution, ProblemSpec, affine_problem, bsb_problem
from fbsdenet.core.surrogate import MlpSurrogate, load_checkpoint, save_checkpoint
from fbsdenet.core.timegrid import make_grid
from fbsdenet.errors import ConfigError, MissingDerivativeError
from fbsdenet.schemas.manifest import OutputFile, RunManifest, library_versions
from fbsdenet.schemas.run_config import RunConfig
from fbsdenet.services import loss, mlmc
from fbsdenet.services.simulate import PathMode, PathOptions, Track, generate_paths, paths_frame
from fbsdenet.services.train import TrainConfig, train_multilevel_inspired, train_single_level
from fbsdenet.utils.hashing import config_hash, file_digest
from fbsdenet.utils.tables import write_csv

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
CHECKPOINT_NAME = "checkpoint.fbnn"


def build_problem(config: RunConfig) -> ProblemSpec:
    p = config.problem
    if p.name == "bsb":
        return bsb_problem(d=p.d, r=p.r, sigma=p.sigma, g=p.g, T=p.T, x0=p.X0)
    return affine_problem(d=p.d, c0=p.c0, ct=p.ct, cx=p.cx, b0=p.b0, a0=p.a0, T=p.T, x0=p.X0)


def build_network(config: RunConfig, spec: ProblemSpec) -> MlpSurrogate:
    n = config.network
    return MlpSurrogate(
        [spec.dim + 1, *n.layers, 1],
        activation=n.activation,
        seed=config.network_seed(),
        time_scale=spec.horizon,
        state_scale=n.state_scale,
    )


def build_train_config(config: RunConfig) -> TrainConfig:
    t, e = config.train, config.experiment
    return TrainConfig(
        batch_size=t.M,
        max_level=t.L,
        iterations=t.K,
        learning_rate=t.learning_rate,
        beta1=t.beta1,
        beta2=t.beta2,
        adam_eps=t.adam_eps,
        loss=t.loss,
        resample_paths=t.resample_paths,
        seed=config.train_seed(),
        grid_kind=t.grid_kind,
        terminal_gradient_weight=t.terminal_gradient_weight,
        terminal_gradient_target=t.terminal_gradient_target,
        antithetic=t.antithetic,
        weighted_loss=t.weighted_loss,
        chunk_size=t.chunk_size,
        divergence_factor=t.divergence_factor,
        eval_points=e.eval_points,
        eval_box=e.eval_box,
        eval_seed=config.eval_seed(),
    )


def output_dir(config: RunConfig, args: argparse.Namespace) -> Path:
    out = Path(args.out) if getattr(args, "out", None) else config.experiment.output_dir
    try:
        out.mkdir(parents=True, exist_ok=True)
        marker = out / ".write-check"
        marker.write_bytes(b"")
        marker.unlink()
    except OSError as e:
        raise ConfigError(f"output directory {out} is not writable: {e}") from None
    return out


def load_checkpoints(args: argparse.Namespace) -> List[MlpSurrogate]:
    return [load_checkpoint(path) for path in (getattr(args, "checkpoint", None) or [])]


def write_manifest(
    out: Path,
    command: str,
    config: RunConfig,
    outputs: List[Path],
    args: argparse.Namespace,
    notes: Optional[str] = None,
) -> Path:
    dumped = config.model_dump(mode="json")
    manifest = RunManifest(
        command=command,
        config_hash=config_hash(dumped),
        config=dumped,
        seeds=config.resolved_seeds(),
        checkpoints=[
            OutputFile(name=str(path), sha256=file_digest(path)) for path in (getattr(args, "checkpoint", None) or [])
        ],
        outputs=[OutputFile(name=path.name, sha256=file_digest(path)) for path in outputs],
        versions=library_versions(),
        notes=notes,
    )
    target = out / MANIFEST_NAME
    target.write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
    logger.info("manifest written path=%s hash=%s", target, manifest.config_hash)
    return target


def cmd_train(config: RunConfig, args: argparse.Namespace) -> List[Path]:
    spec = build_problem(config)
    net = build_network(config, spec)
    train_config = build_train_config(config)
    out = output_dir(config, args)

    if config.train.procedure == "multilevel":
        report = train_multilevel_inspired(spec, net, train_config)
    else:
        report = train_single_level(spec, net, train_config)

    outputs = [
        save_checkpoint(net, out / CHECKPOINT_NAME),
        write_csv(report.history_frame(), out / "train_history.csv"),
    ]
    # wall times are kept out of the deterministic outputs listed in the manifest
    write_csv(report.timings_frame(), out / "train_timings.csv")
    if report.epsilon_final is not None:
        logger.info("training done epsilon_initial=%.6e epsilon_final=%.6e", report.epsilon_initial, report.epsilon_final)
    write_manifest(out, "train", config, outputs, args)
    return outputs


def _check_reference(spec: ProblemSpec, command: str) -> None:
    if spec.has_exact_solution and not spec.solution_solves_pde:
        message = (
            f"{command}: the {spec.name} reference solution for g={spec.parameters.get('g')} "
            "does not solve the PDE; exact-u rows are not an error reference"
        )
        logger.warning(message)
        warnings.warn(message, RuntimeWarning, stacklevel=2)


def _increments(config: RunConfig, spec: ProblemSpec):
    grid = make_grid(config.grid.kind, spec.horizon, config.grid.steps)
    M = config.experiment.M
    if grid.level is not None:
        lattice = sample_lattice(config.lattice_seed(), grid.level, M, spec.dim, spec.horizon)
        return grid, increments_at_level(lattice, grid.level)
    return grid, sample_increments(config.lattice_seed(), grid, M, spec.dim)


def cmd_paths(config: RunConfig, args: argparse.Namespace) -> List[Path]:
    spec = build_problem(config)
    checkpoints = load_checkpoints(args)
    net = checkpoints[0] if checkpoints else None
    out = output_dir(config, args)
    grid, increments = _increments(config, spec)
    options = PathOptions(mode=config.experiment.paths_mode, chunk_size=config.experiment.chunk_size)
    bundle = generate_paths(spec, grid, increments, net, options)
    outputs = [write_csv(paths_frame(bundle), out / "paths.csv")]
    write_manifest(out, "paths", config, outputs, args)
    return outputs


def cmd_loss_scan(config: RunConfig, args: argparse.Namespace) -> List[Path]:
    spec = build_problem(config)
    if not spec.has_exact_derivatives:
        raise MissingDerivativeError(f"{spec.name}: the loss scan needs the exact solution and its derivatives")
    _check_reference(spec, "loss-scan")
    out = output_dir(config, args)
    e = config.experiment
    scan = loss.loss_scaling_scan(spec, e.levels, e.M, config.lattice_seed(), e.chunk_size, e.max_relative_se)
    for variant, fit in loss.scaling_orders(scan).items():
        logger.info("loss scan variant=%s order=%.4f r2=%.4f", variant, -fit.slope, fit.r_squared)
    outputs = [write_csv(loss.scan_with_fit_rows(scan), out / "loss_scan.csv")]
    write_manifest(out, "loss-scan", config, outputs, args)
    return outputs


def cmd_variance_scan(config: RunConfig, args: argparse.Namespace) -> List[Path]:
    spec = build_problem(config)
    _check_reference(spec, "variance-scan")
    checkpoints = load_checkpoints(args)
    out = output_dir(config, args)
    e = config.experiment
    # rows at level l compare against level l + 1
    top = max(e.levels) + 1
    lattice = sample_lattice(config.lattice_seed(), top, e.M, spec.dim, spec.horizon)
    scan = mlmc.variance_structure_scan(spec, lattice, checkpoints, e.levels, e.markers, e.full_grid, e.chunk_size)
    for kind, fit in mlmc.scan_fits(scan).items():
        logger.info("variance scan kind=%s slope=%.4f r2=%.4f", kind, fit.slope, fit.r_squared)
    outputs = [write_csv(mlmc.scan_with_fit_rows(scan), out / "variance_scan.csv")]
    write_manifest(out, "variance-scan", config, outputs, args, notes=f"lattice level {top}")
    return outputs


def cmd_loss_diagnostics(config: RunConfig, args: argparse.Namespace) -> List[Path]:
    spec = build_problem(config)
    checkpoints = load_checkpoints(args)
    out = output_dir(config, args)
    grid, increments = _increments(config, spec)
    if checkpoints:
        net, track, mode = checkpoints[0], Track.SURROGATE, PathMode.SURROGATE_ONLY
    else:
        net, track, mode = None, Track.EXACT_U, PathMode.EXACT_ONLY
        _check_reference(spec, "loss-diagnostics")
    bundle = generate_paths(spec, grid, increments, net, PathOptions(mode=mode, chunk_size=config.experiment.chunk_size))
    source = net if net is not None else ExactSolution(spec)
    outputs = [write_csv(loss.remainder_frame(spec, source, bundle, track), out / "remainders.csv")]
    write_manifest(out, "loss-diagnostics", config, outputs, args)
    return outputs


COMMANDS: Dict[str, Callable[[RunConfig, argparse.Namespace], List[Path]]] = {
    "train": cmd_train,
    "paths": cmd_paths,
    "loss-scan": cmd_loss_scan,
    "variance-scan": cmd_variance_scan,
    "loss-diagnostics": cmd_loss_diagnostics,
}

_HELP = {
    "train": "train a surrogate and write its checkpoint and loss history",
    "paths": "simulate exact-u and surrogate paths on one lattice",
    "loss-scan": "one-step residual scaling of both loss variants per level",
    "variance-scan": "strong errors and variances of every difference kind per level",
    "loss-diagnostics": "dump the remainder decomposition of every one-step residual",
}


def register(subparsers) -> None:
    for name, handler in COMMANDS.items():
        parser = subparsers.add_parser(name, help=_HELP[name])
        parser.add_argument("--config", required=True, type=Path, help="TOML run configuration")
        parser.add_argument("--seed", type=int, default=None, help="master seed, overrides the config")
        parser.add_argument("--out", type=Path, default=None, help="output directory, overrides the config")
        parser.add_argument(
            "--checkpoint", type=Path, action="append", default=None, help="surrogate checkpoint (repeatable)"
        )
        parser.add_argument("--threads", type=int, default=1, help="worker threads for path chunks")
        parser.set_defaults(handler=handler, command=name)
