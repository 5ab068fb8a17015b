import platform
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
import pydantic
import scipy
import torch
from pydantic import BaseModel, ConfigDict

from fbsdenet import __version__


class OutputFile(BaseModel):
    name: str
    sha256: str


class RunManifest(BaseModel):
    """Everything needed to rerun a command and check its outputs byte for byte."""

    model_config = ConfigDict(extra="forbid")

    command: str
    package_version: str = __version__
    config_hash: str
    config: dict
    seeds: Dict[str, int]
    checkpoints: List[OutputFile] = []
    outputs: List[OutputFile] = []
    versions: Dict[str, str]
    notes: Optional[str] = None


def library_versions() -> Dict[str, str]:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "torch": torch.__version__,
        "pandas": pd.__version__,
        "pydantic": pydantic.VERSION,
    }
