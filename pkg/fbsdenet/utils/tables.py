import logging
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import pandas as pd

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"


def frame(rows: Iterable[Mapping], columns: Sequence[str]) -> pd.DataFrame:
    return pd.DataFrame(list(rows), columns=list(columns))


def write_csv(table: pd.DataFrame, path: Path) -> Path:
    """Write with '.' decimals and 17 significant digits so floats round-trip exactly."""
    path = Path(path)
    table.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    logger.info("table written path=%s rows=%d", path, len(table))
    return path
