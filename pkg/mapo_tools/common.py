from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
from beartype import beartype
from loguru import logger

from mapo_tools.errors import ConfigError


@beartype
def derive_seed(*parts: int) -> int:
    """Mix integer parts into one 64-bit seed. Order matters; no ambient entropy."""
    if any(p < 0 for p in parts):
        raise ConfigError(f"Seeds must be non-negative, got {parts}")
    state = np.random.SeedSequence(list(parts)).generate_state(1, dtype=np.uint64)
    return int(state[0])


@beartype
def prepare_output_dir(path: Path, force: bool) -> Path:
    """Create *path*, refusing to reuse a non-empty directory unless *force* is set."""
    if path.exists() and not path.is_dir():
        raise ConfigError(f"Output path exists and is not a directory: {path}")
    if path.exists() and any(path.iterdir()):
        if not force:
            raise ConfigError(
                f"Output directory {path} is not empty. Use --force to write into it."
            )
        logger.warning(f"Writing into existing directory {path} (--force).")
    path.mkdir(parents=True, exist_ok=True)
    return path


def format_cell(value: Any) -> str:
    """Render a CSV cell deterministically (floats via repr, None as empty)."""
    if value is None:
        return ""
    if isinstance(value, float):
        return "nan" if math.isnan(value) else repr(value)
    return str(value)


@beartype
def write_csv(
    path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]
) -> Path:
    """Write a CSV with LF line endings so reruns are byte-identical."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_cell(v) for v in row])
    logger.debug(f"Wrote {path}")
    return path
