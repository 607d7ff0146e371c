"""Per-command loguru sinks."""

from __future__ import annotations

import logging
import os
import sys
from pathlib import Path

from beartype import beartype
from loguru import logger

LOG_LEVEL_ENV = "MAPO_LOG_LEVEL"
LOG_FILE_NAME = "out.log"
CONSOLE_FORMAT = "<green>{time:HH:mm:ss}</green> | <level>{level: <7}</level> | {message}"


class PropagateHandler(logging.Handler):
    """Hands loguru records to stdlib logging so pytest's caplog sees them."""

    def emit(self, record: logging.LogRecord) -> None:
        logging.getLogger(record.name).handle(record)


@beartype
def setup_logging(name: str, log_root: Path = Path(".")) -> Path:
    """Log to stderr and to ``<log_root>/logs/<name>/out.log`` at DEBUG.

    The console level comes from ``$MAPO_LOG_LEVEL`` (default INFO).
    """
    log_dir = log_root / "logs" / name
    log_dir.mkdir(parents=True, exist_ok=True)
    log_file = log_dir / LOG_FILE_NAME
    logger.remove()
    logger.add(sys.stderr, level=os.getenv(LOG_LEVEL_ENV, "INFO"), format=CONSOLE_FORMAT)
    logger.add(log_file, level="DEBUG", mode="w", encoding="utf-8")
    logger.add(PropagateHandler(), format="{message}")
    logger.info(f"{name}: logging to {log_file}")
    return log_dir
