"""Loggers for library code and for individual CLI runs."""

import logging
import sys
from datetime import datetime
from pathlib import Path
from typing import List, Optional

from .config import Config

LOG_FORMAT = "%(asctime)s %(levelname)-8s %(name)s: %(message)s"


def _run_handlers(level: int, log_file: Optional[str], formatter: logging.Formatter) -> List[logging.Handler]:
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stdout)]
    if log_file:
        path = Path(log_file)
        path.parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(path))
    for handler in handlers:
        handler.setLevel(level)
        handler.setFormatter(formatter)
    return handlers


def setup_logger(
    name: str,
    level: int = logging.INFO,
    log_file: Optional[str] = None,
    format_string: Optional[str] = None
) -> logging.Logger:
    """
    (Re)configure ``name`` to write to stdout and, optionally, to ``log_file``.

    Calling it again for the same name closes and replaces the previous
    handlers. Records never reach the root logger.
    """
    logger = logging.getLogger(name)
    logger.setLevel(level)
    logger.propagate = False

    for old in list(logger.handlers):
        logger.removeHandler(old)
        old.close()
    for handler in _run_handlers(level, log_file, logging.Formatter(format_string or LOG_FORMAT)):
        logger.addHandler(handler)
    return logger


def get_run_logger(run_id: str, level: Optional[int] = None) -> logging.Logger:
    """Logger ``imexode_run_<run_id>`` that also writes a timestamped file under Config.LOG_DIR."""
    stamp = datetime.now().strftime("%Y%m%d_%H%M%S")
    return setup_logger(
        name=f"imexode_run_{run_id}",
        level=level if level is not None else Config.log_level(),
        log_file=str(Path(Config.LOG_DIR) / f"imexode_run_{run_id}_{stamp}.log"),
    )


default_logger = setup_logger("imexode", level=Config.log_level())
