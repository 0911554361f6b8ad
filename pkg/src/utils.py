"""Shared utilities used by Maskinator: errors, logging, PGM image I/O and worker pools"""

from __future__ import annotations

import datetime
import logging
import os
import pathlib
import sys
import typing as t
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from PIL import Image

__all__ = [
    "APP_NAME",
    "LOG_FILE",
    "MaskinatorError",
    "configure_logging",
    "get_logger",
    "load_pgm",
    "parallel_map",
    "save_pgm",
]

# do not manually change the version; use bump2version per the README
__version__ = "0.1.0"

APP_NAME = "Maskinator"

# optional logging to file if debug enabled (will always log to stderr)
LOG_FILE = f"{APP_NAME}.log"


class MaskinatorError(Exception):
    """Base class for all Maskinator exceptions"""

    ...


class _IsoFormatter(logging.Formatter):
    """Format records as '<iso timestamp> - <message>' for the debug log file"""

    def format(self, record: logging.LogRecord) -> str:
        timestamp = datetime.datetime.fromtimestamp(record.created).isoformat()
        return f"{timestamp} - {record.name} - {record.getMessage()}"


def get_logger(name: str) -> logging.Logger:
    """Return a logger in the maskinator hierarchy, e.g. get_logger("litho") -> maskinator.litho"""
    return logging.getLogger(f"{APP_NAME.lower()}.{name}")


def configure_logging(
    debug: bool = False, log_dir: t.Optional[t.Union[str, os.PathLike]] = None
) -> logging.Logger:
    """Configure the maskinator logger.

    Messages always go to stderr prefixed with the app name and version.
    If debug is True, messages are also appended to LOG_FILE in log_dir
    (current directory if log_dir is None) with an ISO timestamp.

    Args:
        debug: enable debug level logging and the log file
        log_dir: directory for the debug log file

    Returns:
        the root maskinator logger
    """
    logger = logging.getLogger(APP_NAME.lower())
    logger.setLevel(logging.DEBUG if debug else logging.INFO)
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()

    stream = logging.StreamHandler(sys.stderr)
    stream.setFormatter(
        logging.Formatter(f"{APP_NAME} {__version__} %(levelname)s %(message)s")
    )
    logger.addHandler(stream)

    if debug:
        log_path = pathlib.Path(log_dir or ".") / LOG_FILE
        log_path.parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_path, mode="a", encoding="utf-8")
        file_handler.setFormatter(_IsoFormatter())
        logger.addHandler(file_handler)

    logger.propagate = False
    return logger


def save_pgm(path: t.Union[str, os.PathLike], values: np.ndarray):
    """Write a 2-D array to a binary PGM (P5) file with maxval 255.

    Binary arrays (0/1) are written with foreground = 255; real arrays in [0, 1]
    are scaled to 0..255 and rounded.

    Args:
        path: output filename
        values: 2-D array of 0/1 values or reals in [0, 1]
    """
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError(f"PGM export needs a 2-D array, got shape {values.shape}")
    pixels = np.clip(np.rint(values.astype(np.float64) * 255.0), 0, 255).astype(
        np.uint8
    )
    Image.fromarray(pixels, mode="L").save(os.fspath(path), format="PPM")


def load_pgm(path: t.Union[str, os.PathLike]) -> np.ndarray:
    """Read a PGM file and return float64 values scaled to [0, 1]"""
    with Image.open(os.fspath(path)) as img:
        pixels = np.asarray(img.convert("L"), dtype=np.float64)
    return pixels / 255.0


T = t.TypeVar("T")
R = t.TypeVar("R")


def parallel_map(
    fn: t.Callable[[T], R], items: t.Sequence[T], threads: int = 1
) -> t.List[R]:
    """Apply fn to every item, optionally on a thread pool; results keep input order."""
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
