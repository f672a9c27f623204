import logging
import os
import sys
from pathlib import Path
from typing import Optional


class ReViTError(Exception):
    """Base class for every error raised by this project."""


class DimensionError(ReViTError, ValueError):
    pass


class ValidationError(ReViTError, ValueError):
    pass


class ContractError(ReViTError, RuntimeError):
    pass


class NumericalError(ReViTError, ArithmeticError):
    pass


class TrainingDivergedError(NumericalError):
    pass


class DataFormatError(ReViTError, ValueError):
    pass


class DatasetIOError(ReViTError, OSError):
    pass


class TruncatedFileError(DatasetIOError, DataFormatError):
    """A data file whose length is not a whole number of records."""


class CheckpointFormatError(ReViTError, ValueError):
    pass


def load_env_var(key: str) -> Optional[str]:
    """Resolve `key` from the environment, then `.env` via python-dotenv, then a plain `.env` read."""
    value = os.environ.get(key)
    if value:
        return value

    try:
        from dotenv import load_dotenv

        load_dotenv()
        value = os.environ.get(key)
        if value:
            return value
    except ImportError:
        pass

    env_path = Path.cwd() / ".env"
    if not env_path.is_file():
        return None
    for raw_line in env_path.read_text(encoding="utf-8").splitlines():
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("export "):
            line = line[len("export ") :]
        name, sep, val = line.partition("=")
        if sep and name.strip() == key:
            return val.strip().strip("'\"") or None
    return None


_configured = False


def _configure_root(level: Optional[str] = None) -> None:
    global _configured
    root = logging.getLogger("revit")
    if not _configured:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("[%(short)s] %(message)s"))
        handler.addFilter(_ShortName())
        root.addHandler(handler)
        root.propagate = False
        _configured = True
    name = (level or load_env_var("REVIT_LOG_LEVEL") or "INFO").upper()
    root.setLevel(getattr(logging, name, logging.INFO))


class _ShortName(logging.Filter):
    def filter(self, record: logging.LogRecord) -> bool:
        record.short = record.name.rsplit(".", 1)[-1]
        return True


def get_logger(name: str) -> logging.Logger:
    """Logger under the `revit` tree; renders as `[module] message`."""
    _configure_root()
    return logging.getLogger(f"revit.{name}")


def set_log_level(level: Optional[str]) -> None:
    _configure_root(level)
