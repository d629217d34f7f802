import logging
import sys
from typing import Optional

from dqss.core.config import get_settings

LOG_FORMAT = "%(levelname)-5.5s [%(name)s] %(message)s"


def configure_logging(level: Optional[str] = None) -> None:
    """Install one stderr handler on the package logger (idempotent)."""
    root = logging.getLogger("dqss")
    root.setLevel((level or get_settings().log_level).upper())
    if not any(getattr(h, "_dqss", False) for h in root.handlers):
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        handler._dqss = True
        root.addHandler(handler)
