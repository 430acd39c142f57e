"""CSV helpers shared by the writers."""
from __future__ import annotations

from . import __version__


def csv_header(what: str, **params) -> str:
    """``# crystalwalk <version> <what> key=value ...`` comment line."""
    extra = " ".join(f"{k}={v}" for k, v in params.items())
    return f"# crystalwalk {__version__} {what} {extra}\n"


def fmt(x: float) -> str:
    return repr(float(x))
