"""Selects the compiled kernels when available, else the pure-Python ones.

Set ``FASTDCO_BACKEND=python`` to force the fallback.
"""

from __future__ import annotations

import os
from types import ModuleType

from . import _pykernels

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

_BACKENDS = {"python": _pykernels}
if _compiled is not None:
    _BACKENDS["cython"] = _compiled


def available() -> list[str]:
    return sorted(_BACKENDS)


def default_name() -> str:
    forced = os.environ.get("FASTDCO_BACKEND")
    if forced:
        if forced not in _BACKENDS:
            raise RuntimeError(f"FASTDCO_BACKEND={forced!r} is not available ({available()})")
        return forced
    return "cython" if "cython" in _BACKENDS else "python"


def get(name: str | None = None) -> ModuleType:
    name = name or default_name()
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(f"backend {name!r} not available; have {available()}") from None
