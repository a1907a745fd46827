"""Backend selection for the forward kernels.

The compiled extension is used when it imports; otherwise, or when
``CARDIOXNET_BACKEND=python`` is set, the numpy implementation is used.
Both produce identical results.
"""
import logging
import os
from types import ModuleType

from . import _pykernels

logger = logging.getLogger(__name__)

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS: dict[str, ModuleType] = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def _initial_backend() -> str:
    requested = os.environ.get("CARDIOXNET_BACKEND", "").strip().lower()
    if requested:
        if requested not in _BACKENDS:
            logger.warning("backend %r unavailable, falling back to python", requested)
            return "python"
        return requested
    return "cython" if "cython" in _BACKENDS else "python"


_active = _initial_backend()


def backend_name() -> str:
    return _active


def set_backend(name: str) -> None:
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; available: {available_backends()}")
    _active = name


def get(name: str | None = None) -> ModuleType:
    return _BACKENDS[name or _active]
