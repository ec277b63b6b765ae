"""Hot numeric kernels with two interchangeable backends.

``numba`` JIT-compiles the inner loops and is the default when importable;
``numpy`` is the pure-vectorized fallback. Select explicitly with the
environment variable ``STORYDIFF_BACKEND=numba|numpy`` (read once at
import). ``bench`` compares both regardless of the active choice.
"""

import os

from ..errors import ConfigError
from . import numpy_impl

try:
    from . import numba_impl
except ImportError:  # pragma: no cover - numba is a hard dep but stay usable
    numba_impl = None

_BACKENDS = {"numpy": numpy_impl}
if numba_impl is not None:
    _BACKENDS["numba"] = numba_impl

_requested = os.environ.get("STORYDIFF_BACKEND", "").strip().lower()
if _requested == "":
    _active = numba_impl if numba_impl is not None else numpy_impl
elif _requested in _BACKENDS:
    _active = _BACKENDS[_requested]
else:
    raise ConfigError(
        f"STORYDIFF_BACKEND={_requested!r}: expected one of {sorted(_BACKENDS)}"
    )


def active():
    """The module implementing the selected backend."""
    return _active


def backend_name() -> str:
    return _active.NAME


def available_backends():
    return sorted(_BACKENDS)


def get_backend(name: str):
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ConfigError(f"unknown kernel backend {name!r}") from None


# re-export the active implementation's entry points
conv2d_fwd = _active.conv2d_fwd
conv2d_bwd = _active.conv2d_bwd
attn_fwd = _active.attn_fwd
attn_bwd = _active.attn_bwd
