"""Hot convolution kernels with backend selection at import time.

The compiled Cython extension is used when importable; otherwise the
vectorized NumPy implementation takes over.  Force a backend with
MTSEG_KERNEL={auto,cython,numpy}.  Both backends implement the same
arithmetic; see benchmarks/bench_kernels.py for a speed comparison.
"""

from __future__ import annotations

import os

import numpy as np

from . import conv3d_np

_requested = os.environ.get("MTSEG_KERNEL", "auto").lower()
if _requested not in ("auto", "cython", "numpy"):
    raise ImportError(f"MTSEG_KERNEL must be auto/cython/numpy, got {_requested!r}")

_cy = None
if _requested in ("auto", "cython"):
    try:
        from . import _conv3d_cy as _cy  # type: ignore[attr-defined]
    except ImportError:
        if _requested == "cython":
            raise ImportError(
                "MTSEG_KERNEL=cython but the compiled extension is unavailable; "
                "reinstall with a C compiler or unset MTSEG_KERNEL"
            )
        _cy = None

_impl = _cy if _cy is not None else conv3d_np


def backend_name() -> str:
    """Name of the active kernel backend ('cython' or 'numpy')."""
    return "numpy" if _impl is conv3d_np else "cython"


def get_backend(name: str):
    """Return a specific backend module (used by tests and benchmarks)."""
    if name == "numpy":
        return conv3d_np
    if name == "cython":
        if _cy is None:
            raise ImportError("compiled kernel extension not available")
        return _cy
    raise ValueError(f"unknown backend {name!r}")


def available_backends() -> list[str]:
    return ["cython", "numpy"] if _cy is not None else ["numpy"]


def _prep(*arrays):
    out = []
    dtype = arrays[0].dtype
    for a in arrays:
        a = np.ascontiguousarray(a)
        if a.dtype != dtype:
            a = a.astype(dtype)
        out.append(a)
    return out


def conv3d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Valid correlation of x (Ci,X,Y,Z) with w (Co,Ci,kx,ky,kz) plus bias (Co,)."""
    x, w, b = _prep(x, w, b)
    return _impl.conv3d_forward(x, w, b)


def conv3d_backward(x: np.ndarray, w: np.ndarray, gy: np.ndarray):
    """Gradients (gx, gw, gb) of conv3d_forward given upstream gy (Co,OX,OY,OZ)."""
    x, w, gy = _prep(x, w, gy)
    return _impl.conv3d_backward(x, w, gy)
