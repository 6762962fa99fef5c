"""Backend selection for the linear-recurrence kernels.

The compiled extension is used when it imports; setting ``MOC_PURE_PYTHON=1``
forces the numpy fallback.
"""
from __future__ import annotations

import os

import numpy as np

from . import _scan_py


def _load_backends() -> dict:
    backends = {"python": _scan_py}
    try:
        from . import _scan_ext
    except ImportError:
        pass
    else:
        backends["cython"] = _scan_ext
    return backends


_BACKENDS = _load_backends()
if os.environ.get("MOC_PURE_PYTHON", "") not in ("", "0") or "cython" not in _BACKENDS:
    BACKEND = "python"
else:
    BACKEND = "cython"


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def _impl(backend: str | None):
    name = backend or BACKEND
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(f"scan backend {name!r} is not available; have {available_backends()}") from None


def _prep(dtype, *arrays):
    return [np.ascontiguousarray(x, dtype=dtype) for x in arrays]


def scan_forward(a, b, c, h0=None, backend: str | None = None):
    """Run h_t = a_t * h_{t-1} + b_t over (M, L, D, N) inputs; returns (y, hs)."""
    if a.shape != b.shape or a.ndim != 4:
        raise ValueError(f"decay {a.shape} and injection {b.shape} must match as (M, L, D, N)")
    m, length, d, n = a.shape
    if c.shape != (m, length, n):
        raise ValueError(f"readout shape {c.shape} != {(m, length, n)}")
    dtype = np.result_type(a.dtype, b.dtype, c.dtype)
    if h0 is None:
        h0 = np.zeros((m, d, n), dtype=dtype)
    return _impl(backend).scan_forward(*_prep(dtype, a, b, c, h0))


def scan_backward(a, c, hs, gy, h0=None, backend: str | None = None):
    """Gradients (ga, gb, gc, gh0) of the recurrence given dLoss/dy."""
    m, length, d, n = a.shape
    dtype = a.dtype
    if h0 is None:
        h0 = np.zeros((m, d, n), dtype=dtype)
    return _impl(backend).scan_backward(*_prep(dtype, a, c, hs, h0, gy))


def selective_forward(x, delta, A, B, C, backend: str | None = None):
    """Discretize per step and scan. x, delta: (M, L, D); A: (Ka, D, N); B, C: (M, L, N).

    Sequence m uses ``A[m % Ka]``. Returns ``(y, cache)``; the cache holds
    the states, decays and injection factors needed by the backward pass.
    """
    if x.shape[0] % A.shape[0]:
        raise ValueError(f"{x.shape[0]} sequences cannot cycle over {A.shape[0]} A matrices")
    return _impl(backend).selective_forward(*_prep(x.dtype, x, delta, A, B, C))


def selective_backward(x, delta, A, B, C, cache, gy, backend: str | None = None):
    """Gradients (gx, gdelta, gA, gB, gC) of the selective scan given dLoss/dy."""
    return _impl(backend).selective_backward(*_prep(x.dtype, x, delta, A, B, C, *cache, gy))
