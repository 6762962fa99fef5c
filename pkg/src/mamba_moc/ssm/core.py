"""Discrete state-space primitives on plain numpy arrays.

Conventions: a sequence has length L, D independent channels and a diagonal
state of size N per channel. Per-step decay/injection arrays are (L, D, N);
the readout vector is shared by all channels and is (L, N).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ModeError, ShapeError
from . import kernels

TAYLOR_THRESHOLD = 1e-6


def discretize(A, B, delta):
    """Zero-order-hold discretization of a diagonal continuous system.

    Returns ``(A_bar, B_bar)`` with ``A_bar = exp(delta*A)`` and
    ``B_bar = (exp(delta*A) - 1) / A * B``, elementwise. When
    ``|delta*A| < 1e-6`` the first-order limit ``B_bar = delta*B`` is used.
    """
    A, B, delta = np.asarray(A), np.asarray(B), np.asarray(delta)
    if np.any(delta <= 0):
        raise ValueError("timescale delta must be strictly positive")
    z = delta * A
    a_bar = np.exp(z)
    small = np.abs(z) < TAYLOR_THRESHOLD
    safe_a = np.where(small, 1, A)
    b_bar = np.where(small, delta * B, np.expm1(z) / safe_a * B)
    return a_bar, b_bar


@dataclass
class DiscreteSsm:
    """Per-step discretized parameters of a D-channel diagonal SSM."""

    a_bar: np.ndarray
    b_bar: np.ndarray
    c: np.ndarray
    delta: np.ndarray | None = None

    def __post_init__(self):
        self.a_bar = np.asarray(self.a_bar)
        self.b_bar = np.asarray(self.b_bar)
        self.c = np.asarray(self.c)
        if self.a_bar.ndim == 2:
            self.a_bar = self.a_bar[:, None, :]
        if self.b_bar.ndim == 2:
            self.b_bar = self.b_bar[:, None, :]
        if self.a_bar.ndim != 3 or self.c.ndim != 2:
            raise ShapeError("expected a_bar/b_bar as (L, D, N) or (L, N) and c as (L, N)")
        length, n = self.c.shape
        if self.a_bar.shape[0] != length or self.b_bar.shape[0] != length:
            raise ShapeError("per-step parameter lengths differ")
        if self.a_bar.shape[2] != n or self.b_bar.shape[2] != n:
            raise ShapeError("state sizes differ between a_bar, b_bar and c")

    @property
    def length(self) -> int:
        return self.c.shape[0]

    @property
    def state_size(self) -> int:
        return self.c.shape[1]

    @classmethod
    def from_continuous(cls, A, B, C, delta, length: int) -> "DiscreteSsm":
        """Discretize per step. ``A`` is (D, N); ``B``, ``C`` are (N,) or (L, N);
        ``delta`` is scalar, (D,) or (L, D)."""
        A = np.asarray(A)
        B = np.broadcast_to(np.asarray(B), (length, A.shape[-1]))
        C = np.broadcast_to(np.asarray(C), (length, A.shape[-1]))
        delta = np.asarray(delta)
        delta = np.broadcast_to(delta if delta.ndim == 2 else np.broadcast_to(delta, A.shape[:1])[None],
                                (length, A.shape[0]))
        a_bar, b_bar = discretize(A[None], B[:, None, :], delta[:, :, None])
        return cls(a_bar, b_bar, np.array(C), np.array(delta))

    def is_time_invariant(self) -> bool:
        return all(np.all(arr == arr[:1]) for arr in (self.a_bar, self.b_bar, self.c))

    def expanded(self, channels: int) -> tuple[np.ndarray, np.ndarray]:
        shape = (self.length, channels, self.state_size)
        return np.broadcast_to(self.a_bar, shape), np.broadcast_to(self.b_bar, shape)


def _as_channels(ssm: DiscreteSsm, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[:, None]
    if x.shape[0] != ssm.length:
        raise ShapeError(f"input length {x.shape[0]} != parameter length {ssm.length}")
    if ssm.a_bar.shape[1] not in (1, x.shape[1]):
        raise ShapeError(f"parameters for {ssm.a_bar.shape[1]} channels, input has {x.shape[1]}")
    return x, squeeze


def readout(hs: np.ndarray, c: np.ndarray) -> np.ndarray:
    """y_t[d] = <c_t, h_t[d]> for states (L, D, N) and readouts (L, N)."""
    return np.einsum("ldn,ln->ld", hs, c)


def scan_states(ssm: DiscreteSsm, x, h0=None, backend: str | None = None) -> np.ndarray:
    """Hidden states (L, D, N) of the sequential recurrence."""
    x, _ = _as_channels(ssm, x)
    a, b = ssm.expanded(x.shape[1])
    bx = b * x[:, :, None]
    dtype = np.result_type(a, bx, ssm.c, np.float32)
    init = None if h0 is None else np.broadcast_to(np.asarray(h0, dtype=dtype), a.shape[1:])[None]
    _, hs = kernels.scan_forward(a[None].astype(dtype), bx[None].astype(dtype),
                                 ssm.c[None].astype(dtype), init, backend=backend)
    return hs[0]


def scan_recurrent(ssm: DiscreteSsm, x, h0=None, backend: str | None = None) -> np.ndarray:
    """Sequential scan: h_t = A_bar_t h_{t-1} + B_bar_t x_t, y_t = <C_t, h_t>."""
    x, squeeze = _as_channels(ssm, x)
    y = readout(scan_states(ssm, x, h0, backend=backend), ssm.c)
    return y[:, 0] if squeeze else y


def convolution_kernel(ssm: DiscreteSsm, channels: int = 1) -> np.ndarray:
    """Taps K[k, d] = C A_bar^k B_bar for an LTI system, k = 0..L-1."""
    if not ssm.is_time_invariant():
        raise ModeError("global convolution form needs time-invariant parameters")
    a, b = ssm.a_bar[0], ssm.b_bar[0]
    a = np.broadcast_to(a, (channels, ssm.state_size))
    b = np.broadcast_to(b, (channels, ssm.state_size))
    powers = a[None] ** np.arange(ssm.length)[:, None, None]
    return np.einsum("kdn,n->kd", powers * b[None], ssm.c[0])


def kernel_conv(ssm: DiscreteSsm, x) -> np.ndarray:
    """Causal convolution of ``x`` with the unrolled kernel; tap k multiplies x_{t-k}."""
    x, squeeze = _as_channels(ssm, x)
    taps = convolution_kernel(ssm, x.shape[1])
    length = ssm.length
    y = np.stack([np.convolve(x[:, d], taps[:, d])[:length] for d in range(x.shape[1])], axis=1)
    return y[:, 0] if squeeze else y


def associative_combine(left: tuple[np.ndarray, np.ndarray],
                        right: tuple[np.ndarray, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """(a1, b1) . (a2, b2) = (a1 a2, a2 b1 + b2); ``left`` covers the earlier steps."""
    a1, b1 = left
    a2, b2 = right
    return a1 * a2, a2 * b1 + b2


def scan_parallel(ssm: DiscreteSsm, x, h0=None) -> np.ndarray:
    """Same result as :func:`scan_recurrent`, computed as a log-depth prefix scan."""
    x, squeeze = _as_channels(ssm, x)
    a, b = ssm.expanded(x.shape[1])
    a = np.array(a)
    b = b * x[:, :, None]
    if h0 is not None:
        b[0] = a[0] * h0 + b[0]
    offset = 1
    length = ssm.length
    while offset < length:
        new_a, new_b = associative_combine((a[:-offset], b[:-offset]), (a[offset:], b[offset:]))
        a = np.concatenate([a[:offset], new_a])
        b = np.concatenate([b[:offset], new_b])
        offset *= 2
    y = readout(b, ssm.c)
    return y[:, 0] if squeeze else y
