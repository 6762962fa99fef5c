"""Input-dependent (selective) scan as a differentiable op and module."""
from __future__ import annotations

import numpy as np

from .. import autograd as ag
from ..autograd import Tensor, make_result
from ..errors import ConfigError, ShapeError
from ..nn import Module, Parameter, kaiming_uniform
from . import kernels


def selective_scan_op(x: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor,
                      backend: str | None = None) -> Tensor:
    """Discretize per step (zero-order hold) and run the recurrence.

    x, delta: (..., L, D); B, C: (..., L, N); A: (D, N) or (K, D, N) where
    the K matrices cycle over the flattened leading dims (so a (B, K, L, D)
    input uses A[k] for direction k). Returns y: (..., L, D).
    """
    *lead, length, d = x.shape
    n = B.shape[-1]
    if delta.shape != x.shape:
        raise ShapeError(f"delta {delta.shape} must match input {x.shape}")
    if B.shape != (*lead, length, n) or C.shape != B.shape:
        raise ShapeError(f"B {B.shape} and C {C.shape} must be {(*lead, length, n)}")
    if A.shape[-2:] != (d, n) or A.ndim not in (2, 3):
        raise ShapeError(f"A {A.shape} must be (D, N) or (K, D, N) with (D, N) = {(d, n)}")
    m = int(np.prod(lead)) if lead else 1
    a3 = A.data.reshape(-1, d, n)
    if lead and lead[-1] != a3.shape[0] and a3.shape[0] != 1:
        raise ShapeError(f"{a3.shape[0]} A matrices do not match leading dims {tuple(lead)}")
    flat = [t.data.reshape(m, length, -1) for t in (x, delta, B, C)]
    y, cache = kernels.selective_forward(flat[0], flat[1], a3, flat[2], flat[3], backend=backend)

    def backward(gy):
        gx, gdl, ga, gb, gc = kernels.selective_backward(
            flat[0], flat[1], a3, flat[2], flat[3], cache, gy.reshape(m, length, d), backend=backend)
        return (gx.reshape(x.shape), gdl.reshape(delta.shape), ga.reshape(A.shape),
                gb.reshape(B.shape), gc.reshape(C.shape))

    return make_result(y.reshape(x.shape), (x, delta, A, B, C), backward, "selective_scan")


def _inverse_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


class SelectiveSSM(Module):
    """Diagonal selective SSM over ``directions`` independent scan orders.

    Each direction has its own A (stored as ``a_log`` with A = -exp(a_log)),
    and its own projections from the D input channels to the per-step
    timescale (D values), B (N values) and C (N values).
    """

    def __init__(self, channels: int, state_size: int, rng: np.random.Generator, directions: int = 1,
                 dt_min: float = 1e-3, dt_max: float = 1e-1):
        if channels < 1 or state_size < 1:
            raise ConfigError("channels and state size must be >= 1")
        k, d, n = directions, channels, state_size
        self.directions = k
        self.state_size = n
        self.channels = d
        self.a_log = Parameter(np.log(np.broadcast_to(np.arange(1, n + 1, dtype=np.float64), (k, d, n))))
        self.w_delta = Parameter(kaiming_uniform(rng, (k, d, d), d))
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=(k, d)))
        self.b_delta = Parameter(_inverse_softplus(dt))
        self.w_b = Parameter(kaiming_uniform(rng, (k, d, n), d))
        self.b_b = Parameter(np.zeros((k, n)))
        self.w_c = Parameter(kaiming_uniform(rng, (k, d, n), d))
        self.b_c = Parameter(np.zeros((k, n)))

    def A(self) -> Tensor:
        return ag.neg(ag.exp(self.a_log))

    def projections(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Per-step (delta, B, C) for input x of shape (B, K, L, D)."""
        k = self.directions
        delta = ag.softplus(ag.add(ag.bmm(x, self.w_delta), self.b_delta.reshape(k, 1, self.channels)))
        bm = ag.add(ag.bmm(x, self.w_b), self.b_b.reshape(k, 1, self.state_size))
        cm = ag.add(ag.bmm(x, self.w_c), self.b_c.reshape(k, 1, self.state_size))
        return delta, bm, cm

    def forward(self, x: Tensor, c_offset: Tensor | None = None) -> Tensor:
        """Scan ``x``; with one direction x may be (L, D) or (B, L, D), otherwise (B, K, L, D).

        ``c_offset`` is added to the per-step readout C (same layout as C,
        last axis N) before the scan.
        """
        original = x.shape
        k = self.directions
        if x.shape[-1] != self.channels:
            raise ShapeError(f"expected {self.channels} channels, got {x.shape[-1]}")
        if k == 1 and (x.ndim < 4 or x.shape[-3] != 1):
            x = x.reshape(-1, 1, *x.shape[-2:])
            if c_offset is not None:
                c_offset = c_offset.reshape(-1, 1, *c_offset.shape[-2:])
        elif x.ndim != 4 or x.shape[1] != k:
            raise ShapeError(f"expected (B, {k}, L, D) input, got {x.shape}")
        delta, bm, cm = self.projections(x)
        if c_offset is not None:
            if c_offset.shape[-1] != self.state_size:
                raise ConfigError(
                    f"context query width {c_offset.shape[-1]} != state size {self.state_size}")
            cm = ag.add(cm, c_offset)
        y = selective_scan_op(x, delta, self.A(), bm, cm)
        return y.reshape(original)


def selective_scan(ssm: SelectiveSSM, x: Tensor, c_offset: Tensor | None = None) -> Tensor:
    return ssm(x, c_offset)
