"""Context state-space scan and the residual VSS/CSS block.

A 2D map is serialized four ways (row/column, forward/backward). In the
context variant a multi-scale local query is added to the per-step readout
of the SSM and a local feature is added to its output.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import functional as F
from .autograd import Tensor
from .errors import ConfigError, ShapeError
from .nn import Conv2d, DepthwiseConv2d, LayerNorm, Linear, Module
from .ssm.selective import SelectiveSSM

DIRECTIONS = ("row-forward", "row-backward", "column-forward", "column-backward")


@dataclass(frozen=True)
class ScanOrder:
    direction: str
    permutation: np.ndarray
    inverse: np.ndarray


def scan_orders(height: int, width: int) -> list[ScanOrder]:
    """The four serializations of an H x W grid in row-major index space."""
    rows = np.arange(height * width)
    cols = rows.reshape(height, width).T.ravel()
    perms = (rows, rows[::-1], cols, cols[::-1])
    return [ScanOrder(name, p, np.argsort(p)) for name, p in zip(DIRECTIONS, perms)]


def order_index(height: int, width: int) -> np.ndarray:
    return np.stack([o.permutation for o in scan_orders(height, width)])


def cross_scan_2d(f: Tensor) -> Tensor:
    """(..., H, W, C) -> (..., 4, H*W, C) in the order of ``DIRECTIONS``."""
    *lead, h, w, c = f.shape
    flat = f.reshape(*lead, h * w, c)
    return F.gather_sequences(flat, order_index(h, w))


def cross_merge_2d(ys: Tensor, height: int, width: int) -> Tensor:
    """Inverse-permute each of the four sequences and sum them back onto the grid."""
    *lead, k, length, c = ys.shape
    if k != 4 or length != height * width:
        raise ShapeError(f"expected (..., 4, {height * width}, C) sequences, got {ys.shape}")
    merged = F.merge_sequences(ys, order_index(height, width))
    return merged.reshape(*lead, height, width, c)


@dataclass
class LocalContext:
    f_ms: Tensor  # (..., H, W, N)
    q_l: Tensor   # (..., H*W, N), row-major flattening of f_ms
    f_l: Tensor   # (..., H, W, C)


class LocalContextExtractor(Module):
    """Dual-dilation 3x3 context features, their flattened query and a 1x1 projection back to C."""

    def __init__(self, channels: int, state_size: int, rng: np.random.Generator):
        self.channels = channels
        self.conv_d1 = Conv2d(channels, state_size, 3, rng, dilation=1)
        self.conv_d2 = Conv2d(channels, state_size, 3, rng, dilation=2)
        self.proj = Conv2d(state_size, channels, 1, rng)

    def forward(self, f_c: Tensor) -> LocalContext:
        if f_c.shape[-1] != self.channels:
            raise ShapeError(f"context extractor expects {self.channels} channels, got {f_c.shape[-1]}")
        f_ms = ag.add(ag.relu(self.conv_d1(f_c)), ag.relu(self.conv_d2(f_c)))
        *lead, h, w, n = f_ms.shape
        return LocalContext(f_ms=f_ms, q_l=f_ms.reshape(*lead, h * w, n), f_l=self.proj(f_ms))


def local_context(extractor: LocalContextExtractor, f_c: Tensor) -> LocalContext:
    return extractor(f_c)


def cssm_scan(f_c: Tensor, order: ScanOrder, ssm: SelectiveSSM, ctx: LocalContext | None = None) -> Tensor:
    """Scan ``f_c`` along one order with readout C + Q_l, then add F_l.

    Without a context this is the plain selective scan along that order.
    """
    if ssm.directions != 1:
        raise ConfigError("cssm_scan drives a single-direction SSM")
    *lead, h, w, c = f_c.shape
    index = order.permutation[None]
    seq = F.gather_sequences(f_c.reshape(*lead, h * w, c), index)
    query = None
    if ctx is not None:
        if ctx.q_l.shape[-1] != ssm.state_size:
            raise ConfigError(f"local query width {ctx.q_l.shape[-1]} != state size {ssm.state_size}")
        query = F.gather_sequences(ctx.q_l, index)
    y = ssm(seq, c_offset=query)
    y = F.merge_sequences(y, index).reshape(*lead, h, w, c)
    if ctx is not None:
        y = ag.add(y, ctx.f_l)
    return y


class VSSBlock(Module):
    """Residual 2D selective-scan block; ``context=True`` makes it a CSS block.

    LN -> linear expand -> depthwise 3x3 -> SiLU -> four-direction scan
    (sharing one local context) -> sum -> (+F_l) -> LN -> * SiLU(gate) ->
    linear -> + input.
    """

    def __init__(self, dim: int, state_size: int, rng: np.random.Generator,
                 context: bool = False, expand: int = 2):
        inner = expand * dim
        self.dim = dim
        self.inner = inner
        self.norm = LayerNorm(dim)
        self.in_proj = Linear(dim, 2 * inner, rng)
        self.dwconv = DepthwiseConv2d(inner, 3, rng)
        self.ssm = SelectiveSSM(inner, state_size, rng, directions=4)
        self.context = LocalContextExtractor(inner, state_size, rng) if context else None
        self.out_norm = LayerNorm(inner)
        self.out_proj = Linear(inner, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.dim:
            raise ShapeError(f"block expects {self.dim} channels, got {x.shape[-1]}")
        original = x.shape
        if x.ndim == 3:
            x = x.reshape(1, *x.shape)
        _, h, w, _ = x.shape
        u, z = ag.split(self.in_proj(self.norm(x)), [self.inner, self.inner])
        u = ag.silu(self.dwconv(u))
        seqs = cross_scan_2d(u)
        ctx = self.context(u) if self.context is not None else None
        query = F.gather_sequences(ctx.q_l, order_index(h, w)) if ctx is not None else None
        y = cross_merge_2d(self.ssm(seqs, c_offset=query), h, w)
        if ctx is not None:
            y = ag.add(y, ctx.f_l)
        y = ag.mul(self.out_norm(y), ag.silu(z))
        return ag.add(x, self.out_proj(y)).reshape(original)


def css_block(block: VSSBlock, f: Tensor) -> Tensor:
    return block(f)
