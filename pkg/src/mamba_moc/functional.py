"""Differentiable layer primitives on channels-last tensors.

Spatial ops take ``(..., H, W, C)`` inputs; any leading dimensions are
treated as batch.
"""
from __future__ import annotations

import functools

import numpy as np

from .autograd import Tensor, add, make_result, matmul, mean, mul, sub
from .errors import ShapeError


def _conv_geometry(size: int, k: int, stride: int, dilation: int, padding) -> tuple[int, int, int]:
    span = dilation * (k - 1) + 1
    if padding == "valid":
        if size < span:
            raise ShapeError(f"input extent {size} smaller than kernel span {span}")
        return 0, 0, (size - span) // stride + 1
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + span - size, 0)
        return total // 2, total - total // 2, out
    pad = int(padding)
    return pad, pad, (size + 2 * pad - span) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
           dilation: int = 1, padding="same") -> Tensor:
    """Cross-correlation of ``x`` (..., H, W, Cin) with ``kernel`` (kh, kw, Cin, Cout).

    "same" padding pads with zeros; the patch matrix is built once and
    reused by the backward pass.
    """
    if stride < 1 or dilation < 1:
        raise ValueError("stride and dilation must be >= 1")
    kh, kw, cin, cout = kernel.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"conv2d expects {cin} input channels, got {x.shape[-1]}")
    *lead, h, w, _ = x.shape
    pt, pb, ho = _conv_geometry(h, kh, stride, dilation, padding)
    pl, pr, wo = _conv_geometry(w, kw, stride, dilation, padding)
    pad_width = [(0, 0)] * len(lead) + [(pt, pb), (pl, pr), (0, 0)]
    xp = np.pad(x.data, pad_width) if (pt or pb or pl or pr) else x.data
    hstop, wstop = stride * (ho - 1) + 1, stride * (wo - 1) + 1

    taps = [(i * dilation, j * dilation) for i in range(kh) for j in range(kw)]
    if kh == kw == 1 and stride == 1:
        cols = xp
    else:
        cols = np.concatenate(
            [xp[..., r:r + hstop:stride, c:c + wstop:stride, :] for r, c in taps], axis=-1)
    kmat = kernel.data.reshape(kh * kw * cin, cout)
    out = cols @ kmat
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gk = cols.reshape(-1, kmat.shape[0]).T @ g.reshape(-1, cout)
        gx = None
        if x.requires_grad:
            gcols = g @ kmat.T
            gxp = np.zeros(xp.shape, dtype=xp.dtype)
            for t, (r, c) in enumerate(taps):
                gxp[..., r:r + hstop:stride, c:c + wstop:stride, :] += gcols[..., t * cin:(t + 1) * cin]
            gx = gxp[..., pt:pt + h, pl:pl + w, :]
        grads = [gx, gk.reshape(kernel.shape)]
        if bias is not None:
            grads.append(g.reshape(-1, cout).sum(axis=0))
        return grads

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_result(out, parents, backward, "conv2d")


def depthwise_conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-channel 'same' convolution, stride 1; ``kernel`` is (kh, kw, C)."""
    kh, kw, c = kernel.shape
    if x.shape[-1] != c:
        raise ShapeError(f"depthwise conv expects {c} channels, got {x.shape[-1]}")
    *lead, h, w, _ = x.shape
    pt, pl = (kh - 1) // 2, (kw - 1) // 2
    pad_width = [(0, 0)] * len(lead) + [(pt, kh - 1 - pt), (pl, kw - 1 - pl), (0, 0)]
    xp = np.pad(x.data, pad_width)
    out = np.zeros(x.shape, dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += xp[..., i:i + h, j:j + w, :] * kernel.data[i, j]
    if bias is not None:
        out += bias.data

    def backward(g):
        gk = np.empty_like(kernel.data)
        gxp = np.zeros(xp.shape, dtype=xp.dtype)
        for i in range(kh):
            for j in range(kw):
                window = xp[..., i:i + h, j:j + w, :]
                gk[i, j] = (g * window).reshape(-1, c).sum(axis=0)
                gxp[..., i:i + h, j:j + w, :] += g * kernel.data[i, j]
        grads = [gxp[..., pt:pt + h, pl:pl + w, :], gk]
        if bias is not None:
            grads.append(g.reshape(-1, c).sum(axis=0))
        return grads

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_result(out, parents, backward, "depthwise_conv2d")


def avgpool2d(x: Tensor, factor: int) -> Tensor:
    *lead, h, w, c = x.shape
    if factor < 1:
        raise ValueError("pool factor must be >= 1")
    if h % factor or w % factor:
        raise ShapeError(f"extents {h}x{w} not divisible by pool factor {factor}")
    if factor == 1:
        return x
    blocks = x.data.reshape(*lead, h // factor, factor, w // factor, factor, c)
    out = blocks.mean(axis=(-4, -2))
    scale = x.dtype.type(1.0 / (factor * factor))

    def backward(g):
        g = np.repeat(np.repeat(g, factor, axis=-3), factor, axis=-2)
        return (g * scale,)

    return make_result(out, (x,), backward, "avgpool2d")


@functools.lru_cache(maxsize=64)
def _bilinear_matrix(n: int, factor: int) -> np.ndarray:
    # align_corners=False: source = (i + 0.5) / factor - 0.5, clamped at 0
    m = np.zeros((n * factor, n))
    for i in range(n * factor):
        src = max((i + 0.5) / factor - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n - 1)
        i1 = min(i0 + 1, n - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    m.setflags(write=False)
    return m


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling by an integer factor (half-pixel centres)."""
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    *lead, h, w, c = x.shape
    uh = _bilinear_matrix(h, factor).astype(x.dtype)
    uw = _bilinear_matrix(w, factor).astype(x.dtype)
    ho, wo = h * factor, w * factor

    def along_w(arr, mat, width):
        # (..., rows, w, c) -> (..., rows, width, c) via mat (width, w)
        moved = np.swapaxes(arr, -1, -2)
        return np.ascontiguousarray(np.swapaxes(moved @ mat.T, -1, -2))

    out = (uh @ x.data.reshape(*lead, h, w * c)).reshape(*lead, ho, w, c)
    out = along_w(out, uw, wo)

    def backward(g):
        gx = along_w(g, uw.T, w)
        gx = uh.T @ gx.reshape(*lead, ho, w * c)
        return (gx.reshape(x.shape),)

    return make_result(np.ascontiguousarray(out), (x,), backward, "upsample_bilinear")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * weight.data + bias.data

    def backward(g):
        gxhat = g * weight.data
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                     - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, d)
        return gx, (flat_g * xhat.reshape(-1, d)).sum(axis=0), flat_g.sum(axis=0)

    return make_result(out.astype(x.dtype), (x, weight, bias), backward, "layer_norm")


def mse_loss(pred: Tensor, target) -> Tensor:
    target = target if isinstance(target, Tensor) else Tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    diff = sub(pred, target)
    return mean(mul(diff, diff))


def gather_sequences(x: Tensor, index: np.ndarray) -> Tensor:
    """Reorder rows of ``x`` (..., L, C) under each permutation row of ``index`` (K, L).

    Returns (..., K, L, C). Every row of ``index`` must be a permutation.
    """
    inverse = np.argsort(index, axis=-1)
    k = index.shape[0]
    out = x.data[..., index, :]

    def backward(g):
        return (g[..., np.arange(k)[:, None], inverse, :].sum(axis=-3),)

    return make_result(out, (x,), backward, "gather_sequences")


def merge_sequences(ys: Tensor, index: np.ndarray) -> Tensor:
    """Undo each permutation of ``index`` and sum over the K orderings."""
    inverse = np.argsort(index, axis=-1)
    k = index.shape[0]
    out = ys.data[..., np.arange(k)[:, None], inverse, :].sum(axis=-3)

    def backward(g):
        return (np.ascontiguousarray(g[..., index, :]),)

    return make_result(out, (ys,), backward, "merge_sequences")
