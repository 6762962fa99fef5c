"""Ground-truth density maps and counting metrics."""
from __future__ import annotations

import csv
import functools
import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ShapeError

KERNEL_SIZE = 15
KERNEL_SIGMA = 4.0
WMSE_CONVENTIONS = ("mean-of-squares", "linear")


@dataclass(frozen=True)
class PointAnnotation:
    x: float
    y: float
    category: int


@functools.lru_cache(maxsize=8)
def gaussian_kernel(size: int = KERNEL_SIZE, sigma: float = KERNEL_SIGMA) -> np.ndarray:
    """Unit-mass ``size`` x ``size`` Gaussian, float64, read-only."""
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r * r) / (2 * sigma * sigma))
    k = np.outer(g, g)
    k /= k.sum()
    k.setflags(write=False)
    return k


def _check_point(i: int, p: PointAnnotation, h: int, w: int, k: int) -> tuple[int, int]:
    if not (0 <= p.x < w and 0 <= p.y < h):
        raise ValueError(f"point {i} at ({p.x}, {p.y}) lies outside the {w}x{h} image")
    if not 0 <= int(p.category) < k:
        raise ValueError(f"point {i} has category {p.category}, expected [0, {k})")
    # nearest pixel, clamped so x just below W still lands inside
    col = min(int(np.floor(p.x + 0.5)), w - 1)
    row = min(int(np.floor(p.y + 0.5)), h - 1)
    return row, col


def gt_density(points: Iterable[PointAnnotation], h: int, w: int, k: int,
               renormalize: bool = True, dtype=np.float64) -> np.ndarray:
    """Density map (h, w, k): a 15x15 sigma-4 Gaussian per point in its category channel.

    With ``renormalize`` a kernel cut by the image border is rescaled so the
    point still contributes unit mass; without it the cut mass is lost.
    """
    if h < 1 or w < 1 or k < 1:
        raise ShapeError(f"invalid density extents {h}x{w}x{k}")
    kern = gaussian_kernel()
    half = KERNEL_SIZE // 2
    out = np.zeros((h, w, k), dtype=np.float64)
    for i, p in enumerate(points):
        row, col = _check_point(i, p, h, w, k)
        r0, r1 = max(row - half, 0), min(row + half + 1, h)
        c0, c1 = max(col - half, 0), min(col + half + 1, w)
        patch = kern[r0 - row + half:r1 - row + half, c0 - col + half:c1 - col + half]
        if renormalize:
            patch = patch / patch.sum()
        out[r0:r1, c0:c1, int(p.category)] += patch
    return out.astype(dtype, copy=False)


def sum_pool(density: np.ndarray, factor: int = 4) -> np.ndarray:
    """Sum non-overlapping ``factor`` x ``factor`` windows of an (..., H, W, K) map."""
    *lead, h, w, k = density.shape
    if h % factor or w % factor:
        raise ShapeError(f"extents {h}x{w} not divisible by {factor}")
    blocks = density.reshape(*lead, h // factor, factor, w // factor, factor, k)
    return blocks.sum(axis=(-4, -2))


def count_from_density(density) -> np.ndarray:
    """Per-category counts: the channel sums of an (..., H, W, K) map."""
    data = getattr(density, "density", density)
    data = getattr(data, "data", data)
    return np.asarray(data, dtype=np.float64).sum(axis=(-3, -2))


def mae_rmse(preds, gts) -> tuple[np.ndarray, np.ndarray]:
    """Per-category MAE and RMSE over M images of (M, K) counts."""
    p = np.atleast_2d(np.asarray(preds, dtype=np.float64))
    g = np.atleast_2d(np.asarray(gts, dtype=np.float64))
    if p.shape != g.shape:
        raise ShapeError(f"predictions {p.shape} and ground truth {g.shape} differ")
    if p.shape[0] == 0:
        raise ValueError("metrics need at least one image")
    err = p - g
    return np.abs(err).mean(axis=0), np.sqrt((err * err).mean(axis=0))


def mse_bar(per_category) -> float:
    """Unweighted mean over categories of the per-category error values."""
    v = np.asarray(per_category, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("mse_bar of an empty vector")
    return float(v.mean())


def uniform_weights(k: int) -> np.ndarray:
    return np.full(k, 1.0 / k)


def check_weights(weights, k: int | None = None) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64).ravel()
    if k is not None and w.size != k:
        raise ShapeError(f"expected {k} weights, got {w.size}")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    if abs(w.sum() - 1.0) > 1e-6:
        raise ValueError(f"weights sum to {w.sum():.9g}, expected 1")
    return w


def wmse(per_category, weights, convention: str = "mean-of-squares") -> float:
    """Weighted error over categories.

    "mean-of-squares" weights the squared per-category values; "linear"
    weights the values as given.
    """
    v = np.asarray(per_category, dtype=np.float64).ravel()
    w = check_weights(weights, v.size)
    if convention == "mean-of-squares":
        return float(np.dot(w, v * v))
    if convention == "linear":
        return float(np.dot(w, v))
    raise ConfigError(f"unknown WMSE convention {convention!r}; choose from {WMSE_CONVENTIONS}")


@dataclass
class MetricReport:
    mae: np.ndarray
    rmse: np.ndarray
    mse_bar: float
    wmse: float
    weights: np.ndarray = field(default=None)

    @classmethod
    def from_counts(cls, preds, gts, weights=None, convention: str = "mean-of-squares") -> "MetricReport":
        mae, rmse = mae_rmse(preds, gts)
        w = uniform_weights(mae.size) if weights is None else check_weights(weights, mae.size)
        return cls(mae, rmse, mse_bar(rmse), wmse(rmse, w, convention), w)

    def to_csv(self, names: Sequence[str] | None = None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["category", "mae", "rmse"])
        names = names or [str(i) for i in range(len(self.mae))]
        for name, a, r in zip(names, self.mae, self.rmse):
            writer.writerow([name, f"{a:.6f}", f"{r:.6f}"])
        writer.writerow(["mse_bar", f"{self.mse_bar:.6f}"])
        writer.writerow(["wmse", f"{self.wmse:.6f}"])
        return buf.getvalue()
