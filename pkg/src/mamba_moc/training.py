"""Training step and a minimal epoch loop."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .autograd import Tensor, no_grad
from .errors import NumericError, ShapeError
from .model import MambaMOC, density_loss
from .optim import AdamW


def train_step(model: MambaMOC, optimizer: AdamW, images: np.ndarray, gts: np.ndarray) -> float:
    """Forward, MSE loss, backward and one AdamW update. Returns the pre-step loss."""
    if images.shape[0] != gts.shape[0]:
        raise ShapeError(f"{images.shape[0]} images but {gts.shape[0]} density maps")
    optimizer.zero_grad()
    loss = density_loss(model(Tensor(images)), gts)
    value = loss.item()
    if not np.isfinite(value):
        raise NumericError(f"non-finite training loss {value}")
    loss.backward()
    for name, p in model.named_parameters():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in {name}")
    optimizer.step()
    return value


def batches(n: int, batch_size: int, rng: np.random.Generator | None):
    """Index batches over ``n`` samples; shuffled when ``rng`` is given."""
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def fit(model: MambaMOC, images: np.ndarray, gts: np.ndarray, epochs: int, batch_size: int = 8,
        lr: float = 5e-5, weight_decay: float = 1e-4, seed: int = 0, shuffle: bool = True,
        optimizer: AdamW | None = None, on_epoch: Callable[[int, float], None] | None = None) -> list[float]:
    """Train for ``epochs`` passes; returns the mean pre-step loss of each epoch."""
    optimizer = optimizer or AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    rng = np.random.default_rng(seed) if shuffle else None
    history = []
    for epoch in range(epochs):
        losses = [train_step(model, optimizer, images[idx], gts[idx])
                  for idx in batches(len(images), batch_size, rng)]
        history.append(float(np.mean(losses)))
        if on_epoch is not None:
            on_epoch(epoch, history[-1])
    return history


def predict_counts(model: MambaMOC, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Per-image, per-category predicted counts (M, K)."""
    out = []
    with no_grad():
        for idx in batches(len(images), batch_size, None):
            out.append(model(Tensor(images[idx])).counts.astype(np.float64))
    return np.concatenate(out, axis=0)
