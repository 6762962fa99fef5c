"""Cross-scale interaction over a three-level feature pyramid."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import functional as F
from .autograd import Tensor
from .cssm import VSSBlock
from .errors import ShapeError
from .nn import Conv2d, Module


@dataclass
class FeaturePyramid:
    """Stride-4/8/16 features with C, 2C and 4C channels."""

    f1: Tensor
    f2: Tensor
    f3: Tensor

    @property
    def levels(self) -> tuple[Tensor, Tensor, Tensor]:
        return self.f1, self.f2, self.f3

    @property
    def channels(self) -> int:
        return self.f1.shape[-1]

    def validate(self) -> "FeaturePyramid":
        c = self.channels
        (h1, w1), (h2, w2), (h3, w3) = (f.shape[-3:-1] for f in self.levels)
        if (self.f2.shape[-1], self.f3.shape[-1]) != (2 * c, 4 * c):
            raise ShapeError(f"pyramid channels {[f.shape[-1] for f in self.levels]} are not C, 2C, 4C")
        if (h1, w1) != (2 * h2, 2 * w2) or (h2, w2) != (2 * h3, 2 * w3):
            raise ShapeError(f"pyramid extents {[f.shape[-3:-1] for f in self.levels]} do not halve per level")
        return self


class CrossScaleInteraction(Module):
    """Align the pyramid at stride 16, fuse it with a VSS block, and gate it back per level."""

    def __init__(self, channels: int, state_size: int, rng: np.random.Generator):
        c = channels
        self.channels = c
        self.widths = (c, 2 * c, 4 * c)
        self.align_proj = Conv2d(7 * c, 2 * c, 1, rng)
        self.fuse_block = VSSBlock(2 * c, state_size, rng)
        self.fuse_proj = Conv2d(2 * c, 7 * c, 1, rng)
        self.gates = [Conv2d(2 * w, w, 1, rng) for w in self.widths]

    def align(self, p: FeaturePyramid) -> Tensor:
        p.validate()
        pooled = [F.avgpool2d(p.f1, 4), F.avgpool2d(p.f2, 2), p.f3]
        return self.align_proj(ag.concat(pooled, axis=-1))

    def fuse(self, aligned: Tensor) -> Tensor:
        return self.fuse_proj(self.fuse_block(aligned))

    def distribute(self, fused: Tensor, p: FeaturePyramid) -> FeaturePyramid:
        if fused.shape[-1] != sum(self.widths):
            raise ShapeError(f"fused map has {fused.shape[-1]} channels, expected {sum(self.widths)}")
        parts = ag.split(fused, list(self.widths))
        out = []
        for part, f, gate, factor in zip(parts, p.levels, self.gates, (4, 2, 1)):
            up = F.upsample_bilinear(part, factor)
            g = ag.sigmoid(gate(ag.concat([f, up], axis=-1)))
            # g*f + (1-g)*up, written so g == 1 returns f exactly
            out.append(ag.add(ag.mul(g, f), ag.mul(ag.sub(1.0, g), up)))
        return FeaturePyramid(*out)

    def forward(self, p: FeaturePyramid) -> FeaturePyramid:
        return self.distribute(self.fuse(self.align(p)), p)


def cim_align(cim: CrossScaleInteraction, p: FeaturePyramid) -> Tensor:
    return cim.align(p)


def cim_fuse(cim: CrossScaleInteraction, aligned: Tensor) -> Tensor:
    return cim.fuse(aligned)


def cim_distribute(cim: CrossScaleInteraction, fused: Tensor, p: FeaturePyramid) -> FeaturePyramid:
    return cim.distribute(fused, p)
