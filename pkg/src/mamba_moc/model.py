"""The counting network: VSS backbone, optional CIM, CSS blocks and density head."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from . import functional as F
from .autograd import Tensor
from .cim import CrossScaleInteraction, FeaturePyramid
from .cssm import VSSBlock
from .errors import ConfigError, ShapeError
from .nn import Conv2d, LayerNorm, Module

ABLATIONS = ("baseline", "cim", "full")
HEAD_BIAS_INIT = 0.01
_ABLATION_ALIASES = {
    "baseline": "baseline",
    "cim": "cim",
    "+cim": "cim",
    "baseline+cim": "cim",
    "full": "full",
    "+cim+cssm": "full",
    "baseline+cim+cssm": "full",
}


@dataclass
class ModelConfig:
    base_channels: int = 32
    state_size: int = 16
    num_categories: int = 6
    depths: tuple[int, int, int] = (2, 2, 2)
    ablation: str = "full"
    css_blocks: int = 2

    def __post_init__(self):
        self.depths = tuple(int(d) for d in self.depths)
        key = str(self.ablation).lower()
        if key not in _ABLATION_ALIASES:
            raise ConfigError(f"unknown ablation {self.ablation!r}; choose from {ABLATIONS}")
        self.ablation = _ABLATION_ALIASES[key]
        if min(self.base_channels, self.state_size, self.num_categories) < 1:
            raise ConfigError("base_channels, state_size and num_categories must be >= 1")
        if len(self.depths) != 3 or min(self.depths) < 0:
            raise ConfigError(f"depths must be three non-negative ints, got {self.depths}")
        if self.css_blocks < 0:
            raise ConfigError("css_blocks must be >= 0")

    @property
    def uses_cim(self) -> bool:
        return self.ablation in ("cim", "full")

    @property
    def uses_cssm(self) -> bool:
        return self.ablation == "full"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["depths"] = list(self.depths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class DensityPrediction:
    density: Tensor  # (..., H/4, W/4, K), non-negative

    @property
    def counts(self) -> np.ndarray:
        return self.density.data.sum(axis=(-3, -2))


class Stage(Module):
    def __init__(self, dim: int, depth: int, state_size: int, rng: np.random.Generator):
        self.blocks = [VSSBlock(dim, state_size, rng) for _ in range(depth)]

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


class Downsample(Module):
    """2x2 stride-2 patch merge doubling the channels."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.conv = Conv2d(dim, 2 * dim, 2, rng, stride=2, padding="valid")
        self.norm = LayerNorm(2 * dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.norm(self.conv(x))


class Backbone(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        c = cfg.base_channels
        self.patch_embed = Conv2d(3, c, 4, rng, stride=4, padding="valid")
        self.embed_norm = LayerNorm(c)
        self.stage1 = Stage(c, cfg.depths[0], cfg.state_size, rng)
        self.down1 = Downsample(c, rng)
        self.stage2 = Stage(2 * c, cfg.depths[1], cfg.state_size, rng)
        self.down2 = Downsample(2 * c, rng)
        self.stage3 = Stage(4 * c, cfg.depths[2], cfg.state_size, rng)

    def forward(self, image: Tensor) -> FeaturePyramid:
        h, w = image.shape[-3:-1]
        if h % 16 or w % 16:
            raise ShapeError(f"image extents {h}x{w} must be divisible by 16")
        if image.shape[-1] != 3:
            raise ShapeError(f"expected 3 image channels, got {image.shape[-1]}")
        f1 = self.stage1(self.embed_norm(self.patch_embed(image)))
        f2 = self.stage2(self.down1(f1))
        f3 = self.stage3(self.down2(f2))
        return FeaturePyramid(f1, f2, f3)


class MambaMOC(Module):
    """Image (..., H, W, 3) -> per-category density at stride 4."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | int = 0):
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self.config = cfg
        c, n, k = cfg.base_channels, cfg.state_size, cfg.num_categories
        self.backbone = Backbone(cfg, rng)
        self.cim = CrossScaleInteraction(c, n, rng) if cfg.uses_cim else None
        self.laterals = [Conv2d(w, c, 1, rng) for w in (c, 2 * c, 4 * c)]
        self.blocks = [VSSBlock(c, n, rng, context=cfg.uses_cssm) for _ in range(cfg.css_blocks)]
        self.head = [Conv2d(c, c, 3, rng), Conv2d(c, c, 3, rng), Conv2d(c, k, 1, rng)]
        # start every category channel inside the final ReLU's active region with a
        # flat, small density; random weights here can push a channel negative
        # everywhere within the first few updates, after which it never recovers
        out = self.head[2]
        out.weight.data[...] = 0
        out.bias.data[...] = HEAD_BIAS_INIT

    def features(self, image: Tensor) -> Tensor:
        pyramid = self.backbone(image)
        if self.cim is not None:
            pyramid = self.cim(pyramid)
        merged = None
        for level, lateral, factor in zip(pyramid.levels, self.laterals, (1, 2, 4)):
            term = F.upsample_bilinear(lateral(level), factor)
            merged = term if merged is None else ag.add(merged, term)
        for block in self.blocks:
            merged = block(merged)
        return merged

    def forward(self, image) -> DensityPrediction:
        if not isinstance(image, Tensor):
            image = Tensor(image)
        x = self.features(image)
        x = ag.relu(self.head[0](x))
        x = ag.relu(self.head[1](x))
        return DensityPrediction(ag.relu(self.head[2](x)))


def backbone_forward(model: MambaMOC, image: Tensor) -> FeaturePyramid:
    return model.backbone(image)


def model_forward(model: MambaMOC, image) -> DensityPrediction:
    return model(image)


def density_loss(pred: DensityPrediction | Tensor, gt) -> Tensor:
    """Pixel-wise MSE over all positions and category channels."""
    density = pred.density if isinstance(pred, DensityPrediction) else pred
    return F.mse_loss(density, gt)
