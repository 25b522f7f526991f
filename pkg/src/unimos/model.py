"""Pyramid-input encoder/decoder segmentation network.

A shared stem convolution is applied to every level of an average-pooled input
pyramid, and each stem output is added to the pooled encoder features of the
same resolution. A U-shaped decoder with skip connections ends in one softmax
head over background plus the foreground classes.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError, ValidationError


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 4
    depth: int = 3
    width: int = 16
    size: int = 96
    feature_dropout: float = 0.5
    norm: str = "batch"
    # 0 disables the resize-then-center-crop pre-processing step
    resize: int = 0
    crop: int = 0

    def validate(self) -> None:
        if self.depth < 1:
            raise ValidationError(f"model.depth must be >= 1, got {self.depth}")
        if self.width < 1:
            raise ValidationError(f"model.width must be >= 1, got {self.width}")
        if self.num_classes < 2:
            raise ValidationError(f"model.num_classes must be >= 2, got {self.num_classes}")
        if self.size % (2**self.depth):
            raise ValidationError(f"model.size {self.size} must be divisible by 2**depth = {2**self.depth}")
        if not 0.0 <= self.feature_dropout < 1.0:
            raise ValidationError(f"model.feature_dropout must lie in [0, 1), got {self.feature_dropout}")
        if self.norm not in ("batch", "group"):
            raise ValidationError(f"model.norm must be batch|group, got {self.norm!r}")
        if self.crop and self.crop != self.size:
            raise ValidationError(f"model.crop {self.crop} must equal model.size {self.size}")
        if self.crop and self.resize and self.resize < self.crop:
            raise ValidationError(f"model.resize {self.resize} must be >= model.crop {self.crop}")


def build_pyramid(image: torch.Tensor, depth: int) -> list[torch.Tensor]:
    """Average-pool ``image`` (B, C, S, S) into ``depth`` scales of side S / 2**d."""
    side = image.shape[-1]
    if image.shape[-2] % (2 ** (depth - 1)) or side % (2 ** (depth - 1)):
        raise ShapeError(f"image side {tuple(image.shape[-2:])} not divisible by 2**(depth-1) = {2 ** (depth - 1)}")
    scales = [image]
    for _ in range(depth - 1):
        scales.append(F.avg_pool2d(scales[-1], 2))
    return scales


def preprocess(image: torch.Tensor, resize: int, crop: int, mode: str = "bilinear") -> torch.Tensor:
    """Resize (B, C, H, W) to ``resize`` squared then center-crop to ``crop``.

    Either step is skipped when its size is 0. Use ``mode="nearest"`` for label maps.
    """
    if resize:
        kwargs = {"align_corners": False} if mode == "bilinear" else {}
        image = F.interpolate(image, size=(resize, resize), mode=mode, **kwargs)
    if crop:
        h, w = image.shape[-2:]
        if crop > h or crop > w:
            raise ShapeError(f"cannot center-crop {crop} from {h}x{w}")
        top, left = (h - crop) // 2, (w - crop) // 2
        image = image[..., top : top + crop, left : left + crop]
    return image


def _norm(kind: str, channels: int) -> nn.Module:
    if kind == "group":
        return nn.GroupNorm(min(4, channels), channels)
    return nn.BatchNorm2d(channels)


class ConvBNReLU(nn.Sequential):
    def __init__(self, cin: int, cout: int, norm: str = "batch"):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1, bias=False),
            _norm(norm, cout),
            nn.ReLU(inplace=True),
        )


def channel_dropout(features: torch.Tensor, rate: float, generator: torch.Generator | None) -> torch.Tensor:
    """Zero whole channels with probability ``rate`` and rescale the survivors."""
    if not 0.0 <= rate < 1.0:
        raise ValidationError(f"feature dropout rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        return features
    b, c = features.shape[:2]
    # drawn in float32 regardless of feature dtype so both precisions see the same mask
    keep = torch.rand((b, c, 1, 1), generator=generator, dtype=torch.float32, device=features.device) >= rate
    return features * keep.to(features.dtype) / (1.0 - rate)


class PyramidUNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        w = cfg.width
        n = cfg.norm
        self.stem = ConvBNReLU(1, w, n)
        self.encoders = nn.ModuleList(ConvBNReLU(w, w, n) for _ in range(cfg.depth))
        self.bottleneck = nn.Sequential(ConvBNReLU(w, 2 * w, n), ConvBNReLU(2 * w, 2 * w, n))
        self.decoders = nn.ModuleList(
            ConvBNReLU((2 * w if d == cfg.depth - 1 else w) + w, w, n) for d in range(cfg.depth)
        )
        self.head = nn.Conv2d(w, cfg.num_classes, 1)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, (nn.BatchNorm2d, nn.GroupNorm)):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def encode(self, image: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        s = self.cfg.size
        if image.ndim != 4 or image.shape[1] != 1 or image.shape[-2:] != (s, s):
            raise ShapeError(f"expected input of shape (B, 1, {s}, {s}), got {tuple(image.shape)}")
        pyramid = build_pyramid(image, self.cfg.depth)
        skips = []
        x = None
        for d, (scale, enc) in enumerate(zip(pyramid, self.encoders)):
            fused = self.stem(scale)
            if d > 0:
                fused = fused + F.max_pool2d(x, 2)
            x = enc(fused)
            skips.append(x)
        return self.bottleneck(F.max_pool2d(x, 2)), skips

    def decode(self, features: torch.Tensor, skips: list[torch.Tensor]) -> torch.Tensor:
        x = features
        for d in reversed(range(self.cfg.depth)):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = self.decoders[d](torch.cat([x, skips[d]], dim=1))
        return self.head(x)

    @contextlib.contextmanager
    def frozen_norm_stats(self):
        """Use batch statistics but leave BatchNorm running averages untouched."""
        saved = [(m, m.momentum) for m in self.modules() if isinstance(m, nn.BatchNorm2d)]
        for m, _ in saved:
            m.momentum = 0.0
        try:
            yield
        finally:
            for m, momentum in saved:
                m.momentum = momentum

    def forward(self, image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return per-pixel class probabilities (B, K+1, S, S) and encoder features."""
        features, skips = self.encode(image)
        return torch.softmax(self.decode(features, skips), dim=1), features

    def forward_feature_perturbed(
        self, image: torch.Tensor, rate: float | None = None, generator: torch.Generator | None = None
    ) -> torch.Tensor:
        """Forward pass with channel dropout on the deepest encoder features."""
        rate = self.cfg.feature_dropout if rate is None else rate
        features, skips = self.encode(image)
        features = channel_dropout(features, rate, generator)
        return torch.softmax(self.decode(features, skips), dim=1)


def parameter_count(cfg: ModelConfig) -> int:
    """Trainable parameters of ``PyramidUNet(cfg)``.

    Each 3x3 conv+BN block with ``i`` inputs and ``o`` outputs holds ``9*i*o + 2*o``.
    """
    w, d, k = cfg.width, cfg.depth, cfg.num_classes

    def block(i, o):
        return 9 * i * o + 2 * o

    total = block(1, w) + d * block(w, w)
    total += block(w, 2 * w) + block(2 * w, 2 * w)
    total += block(3 * w, w) + (d - 1) * block(2 * w, w)
    total += w * k + k
    return total
