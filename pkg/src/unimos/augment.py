"""Weak (flip/rot90) and strong (jitter, grayscale, blur, CutMix) disturbances.

Every random choice is drawn up front into a transform record, so the same
record can be replayed on an image, its label map or its pseudo-label.
Images are single-channel arrays in [0, 1].
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from .errors import ShapeError, ValidationError
from .losses import PseudoLabel


class RngStream:
    """Seeded source of generators; draw ``n`` is a pure function of (seed, n)."""

    def __init__(self, seed: int, position: int = 0):
        self.seed = int(seed)
        self.position = int(position)

    def next(self) -> np.random.Generator:
        gen = np.random.default_rng([self.seed, self.position])
        self.position += 1
        return gen


@dataclass(frozen=True)
class WeakTransform:
    hflip: bool = False
    vflip: bool = False
    k_rot90: int = 0

    def __post_init__(self):
        if self.k_rot90 not in (0, 1, 2, 3):
            raise ValidationError(f"k_rot90 must be in 0..3, got {self.k_rot90}")


def sample_weak(rng: RngStream) -> WeakTransform:
    g = rng.next()
    return WeakTransform(bool(g.random() < 0.5), bool(g.random() < 0.5), int(g.integers(4)))


def apply_weak(t: WeakTransform, array: np.ndarray) -> np.ndarray:
    """Flip then rotate the last two axes of an image or label map."""
    if t.k_rot90 % 2 and array.shape[-1] != array.shape[-2]:
        raise ShapeError(f"odd rot90 on non-square array {array.shape} would change its shape")
    out = array
    if t.hflip:
        out = np.flip(out, axis=-1)
    if t.vflip:
        out = np.flip(out, axis=-2)
    if t.k_rot90:
        out = np.rot90(out, t.k_rot90, axes=(-2, -1))
    return np.ascontiguousarray(out)


@dataclass(frozen=True)
class StrongConfig:
    p_jitter: float = 0.8
    p_gray: float = 0.2
    p_blur: float = 0.2
    p_cutmix: float = 0.5
    brightness: float = 0.2
    contrast: tuple[float, float] = (0.8, 1.2)
    gamma: tuple[float, float] = (0.7, 1.3)
    max_sigma: float = 1.5
    cutmix_area: tuple[float, float] = (0.02, 0.4)
    cutmix_ratio: tuple[float, float] = (0.3, 1 / 0.3)


@dataclass(frozen=True)
class StrongTransform:
    jitter: bool = False
    brightness: float = 0.0
    contrast: float = 1.0
    gamma: float = 1.0
    # single-channel images have no chroma, so grayscale is recorded but does nothing
    gray: bool = False
    blur: bool = False
    sigma: float = 0.0
    cutmix: bool = False
    partner: int = -1
    box: tuple[int, int, int, int] = (0, 0, 0, 0)

    def to_line(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"), sort_keys=True)

    @classmethod
    def from_line(cls, line: str) -> "StrongTransform":
        data = json.loads(line)
        data["box"] = tuple(data["box"])
        return cls(**data)


def _sample_box(g: np.random.Generator, h: int, w: int, cfg: StrongConfig) -> tuple[int, int, int, int]:
    area = g.uniform(*cfg.cutmix_area) * h * w
    ratio = g.uniform(*cfg.cutmix_ratio)
    bh = int(np.clip(round(np.sqrt(area * ratio)), 1, h))
    bw = int(np.clip(round(np.sqrt(area / ratio)), 1, w))
    top = int(g.integers(0, h - bh + 1))
    left = int(g.integers(0, w - bw + 1))
    return top, left, bh, bw


def sample_strong(
    rng: RngStream, batch_size: int, shape: tuple[int, int], cfg: StrongConfig = StrongConfig()
) -> list[StrongTransform]:
    """One strong transform per batch element; CutMix partners stay inside the batch."""
    g = rng.next()
    h, w = shape
    out = []
    for i in range(batch_size):
        jitter = bool(g.random() < cfg.p_jitter)
        brightness = float(g.uniform(-cfg.brightness, cfg.brightness))
        contrast = float(g.uniform(*cfg.contrast))
        gamma = float(g.uniform(*cfg.gamma))
        gray = bool(g.random() < cfg.p_gray)
        blur = bool(g.random() < cfg.p_blur)
        sigma = float(g.uniform(0.0, cfg.max_sigma))
        cutmix = bool(g.random() < cfg.p_cutmix) and batch_size > 1
        partner = int((i + g.integers(1, batch_size)) % batch_size) if batch_size > 1 else -1
        box = _sample_box(g, h, w, cfg)
        if not cutmix:
            partner, box = -1, (0, 0, 0, 0)
        out.append(StrongTransform(jitter, brightness, contrast, gamma, gray, blur, sigma, cutmix, partner, box))
    return out


def _check_box(t: StrongTransform, shape) -> None:
    top, left, bh, bw = t.box
    h, w = shape[-2:]
    if bh < 1 or bw < 1 or top < 0 or left < 0 or top + bh > h or left + bw > w:
        raise ValidationError(f"cutmix box {t.box} is not inside a {h}x{w} image")


def apply_intensity(t: StrongTransform, image: np.ndarray) -> np.ndarray:
    """Jitter, grayscale and blur stages; output clamped to [0, 1]."""
    out = np.array(image, dtype=np.float32, copy=True)
    if t.jitter:
        out = np.clip(out + np.float32(t.brightness), 0.0, 1.0)
        mean = out.mean(dtype=np.float64)
        out = np.clip((out - mean) * t.contrast + mean, 0.0, 1.0)
        out = np.clip(np.power(out, t.gamma), 0.0, 1.0)
    if t.blur and t.sigma > 0:
        out = np.clip(gaussian_filter(out, t.sigma, mode="reflect"), 0.0, 1.0)
    return out.astype(np.float32, copy=False)


def apply_strong(t: StrongTransform, image: np.ndarray, partner: np.ndarray | None = None) -> np.ndarray:
    """Apply all stages in order; ``partner`` is the already-disturbed CutMix source."""
    out = apply_intensity(t, image)
    if t.cutmix:
        _check_box(t, out.shape)
        if partner is None or np.shape(partner) != out.shape:
            raise ValidationError("cutmix transform needs a partner image of the same shape")
        top, left, bh, bw = t.box
        out[top : top + bh, left : left + bw] = partner[top : top + bh, left : left + bw]
    return out


def apply_strong_batch(ts: Sequence[StrongTransform], images: Sequence[np.ndarray]) -> list[np.ndarray]:
    if len(ts) != len(images):
        raise ValidationError(f"{len(ts)} transforms for {len(images)} images")
    for t in ts:
        if t.cutmix and not 0 <= t.partner < len(images):
            raise ValidationError(f"cutmix partner {t.partner} outside batch of {len(images)}")
    stage = [apply_intensity(t, img) for t, img in zip(ts, images)]
    out = []
    for t, img in zip(ts, stage):
        if t.cutmix:
            _check_box(t, img.shape)
            top, left, bh, bw = t.box
            img = img.copy()
            img[top : top + bh, left : left + bw] = stage[t.partner][top : top + bh, left : left + bw]
        out.append(img)
    return out


def transport_pseudo_label(y: PseudoLabel, ts: Sequence[StrongTransform]) -> PseudoLabel:
    """Mix labels and keep-masks with the same CutMix boxes the images received."""
    if len(ts) != y.labels.shape[0]:
        raise ShapeError(f"{len(ts)} transforms for a pseudo-label batch of {y.labels.shape[0]}")
    if y.keep.shape != y.labels.shape:
        raise ShapeError(f"keep mask {tuple(y.keep.shape)} vs labels {tuple(y.labels.shape)}")
    if not any(t.cutmix for t in ts):
        return y
    labels, keep = y.labels.clone(), y.keep.clone()
    for i, t in enumerate(ts):
        if not t.cutmix:
            continue
        _check_box(t, labels.shape)
        if not 0 <= t.partner < len(ts):
            raise ValidationError(f"cutmix partner {t.partner} outside batch of {len(ts)}")
        top, left, bh, bw = t.box
        region = (i, slice(top, top + bh), slice(left, left + bw))
        source = (t.partner, slice(top, top + bh), slice(left, left + bw))
        labels[region] = y.labels[source]
        keep[region] = y.keep[source]
    return PseudoLabel(labels, keep, y.tau)


def disabled(t: StrongTransform) -> StrongTransform:
    return replace(t, jitter=False, gray=False, blur=False, cutmix=False, partner=-1, box=(0, 0, 0, 0))


def to_tensor(images: Sequence[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(images)[:, None].astype(np.float32))
