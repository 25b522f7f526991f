"""Target adaptive loss, pseudo-labels and the weighted semi-supervised objective.

All losses take probability maps (B, K+1, H, W), not logits, and clamp every
quantity entering a logarithm to ``[EPS, 1 - EPS]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Iterable

import torch

from .errors import NumericError, ShapeError, ValidationError

EPS = 1e-7

UNSUP_WEIGHTS = {"s1": 0.25, "s2": 0.25, "fp": 0.5}
TOTAL_WEIGHTS = {"sup": 0.5, "unsup": 0.5}


def _safe_log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p.clamp(EPS, 1.0 - EPS))


def _check_pair(pred: torch.Tensor, labels: torch.Tensor) -> None:
    if pred.ndim != 4 or labels.ndim != 3 or pred.shape[0] != labels.shape[0] or pred.shape[2:] != labels.shape[1:]:
        raise ShapeError(f"prediction {tuple(pred.shape)} and labels {tuple(labels.shape)} disagree")


def tal_loss(pred: torch.Tensor, labels: torch.Tensor, annotated: Iterable[int]) -> torch.Tensor:
    """Mean per-pixel target adaptive loss.

    A pixel labeled with an annotated class ``c`` costs ``-log p_c``. A pixel
    labeled 0 may be true background or any unannotated organ, so it costs
    ``-log(1 - sum of annotated probabilities)``.
    """
    _check_pair(pred, labels)
    annotated = sorted(set(int(c) for c in annotated))
    if not annotated:
        raise ValidationError("tal_loss needs at least one annotated class")
    if annotated[0] < 1 or annotated[-1] >= pred.shape[1]:
        raise ValidationError(f"annotated classes {annotated} outside 1..{pred.shape[1] - 1}")
    labels = labels.long()
    allowed = torch.zeros(pred.shape[1], dtype=torch.bool, device=labels.device)
    allowed[0] = True
    allowed[annotated] = True
    if labels.min() < 0 or labels.max() >= pred.shape[1] or not allowed[labels].all():
        stray = sorted(set(labels.unique().tolist()) - set(annotated) - {0})
        raise ValidationError(f"labels contain classes {stray} outside annotated set {annotated}")

    annotated_mass = pred[:, annotated].sum(dim=1)
    log_merged_bg = _safe_log(1.0 - annotated_mass)
    log_true = _safe_log(pred.gather(1, labels.unsqueeze(1)).squeeze(1))
    per_pixel = torch.where(labels == 0, log_merged_bg, log_true)
    return -per_pixel.mean()


@dataclass
class PseudoLabel:
    labels: torch.Tensor  # (B, H, W) long
    keep: torch.Tensor  # (B, H, W) bool
    tau: float

    @property
    def kept_fraction(self) -> float:
        return float(self.keep.float().mean())


def make_pseudo_labels(pred_weak: torch.Tensor, tau: float) -> PseudoLabel:
    """Argmax class and confidence mask of a weak-view prediction (no gradient)."""
    if not 0.0 <= tau <= 1.0:
        raise ValidationError(f"tau must lie in [0, 1], got {tau}")
    with torch.no_grad():
        conf, labels = pred_weak.detach().max(dim=1)
        return PseudoLabel(labels, conf >= tau, tau)


def unsup_stream_loss(pred: torch.Tensor, target: PseudoLabel) -> torch.Tensor:
    """Masked hard-label cross entropy, averaged over all pixels (kept or not)."""
    _check_pair(pred, target.labels)
    if target.keep.shape != target.labels.shape:
        raise ShapeError(f"keep mask {tuple(target.keep.shape)} vs labels {tuple(target.labels.shape)}")
    nll = -_safe_log(pred.gather(1, target.labels.long().unsqueeze(1)).squeeze(1))
    return (nll * target.keep.to(nll.dtype)).mean()


def _check_finite(value, stream: str) -> None:
    v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
    if not math.isfinite(v):
        raise NumericError(f"non-finite loss in stream {stream!r}: {v}", stream)


def combine_unsup(l_s1, l_s2, l_fp):
    for name, v in (("s1", l_s1), ("s2", l_s2), ("fp", l_fp)):
        _check_finite(v, name)
    return UNSUP_WEIGHTS["s1"] * l_s1 + UNSUP_WEIGHTS["s2"] * l_s2 + UNSUP_WEIGHTS["fp"] * l_fp


def combine_total(l_sup, l_u):
    _check_finite(l_sup, "sup")
    _check_finite(l_u, "unsup")
    return TOTAL_WEIGHTS["sup"] * l_sup + TOTAL_WEIGHTS["unsup"] * l_u


CSV_FIELDS = ("step", "l_sup", "l_s1", "l_s2", "l_fp", "l_u", "total", "kept_s1", "kept_s2", "kept_fp", "lr")


@dataclass
class LossReport:
    step: int
    l_sup: float
    l_s1: float
    l_s2: float
    l_fp: float
    l_u: float
    total: float
    kept_s1: float
    kept_s2: float
    kept_fp: float
    lr: float

    def check(self, tol: float = 1e-6) -> None:
        l_u = combine_unsup(self.l_s1, self.l_s2, self.l_fp)
        if abs(l_u - self.l_u) > tol:
            raise NumericError(f"step {self.step}: l_u={self.l_u} but weighted streams give {l_u}", "unsup")
        total = combine_total(self.l_sup, self.l_u)
        if abs(total - self.total) > tol:
            raise NumericError(f"step {self.step}: total={self.total} but weighted sum gives {total}", "total")

    def csv_row(self) -> list[str]:
        return [str(self.step)] + [repr(float(getattr(self, f))) for f in CSV_FIELDS[1:]]

    @classmethod
    def from_row(cls, row: dict[str, str]) -> "LossReport":
        kwargs = {f.name: (int(row[f.name]) if f.name == "step" else float(row[f.name])) for f in fields(cls)}
        return cls(**kwargs)
