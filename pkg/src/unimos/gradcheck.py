"""Central finite-difference checks of the analytic gradients.

Three components are checked: ``tal_loss`` and ``unsup_stream_loss`` with
respect to the probability map, and the combined step objective with respect
to every parameter of a tiny network. Pseudo-labels, augmentations and the
feature-dropout mask are frozen before differencing, matching how they enter
the backward pass (as constants).
"""
from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass

import numpy as np
import torch

from .augment import RngStream
from .config import SemiConfig
from .losses import make_pseudo_labels, tal_loss, unsup_stream_loss
from .model import ModelConfig, PyramidUNet
from .trainer import objective, prepare_unsup

# documented pass thresholds per precision of the analytic gradient
THRESHOLDS = {"double": 1e-3, "single": 5e-2}
# the finite-difference reference always runs in double precision: in float32 a
# usable step is large enough to cross the probability clamp and ReLU kinks.
# Steps scale with each entry so tiny probabilities keep small truncation error.
REL_STEP = 1e-5
MIN_SCALE = 1e-3
DTYPES = {"double": torch.float64, "single": torch.float32}


@dataclass
class GradCheckResult:
    component: str
    max_rel_error: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.threshold


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / denom)


def finite_difference(f, tensor: torch.Tensor, rel_step: float = REL_STEP) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``tensor`` (perturbed in place).

    Entry ``x`` is stepped by ``rel_step * max(|x|, MIN_SCALE)``.
    """
    grad = np.zeros(tensor.shape, dtype=np.float64)
    flat = tensor.data.view(-1)
    g = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        h = rel_step * max(abs(orig), MIN_SCALE)
        flat[i] = orig + h
        up = float(f().detach())
        flat[i] = orig - h
        down = float(f().detach())
        flat[i] = orig
        g[i] = (up - down) / (2 * h)
    return grad


def _random_probs(gen: torch.Generator, shape):
    return torch.softmax(torch.randn(shape, generator=gen, dtype=torch.float64) * 2.0, dim=1)


def _analytic(loss_fn, probs: torch.Tensor, dtype) -> np.ndarray:
    p = probs.to(dtype).requires_grad_(True)
    loss_fn(p).backward()
    return p.grad.double().numpy()


def check_tal(dtype, threshold, sabotage=False, seed=0) -> GradCheckResult:
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    for _ in range(5):
        probs = _random_probs(gen, (2, 4, 4, 4))
        full = torch.randint(0, 4, (2, 4, 4), generator=gen)
        annotated = [1, 3]
        labels = torch.where((full == 1) | (full == 3), full, torch.zeros_like(full))
        analytic = _analytic(lambda p: tal_loss(p, labels, annotated), probs, dtype)
        if sabotage:
            analytic = -analytic
        numeric = finite_difference(lambda: tal_loss(probs, labels, annotated), probs)
        worst = max(worst, rel_error(analytic, numeric))
    return GradCheckResult("tal_loss", worst, threshold)


def check_unsup(dtype, threshold, seed=0) -> GradCheckResult:
    gen = torch.Generator().manual_seed(seed + 1)
    worst = 0.0
    for _ in range(5):
        target = make_pseudo_labels(_random_probs(gen, (2, 4, 4, 4)), 0.4)
        probs = _random_probs(gen, (2, 4, 4, 4))
        analytic = _analytic(lambda p: unsup_stream_loss(p, target), probs, dtype)
        numeric = finite_difference(lambda: unsup_stream_loss(probs, target), probs)
        worst = max(worst, rel_error(analytic, numeric))
    return GradCheckResult("unsup_stream_loss", worst, threshold)


def tiny_problem(seed=0, size=16, width=4, num_foreground=2, batch=2):
    """A tiny double-precision network plus one frozen step's worth of inputs and targets."""
    torch.manual_seed(seed)
    model = PyramidUNet(ModelConfig(num_classes=num_foreground + 1, depth=3, width=width, size=size)).double()
    model.train()
    rng = np.random.default_rng(seed)
    x_l = torch.from_numpy(rng.random((batch, 1, size, size)))
    y_l = torch.from_numpy(rng.integers(0, 2, (batch, size, size)))  # annotated = {1}
    unlabeled = [rng.random((size, size)).astype(np.float32) for _ in range(batch)]
    # low tau so every stream keeps pixels and contributes gradient
    views = prepare_unsup(model, unlabeled, RngStream(seed), SemiConfig(tau=0.3, p_cutmix=1.0))
    return model, x_l, y_l, {1}, views


def _cast_views(views, dtype):
    return dataclasses.replace(views, x_w=views.x_w.to(dtype), x_s1=views.x_s1.to(dtype), x_s2=views.x_s2.to(dtype))


def check_total(dtype, threshold, seed=0) -> GradCheckResult:
    model, x_l, y_l, annotated, views = tiny_problem(seed)

    def f():
        return objective(model, x_l, y_l, annotated, views, fp_seed=seed)["total"]

    low = copy.deepcopy(model).to(dtype)
    objective(low, x_l.to(dtype), y_l, annotated, _cast_views(views, dtype), fp_seed=seed)["total"].backward()
    analytic = [p.grad.double().numpy().copy() for p in low.parameters()]
    worst = 0.0
    with torch.no_grad():
        for p, a in zip(model.parameters(), analytic):
            worst = max(worst, rel_error(a, finite_difference(f, p)))
    return GradCheckResult("total_objective", worst, threshold)


def run(precision: str = "double", sabotage: bool = False, seed: int = 0) -> list[GradCheckResult]:
    """Check analytic gradients computed at ``precision`` against double-precision differences."""
    dtype, thr = DTYPES[precision], THRESHOLDS[precision]
    return [
        check_tal(dtype, thr, sabotage, seed),
        check_unsup(dtype, thr, seed),
        check_total(dtype, thr, seed),
    ]
