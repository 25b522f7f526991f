"""Dice evaluation, per-organ and averaged, with timing columns."""
from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .datasets import ClassRegistry, Dataset, PartialLabelSpec
from .errors import ShapeError, ValidationError


def dice(pred: np.ndarray, gt: np.ndarray, cls: int) -> float:
    """Dice overlap of class ``cls``; 1.0 when the class is absent from both masks."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    p, g = pred == cls, gt == cls
    return _dice_from_counts(int((p & g).sum()), int(p.sum()), int(g.sum()))


def _dice_from_counts(inter: int, n_pred: int, n_gt: int) -> float:
    if n_pred + n_gt == 0:
        return 1.0
    return float(2.0 * inter / (n_pred + n_gt))


def class_counts(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    """(num_classes, 3) array of (intersection, |pred|, |gt|) per class."""
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    p = np.bincount(pred.ravel(), minlength=num_classes)[:num_classes]
    g = np.bincount(gt.ravel(), minlength=num_classes)[:num_classes]
    inter = np.bincount(gt.ravel()[pred.ravel() == gt.ravel()], minlength=num_classes)[:num_classes]
    return np.stack([inter, p, g], axis=1).astype(np.int64)


@dataclass
class DiceReport:
    class_names: list[str]
    per_class: list[float]
    average: float
    seconds_per_case: float
    train_min_per_epoch: float | None = None
    aggregate: str = "global"
    cases: int = 0
    per_case_seconds: list[float] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for name, v in zip(self.class_names, self.per_class):
            w.writerow([f"dice_{name}", repr(v)])
        w.writerow(["dice_average", repr(self.average)])
        w.writerow(["train_min_per_epoch", "" if self.train_min_per_epoch is None else repr(self.train_min_per_epoch)])
        w.writerow(["test_s_per_case", repr(self.seconds_per_case)])
        w.writerow(["aggregate", self.aggregate])
        w.writerow(["cases", self.cases])
        return buf.getvalue()

    def table(self, method: str = "UniMOS") -> str:
        """Plain-text table: Dice % per organ, average %, train min/epoch, test s/case."""
        header = ["Method"] + [n.capitalize() for n in self.class_names] + ["Average", "Tr.(min/epoch)", "Ts.(s/case)"]
        tr = "-" if self.train_min_per_epoch is None else f"{self.train_min_per_epoch:.3f}"
        row = [method] + [f"{100 * v:.2f}%" for v in self.per_class] + [f"{100 * self.average:.2f}%", tr, f"{self.seconds_per_case:.4f}"]
        widths = [max(len(a), len(b)) for a, b in zip(header, row)]
        fmt = lambda cells: "  ".join(c.rjust(w) for c, w in zip(cells, widths))
        rule = "-" * len(fmt(header))
        return "\n".join([rule, fmt(header), rule, fmt(row), rule]) + "\n"


Predictor = Callable[[np.ndarray], np.ndarray]


def model_predictor(model: torch.nn.Module) -> Predictor:
    """Wrap a network as image -> argmax label map."""
    model.eval()
    dtype = next(model.parameters()).dtype

    def predict(image: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            x = torch.from_numpy(np.asarray(image, dtype=np.float32)[None, None]).to(dtype)
            probs, _ = model(x)
        return probs[0].argmax(dim=0).numpy().astype(np.uint8)

    return predict


def evaluate(
    predictor: Predictor | torch.nn.Module,
    dataset: Dataset,
    registry: ClassRegistry,
    aggregate: str = "global",
    train_min_per_epoch: float | None = None,
) -> DiceReport:
    """Score argmax predictions against a fully labeled dataset.

    ``aggregate="global"`` pools intersection and size counts over all cases
    before computing Dice; ``"per_image"`` averages per-case Dice instead.
    """
    if dataset.labels is None:
        raise ValidationError(f"dataset {dataset.name!r} is unlabeled; evaluation needs full labels")
    if dataset.spec != PartialLabelSpec.full(registry):
        raise ValidationError(
            f"dataset {dataset.name!r} annotates only {sorted(dataset.spec.annotated)}; unannotated organs would "
            "count as background and corrupt Dice, so evaluation requires all registry classes"
        )
    if aggregate not in ("global", "per_image"):
        raise ValidationError(f"aggregate must be global|per_image, got {aggregate!r}")
    if isinstance(predictor, torch.nn.Module):
        predictor = model_predictor(predictor)
    k = registry.num_classes
    totals = np.zeros((k, 3), dtype=np.int64)
    per_image = []
    seconds = []
    for image, gt in zip(dataset.images, dataset.labels):
        t0 = time.perf_counter()
        pred = predictor(image)
        seconds.append(time.perf_counter() - t0)
        counts = class_counts(np.asarray(pred).astype(np.int64), gt.astype(np.int64), k)
        totals += counts
        per_image.append([_dice_from_counts(*counts[c]) for c in range(1, k)])
    if aggregate == "global":
        per_class = [_dice_from_counts(*totals[c]) for c in range(1, k)]
    else:
        per_class = [float(v) for v in np.mean(per_image, axis=0)]
    return DiceReport(
        list(registry.names),
        per_class,
        float(np.mean(per_class)),
        float(np.mean(seconds)),
        train_min_per_epoch,
        aggregate,
        len(dataset),
        seconds,
    )


def report_from_csv(text: str) -> dict[str, str]:
    rows = list(csv.reader(io.StringIO(text)))
    return {r[0]: r[1] for r in rows[1:]}


def predict_labels(model: torch.nn.Module, images: Sequence[np.ndarray]) -> list[np.ndarray]:
    predict = model_predictor(model)
    return [predict(img) for img in images]
