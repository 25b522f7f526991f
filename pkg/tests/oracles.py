"""Straight-line per-pixel reference implementations (no package helpers)."""
import math

import numpy as np

EPS = 1e-7


def _clamp(p):
    return min(max(p, EPS), 1.0 - EPS)


def tal_reference(probs, labels, annotated):
    """probs: (B, C, H, W) nested floats; labels: (B, H, W) ints."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    b, c, h, w = probs.shape
    total = 0.0
    for n in range(b):
        for i in range(h):
            for j in range(w):
                s = 0.0
                y_sum = 0
                for cls in annotated:
                    y = 1 if labels[n, i, j] == cls else 0
                    y_sum += y
                    if y:
                        s += math.log(_clamp(probs[n, cls, i, j]))
                if y_sum == 0:
                    p_annot = 0.0
                    for cls in annotated:
                        p_annot += probs[n, cls, i, j]
                    s += math.log(_clamp(1.0 - p_annot))
                total += -s
    return total / (b * h * w)


def cross_entropy_reference(probs, labels):
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    b, c, h, w = probs.shape
    total = 0.0
    for n in range(b):
        for i in range(h):
            for j in range(w):
                total -= math.log(_clamp(probs[n, labels[n, i, j], i, j]))
    return total / (b * h * w)


def unsup_reference(probs, pseudo, keep):
    probs = np.asarray(probs, dtype=np.float64)
    b, c, h, w = probs.shape
    total = 0.0
    for n in range(b):
        for i in range(h):
            for j in range(w):
                if keep[n][i][j]:
                    total -= math.log(_clamp(probs[n, pseudo[n][i][j], i, j]))
    return total / (b * h * w)


def pseudo_reference(probs, tau):
    probs = np.asarray(probs, dtype=np.float64)
    b, c, h, w = probs.shape
    labels = np.zeros((b, h, w), dtype=np.int64)
    keep = np.zeros((b, h, w), dtype=bool)
    for n in range(b):
        for i in range(h):
            for j in range(w):
                best, arg = -1.0, 0
                for cls in range(c):
                    if probs[n, cls, i, j] > best:
                        best, arg = probs[n, cls, i, j], cls
                labels[n, i, j] = arg
                keep[n, i, j] = best >= tau
    return labels, keep


def random_instance(rng, max_side=4, max_k=3):
    """Softmax probabilities plus labels for a random small problem."""
    k = int(rng.integers(1, max_k + 1))
    h, w = (int(v) for v in rng.integers(1, max_side + 1, size=2))
    b = int(rng.integers(1, 3))
    logits = rng.normal(scale=2.0, size=(b, k + 1, h, w))
    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    size = int(rng.integers(1, k + 1))
    annotated = sorted(rng.choice(np.arange(1, k + 1), size=size, replace=False).tolist())
    full = rng.integers(0, k + 1, size=(b, h, w))
    labels = np.where(np.isin(full, annotated), full, 0)
    return probs, labels, annotated, full
