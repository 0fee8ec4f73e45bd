"""
Domain Layer: Multi-label loss, class weights and learning-rate schedule

Binary relevance: each of the c sigmoid outputs is its own binary problem
trained with cross-entropy. Per-example losses are summed over classes and
averaged over the batch.
"""

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from app.domain.exceptions import InvalidArgumentError

CLAMP_EPSILON = 1e-12


@dataclass(frozen=True)
class ClassWeights:
    """w_i = sqrt(max_j f_j / f_i); the most frequent class gets exactly 1."""
    w: np.ndarray

    @classmethod
    def uniform(cls, num_classes: int) -> "ClassWeights":
        return cls(w=np.ones(num_classes))


def _check_probabilities(q: np.ndarray) -> None:
    if np.any(q < 0.0) or np.any(q > 1.0) or not np.isfinite(q).all():
        raise InvalidArgumentError("predicted probabilities must lie in [0, 1]")


def bce(p, q) -> np.ndarray | float:
    """H(p, q) = -(1-p) log(1-q) - p log(q), with q clamped to [eps, 1-eps]."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    _check_probabilities(q)
    if np.any((p != 0.0) & (p != 1.0)):
        raise InvalidArgumentError("labels must be 0 or 1")
    q = np.clip(q, CLAMP_EPSILON, 1.0 - CLAMP_EPSILON)
    h = -(1.0 - p) * np.log1p(-q) - p * np.log(q)
    return float(h) if h.ndim == 0 else h


def bce_gradient(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """dH/dq evaluated at the clamped q."""
    q = np.clip(q, CLAMP_EPSILON, 1.0 - CLAMP_EPSILON)
    return (1.0 - p) / (1.0 - q) - p / q


def multilabel_loss(labels, outputs, weights: Optional[ClassWeights] = None,
                    mask=None) -> tuple[float, np.ndarray]:
    """
    Weighted binary-relevance cross-entropy.

    Args:
        labels: presence bits [N, c] (or a single LabelVector / [c] vector)
        outputs: sigmoid outputs [N, c] (array or Tensor)
        weights: optional ClassWeights (all ones when omitted)
        mask: evaluate(1)/ignore(0) bits shaped like labels; taken from the
            LabelVector when one is given

    Returns:
        (batch-mean of Σ_i m_i w_i H(p_i, q_i), gradient w.r.t. outputs)
    """
    if hasattr(labels, "present"):
        mask = labels.ignore_mask if mask is None else mask
        labels = labels.present
    q = np.asarray(getattr(outputs, "data", outputs), dtype=np.float64)
    p = np.asarray(labels, dtype=np.float64)
    single = q.ndim == 1
    if single:
        q, p = q[None, :], p[None, :]
        mask = None if mask is None else np.asarray(mask)[None, :]
    m = np.ones_like(p) if mask is None else np.asarray(mask, dtype=np.float64)
    if p.shape != q.shape or m.shape != q.shape or q.ndim != 2:
        raise InvalidArgumentError(
            f"multilabel_loss dimension mismatch: labels {p.shape}, mask {m.shape}, outputs {q.shape}"
        )
    w = np.ones(q.shape[1]) if weights is None else np.asarray(weights.w, dtype=np.float64)
    if w.shape != (q.shape[1],):
        raise InvalidArgumentError(f"class weights {w.shape} do not match {q.shape[1]} outputs")

    scale = m * w[None, :]
    n = q.shape[0]
    total = float(np.sum(scale * bce(p, q)) / n)
    grad = scale * bce_gradient(p, q) / n
    return total, grad[0] if single else grad


def class_weights(frequencies: Sequence[float]) -> ClassWeights:
    """Class weights from positive counts; every count must be > 0."""
    f = np.asarray(frequencies, dtype=np.float64)
    if f.ndim != 1 or f.size == 0:
        raise InvalidArgumentError("frequencies must be a non-empty vector")
    if np.any(f <= 0):
        zero = [int(i) for i in np.flatnonzero(f <= 0)]
        raise InvalidArgumentError(f"class frequencies must be positive; classes {zero} have none")
    return ClassWeights(w=np.sqrt(f.max() / f))


def lr_at(n: int, lr0: float, decay: float) -> float:
    """Learning rate for batch n: lr0 / (1 + d n)."""
    if n < 0:
        raise InvalidArgumentError(f"batch index must be >= 0, got {n}")
    return lr0 / (1.0 + decay * n)
