"""
Domain Layer: ROC curves and AUC

AUC is the Mann-Whitney statistic with midranks for ties. A class with no
positives or no negatives after masking is skipped, not failed.
"""

from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from app.domain.entities import AucReport, ClassAuc, RocCurve
from app.domain.exceptions import ClassSkipped, EvaluationError, InvalidArgumentError


def _masked(scores, labels, mask) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if y.shape != s.shape:
        raise InvalidArgumentError(f"scores {s.shape} and labels {y.shape} differ in length")
    if mask is not None:
        m = np.asarray(mask).ravel().astype(bool)
        if m.shape != s.shape:
            raise InvalidArgumentError(f"mask {m.shape} and scores {s.shape} differ in length")
        s, y = s[m], y[m]
    y = y.astype(bool)
    positives = int(y.sum())
    negatives = int(y.size - positives)
    if positives == 0:
        raise ClassSkipped("no positive examples")
    if negatives == 0:
        raise ClassSkipped("no negative examples")
    return s, y


def auc(scores: Sequence[float], labels: Sequence[int], mask: Optional[Sequence[int]] = None) -> float:
    """P(score_pos > score_neg) + 0.5 P(tie), via midrank sums."""
    s, y = _masked(scores, labels, mask)
    ranks = rankdata(s, method="average")
    positives = int(y.sum())
    negatives = y.size - positives
    u = ranks[y].sum() - positives * (positives + 1) / 2.0
    return float(u / (positives * negatives))


def roc_curve(scores: Sequence[float], labels: Sequence[int], mask: Optional[Sequence[int]] = None) -> RocCurve:
    """Threshold sweep over the distinct scores, highest first."""
    s, y = _masked(scores, labels, mask)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of every run of equal scores
    distinct = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tps = np.cumsum(y)[distinct]
    fps = (distinct + 1) - tps
    tpr = np.r_[0.0, tps / tps[-1]]
    fpr = np.r_[0.0, fps / fps[-1]]
    thresholds = np.r_[np.inf, s[distinct]]
    return RocCurve(fpr=fpr, tpr=tpr, thresholds=thresholds)


def macro_auc(outputs, labels, masks=None, tool_names: Optional[Sequence[str]] = None) -> AucReport:
    """
    Per-class AUC with the per-class mask applied; the macro value is the
    plain mean over classes that were not skipped.

    Raises:
        EvaluationError: every class was skipped
    """
    scores = np.asarray(getattr(outputs, "data", outputs), dtype=np.float64)
    y = np.asarray(labels)
    if scores.ndim != 2 or scores.shape[0] < 1:
        raise InvalidArgumentError(f"outputs must be [N>=1, c], got {scores.shape}")
    if y.shape != scores.shape:
        raise InvalidArgumentError(f"labels {y.shape} do not match outputs {scores.shape}")
    m = np.ones_like(y) if masks is None else np.asarray(masks)
    if m.shape != scores.shape:
        raise InvalidArgumentError(f"masks {m.shape} do not match outputs {scores.shape}")
    names = list(tool_names) if tool_names is not None else [f"class_{i}" for i in range(scores.shape[1])]

    per_class = []
    for i, name in enumerate(names):
        selected = m[:, i].astype(bool)
        positives = int(y[selected, i].astype(bool).sum())
        negatives = int(selected.sum()) - positives
        try:
            value = auc(scores[:, i], y[:, i], m[:, i])
            per_class.append(ClassAuc(name, value, positives, negatives))
        except ClassSkipped as skipped:
            per_class.append(ClassAuc(name, None, positives, negatives, skipped.reason))

    values = [c.auc for c in per_class if not c.skipped]
    if not values:
        raise EvaluationError("every class was skipped: no class has both positives and negatives")
    return AucReport(per_class=tuple(per_class), macro=float(np.mean(values)))
