"""OOD detection metrics with exact, oracle-checkable definitions.

Scores follow one orientation everywhere: higher means more
in-distribution.  AUROC is the pair statistic P(id > ood) + 0.5 P(id = ood);
FPR@95 uses the largest threshold that keeps at least 95% of ID scores;
average precision treats OOD rows as positives, ranking by ascending
ID-score with ID rows placed first at ties (the pessimistic convention).
"""
from __future__ import annotations

import numpy as np

__all__ = ["auroc", "fpr_at_tpr95", "average_precision", "average_over_steps"]


def _check(id_scores, ood_scores) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(id_scores, dtype=np.float64)
    b = np.asarray(ood_scores, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("both score sets must be nonempty")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("scores must be finite")
    return a, b


def _midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the group mean rank."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(id_scores, ood_scores) -> float:
    """P(id > ood) + 0.5 P(id = ood), via midranks in O(n log n)."""
    a, b = _check(id_scores, ood_scores)
    ranks = _midranks(np.concatenate([a, b]))
    u = ranks[: a.size].sum() - a.size * (a.size + 1) / 2.0
    return float(u / (a.size * b.size))


def fpr_at_tpr95(id_scores, ood_scores) -> float:
    """FPR on OOD at the largest threshold keeping TPR(id) >= 0.95."""
    a, b = _check(id_scores, ood_scores)
    n = a.size
    need = -((-19 * n) // 20)  # ceil(0.95 n) in exact integer arithmetic
    thresh = np.sort(a)[::-1][need - 1]
    return float(np.count_nonzero(b >= thresh) / b.size)


def average_precision(id_scores, ood_scores) -> float:
    """Step-interpolated AP of detecting OOD rows (treated as positives)."""
    a, b = _check(id_scores, ood_scores)
    scores = np.concatenate([a, b])
    is_ood = np.concatenate([np.zeros(a.size, bool), np.ones(b.size, bool)])
    # ascending ID-score = descending OOD-ness; ID first within ties
    order = np.lexsort((is_ood, scores))
    flags = is_ood[order]
    positions = np.flatnonzero(flags) + 1
    tp = np.arange(1, b.size + 1)
    return float((tp / positions).sum() / b.size)


def average_over_steps(values) -> float:
    """Arithmetic mean of per-step metric values."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("need at least one step")
    return float(arr.mean())
