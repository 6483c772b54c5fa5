"""Evaluation: F-score on summaries, rank correlations on frame scores.

Kendall's tau uses the tau-b tie correction with O(n log n) counting;
Spearman's rho is the Pearson correlation of average-tie ranks.  Undefined
cases (all-tied input) return NaN with a warning rather than raising.
"""

from __future__ import annotations

import warnings

import numpy as np

from .errors import ContractError, DataError


def f_score(pred_mask, gt_mask):
    """Precision, recall and F of two same-length boolean frame masks."""
    p = np.asarray(pred_mask, dtype=bool)
    g = np.asarray(gt_mask, dtype=bool)
    if p.shape != g.shape:
        raise ContractError(f"mask lengths differ: {p.shape} vs {g.shape}")
    inter = int((p & g).sum())
    np_, ng = int(p.sum()), int(g.sum())
    precision = inter / np_ if np_ else 0.0
    recall = inter / ng if ng else 0.0
    f = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f


def _merge_count(y):
    """Number of strict inversions in y, by merge sort."""
    a = list(y)
    buf = [0.0] * len(a)
    count = 0
    width = 1
    n = len(a)
    while width < n:
        for lo in range(0, n, 2 * width):
            mid = min(lo + width, n)
            hi = min(lo + 2 * width, n)
            i, j, k = lo, mid, lo
            while i < mid and j < hi:
                if a[j] < a[i]:
                    count += mid - i
                    buf[k] = a[j]
                    j += 1
                else:
                    buf[k] = a[i]
                    i += 1
                k += 1
            buf[k:hi] = a[i:mid] if i < mid else a[j:hi]
            a[lo:hi] = buf[lo:hi]
        width *= 2
    return count


def _tie_term(values):
    """Sum over tie groups of t*(t-1)/2."""
    _, counts = np.unique(values, return_counts=True)
    return int((counts * (counts - 1) // 2).sum())


def kendall_tau(x, y):
    """Kendall's tau-b; NaN (with a warning) when either side is all tied."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ContractError("kendall_tau expects two equal-length 1-D sequences (n >= 2)")
    n = x.size
    n0 = n * (n - 1) // 2
    n1 = _tie_term(x)
    n2 = _tie_term(y)
    if n1 == n0 or n2 == n0:
        warnings.warn("kendall_tau undefined: an input is constant", stacklevel=2)
        return float("nan")
    order = np.lexsort((y, x))
    ys = y[order]
    # joint ties
    pairs = np.stack([x, y], axis=1)
    _, joint_counts = np.unique(pairs, axis=0, return_counts=True)
    n3 = int((joint_counts * (joint_counts - 1) // 2).sum())
    # sorted by (x, y), strict y-inversions are exactly the discordant pairs:
    # equal-x groups have ascending y so contribute none
    swaps = _merge_count(ys.tolist())
    c_minus_d = n0 - n1 - n2 + n3 - 2 * swaps
    denom = np.sqrt(float(n0 - n1) * float(n0 - n2))
    return float(c_minus_d / denom)


def average_ranks(x):
    """Ranks starting at 1 with ties assigned their group average."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.float64)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman_rho(x, y):
    """Spearman's rho on average ranks; NaN when either rank vector is constant."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ContractError("spearman_rho expects two equal-length 1-D sequences (n >= 2)")
    rx = average_ranks(x)
    ry = average_ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    vx = (rx**2).sum()
    vy = (ry**2).sum()
    if vx == 0.0 or vy == 0.0:
        warnings.warn("spearman_rho undefined: an input is constant", stacklevel=2)
        return float("nan")
    return float((rx * ry).sum() / np.sqrt(vx * vy))


def evaluate(pred_scores, annotations, pred_summary=None, gt_summaries=None):
    """Score a prediction against every annotator and average.

    Returns {"per_annotator": [...], "tau": mean, "rho": mean} and, when
    summaries are supplied, per-annotator and mean F-scores.
    """
    pred = np.asarray(pred_scores, dtype=np.float64)
    if not annotations:
        raise ContractError("evaluate requires at least one annotator")
    per = []
    for idx, ann in enumerate(annotations):
        ann = np.asarray(ann, dtype=np.float64)
        if ann.shape != pred.shape:
            raise DataError(
                f"annotator {idx}: length {ann.shape} does not match prediction {pred.shape}"
            )
        per.append({"tau": kendall_tau(pred, ann), "rho": spearman_rho(pred, ann)})
    report = {
        "per_annotator": per,
        "tau": float(np.mean([p["tau"] for p in per])),
        "rho": float(np.mean([p["rho"] for p in per])),
    }
    if pred_summary is not None and gt_summaries:
        fs = []
        for gt in gt_summaries:
            _, _, f = f_score(pred_summary, gt)
            fs.append(f)
        for p, f in zip(per, fs):
            p["f"] = f
        report["f"] = float(np.mean(fs))
    return report
