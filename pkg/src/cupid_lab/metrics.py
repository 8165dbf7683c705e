"""Uncertainty evaluation metrics.

Discrimination metrics take a score (higher = more uncertain) and a binary
label (1 = positive: misclassified or OOD).  Regression-quality metrics take
a score and a non-negative error.  Ties are handled explicitly everywhere:
mid-ranks for rank statistics, grouped thresholds for PR curves and stable
input order for sorting.
"""

from __future__ import annotations

import csv
import io

import numpy as np
from scipy.stats import rankdata


class MetricError(ValueError):
    pass


def _arrays(scores, values):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    values = np.asarray(values, dtype=np.float64).ravel()
    if scores.shape != values.shape:
        raise MetricError(f"length mismatch: {scores.size} scores vs {values.size} values")
    if not np.isfinite(scores).all():
        raise MetricError("scores must be finite")
    return scores, values


def _binary(labels):
    if not np.isin(labels, (0.0, 1.0)).all():
        raise MetricError("labels must be 0 or 1")
    return labels.astype(bool)


def roc_auc(scores, labels) -> float:
    """P(score of a positive > score of a negative) + 0.5 P(tie)."""
    scores, labels = _arrays(scores, labels)
    pos = _binary(labels)
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("ROC AUC needs both positive and negative samples")
    ranks = rankdata(scores, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def aupr(scores, labels) -> float:
    """Average precision: sum over distinct thresholds of (R_t - R_{t-1}) P_t."""
    scores, labels = _arrays(scores, labels)
    pos = _binary(labels)
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise MetricError("AUPR needs at least one positive sample")
    order = np.argsort(-scores, kind="stable")
    s, p = scores[order], pos[order]
    tp = np.cumsum(p)
    # last index of every run of equal scores = one threshold
    last = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp_t = tp[last]
    precision = tp_t / (last + 1)
    recall = tp_t / n_pos
    d_recall = np.diff(np.r_[0.0, recall])
    return float((d_recall * precision).sum())


def risk_coverage(scores, errors) -> np.ndarray:
    """Risk at coverage i/n for i = 1..n, most confident samples first."""
    scores, errors = _arrays(scores, errors)
    if scores.size == 0:
        raise MetricError("risk-coverage needs at least one sample")
    order = np.argsort(scores, kind="stable")
    return np.cumsum(errors[order]) / np.arange(1, scores.size + 1)


def aurc(scores, errors) -> float:
    return float(risk_coverage(scores, errors).mean())


def pearson(scores, errors) -> float:
    scores, errors = _arrays(scores, errors)
    if scores.size < 2:
        raise MetricError("correlation needs at least 2 samples")
    a = scores - scores.mean()
    b = errors - errors.mean()
    sa = np.sqrt((a * a).sum())
    sb = np.sqrt((b * b).sum())
    if sa == 0 or sb == 0:
        raise MetricError("correlation undefined for a zero-variance input")
    return float(np.clip((a * b).sum() / (sa * sb), -1.0, 1.0))


def spearman(scores, errors) -> float:
    """Pearson correlation of mid-ranks."""
    scores, errors = _arrays(scores, errors)
    return pearson(rankdata(scores, method="average"), rankdata(errors, method="average"))


def sparsification_curves(scores, errors, steps: int = 100):
    """Normalised mean error after removing the top ``f`` fraction of samples,
    ranked by score (method) and by error itself (oracle), f = i/steps.
    """
    scores, errors = _arrays(scores, errors)
    n = scores.size
    if steps < 1 or n < steps:
        raise MetricError(f"sparsification needs n >= steps, got n={n}, steps={steps}")
    removed = (np.arange(steps) * n) // steps

    def curve(key):
        ordered = errors[np.argsort(-key, kind="stable")]
        # mean of the remaining tail ordered[r:]
        tail = np.cumsum(ordered[::-1])[::-1]
        return tail[removed] / (n - removed)

    method = curve(scores)
    oracle = curve(errors)
    base = errors.mean()
    if base == 0:
        return np.zeros(steps), np.zeros(steps)
    return method / base, oracle / base


def ause(scores, errors, steps: int = 100) -> float:
    method, oracle = sparsification_curves(scores, errors, steps)
    return float((method - oracle).mean())


def uce(scores, errors, bins: int = 10) -> float:
    """Binned |mean score - mean error|, weighted by bin occupancy.

    Bins are equal-width over the observed score range; a degenerate range
    collapses to one bin.
    """
    scores, errors = _arrays(scores, errors)
    n = scores.size
    if bins < 1 or n < bins:
        raise MetricError(f"UCE needs n >= bins, got n={n}, bins={bins}")
    lo, hi = scores.min(), scores.max()
    if hi == lo:
        idx = np.zeros(n, dtype=np.int64)
    else:
        idx = np.minimum(((scores - lo) / (hi - lo) * bins).astype(np.int64), bins - 1)
    total = 0.0
    for b in np.unique(idx):
        sel = idx == b
        total += sel.sum() / n * abs(scores[sel].mean() - errors[sel].mean())
    return float(total)


def regression_suite(scores, errors, steps: int = 100, bins: int = 10) -> dict:
    """Pearson, AUSE and UCE; ``steps`` and ``bins`` are capped at the sample count."""
    n = np.size(scores)
    steps, bins = min(steps, n), min(bins, n)
    return {
        "pearson": pearson(scores, errors),
        "ause": ause(scores, errors, steps),
        "uce": uce(scores, errors, bins),
    }


def misclassification_suite(scores, errors) -> dict:
    return {
        "auc": roc_auc(scores, errors),
        "aurc": aurc(scores, errors),
        "spearman": spearman(scores, errors),
    }


def ood_suite(scores, labels) -> dict:
    return {"auc": roc_auc(scores, labels), "aupr": aupr(scores, labels)}


def metrics_csv(rows) -> str:
    """``rows``: iterables of (metric, value, n, params)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value", "n", "params"])
    for metric, value, n, params in rows:
        w.writerow([metric, format(float(value), ".17g"), int(n), params])
    return buf.getvalue()
