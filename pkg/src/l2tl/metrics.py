"""Evaluation metrics, also used as policy rewards."""

from __future__ import annotations

import numpy as np

METRIC_KINDS = ("top1-accuracy", "auc", "mean-auc-over-labels")


class MetricError(ValueError):
    pass


def top1_accuracy(logits, labels) -> float:
    """Fraction of rows whose argmax equals the label (ties go to the lowest index)."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise MetricError("top1_accuracy needs a non-empty (N, C) logit array")
    if labels.shape != (logits.shape[0],):
        raise MetricError(f"{logits.shape[0]} logit rows but {labels.size} labels")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise MetricError(f"labels must lie in [0, {logits.shape[1]})")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def auc(scores, labels) -> float:
    """ROC AUC as the Mann-Whitney statistic, ties between classes counted as 1/2.

    Uses midranks of the pooled scores, so the result is exact for any ties.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise MetricError(f"{scores.size} scores but {labels.size} labels")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError(f"auc needs both classes present (got {n_pos} positive, {n_neg} negative)")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(scores.size, dtype=np.float64)
    # group boundaries of equal scores; each group gets the mean of its 1-based ranks
    starts = np.flatnonzero(np.r_[True, sorted_scores[1:] != sorted_scores[:-1]])
    ends = np.r_[starts[1:], scores.size]
    midranks = (starts + ends + 1) / 2.0
    ranks[order] = np.repeat(midranks, ends - starts)
    # rank sums are integers or half-integers, so this is exact in float64
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def mean_auc(scores, label_matrix) -> float:
    """Average of per-column AUCs; columns lacking a positive or a negative are skipped."""
    scores = np.asarray(scores, dtype=np.float64)
    label_matrix = np.asarray(label_matrix).astype(bool)
    if scores.shape != label_matrix.shape or scores.ndim != 2:
        raise MetricError(f"scores {scores.shape} and labels {label_matrix.shape} must be equal 2-D shapes")
    values = []
    for j in range(scores.shape[1]):
        column = label_matrix[:, j]
        if column.all() or not column.any():
            continue
        values.append(auc(scores[:, j], column))
    if not values:
        raise MetricError("mean-auc: no label column has both positives and negatives")
    return float(np.mean(values))


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def score_logits(kind: str, logits, labels) -> float:
    """Metric value of target-head ``logits`` against integer ``labels``.

    ``auc`` needs two classes and scores class 1 by its softmax probability;
    ``mean-auc-over-labels`` scores each class one-vs-rest.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if kind == "top1-accuracy":
        return top1_accuracy(logits, labels)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise MetricError(f"{kind} needs a non-empty (N, C) logit array")
    probs = _softmax(logits)
    if kind == "auc":
        if logits.shape[1] != 2:
            raise MetricError(f"auc reward needs a 2-class head, got {logits.shape[1]} classes")
        return auc(probs[:, 1], labels == 1)
    if kind == "mean-auc-over-labels":
        onehot = labels[:, None] == np.arange(logits.shape[1])[None, :]
        return mean_auc(probs, onehot)
    raise MetricError(f"unknown metric kind {kind!r}")


def reward(kind: str, model, batch) -> float:
    """Evaluate ``model``'s target head on ``(features, labels)``; no state is touched."""
    features, labels = batch
    if len(labels) == 0:
        raise MetricError("reward batch is empty")
    logits = model.target_logits(features).data
    try:
        return score_logits(kind, logits, labels)
    except MetricError as exc:
        raise MetricError(f"reward ({kind}) on batch of {len(labels)}: {exc}") from exc
