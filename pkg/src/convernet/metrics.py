"""Accuracy, rank-sum AUC, average precision and a paired permutation test."""
import csv
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import MetricError, PairingError

TIE_TOL = 1e-12
STAR_LEVELS = ((0.001, "***"), (0.01, "**"), (0.05, "*"))


@dataclass
class PredictionSet:
    ids: list
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.ids = [str(i) for i in self.ids]
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.ids)
        if n == 0:
            raise MetricError("empty prediction set")
        if self.scores.shape != (n,) or self.labels.shape != (n,):
            raise MetricError("ids, scores and labels must be parallel 1-d sequences")
        if len(set(self.ids)) != n:
            raise MetricError("instance ids must be unique")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise MetricError("labels must be 0 or 1")

    def __len__(self):
        return len(self.ids)

    def sorted_by_id(self):
        order = sorted(range(len(self.ids)), key=self.ids.__getitem__)
        return PredictionSet([self.ids[i] for i in order], self.scores[order], self.labels[order])


def _unpack(p, labels):
    if isinstance(p, PredictionSet):
        return p.scores, p.labels
    scores = np.asarray(p, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise MetricError("scores and labels must be parallel 1-d arrays")
    return scores, labels


def _need_both_classes(labels):
    n_pos = int((labels == 1).sum())
    if n_pos == 0 or n_pos == labels.shape[0]:
        raise MetricError("metric undefined without both positive and negative labels")


def accuracy(p, labels=None, threshold=0.5):
    """Share of instances where ``score >= threshold`` matches the label."""
    scores, labels = _unpack(p, labels)
    if scores.size == 0:
        raise MetricError("accuracy of an empty set")
    return float(np.mean((scores >= threshold) == (labels == 1)))


def auc(p, labels=None):
    """Mann-Whitney AUC from average ranks; ties between classes count one half."""
    scores, labels = _unpack(p, labels)
    _need_both_classes(labels)
    return float(kernels.auc(np.ascontiguousarray(scores), np.ascontiguousarray(labels)))


def average_precision(p, labels=None, ids=None):
    """Mean precision@k over the ranks of the positives.

    Ranking is by descending score; equal scores are ordered by instance id.
    """
    if isinstance(p, PredictionSet):
        p = p.sorted_by_id()
        scores, labels = p.scores, p.labels
    else:
        scores, labels = _unpack(p, labels)
        if ids is not None:
            order = sorted(range(len(ids)), key=lambda i: str(ids[i]))
            scores, labels = scores[order], labels[order]
    if not np.any(labels == 1):
        raise MetricError("average precision undefined without positives")
    return float(kernels.ap(np.ascontiguousarray(scores), np.ascontiguousarray(labels)))


METRICS = {"auc": auc, "accuracy": accuracy, "map": average_precision}


def compute(metric, pset, threshold=0.5):
    if metric == "accuracy":
        return accuracy(pset, threshold=threshold)
    return METRICS[metric](pset)


@dataclass
class PermutationResult:
    metric: str
    value_a: float
    value_b: float
    delta: float
    p_value: float
    n_rounds: int

    @property
    def stars(self):
        return significance_stars(self.p_value)


def significance_stars(p):
    for level, mark in STAR_LEVELS:
        if p < level:
            return mark
    return ""


def align(a, b):
    """Order both sets by instance id; they must cover the same ids and labels."""
    a, b = a.sorted_by_id(), b.sorted_by_id()
    if a.ids != b.ids:
        missing = set(a.ids) ^ set(b.ids)
        raise PairingError(f"prediction sets cover different instances ({len(missing)} unmatched)")
    if not np.array_equal(a.labels, b.labels):
        raise PairingError("paired prediction sets disagree on labels")
    return a, b


def permutation_test(a, b, metric="auc", n_rounds=10000, seed=0, threshold=0.5, chunk=512):
    """Paired random-permutation test of metric(a) - metric(b).

    Each round swaps the two systems' scores on every instance independently
    with probability 1/2.  Two-sided, add-one smoothed p-value.
    """
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    if n_rounds < 1:
        raise ValueError("n_rounds must be >= 1")
    a, b = align(a, b)
    labels = a.labels
    if metric != "accuracy":
        if metric == "auc":
            _need_both_classes(labels)
        elif not np.any(labels == 1):
            raise MetricError("average precision undefined without positives")
    va, vb = compute(metric, a, threshold), compute(metric, b, threshold)
    observed = abs(va - vb)
    code = kernels.METRIC_CODES[metric]
    rng = np.random.default_rng(seed)
    extreme = 0
    done = 0
    while done < n_rounds:
        k = min(chunk, n_rounds - done)
        swaps = rng.random((k, len(a))) < 0.5
        deltas = kernels.permutation_deltas(a.scores, b.scores, labels, swaps, code, float(threshold))
        extreme += int(np.count_nonzero(np.abs(deltas) >= observed - TIE_TOL))
        done += k
    return PermutationResult(metric, va, vb, va - vb, (1 + extreme) / (n_rounds + 1), n_rounds)


# ---------------------------------------------------------------------------
# CSV interchange


def write_predictions(path, pset):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["instance_id", "score", "label"])
        for i, s, y in zip(pset.ids, pset.scores, pset.labels):
            w.writerow([i, repr(float(s)), int(y)])


def read_predictions(path):
    ids, scores, labels = [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"instance_id", "score", "label"} - set(reader.fieldnames or ())
        if missing:
            raise PairingError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            ids.append(row["instance_id"])
            scores.append(float(row["score"]))
            labels.append(int(row["label"]))
    return PredictionSet(ids, scores, labels)


def write_report(path, rows):
    """Rows of (metric, value)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for name, value in rows:
            w.writerow([name, repr(float(value)) if isinstance(value, (float, np.floating)) else value])


def read_report(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return {row["metric"]: row["value"] for row in csv.DictReader(fh)}
