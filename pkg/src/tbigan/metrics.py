"""Detection metrics (ROC/PR, Youden's J, confusion counts) and a PCA baseline.

Scores are flagged with a strict ``score > threshold`` everywhere.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError, UndefinedMetricError


@dataclass
class ScoredLabels:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        self.labels = np.asarray(self.labels).astype(bool).ravel()
        if len(self.scores) != len(self.labels):
            raise DataError(f"{len(self.scores)} scores but {len(self.labels)} labels")
        if len(self.scores) == 0:
            raise DataError("no scored samples")
        if not np.all(np.isfinite(self.scores)):
            raise DataError("scores must be finite")

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())

    @property
    def n_neg(self) -> int:
        return int((~self.labels).sum())

    def require_both_classes(self, what: str) -> None:
        if self.n_pos == 0 or self.n_neg == 0:
            raise UndefinedMetricError(f"{what} needs both positive and negative labels")


def _cumulative_counts(data: ScoredLabels):
    """tp/fp counts when flagging ``score >= t`` for each distinct score, descending."""
    order = np.argsort(-data.scores, kind="mergesort")
    s = data.scores[order]
    y = data.labels[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    return s[last], tp.astype(np.int64), fp.astype(np.int64)


@dataclass
class RocResult:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float


def roc_curve(data: ScoredLabels) -> RocResult:
    """ROC points over distinct score thresholds and trapezoidal AUC.

    Tied scores form one step, so the area equals the pairwise probability
    with half credit for ties. Counts stay integral until the final division.
    """
    data.require_both_classes("ROC")
    thr, tp, fp = _cumulative_counts(data)
    tp = np.r_[0, tp]
    fp = np.r_[0, fp]
    P, N = data.n_pos, data.n_neg
    area2 = int(np.sum((fp[1:] - fp[:-1]) * (tp[1:] + tp[:-1])))
    return RocResult(fp / N, tp / P, np.r_[np.inf, thr], area2 / (2.0 * P * N))


def auc_rank_sum(data: ScoredLabels) -> float:
    """Mann-Whitney AUC from average ranks."""
    from scipy.stats import rankdata

    data.require_both_classes("AUC")
    ranks = rankdata(data.scores)
    P, N = data.n_pos, data.n_neg
    return float((ranks[data.labels].sum() - P * (P + 1) / 2.0) / (P * N))


@dataclass
class PrResult:
    precision: np.ndarray
    recall: np.ndarray
    thresholds: np.ndarray
    ap: float


def pr_curve(data: ScoredLabels) -> PrResult:
    """Precision/recall at each distinct threshold and step-wise average precision."""
    if data.n_pos == 0:
        raise UndefinedMetricError("average precision needs at least one positive")
    thr, tp, fp = _cumulative_counts(data)
    precision = tp / (tp + fp)
    recall = tp / data.n_pos
    prev = np.r_[0.0, recall[:-1]]
    ap = float(np.sum((recall - prev) * precision))
    return PrResult(precision, recall, thr, ap)


def youden_threshold(data: ScoredLabels) -> float:
    """Threshold maximising ``TPR - FPR`` under ``score > threshold``.

    The optimum is a cut between two adjacent distinct scores; the midpoint of
    that gap is returned. Ties in J go to the higher threshold.
    """
    data.require_both_classes("Youden's J")
    u = np.unique(data.scores)
    thr, tp, fp = _cumulative_counts(data)  # descending distinct scores
    # cut i flags the top (i) distinct score levels; cut 0 flags nothing
    tp = np.r_[0, tp]
    fp = np.r_[0, fp]
    j = tp / data.n_pos - fp / data.n_neg
    best = int(np.flatnonzero(j == j.max())[0])  # lowest cut index = highest threshold
    if best == 0:
        return float(u[-1])
    lowest_flagged = thr[best - 1]
    below = u[u < lowest_flagged]
    if below.size == 0:
        return float(lowest_flagged - 1.0)
    return float(0.5 * (below[-1] + lowest_flagged))


def youden_j(data: ScoredLabels, threshold: float) -> float:
    cm = confusion_at(data, threshold)
    return cm.tp / (cm.tp + cm.fn) - cm.fp / (cm.fp + cm.tn)


@dataclass
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def precision(self) -> float | None:
        d = self.tp + self.fp
        return self.tp / d if d else None

    @property
    def recall(self) -> float | None:
        d = self.tp + self.fn
        return self.tp / d if d else None

    tpr = recall

    @property
    def fpr(self) -> float | None:
        d = self.fp + self.tn
        return self.fp / d if d else None

    @property
    def f1(self) -> float | None:
        p, r = self.precision, self.recall
        if p is None or r is None or p + r == 0:
            return None
        return 2 * p * r / (p + r)

    def as_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}


def confusion_from_counts(tn: int, fp: int, fn: int, tp: int) -> ConfusionMatrix:
    if min(tn, fp, fn, tp) < 0:
        raise DataError("confusion counts must be non-negative")
    return ConfusionMatrix(tp=tp, fp=fp, tn=tn, fn=fn)


def confusion_at(data: ScoredLabels, threshold: float) -> ConfusionMatrix:
    flag = data.scores > threshold
    y = data.labels
    return ConfusionMatrix(
        tp=int(np.sum(flag & y)), fp=int(np.sum(flag & ~y)),
        tn=int(np.sum(~flag & ~y)), fn=int(np.sum(~flag & y)),
    )


# -- PCA baseline ------------------------------------------------------------
class PCABaseline:
    """Reconstruction error after projecting onto the top principal components."""

    def __init__(self, n_components: int | None = None, variance_target: float = 0.95):
        self.n_components = n_components
        self.variance_target = variance_target

    def fit(self, train: np.ndarray) -> "PCABaseline":
        x = np.asarray(train, dtype=np.float64).reshape(len(train), -1)
        n, dim = x.shape
        if self.n_components is not None and not 1 <= self.n_components < dim:
            raise ConfigError(f"n_components must lie in [1, {dim}), got {self.n_components}")
        self.mean_ = x.mean(axis=0)
        xc = x - self.mean_
        if dim <= n:
            evals, evecs = np.linalg.eigh(xc.T @ xc / max(n - 1, 1))
        else:
            # same nonzero spectrum via the n x n Gram matrix
            g_vals, g_vecs = np.linalg.eigh(xc @ xc.T / max(n - 1, 1))
            keep = g_vals > g_vals.max() * 1e-12
            g_vals, g_vecs = g_vals[keep], g_vecs[:, keep]
            evecs = xc.T @ g_vecs / np.sqrt(g_vals * max(n - 1, 1))
            evals = g_vals
        order = np.argsort(evals)[::-1]
        evals, evecs = np.clip(evals[order], 0.0, None), evecs[:, order]
        k = self.n_components
        if k is None:
            frac = np.cumsum(evals) / evals.sum()
            k = int(np.searchsorted(frac, self.variance_target) + 1)
            k = min(k, dim - 1)
        self.k_ = k
        self.components_ = evecs[:, :k]
        self.explained_variance_ = evals[:k]
        return self

    def score(self, data: np.ndarray) -> np.ndarray:
        x = np.asarray(data, dtype=np.float64).reshape(len(data), -1) - self.mean_
        resid = x - (x @ self.components_) @ self.components_.T
        return (resid**2).sum(axis=1)


def pca_baseline(train_windows, test_windows, n_components: int | None = None,
                 test_labels: Sequence[bool] | None = None) -> ScoredLabels:
    """Fit PCA on flattened normal training windows and score the test windows."""
    def as_array(ws):
        if isinstance(ws, np.ndarray):
            return ws
        return np.stack([w.data for w in ws])

    train = as_array(train_windows)
    test = as_array(test_windows)
    if test_labels is None:
        if isinstance(test_windows, np.ndarray):
            test_labels = np.zeros(len(test), dtype=bool)
        else:
            test_labels = [w.label for w in test_windows]
    pca = PCABaseline(n_components).fit(train)
    return ScoredLabels(pca.score(test), np.asarray(test_labels, dtype=bool))


# -- evaluation helpers ------------------------------------------------------
def frame_scores(window_scores: np.ndarray, window_starts: np.ndarray, n_frames: int,
                 T: int) -> np.ndarray:
    """Give each frame the score of the latest-starting window covering it (NaN if none)."""
    out = np.full(n_frames, np.nan)
    starts = np.asarray(window_starts, dtype=np.int64)
    order = np.argsort(starts, kind="mergesort")
    for i in order:
        s = starts[i]
        out[s : min(s + T, n_frames)] = window_scores[i]
    return out


def report(data: ScoredLabels, threshold: float, level: str) -> dict:
    """Evaluation report at a fixed threshold (None where a metric is undefined)."""
    cm = confusion_at(data, threshold)
    out = {
        "auc": roc_curve(data).auc if data.n_pos and data.n_neg else None,
        "ap": pr_curve(data).ap if data.n_pos else None,
        "f1": cm.f1,
        "precision": cm.precision,
        "recall": cm.recall,
        "fpr": cm.fpr,
        "threshold": float(threshold),
        "confusion": cm.as_dict(),
        "level": level,
    }
    return out


def split_validation(n: int, val_fraction: float) -> tuple[slice, slice]:
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    cut = int(round(n * val_fraction))
    if cut == 0 or cut == n:
        raise DataError(f"cannot split {n} samples with val_fraction={val_fraction}")
    return slice(0, cut), slice(cut, n)


def evaluate_split(scores: np.ndarray, labels: np.ndarray, val_fraction: float,
                   level: str) -> tuple[dict, float]:
    """Choose Youden's threshold on the leading validation slice, apply it to the rest."""
    val, test = split_validation(len(scores), val_fraction)
    v = ScoredLabels(scores[val], labels[val])
    thr = youden_threshold(v)
    t = ScoredLabels(scores[test], labels[test])
    rep = report(t, thr, level)
    rep["validation"] = report(v, thr, level)
    return rep, thr


def write_roc_csv(res: RocResult, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fpr", "tpr"])
        for a, b in zip(res.fpr, res.tpr):
            w.writerow([repr(float(a)), repr(float(b))])


def write_pr_csv(res: PrResult, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["recall", "precision"])
        for a, b in zip(res.recall, res.precision):
            w.writerow([repr(float(a)), repr(float(b))])
