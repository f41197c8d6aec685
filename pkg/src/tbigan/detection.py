"""Composite anomaly scores and the rolling mean + c*std threshold.

A window's score combines three non-negative terms::

    total = alpha * recon + (1 - alpha) * disc + gamma * latent

``recon`` is the feature-weighted mean squared reconstruction residual,
``disc`` is ``BCE(D(x, E(x)), 1)`` and ``latent`` is the squared drift of the
re-encoded reconstruction ``||E(G(E(x))) - E(x)||^2``.
"""

from __future__ import annotations

import contextlib
import csv
import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as tn
from .data import window_array, window_labels
from .errors import ConfigError, DataError, ScoringError


@dataclass
class FeatureWeights:
    """Inverse-variance channel weights with mean 1 over all features."""

    w: np.ndarray

    def to_list(self) -> list[float]:
        return [float(v) for v in self.w]

    def save(self, path: str | Path) -> None:
        import json

        Path(path).write_text(json.dumps({"weights": self.to_list()}))

    @classmethod
    def load(cls, path: str | Path) -> "FeatureWeights":
        import json

        try:
            return cls(np.array(json.loads(Path(path).read_text())["weights"], dtype=np.float64))
        except (OSError, KeyError, ValueError) as exc:
            raise DataError(f"cannot read feature weights {path}: {exc}") from None


def fit_weights(training) -> FeatureWeights:
    """Fit weights from preprocessed normal data (windows ``n x T x F`` or frames ``N x F``)."""
    x = np.asarray(training, dtype=np.float64)
    x = x.reshape(-1, x.shape[-1])
    if x.shape[0] == 0:
        raise DataError("no training data for feature weights")
    var = x.var(axis=0)
    const = x.max(axis=0) == x.min(axis=0)
    if const.all():
        raise DataError("every feature has zero variance; cannot weight")
    raw = np.where(const, 0.0, 1.0 / np.where(const, 1.0, var))
    w = raw * (len(raw) / raw.sum())
    return FeatureWeights(w)


@dataclass
class AnomalyScore:
    total: float
    recon_term: float
    disc_term: float
    latent_term: float
    window_start: int = 0


@contextlib.contextmanager
def evaluating(model):
    """Run with the model in eval mode, restoring the previous mode afterwards."""
    prev = model.training
    model.eval()
    try:
        with tn.no_grad():
            yield model
    finally:
        model.train(prev)


def _check_weights(alpha: float, gamma: float) -> None:
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    if gamma < 0:
        raise ConfigError(f"gamma must be >= 0, got {gamma}")


def score_components(model, weights: FeatureWeights, windows: np.ndarray,
                     batch_size: int = 256, start_offset: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (recon, disc, latent) arrays for an ``n x T x F`` batch of windows."""
    windows = np.asarray(windows, dtype=np.float64)
    w = np.asarray(weights.w)
    recon, disc, latent = [], [], []
    with evaluating(model):
        for s in range(0, len(windows), batch_size):
            xb = windows[s : s + batch_size]
            x = tn.Tensor._wrap(xb, "window")
            ex = model.encode(x)
            xh = model.generate(ex)
            exh = model.encode(xh)
            logit = model.discriminate_logits(x, ex).data
            r = ((xb - xh.data) ** 2 * w).mean(axis=(-2, -1))
            d = np.logaddexp(0.0, -logit)
            lat = ((exh.data - ex.data) ** 2).sum(axis=-1)
            for arr in (r, d, lat):
                bad = np.flatnonzero(~np.isfinite(arr))
                if bad.size:
                    idx = start_offset + s + int(bad[0])
                    raise ScoringError(f"non-finite model output at window {idx}", idx)
            recon.append(r)
            disc.append(d)
            latent.append(lat)
    if not recon:
        return np.empty(0), np.empty(0), np.empty(0)
    return np.concatenate(recon), np.concatenate(disc), np.concatenate(latent)


def combine(recon, disc, latent, alpha: float, gamma: float):
    return alpha * recon + (1.0 - alpha) * disc + gamma * latent


def score_window(model, weights: FeatureWeights, window, alpha: float = 0.6,
                 gamma: float = 1.0, window_start: int = 0) -> AnomalyScore:
    _check_weights(alpha, gamma)
    data = window.data if hasattr(window, "data") and not isinstance(window, np.ndarray) else window
    if hasattr(window, "start_index"):
        window_start = window.start_index
    r, d, lat = score_components(model, weights, np.asarray(data)[None], start_offset=window_start)
    total = combine(r[0], d[0], lat[0], alpha, gamma)
    return AnomalyScore(float(total), float(r[0]), float(d[0]), float(lat[0]), window_start)


class ThresholdState:
    """Rolling threshold over the last ``k`` scores: ``mean + c * std``.

    The threshold for a new score is computed before that score is inserted.
    While fewer than ``k`` scores are buffered the threshold is ``+inf`` and
    nothing is flagged. With ``quarantine`` flagged scores are kept out of
    the buffer.
    """

    def __init__(self, k: int, c: float, ddof: int = 0, quarantine: bool = False):
        if k < 2:
            raise ConfigError(f"threshold window k must be >= 2, got {k}")
        if not 0 <= ddof < k:
            raise ConfigError(f"ddof must be in [0, k), got {ddof}")
        self.k = k
        self.c = c
        self.ddof = ddof
        self.quarantine = quarantine
        self.buffer: deque[float] = deque(maxlen=k)
        self.theta = math.inf

    @property
    def full(self) -> bool:
        return len(self.buffer) == self.k

    def current_threshold(self) -> float:
        if not self.full:
            return math.inf
        b = np.fromiter(self.buffer, dtype=np.float64, count=self.k)
        # shift by the first element so a constant buffer gives std exactly 0
        ref = b[0]
        d = b - ref
        mu = d.mean()
        sd = math.sqrt(((d - mu) ** 2).sum() / (self.k - self.ddof))
        return float(ref + mu + self.c * sd)

    def update(self, score: float) -> tuple[bool, float]:
        theta = self.current_threshold()
        flag = bool(score > theta)
        if not (flag and self.quarantine):
            self.buffer.append(float(score))
        self.theta = theta
        return flag, theta


def update_threshold(state: ThresholdState, new_score: float) -> tuple[bool, float]:
    return state.update(new_score)


@dataclass
class TraceRow:
    window_start: int
    recon_term: float
    disc_term: float
    latent_term: float
    total: float
    theta: float
    flag: bool
    label: bool | None = None


def score_stream(model, weights: FeatureWeights, stream: np.ndarray, T: int, stride: int = 1,
                 alpha: float = 0.6, gamma: float = 1.0, k: int = 300, c: float = 3.0,
                 labels: np.ndarray | None = None, ddof: int = 0,
                 quarantine: bool = False) -> list[TraceRow]:
    """Score every window of a preprocessed stream in temporal order.

    Window scoring is batched; threshold updates then run sequentially.
    """
    _check_weights(alpha, gamma)
    x = np.asarray(stream, dtype=np.float64)
    windows = window_array(x, T, stride)
    labs = window_labels(labels, len(x), T, stride) if labels is not None else None
    r, d, lat = score_components(model, weights, windows)
    total = combine(r, d, lat, alpha, gamma)
    state = ThresholdState(k, c, ddof=ddof, quarantine=quarantine)
    rows = []
    for i in range(len(windows)):
        flag, theta = state.update(total[i])
        rows.append(
            TraceRow(i * stride, float(r[i]), float(d[i]), float(lat[i]), float(total[i]),
                     theta, flag, None if labs is None else bool(labs[i]))
        )
    return rows


TRACE_HEADER = ["window_start", "recon_term", "disc_term", "latent_term", "total", "theta", "flag", "label"]


def write_trace_csv(rows: list[TraceRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for r in rows:
            w.writerow([
                r.window_start, repr(r.recon_term), repr(r.disc_term), repr(r.latent_term),
                repr(r.total), "inf" if math.isinf(r.theta) else repr(r.theta), int(r.flag),
                "" if r.label is None else int(r.label),
            ])


def read_trace_csv(path: str | Path) -> list[TraceRow]:
    rows = []
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or set(TRACE_HEADER[:-1]) - set(reader.fieldnames):
                raise DataError(f"{path} is not a score trace (header {reader.fieldnames})")
            for rec in reader:
                lab = rec.get("label", "")
                rows.append(TraceRow(
                    int(rec["window_start"]), float(rec["recon_term"]), float(rec["disc_term"]),
                    float(rec["latent_term"]), float(rec["total"]), float(rec["theta"]),
                    rec["flag"] == "1", None if lab in ("", None) else lab == "1",
                ))
    except OSError as exc:
        raise DataError(f"cannot read trace {path}: {exc}") from None
    except ValueError as exc:
        raise DataError(f"malformed trace {path}: {exc}") from None
    return rows
