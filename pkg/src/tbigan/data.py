"""PMU stream ingestion, preprocessing and windowing.

Raw streams are ``N x F`` float matrices (NaN marks a missing cell) with
timestamps and optional per-frame anomaly labels. Preprocessing is fitted on a
training split only: feature-wise mean imputation in raw space, ``log1p`` on
strictly positive large-magnitude channels, then z-scoring.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

# Channels are flagged for log compression only when min > LOG_MIN and max > LOG_MAX.
LOG_MIN = 100.0
LOG_MAX = 1000.0
MAX_MISSING_FRACTION = 0.5


@dataclass
class PmuStream:
    """A time-ordered block of raw (or preprocessed) PMU frames."""

    timestamps: np.ndarray
    features: np.ndarray
    labels: np.ndarray | None = None
    feature_names: list[str] | None = None

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise DataError(f"features must be 2-D (frames x features), got {self.features.shape}")
        if len(self.timestamps) != len(self.features):
            raise DataError(
                f"{len(self.timestamps)} timestamps for {len(self.features)} feature rows"
            )
        if len(self.timestamps) > 1 and not np.all(np.diff(self.timestamps) > 0):
            raise DataError("timestamps must be strictly increasing")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=bool)
            if len(self.labels) != len(self.features):
                raise DataError("label column length differs from feature rows")

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def slice(self, start: int, stop: int) -> "PmuStream":
        labels = None if self.labels is None else self.labels[start:stop]
        return PmuStream(
            self.timestamps[start:stop], self.features[start:stop], labels, self.feature_names
        )


def read_csv(path: str | Path) -> PmuStream:
    """Read a stream CSV: ``timestamp``, feature columns, optional ``label``.

    Empty cells and ``NaN`` literals are both read as missing.
    """
    try:
        df = pd.read_csv(path, keep_default_na=False, na_values=["", "NaN", "nan"])
    except FileNotFoundError:
        raise DataError(f"stream file not found: {path}") from None
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot parse {path}: {exc}") from None
    cols = list(df.columns)
    if not cols or cols[0].strip() != "timestamp":
        raise DataError(f"{path}: first column must be 'timestamp', got {cols[:1]}")
    labels = None
    feat_cols = cols[1:]
    if feat_cols and feat_cols[-1].strip() == "label":
        lab = df[feat_cols[-1]]
        if lab.isna().any() or not lab.isin([0, 1]).all():
            raise DataError(f"{path}: label column must hold only 0/1")
        labels = lab.to_numpy().astype(bool)
        feat_cols = feat_cols[:-1]
    if not feat_cols:
        raise DataError(f"{path}: no feature columns")
    try:
        feats = df[feat_cols].to_numpy(dtype=np.float64)
        ts = df[cols[0]].to_numpy(dtype=np.float64)
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric value ({exc})") from None
    if np.isnan(ts).any():
        raise DataError(f"{path}: missing timestamp")
    return PmuStream(ts, feats, labels, [c.strip() for c in feat_cols])


def _fmt(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


def write_csv(stream: PmuStream, path: str | Path) -> None:
    names = stream.feature_names or [f"f{i}" for i in range(stream.n_features)]
    header = ["timestamp", *names] + (["label"] if stream.labels is not None else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(stream)):
            row = [_fmt(stream.timestamps[i])] + [_fmt(v) for v in stream.features[i].tolist()]
            if stream.labels is not None:
                row.append("1" if stream.labels[i] else "0")
            w.writerow(row)


def _fit_time() -> float:
    # SOURCE_DATE_EPOCH pins the stamp so reruns write byte-identical stats
    pinned = os.environ.get("SOURCE_DATE_EPOCH")
    return float(pinned) if pinned else time.time()


@dataclass
class PreprocessStats:
    """Per-feature preprocessing parameters fitted on a training split."""

    mean: np.ndarray
    variance: np.ndarray
    apply_log: np.ndarray
    impute_value: np.ndarray
    train_min: np.ndarray
    split_id: str = "train"
    fitted_at: float = field(default_factory=lambda: _fit_time())

    @property
    def n_features(self) -> int:
        return len(self.mean)

    @property
    def zero_variance(self) -> np.ndarray:
        return self.variance == 0.0

    @property
    def scale(self) -> np.ndarray:
        """Standard deviation, with 1 substituted for zero-variance features."""
        return np.where(self.zero_variance, 1.0, np.sqrt(self.variance))

    def to_dict(self) -> dict:
        features = [
            {
                "index": i,
                "mean": float(self.mean[i]),
                "variance": float(self.variance[i]),
                "apply_log": bool(self.apply_log[i]),
                "impute_value": float(self.impute_value[i]),
                "train_min": float(self.train_min[i]),
            }
            for i in range(self.n_features)
        ]
        return {"split_id": self.split_id, "fitted_at": self.fitted_at, "features": features}

    @classmethod
    def from_dict(cls, doc: dict) -> "PreprocessStats":
        try:
            feats = sorted(doc["features"], key=lambda r: r["index"])
            return cls(
                mean=np.array([r["mean"] for r in feats], dtype=np.float64),
                variance=np.array([r["variance"] for r in feats], dtype=np.float64),
                apply_log=np.array([r["apply_log"] for r in feats], dtype=bool),
                impute_value=np.array([r["impute_value"] for r in feats], dtype=np.float64),
                train_min=np.array(
                    [r.get("train_min", r["impute_value"]) for r in feats], dtype=np.float64
                ),
                split_id=doc.get("split_id", "train"),
                fitted_at=doc.get("fitted_at", 0.0),
            )
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed preprocessing stats: {exc}") from None

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "PreprocessStats":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read stats {path}: {exc}") from None


def _raw(stream) -> np.ndarray:
    return stream.features if isinstance(stream, PmuStream) else np.asarray(stream, dtype=np.float64)


def impute_missing(raw_stream, stats: PreprocessStats):
    """Replace missing cells with the training mean of their feature.

    Accepts a :class:`PmuStream` or a raw ``N x F`` array and returns the same kind.
    """
    x = _raw(raw_stream)
    if x.shape[1] != stats.n_features:
        raise DataError(f"stream has {x.shape[1]} features, stats expect {stats.n_features}")
    mask = np.isnan(x)
    out = np.where(mask, stats.impute_value[None, :], x) if mask.any() else x.copy()
    if isinstance(raw_stream, PmuStream):
        return PmuStream(raw_stream.timestamps, out, raw_stream.labels, raw_stream.feature_names)
    return out


def fit_preprocess(training_stream, split_id: str = "train") -> PreprocessStats:
    """Fit log flags, impute values and z-score moments on training data only."""
    x = _raw(training_stream)
    if x.ndim != 2 or x.shape[0] == 0:
        raise DataError("cannot fit preprocessing on an empty training stream")
    missing = np.isnan(x)
    frac = missing.mean(axis=0)
    bad = np.flatnonzero(frac > MAX_MISSING_FRACTION)
    if bad.size:
        raise DataError(
            f"features {bad.tolist()} are missing in more than "
            f"{MAX_MISSING_FRACTION:.0%} of training rows"
        )
    with np.errstate(all="ignore"):
        impute = np.nanmean(x, axis=0)
        lo = np.nanmin(x, axis=0)
        hi = np.nanmax(x, axis=0)
    apply_log = (lo > LOG_MIN) & (hi > LOG_MAX)
    filled = np.where(missing, impute[None, :], x)
    filled[:, apply_log] = np.log1p(filled[:, apply_log])
    mean = filled.mean(axis=0)
    var = filled.var(axis=0)
    # Exactly-constant columns get variance 0 so they can be excluded downstream.
    const = filled.max(axis=0) == filled.min(axis=0)
    var = np.where(const, 0.0, var)
    return PreprocessStats(
        mean=mean, variance=var, apply_log=apply_log, impute_value=impute,
        train_min=lo, split_id=split_id,
    )


def apply_preprocess(frames, stats: PreprocessStats) -> np.ndarray:
    """Impute, selectively log-compress and standardise frames.

    ``frames`` may be one feature vector, an ``N x F`` array or a
    :class:`PmuStream`; rows are transformed independently.
    """
    x = _raw(frames)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != stats.n_features:
        raise DataError(f"frame has {x.shape[1]} features, stats expect {stats.n_features}")
    x = impute_missing(x, stats)
    flagged = stats.apply_log
    if flagged.any():
        sub = x[:, flagged]
        bad = sub <= -1.0
        if bad.any():
            cols = np.flatnonzero(flagged)[np.any(bad, axis=0)]
            logger.warning(
                "log-compressed features %s received values <= -1; clamping to training minimum",
                cols.tolist(),
            )
            sub = np.where(bad, stats.train_min[flagged][None, :], sub)
        x[:, flagged] = np.log1p(sub)
    out = (x - stats.mean) / stats.scale
    return out[0] if single else out


@dataclass
class PmuWindow:
    data: np.ndarray
    start_index: int
    label: bool


def window_count(n_frames: int, T: int, stride: int) -> int:
    return 0 if n_frames < T else (n_frames - T) // stride + 1


def _check_window_args(T: int, stride: int) -> None:
    if T < 1 or stride < 1:
        raise ConfigError(f"window length and stride must be >= 1 (got T={T}, stride={stride})")


def window_array(x: np.ndarray, T: int, stride: int) -> np.ndarray:
    """Return an ``n x T x F`` array of sliding windows (copy)."""
    _check_window_args(T, stride)
    n = window_count(len(x), T, stride)
    if n == 0:
        return np.empty((0, T) + x.shape[1:])
    view = np.lib.stride_tricks.sliding_window_view(x, T, axis=0)[::stride][:n]
    return np.ascontiguousarray(np.moveaxis(view, -1, 1))


def window_labels(labels: np.ndarray | None, n_frames: int, T: int, stride: int) -> np.ndarray:
    n = window_count(n_frames, T, stride)
    if labels is None:
        return np.zeros(n, dtype=bool)
    # prefix sums of anomalous frames give the OR over each window
    cs = np.concatenate([[0], np.cumsum(np.asarray(labels, dtype=np.int64))])
    starts = np.arange(n) * stride
    return (cs[starts + T] - cs[starts]) > 0


def make_windows(stream, T: int, stride: int, labels: np.ndarray | None = None) -> list[PmuWindow]:
    """Slice a (preprocessed) stream into labelled windows.

    Window ``i`` covers frames ``[i*stride, i*stride + T)`` and is positive
    when any frame inside it is labelled anomalous.
    """
    _check_window_args(T, stride)
    if isinstance(stream, PmuStream):
        labels = stream.labels if labels is None else labels
        x = stream.features
    else:
        x = np.asarray(stream, dtype=np.float64)
    if len(x) < T:
        logger.warning("stream of %d frames is shorter than window length %d", len(x), T)
        return []
    data = window_array(x, T, stride)
    labs = window_labels(labels, len(x), T, stride)
    return [PmuWindow(data[i], i * stride, bool(labs[i])) for i in range(len(data))]


def stack_windows(windows: Sequence[PmuWindow]) -> np.ndarray:
    return np.stack([w.data for w in windows]) if windows else np.empty((0, 0, 0))
