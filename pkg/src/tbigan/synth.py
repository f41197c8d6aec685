"""Synthetic PMU streams with scheduled anomaly segments.

Each PMU reports fourteen variables per frame: three-phase voltage magnitudes,
three-phase current magnitudes, the six matching phase angles, frequency and
ROCOF. Normal behaviour is a shared slow load profile, two electromechanical
oscillation modes with per-PMU participation, a small linear drift, and
Gaussian measurement noise sized to a target SNR per channel group.

Config files are plain ``key = value`` text; ``anomaly`` and
``train_anomaly`` may repeat::

    pmus = 8
    rate_hz = 30
    duration_s = 300          # training portion
    test_duration_s = 120     # appended test portion (0 = none)
    snr_db.voltage = 47
    snr_db.current = 47
    snr_db.frequency = 75
    anomaly = 10, 12, step, pmu=3, magnitude=0.03
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import PmuStream
from .errors import ConfigError

VARIABLES = (
    "va_mag", "vb_mag", "vc_mag",
    "ia_mag", "ib_mag", "ic_mag",
    "va_ang", "vb_ang", "vc_ang",
    "ia_ang", "ib_ang", "ic_ang",
    "freq", "rocof",
)
N_VARS = len(VARIABLES)
V_MAG, I_MAG, V_ANG, I_ANG = slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 12)
FREQ, ROCOF = 12, 13
# channel index -> SNR group
GROUPS = ("voltage",) * 3 + ("current",) * 3 + ("voltage",) * 3 + ("current",) * 3 + ("frequency", "rocof")
ANOMALY_KINDS = ("step", "frequency", "dropout", "oscillation")
DEFAULT_MAGNITUDE = {"step": 0.02, "frequency": 0.1, "dropout": 0.0, "oscillation": 0.02}
PHASE_SHIFT = np.array([0.0, -2.0 * math.pi / 3.0, 2.0 * math.pi / 3.0])


@dataclass
class AnomalySegment:
    start_s: float
    end_s: float
    kind: str
    pmu: int | None = None
    magnitude: float | None = None

    def frames(self, rate_hz: float, offset_s: float = 0.0) -> tuple[int, int]:
        a = int(round((self.start_s + offset_s) * rate_hz))
        b = int(round((self.end_s + offset_s) * rate_hz))
        return a, b


@dataclass
class SynthConfig:
    pmus: int = 8
    rate_hz: float = 30.0
    duration_s: float = 60.0
    test_duration_s: float = 0.0
    snr_db: dict = field(
        default_factory=lambda: {"voltage": 47.0, "current": 47.0, "frequency": 75.0, "rocof": 75.0}
    )
    anomalies: list[AnomalySegment] = field(default_factory=list)
    train_anomalies: list[AnomalySegment] = field(default_factory=list)
    load_amplitude: float = 0.08
    drift_per_min: float = 0.005
    mode_hz: tuple[float, float] = (0.35, 1.1)

    @property
    def channels(self) -> int:
        return self.pmus * N_VARS

    def validate(self) -> None:
        if self.pmus < 1:
            raise ConfigError("pmus must be >= 1")
        if self.rate_hz <= 0 or self.duration_s <= 0 or self.test_duration_s < 0:
            raise ConfigError("rate_hz and duration_s must be positive, test_duration_s >= 0")
        for name, segs, limit in (
            ("anomaly", self.anomalies, self.test_duration_s or self.duration_s),
            ("train_anomaly", self.train_anomalies, self.duration_s),
        ):
            ordered = sorted(segs, key=lambda s: s.start_s)
            for s in ordered:
                if s.kind not in ANOMALY_KINDS:
                    raise ConfigError(f"{name}: unknown kind '{s.kind}' (expected {ANOMALY_KINDS})")
                if not 0 <= s.start_s < s.end_s <= limit:
                    raise ConfigError(
                        f"{name} [{s.start_s}, {s.end_s}] outside stream of {limit} s"
                    )
                if s.pmu is not None and not 0 <= s.pmu < self.pmus:
                    raise ConfigError(f"{name}: pmu {s.pmu} out of range")
            for a, b in zip(ordered, ordered[1:]):
                if b.start_s < a.end_s:
                    raise ConfigError(
                        f"overlapping {name} segments [{a.start_s}, {a.end_s}] and "
                        f"[{b.start_s}, {b.end_s}]"
                    )


def _parse_segment(value: str) -> AnomalySegment:
    parts = [p.strip() for p in value.split(",") if p.strip()]
    if len(parts) < 3:
        raise ConfigError(f"anomaly needs 'start_s, end_s, kind', got '{value}'")
    try:
        seg = AnomalySegment(float(parts[0]), float(parts[1]), parts[2].lower())
        for extra in parts[3:]:
            k, _, v = extra.partition("=")
            k = k.strip()
            if k == "pmu":
                seg.pmu = int(v)
            elif k == "magnitude":
                seg.magnitude = float(v)
            else:
                raise ConfigError(f"unknown anomaly option '{k}'")
    except ValueError as exc:
        raise ConfigError(f"bad anomaly spec '{value}': {exc}") from None
    return seg


def parse_synth_config(text: str) -> SynthConfig:
    cfg = SynthConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got '{raw.strip()}'")
        key, value = key.strip(), value.strip()
        try:
            if key == "anomaly":
                cfg.anomalies.append(_parse_segment(value))
            elif key == "train_anomaly":
                cfg.train_anomalies.append(_parse_segment(value))
            elif key.startswith("snr_db."):
                cfg.snr_db[key.split(".", 1)[1]] = float(value)
            elif key == "snr_db":
                for grp in cfg.snr_db:
                    cfg.snr_db[grp] = float(value)
            elif key == "channels":
                ch = int(value)
                if ch % N_VARS:
                    raise ConfigError(f"channels must be a multiple of {N_VARS}, got {ch}")
                cfg.pmus = ch // N_VARS
            elif key == "pmus":
                cfg.pmus = int(value)
            elif key in ("rate_hz", "duration_s", "test_duration_s", "load_amplitude", "drift_per_min"):
                setattr(cfg, key, float(value))
            elif key == "mode_hz":
                cfg.mode_hz = tuple(float(v) for v in value.split(","))
            else:
                raise ConfigError(f"line {lineno}: unknown key '{key}'")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"line {lineno}: bad value for '{key}': {exc}") from None
    cfg.validate()
    return cfg


def load_synth_config(path: str | Path) -> SynthConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read synth config {path}: {exc}") from None
    return parse_synth_config(text)


def feature_names(pmus: int) -> list[str]:
    return [f"pmu{p}_{v}" for p in range(pmus) for v in VARIABLES]


@dataclass
class SynthResult:
    stream: PmuStream
    clean: np.ndarray
    segments: list[tuple[int, int, str, int]]  # (start_frame, end_frame, kind, pmu)
    train_frames: int

    def split(self) -> tuple[PmuStream, PmuStream]:
        n = self.train_frames
        return self.stream.slice(0, n), self.stream.slice(n, len(self.stream))


def _wrap_angle(a: np.ndarray) -> np.ndarray:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def synth_stream(config: SynthConfig, seed: int) -> SynthResult:
    """Generate a labelled stream: training portion followed by the test portion."""
    config.validate()
    rng = np.random.default_rng(seed)
    rate = config.rate_hz
    n_train = int(round(config.duration_s * rate))
    n = n_train + int(round(config.test_duration_s * rate))
    P = config.pmus
    t = np.arange(n) / rate

    # shared operating-point profile: slow load cycles plus a linear drift
    periods = np.array([90.0, 210.0, 470.0])
    amps = config.load_amplitude * rng.uniform(0.5, 1.0, size=3)
    phases = rng.uniform(0, 2 * math.pi, size=3)
    load = (amps[:, None] * np.sin(2 * math.pi * t[None, :] / periods[:, None] + phases[:, None])).sum(0)
    load += config.drift_per_min * t / 60.0

    # electromechanical modes with slowly varying ambient amplitude
    modes = []
    for f_m in config.mode_hz:
        env = 1.0 + 0.3 * np.sin(2 * math.pi * t / rng.uniform(40, 80) + rng.uniform(0, 2 * math.pi))
        modes.append((f_m, env))

    v0 = rng.uniform(1.2e5, 3.0e5, size=P)
    i0 = rng.uniform(400.0, 1500.0, size=P)
    d0 = rng.uniform(-0.4, 0.4, size=P)
    pf = rng.uniform(0.1, 0.4, size=P)
    share = rng.uniform(0.5, 1.5, size=P)
    imbalance = rng.uniform(-0.003, 0.003, size=(P, 3))
    part = rng.uniform(0.2, 1.0, size=(P, len(modes)))
    mphase = rng.uniform(0, 2 * math.pi, size=(P, len(modes)))

    freq_sys = 60.0 - 0.5 * load
    clean = np.empty((n, P, N_VARS))
    for p in range(P):
        osc = np.zeros(n)
        for m, (f_m, env) in enumerate(modes):
            osc += part[p, m] * env * np.sin(2 * math.pi * f_m * t + mphase[p, m])
        osc /= len(modes)
        v_rel = 1.0 - 0.3 * share[p] * load + 0.003 * osc
        i_rel = 1.0 + share[p] * load + 0.01 * osc
        delta = d0[p] - 0.5 * share[p] * load + 0.02 * osc
        clean[:, p, V_MAG] = v0[p] * (1.0 + imbalance[p])[None, :] * v_rel[:, None]
        clean[:, p, I_MAG] = i0[p] * (1.0 + 2 * imbalance[p])[None, :] * i_rel[:, None]
        clean[:, p, V_ANG] = delta[:, None] + PHASE_SHIFT[None, :]
        clean[:, p, I_ANG] = (delta - pf[p] - 0.2 * share[p] * load)[:, None] + PHASE_SHIFT[None, :]
        clean[:, p, FREQ] = freq_sys + 0.005 * osc

    segments: list[tuple[int, int, str, int]] = []
    labels = np.zeros(n, dtype=bool)
    dropouts = []
    # without a test portion, ``anomaly`` times refer to the single stream
    test_offset = config.duration_s if config.test_duration_s > 0 else 0.0
    schedule = [(s, 0.0) for s in config.train_anomalies] + [(s, test_offset) for s in config.anomalies]
    for seg, offset in schedule:
        a, b = seg.frames(rate, offset)
        b = min(b, n)
        pmu = seg.pmu if seg.pmu is not None else int(rng.integers(P))
        mag = seg.magnitude if seg.magnitude is not None else DEFAULT_MAGNITUDE[seg.kind]
        labels[a:b] = True
        segments.append((a, b, seg.kind, pmu))
        tt = t[a:b] - t[a]
        if seg.kind == "step":
            clean[a:b, pmu, V_MAG] *= 1.0 - mag
            clean[a:b, pmu, I_MAG] *= 1.0 + 2.0 * mag
            clean[a:b, pmu, V_ANG] -= 2.0 * mag
            clean[a:b, pmu, I_ANG] -= 3.0 * mag
        elif seg.kind == "frequency":
            dur = max(t[b - 1] - t[a], 1.0 / rate)
            clean[a:b, :, FREQ] -= mag * np.sin(math.pi * tt / dur)[:, None]
        elif seg.kind == "oscillation":
            ramp = np.clip(np.minimum(tt, tt[-1] - tt) / 0.5, 0.0, 1.0)
            burst = ramp * np.sin(2 * math.pi * 1.6 * tt)
            clean[a:b, pmu, V_MAG] *= (1.0 + mag * burst)[:, None]
            clean[a:b, pmu, I_MAG] *= (1.0 + 2.0 * mag * burst)[:, None]
            clean[a:b, pmu, V_ANG] += (mag * burst)[:, None]
            clean[a:b, pmu, FREQ] += 0.5 * mag * burst
        elif seg.kind == "dropout":
            dropouts.append((a, b, pmu))

    clean[:, :, ROCOF] = np.gradient(clean[:, :, FREQ], axis=0) * rate
    clean[:, :, V_ANG] = _wrap_angle(clean[:, :, V_ANG])
    clean[:, :, I_ANG] = _wrap_angle(clean[:, :, I_ANG])

    # noise scaled on the anomaly-free reference so anomalies don't change SNR
    ref = clean[~labels] if (~labels).any() else clean
    power = np.mean(ref**2, axis=0)
    snr = np.array([config.snr_db.get(g, 47.0) for g in GROUPS])
    sigma = np.sqrt(power / 10.0 ** (snr[None, :] / 10.0))
    noisy = clean + rng.standard_normal(clean.shape) * sigma[None, :, :]
    for a, b, pmu in dropouts:
        noisy[a:b, pmu, :] = 0.0
        clean[a:b, pmu, :] = 0.0

    stream = PmuStream(
        t, noisy.reshape(n, P * N_VARS), labels, feature_names(P)
    )
    return SynthResult(stream, clean.reshape(n, P * N_VARS), segments, n_train)
