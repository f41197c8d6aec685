"""Command-line entry point: ``tbigan {synth,train,score,evaluate,search}``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical failure.
Every command writes into a run directory ``<out>/<command>-<config hash>-<timestamp>``
unless ``--exact-out`` is given, in which case ``--out`` is used as-is.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import metrics as mx
from .data import PmuStream, PreprocessStats, apply_preprocess, fit_preprocess, read_csv, window_array, window_labels, write_csv
from .detection import FeatureWeights, fit_weights, read_trace_csv, score_stream, write_trace_csv
from .errors import ConfigError, DataError, TBiGanError, TrainingDivergedError
from .model import ModelConfig, TBiGAN, load_checkpoint, save_checkpoint
from .synth import load_synth_config, synth_stream
from .training import SEARCH_SPACE, TrainConfig, hyperparam_search, train, write_loss_history

logger = logging.getLogger("tbigan")

U64_MAX = 2**64 - 1


@dataclass
class DetectionConfig:
    alpha: float = 0.6
    gamma: float = 1.0
    k: int = 300
    c: float = 3.0
    ddof: int = 0
    quarantine: bool = False


@dataclass
class DataConfig:
    train_stride: int = 16
    score_stride: int = 1
    val_fraction: float = 0.3


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        allowed = {"model", "train", "detection", "data", "seed"}
        unknown = set(doc) - allowed
        if unknown:
            raise ConfigError(f"unknown run config sections: {sorted(unknown)}")
        try:
            cfg = cls(
                model=ModelConfig.from_dict(doc.get("model", {})),
                train=TrainConfig.from_dict(doc.get("train", {})),
                detection=_plain(DetectionConfig, doc.get("detection", {})),
                data=_plain(DataConfig, doc.get("data", {})),
                seed=int(doc.get("seed", 0)),
            )
        except TypeError as exc:
            raise ConfigError(f"bad run config: {exc}") from None
        cfg.validate()
        return cfg

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        if not 0 <= self.seed <= U64_MAX:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        d = self.detection
        if not 0.0 <= d.alpha <= 1.0 or d.gamma < 0:
            raise ConfigError("detection needs alpha in [0, 1] and gamma >= 0")
        if d.k < 2:
            raise ConfigError(f"threshold window k must be >= 2, got {d.k}")
        if self.data.train_stride < 1 or self.data.score_stride < 1:
            raise ConfigError("strides must be >= 1")
        if not 0.0 < self.data.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in (0, 1)")

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def _plain(cls, doc: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**doc)


def load_run_config(path: str | None, seed: int | None) -> RunConfig:
    if path is None:
        cfg = RunConfig()
    else:
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        cfg = RunConfig.from_dict(doc)
    if seed is not None:
        cfg.seed = seed
    cfg.train.seed = cfg.seed
    cfg.validate()
    return cfg


def run_dir(args, command: str, digest: str) -> Path:
    out = Path(args.out)
    if not args.exact_out:
        stamp = time.strftime("%Y%m%dT%H%M%S")
        out = out / f"{command}-{digest}-{stamp}"
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from None
    return out


def _digest_of(*parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()[:12]


# -- commands ----------------------------------------------------------------
def cmd_synth(args) -> int:
    cfg = load_synth_config(args.config) if args.config else None
    if cfg is None:
        raise ConfigError("synth needs --config <key=value file>")
    seed = args.seed or 0
    out = run_dir(args, "synth", _digest_of(Path(args.config).read_text(), seed))
    res = synth_stream(cfg, seed)
    train_s, test_s = res.split()
    write_csv(train_s, out / "train.csv")
    written = ["train.csv"]
    if len(test_s):
        write_csv(test_s, out / "test.csv")
        written.append("test.csv")
    print(f"wrote {', '.join(written)} to {out} ({len(train_s)} train rows, {len(test_s)} test rows)")
    print(f"{len(res.segments)} anomaly segments")
    for a, b, kind, pmu in res.segments:
        part = "train" if a < res.train_frames else "test"
        off = 0 if part == "train" else res.train_frames
        print(f"  {part} frames [{a - off}, {b - off}) {kind} pmu={pmu}")
    return 0


def _normal_windows(stream: PmuStream, x: np.ndarray, T: int, stride: int) -> np.ndarray:
    w = window_array(x, T, stride)
    if stream.labels is not None and len(w):
        keep = ~window_labels(stream.labels, len(x), T, stride)
        w = w[keep]
    if len(w) == 0:
        raise DataError(f"training stream yields no normal windows of length {T}")
    return w


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    stream = read_csv(args.train_csv)
    if cfg.model.feature_dim != stream.n_features:
        logger.info("feature_dim set from data: %d", stream.n_features)
        cfg.model.feature_dim = stream.n_features
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    cfg.validate()
    out = run_dir(args, "train", cfg.digest())

    stats = fit_preprocess(stream, split_id=Path(args.train_csv).name)
    x = apply_preprocess(stream, stats)
    T = cfg.model.window_len
    windows = _normal_windows(stream, x, T, cfg.data.train_stride)
    validation = None
    if args.val_csv:
        vs = read_csv(args.val_csv)
        if vs.labels is None:
            raise DataError(f"{args.val_csv}: validation stream needs a label column")
        _check_features(vs.n_features, stats.n_features)
        vx = apply_preprocess(vs, stats)
        validation = (window_array(vx, T, cfg.data.score_stride),
                      window_labels(vs.labels, len(vx), T, cfg.data.score_stride))

    stats.save(out / "stats.json")
    (out / "run_config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    model = TBiGAN(cfg.model, seed=cfg.seed)
    try:
        result = train(model, windows, cfg.train, validation=validation,
                       alpha=cfg.detection.alpha, gamma=cfg.detection.gamma)
    except TrainingDivergedError as exc:
        (out / "diagnostic.json").write_text(json.dumps(
            {"error": str(exc), "snapshot": exc.snapshot, "run_config": cfg.to_dict()}, indent=1))
        raise
    save_checkpoint(model, out / "checkpoint.json", stats_ref="stats.json")
    fit_weights(windows).save(out / "weights.json")
    write_loss_history(result.history, out / "loss_history.csv")
    print(f"trained {result.epochs_run} epochs on {len(windows)} windows -> {out}")
    print(f"checkpoint sha256 {model.fingerprint()}")
    return 0


def _check_features(got: int, expected: int) -> None:
    if got != expected:
        raise DataError(f"stream has {got} features but the model expects {expected}")


def cmd_score(args) -> int:
    mdir = Path(args.model_dir)
    model, _ = load_checkpoint(mdir / "checkpoint.json")
    stats = PreprocessStats.load(mdir / "stats.json")
    weights = FeatureWeights.load(mdir / "weights.json")
    cfg_path = args.config or (mdir / "run_config.json")
    cfg = load_run_config(str(cfg_path) if Path(cfg_path).exists() else None, args.seed)
    stream = read_csv(args.stream)
    _check_features(stream.n_features, stats.n_features)
    _check_features(stream.n_features, model.config.feature_dim)
    det = cfg.detection
    x = apply_preprocess(stream, stats)
    T = model.config.window_len
    if len(x) < T:
        raise DataError(f"stream has {len(x)} frames, fewer than the window length {T}")
    out = run_dir(args, "score", _digest_of(cfg.to_dict(), str(args.stream), model.fingerprint()))
    rows = score_stream(model, weights, x, T, cfg.data.score_stride, det.alpha, det.gamma,
                        det.k, det.c, labels=stream.labels, ddof=det.ddof, quarantine=det.quarantine)
    write_trace_csv(rows, out / "trace.csv")
    thetas = np.array([r.theta for r in rows])
    finite = thetas[np.isfinite(thetas)]
    n_flag = sum(r.flag for r in rows)
    print(f"scored {len(rows)} windows -> {out / 'trace.csv'}")
    print(f"flags: {n_flag} ({n_flag / len(rows):.2%})")
    if finite.size:
        print(f"theta: min {finite.min():.6g} mean {finite.mean():.6g} max {finite.max():.6g} "
              f"(warm-up {len(thetas) - finite.size} windows)")
    else:
        print(f"theta: warm-up only ({len(thetas)} windows < k={det.k})")
    return 0


def _parse_confusion(text: str) -> mx.ConfusionMatrix:
    try:
        tn, fp, fn, tp = (int(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"--confusion expects TN,FP,FN,TP integers, got '{text}'") from None
    return mx.confusion_from_counts(tn, fp, fn, tp)


def _level_report(scores, labels, val_fraction, level, out: Path) -> dict:
    rep, _ = mx.evaluate_split(scores, labels, val_fraction, level)
    data = mx.ScoredLabels(scores, labels)
    if data.n_pos and data.n_neg:
        mx.write_roc_csv(mx.roc_curve(data), out / f"roc_{level}.csv")
    if data.n_pos:
        mx.write_pr_csv(mx.pr_curve(data), out / f"pr_{level}.csv")
    return rep


def cmd_evaluate(args) -> int:
    if args.confusion:
        cm = _parse_confusion(args.confusion)
        doc = {"confusion": cm.as_dict(), "tpr": cm.tpr, "fpr": cm.fpr,
               "precision": cm.precision, "f1": cm.f1}
        if args.out:
            out = run_dir(args, "evaluate", _digest_of(args.confusion))
            (out / "report.json").write_text(json.dumps(doc, indent=1))
        print(f"TPR={_fmt3(cm.tpr)} FPR={_fmt3(cm.fpr)} precision={_fmt3(cm.precision)} F1={_fmt3(cm.f1)}")
        return 0
    if not args.trace:
        raise ConfigError("evaluate needs --trace <trace.csv> or --confusion TN,FP,FN,TP")
    if not args.out:
        raise ConfigError("evaluate --trace needs --out <dir>")
    cfg = load_run_config(args.config, args.seed)
    rows = read_trace_csv(args.trace)
    if not rows:
        raise DataError(f"{args.trace} holds no scored windows")
    if any(r.label is None for r in rows):
        raise DataError("trace has no labels; score a labelled stream (CSV with a 'label' column) first")
    scores = np.array([r.total for r in rows])
    labels = np.array([r.label for r in rows], dtype=bool)
    out = run_dir(args, "evaluate", _digest_of(cfg.to_dict(), str(args.trace), str(args.stream)))
    vf = cfg.data.val_fraction
    report = {"window": _level_report(scores, labels, vf, "window", out)}
    if args.stream:
        stream = read_csv(args.stream)
        if stream.labels is None:
            raise DataError(f"{args.stream}: frame-level evaluation needs a label column")
        starts = np.array([r.window_start for r in rows])
        fs = mx.frame_scores(scores, starts, len(stream), cfg.model.window_len)
        covered = np.isfinite(fs)
        report["frame"] = _level_report(fs[covered], stream.labels[covered], vf, "frame", out)
    (out / "report.json").write_text(json.dumps(report, indent=1))
    w = report["window"]
    print(f"window level: AUC={_fmt3(w['auc'])} AP={_fmt3(w['ap'])} F1={_fmt3(w['f1'])} "
          f"threshold={w['threshold']:.6g} -> {out / 'report.json'}")
    if "frame" in report:
        f = report["frame"]
        print(f"frame level: AUC={_fmt3(f['auc'])} AP={_fmt3(f['ap'])} F1={_fmt3(f['f1'])}")
    return 0


def _fmt3(v) -> str:
    return "n/a" if v is None else f"{v:.3f}"


def cmd_search(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    stream = read_csv(args.train_csv)
    vs = read_csv(args.val_csv)
    if vs.labels is None:
        raise DataError(f"{args.val_csv}: validation stream needs a label column")
    _check_features(vs.n_features, stream.n_features)
    cfg.model.feature_dim = stream.n_features
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    cfg.validate()
    out = run_dir(args, "search", cfg.digest())
    stats = fit_preprocess(stream)
    T = cfg.model.window_len
    windows = _normal_windows(stream, apply_preprocess(stream, stats), T, cfg.data.train_stride)
    vx = apply_preprocess(vs, stats)
    validation = (window_array(vx, T, cfg.data.score_stride),
                  window_labels(vs.labels, len(vx), T, cfg.data.score_stride))
    res = hyperparam_search(SEARCH_SPACE, args.trials, validation, windows,
                            n_settings=args.settings, model_config=cfg.model, train_config=cfg.train,
                            alpha=cfg.detection.alpha, gamma=cfg.detection.gamma, seed=cfg.seed,
                            log_path=out / "trials.csv")
    best = RunConfig(res.model_config, res.train_config, DetectionConfig(**{**asdict(cfg.detection), "alpha": res.alpha}),
                     cfg.data, cfg.seed)
    (out / "best_config.json").write_text(json.dumps(best.to_dict(), indent=1, sort_keys=True))
    print(f"best setting {res.best}: AP={res.best_ap:.4f} AUC={res.best_auc:.4f} -> {out}")
    return 0


# -- parser ------------------------------------------------------------------
class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _seed(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text}") from None
    if not 0 <= v <= U64_MAX:
        raise argparse.ArgumentTypeError(f"seed must fit in an unsigned 64-bit integer: {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tbigan", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="config file")
        sp.add_argument("--seed", type=_seed, default=None, help="unsigned 64-bit seed")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--exact-out", action="store_true",
                        help="write into --out directly instead of a per-run subdirectory")

    sp = sub.add_parser("synth", help="generate synthetic train/test PMU streams")
    common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="fit preprocessing and train a model")
    common(sp)
    sp.add_argument("--train-csv", required=True)
    sp.add_argument("--val-csv", help="labelled stream for early stopping")
    sp.add_argument("--epochs", type=int, help="override train.epochs")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("score", help="score a stream with a trained model")
    common(sp)
    sp.add_argument("--model-dir", required=True, help="directory written by 'train'")
    sp.add_argument("--stream", required=True)
    sp.set_defaults(func=cmd_score)

    sp = sub.add_parser("evaluate", help="metrics report from a labelled score trace")
    common(sp, out_required=False)
    sp.add_argument("--trace", help="trace CSV written by 'score'")
    sp.add_argument("--stream", help="labelled stream CSV for frame-level metrics")
    sp.add_argument("--confusion", metavar="TN,FP,FN,TP", help="report rates for given counts")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("search", help="random hyperparameter search")
    common(sp)
    sp.add_argument("--train-csv", required=True)
    sp.add_argument("--val-csv", required=True)
    sp.add_argument("--settings", type=int, default=8, help="number of sampled settings")
    sp.add_argument("--trials", type=int, default=5, help="seeds per setting")
    sp.add_argument("--epochs", type=int, help="override train.epochs")
    sp.set_defaults(func=cmd_search)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TBiGanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
