"""BiGAN losses, Adam, the alternating training loop and random search."""

from __future__ import annotations

import contextlib
import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as tn
from .errors import ConfigError, ContractError, ShapeError, TrainingDivergedError
from .model import ModelConfig, TBiGAN
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 3e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 64
    epochs: int = 50
    lambda_rec: float = 10.0
    lambda_z: float = 1.0
    label_smooth: float = 0.9
    grad_penalty: float = 0.0
    enc_adv_weight: float = 0.0
    d_steps: int = 1
    grad_clip: float | None = None
    patience: int = 10
    seed: int = 0

    def validate(self) -> None:
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0 or self.d_steps < 1:
            raise ConfigError("lr > 0, batch_size >= 1, epochs >= 0 and d_steps >= 1 required")
        if not 0.5 < self.label_smooth <= 1.0:
            raise ConfigError(f"label_smooth must lie in (0.5, 1], got {self.label_smooth}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.grad_penalty < 0 or self.lambda_rec < 0 or self.lambda_z < 0:
            raise ConfigError("loss weights must be non-negative")

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        cfg = cls(**doc)
        cfg.validate()
        return cfg


@dataclass
class LossRecord:
    epoch: int
    L_D: float
    L_adv: float
    L_rec: float
    L_latent: float
    L_EG: float

    def finite(self) -> bool:
        return all(math.isfinite(v) for v in (self.L_D, self.L_adv, self.L_rec, self.L_latent, self.L_EG))


@contextlib.contextmanager
def frozen(params: Iterable[Tensor]):
    """Temporarily stop gradients flowing into ``params``."""
    params = list(params)
    prev = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, prev):
            p.requires_grad = flag


def bce_with_logits(logits: Tensor, target: float) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against a constant target."""
    return (tn.softplus(logits) - logits * float(target)).mean()


# -- losses ------------------------------------------------------------------
def loss_reconstruction(x, x_hat) -> Tensor:
    x, x_hat = tn.as_tensor(x), tn.as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise ShapeError(f"reconstruction shapes differ: {x.shape} vs {x_hat.shape}")
    return tn.tabs(x - x_hat).mean()


def latent_distance(e1, e2) -> Tensor:
    """Batch mean of squared L2 distance between codes (last axis)."""
    d = tn.as_tensor(e1) - tn.as_tensor(e2)
    sq = (d * d).sum(axis=-1)
    return sq.mean() if sq.ndim else sq


def loss_latent(encoder, x, x_hat) -> Tensor:
    return latent_distance(encoder(x_hat), encoder(x))


def loss_discriminator(disc, real_pairs, fake_pairs, smooth: float = 0.9) -> Tensor:
    """BCE of D on real ``(x, E(x))`` against ``smooth`` plus fake ``(G(z), z)`` against 0.

    Pair members are treated as constants.
    """
    xr, zr = (tn.as_tensor(t).detach() for t in real_pairs)
    xf, zf = (tn.as_tensor(t).detach() for t in fake_pairs)
    return bce_with_logits(disc.logits(xr, zr), smooth) + bce_with_logits(disc.logits(xf, zf), 0.0)


def loss_encoder_generator(model, x, z, lambda_rec: float = 10.0, lambda_z: float = 1.0,
                           enc_adv_weight: float = 0.0) -> tuple[Tensor, dict[str, Tensor]]:
    """Combined encoder/generator objective; D parameters receive no gradient.

    Adversarial part: ``BCE(D(G(z), z), 1) + enc_adv_weight * BCE(D(x, E(x)), 0)``.
    """
    x, z = tn.as_tensor(x), tn.as_tensor(z)
    with frozen(model.d_parameters()):
        ex = model.encode(x)
        x_hat = model.generate(ex)
        rec = loss_reconstruction(x, x_hat)
        lat = latent_distance(model.encode(x_hat), ex)
        adv = bce_with_logits(model.discriminate_logits(model.generate(z), z), 1.0)
        if enc_adv_weight:
            adv = adv + bce_with_logits(model.discriminate_logits(x, ex), 0.0) * enc_adv_weight
        total = adv + rec * lambda_rec + lat * lambda_z
    return total, {"adv": adv, "rec": rec, "latent": lat}


def _interpolate(real_pair, fake_pair, eps: np.ndarray):
    xr, zr = (np.asarray(tn.as_tensor(t).data) for t in real_pair)
    xf, zf = (np.asarray(tn.as_tensor(t).data) for t in fake_pair)
    ex = eps.reshape((-1,) + (1,) * (xr.ndim - 1))
    ez = eps.reshape((-1,) + (1,) * (zr.ndim - 1))
    return ex * xr + (1 - ex) * xf, ez * zr + (1 - ez) * zf


def critic_input_gradients(disc, x: np.ndarray, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample gradients of the D logit w.r.t. its (x, z) inputs."""
    xt = Tensor(x, requires_grad=True)
    zt = Tensor(z, requires_grad=True)
    params = disc.parameters() if hasattr(disc, "parameters") else []
    with frozen(params):
        out = disc.logits(xt, zt).sum()
    tn.backward(out)
    return xt.grad, zt.grad


def gradient_penalty(disc, real_pair, fake_pair, rng: np.random.Generator | None = None,
                     eps: np.ndarray | None = None) -> float:
    """Mean over the batch of ``(||grad_(x,z) D(x~, z~)||_2 - 1)^2`` at random interpolates.

    ``D`` here is the pre-sigmoid discriminator output.
    """
    n = tn.as_tensor(real_pair[0]).shape[0]
    if eps is None:
        eps = (rng or np.random.default_rng()).uniform(size=n)
    xi, zi = _interpolate(real_pair, fake_pair, eps)
    gx, gz = critic_input_gradients(disc, xi, zi)
    norms = np.sqrt((gx.reshape(n, -1) ** 2).sum(1) + (gz.reshape(n, -1) ** 2).sum(1))
    return float(((norms - 1.0) ** 2).mean())


def gradient_penalty_surrogate(disc, real_pair, fake_pair, eps: np.ndarray,
                               h: float = 1e-4) -> tuple[Tensor, float]:
    """Scalar whose parameter gradient approximates that of the gradient penalty.

    The penalty's parameter gradient needs mixed second derivatives. With the
    input gradient ``g_i`` held fixed it equals the parameter gradient of
    ``sum_i c_i * <g_i, grad_u D(u_i)>`` where ``c_i = 2 (|g_i| - 1) / (B |g_i|)``,
    and the inner directional derivative is taken by a central difference
    along ``g_i``. Returns ``(surrogate, penalty_value)``.
    """
    n = tn.as_tensor(real_pair[0]).shape[0]
    xi, zi = _interpolate(real_pair, fake_pair, eps)
    gx, gz = critic_input_gradients(disc, xi, zi)
    norms = np.sqrt((gx.reshape(n, -1) ** 2).sum(1) + (gz.reshape(n, -1) ** 2).sum(1))
    penalty = float(((norms - 1.0) ** 2).mean())
    safe = np.where(norms > 1e-12, norms, 1.0)
    coef = 2.0 * (norms - 1.0) / n
    ux = gx / safe.reshape((-1,) + (1,) * (gx.ndim - 1))
    uz = gz / safe.reshape((-1,) + (1,) * (gz.ndim - 1))
    xp = Tensor._wrap(np.concatenate([xi + h * ux, xi - h * ux]), "gp_x")
    zp = Tensor._wrap(np.concatenate([zi + h * uz, zi - h * uz]), "gp_z")
    out = disc.logits(xp, zp)
    diff = (out[:n] - out[n:]) * (1.0 / (2.0 * h))
    weights = Tensor._wrap(np.where(norms > 1e-12, coef, 0.0), "gp_coef")
    return (diff * weights).sum(), penalty


# -- Adam --------------------------------------------------------------------
@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros(p.shape) for p in params], [np.zeros(p.shape) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState,
              lr: float, beta1: float = 0.5, beta2: float = 0.999, eps: float = 1e-8) -> bool:
    """Bias-corrected Adam update in place. Returns False (no change) on non-finite grads."""
    grads = [np.zeros(p.shape) if g is None else g for p, g in zip(params, grads)]
    if not all(np.all(np.isfinite(g)) for g in grads):
        return False
    state.step += 1
    b1c = 1.0 - beta1**state.step
    b2c = 1.0 - beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / b1c) / (np.sqrt(v / b2c) + eps)
    return True


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 3e-4, beta1: float = 0.5,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState.for_params(self.params)
        self.skipped = 0

    def zero_grad(self) -> None:
        tn.zero_grad(self.params)

    def step(self, clip: float | None = None) -> bool:
        grads = [p.grad for p in self.params]
        if clip is not None:
            total = math.sqrt(sum(float((g * g).sum()) for g in grads if g is not None))
            if math.isfinite(total) and total > clip:
                grads = [None if g is None else g * (clip / total) for g in grads]
        ok = adam_step(self.params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)
        if not ok:
            self.skipped += 1
            logger.warning("skipped Adam step %d: non-finite gradient", self.state.step + 1)
        return ok


# -- training loop -----------------------------------------------------------
@dataclass
class TrainResult:
    model: TBiGAN
    history: list[LossRecord]
    epochs_run: int
    best_val_ap: float | None = None
    val_history: list[float] = field(default_factory=list)


def train(model: TBiGAN, windows: np.ndarray, config: TrainConfig,
          validation: tuple[np.ndarray, np.ndarray] | None = None,
          alpha: float = 0.6, gamma: float = 1.0,
          on_epoch: Callable[[LossRecord], None] | None = None) -> TrainResult:
    """Alternate one D update and one E/G update per batch (by default).

    ``windows`` is an ``n x T x F`` array of preprocessed normal windows.
    ``validation`` (windows, labels) enables early stopping on average precision.
    """
    config.validate()
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim != 3 or len(windows) == 0:
        raise ContractError(f"expected a non-empty n x T x F window array, got {windows.shape}")
    cfg = model.config
    clip = config.grad_clip
    if clip is None and not cfg.spectral_norm:
        clip = 5.0
    ss = np.random.SeedSequence(config.seed)
    s_shuffle, s_latent, s_drop, s_gp = ss.spawn(4)
    shuffle_rng = np.random.default_rng(s_shuffle)
    latent_rng = np.random.default_rng(s_latent)
    gp_rng = np.random.default_rng(s_gp)
    model.set_dropout_rng(np.random.default_rng(s_drop))

    opt_d = Adam(model.d_parameters(), config.lr, config.beta1, config.beta2)
    opt_eg = Adam(model.eg_parameters(), config.lr, config.beta1, config.beta2)
    history: list[LossRecord] = []
    val_history: list[float] = []
    best_ap, best_state, stale = -math.inf, None, 0
    weights = None
    if validation is not None:
        from .detection import fit_weights

        weights = fit_weights(windows)

    n = len(windows)
    epochs_run = 0
    for epoch in range(1, config.epochs + 1):
        model.train()
        order = shuffle_rng.permutation(n)
        sums = np.zeros(5)
        batches = 0
        for b0 in range(0, n, config.batch_size):
            idx = order[b0 : b0 + config.batch_size]
            xb = Tensor._wrap(windows[idx], "batch")
            zb = Tensor._wrap(latent_rng.standard_normal((len(idx), cfg.latent_dim)), "z")

            for _ in range(config.d_steps):
                with tn.no_grad():
                    ex = model.encode(xb)
                    xg = model.generate(zb)
                opt_d.zero_grad()
                with frozen(model.eg_parameters()):
                    # the penalty runs its own backward pass, so it must precede L_D on the tape
                    sur = None
                    if config.grad_penalty > 0:
                        eps = gp_rng.uniform(size=len(idx))
                        sur, _ = gradient_penalty_surrogate(model.discriminator, (xb, ex), (xg, zb), eps)
                    l_d = loss_discriminator(model.discriminator, (xb, ex), (xg, zb), config.label_smooth)
                    d_obj = l_d if sur is None else l_d + sur * config.grad_penalty
                tn.backward(d_obj)
                opt_d.step(clip)

            opt_eg.zero_grad()
            l_eg, parts = loss_encoder_generator(
                model, xb, zb, config.lambda_rec, config.lambda_z, config.enc_adv_weight
            )
            tn.backward(l_eg)
            opt_eg.step(clip)
            tn.get_tape().reset()

            vals = np.array([l_d.item(), parts["adv"].item(), parts["rec"].item(),
                             parts["latent"].item(), l_eg.item()])
            if not np.all(np.isfinite(vals)):
                snapshot = {"epoch": epoch, "batch": b0 // config.batch_size,
                            "losses": vals.tolist(), "history": [asdict(h) for h in history]}
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {b0 // config.batch_size}", snapshot
                )
            sums += vals
            batches += 1
        rec = LossRecord(epoch, *(sums / batches).tolist())
        history.append(rec)
        epochs_run = epoch
        if on_epoch:
            on_epoch(rec)
        logger.info("epoch %d: L_D=%.4f L_adv=%.4f L_rec=%.4f L_lat=%.4f L_EG=%.4f",
                    epoch, rec.L_D, rec.L_adv, rec.L_rec, rec.L_latent, rec.L_EG)

        if validation is not None:
            ap = _validation_ap(model, weights, validation, alpha, gamma)
            val_history.append(ap)
            if ap > best_ap:
                best_ap, best_state, stale = ap, (model.state_dict(), model.sn_buffers()), 0
            else:
                stale += 1
                if stale >= config.patience:
                    logger.info("early stop at epoch %d (best AP %.4f)", epoch, best_ap)
                    break

    if best_state is not None:
        model.load_state(*best_state)
    model.eval()
    return TrainResult(model, history, epochs_run,
                       None if validation is None else best_ap, val_history)


def _validation_ap(model, weights, validation, alpha, gamma) -> float:
    from .detection import combine, score_components
    from .metrics import ScoredLabels, pr_curve

    vw, vl = validation
    r, d, lat = score_components(model, weights, vw)
    return pr_curve(ScoredLabels(combine(r, d, lat, alpha, gamma), vl)).ap


# -- random search -----------------------------------------------------------
SEARCH_SPACE: dict = {
    "lr": (1e-5, 5e-4),
    "dropout": [0.0, 0.1, 0.2],
    "lambda_rec": [1.0, 5.0, 10.0, 25.0],
    "lambda_z": [0.0, 0.5, 1.0, 2.0],
    "alpha": [0.4, 0.6, 0.8],
    "label_smooth": [1.0, 0.9],
    "spectral_norm": [False, True],
    "grad_penalty": [0.0, 10.0],
}
MODEL_KEYS = {f.name for f in fields(ModelConfig)}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


@dataclass
class Trial:
    setting: int
    trial: int
    seed: int
    params: dict
    val_ap: float
    val_auc: float
    epochs_run: int
    wall_time: float


@dataclass
class SearchResult:
    best: dict
    model_config: ModelConfig
    train_config: TrainConfig
    alpha: float
    best_ap: float
    best_auc: float
    trials: list[Trial]


def sample_setting(space: dict, rng: np.random.Generator) -> dict:
    """Draw one setting: tuples are uniform ranges, lists are uniform choices."""
    out = {}
    for key in sorted(space):
        spec = space[key]
        if isinstance(spec, tuple):
            lo, hi = spec
            out[key] = float(lo) if lo == hi else float(rng.uniform(lo, hi))
        else:
            if len(spec) == 0:
                raise ConfigError(f"search dimension '{key}' is empty")
            out[key] = spec[int(rng.integers(len(spec)))]
    return out


def apply_setting(setting: dict, model_cfg: ModelConfig, train_cfg: TrainConfig,
                  alpha: float) -> tuple[ModelConfig, TrainConfig, float]:
    m = {k: v for k, v in setting.items() if k in MODEL_KEYS}
    t = {k: v for k, v in setting.items() if k in TRAIN_KEYS}
    unknown = set(setting) - MODEL_KEYS - TRAIN_KEYS - {"alpha"}
    if unknown:
        raise ConfigError(f"unknown search keys {sorted(unknown)}")
    return replace(model_cfg, **m), replace(train_cfg, **t), float(setting.get("alpha", alpha))


def _default_evaluate(train_windows, validation, model_cfg, train_cfg, alpha, gamma):
    from .detection import combine, fit_weights, score_components
    from .metrics import ScoredLabels, pr_curve, roc_curve

    model = TBiGAN(model_cfg, seed=train_cfg.seed)
    res = train(model, train_windows, train_cfg)
    weights = fit_weights(train_windows)
    vw, vl = validation
    r, d, lat = score_components(res.model, weights, vw)
    data = ScoredLabels(combine(r, d, lat, alpha, gamma), vl)
    return pr_curve(data).ap, roc_curve(data).auc, res.epochs_run


def hyperparam_search(space: dict, trials_per_setting: int, validation,
                      train_windows: np.ndarray | None = None, *, n_settings: int = 8,
                      model_config: ModelConfig | None = None,
                      train_config: TrainConfig | None = None,
                      alpha: float = 0.6, gamma: float = 1.0, seed: int = 0,
                      log_path: str | Path | None = None,
                      evaluate: Callable | None = None) -> SearchResult:
    """Random search selecting by mean validation AP, ties broken by ROC-AUC.

    Each sampled setting is trained ``trials_per_setting`` times with
    consecutive seeds and its metrics averaged. ``evaluate`` may replace the
    train-and-score step: ``evaluate(train_windows, validation, model_cfg,
    train_cfg, alpha, gamma) -> (ap, auc, epochs_run)``.
    """
    if not space:
        raise ConfigError("search space is empty")
    if trials_per_setting < 1 or n_settings < 1:
        raise ConfigError("trials_per_setting and n_settings must be >= 1")
    model_config = model_config or ModelConfig()
    train_config = train_config or TrainConfig()
    evaluate = evaluate or _default_evaluate
    rng = np.random.default_rng(seed)
    trials: list[Trial] = []
    best = None
    for s in range(n_settings):
        setting = sample_setting(space, rng)
        mcfg, tcfg, a = apply_setting(setting, model_config, train_config, alpha)
        mcfg.validate()
        aps, aucs = [], []
        for j in range(trials_per_setting):
            tseed = train_config.seed + j
            t0 = time.perf_counter()
            ap, auc, ep = evaluate(train_windows, validation, mcfg, replace(tcfg, seed=tseed), a, gamma)
            trials.append(Trial(s, j, tseed, dict(setting), float(ap), float(auc), int(ep),
                                time.perf_counter() - t0))
            aps.append(ap)
            aucs.append(auc)
        key = (float(np.mean(aps)), float(np.mean(aucs)))
        if best is None or key > best[0]:
            best = (key, setting, mcfg, tcfg, a)
    if log_path is not None:
        write_trial_log(trials, log_path)
    (ap, auc), setting, mcfg, tcfg, a = best
    return SearchResult(setting, mcfg, tcfg, a, ap, auc, trials)


def write_trial_log(trials: list[Trial], path: str | Path) -> None:
    keys = sorted({k for t in trials for k in t.params})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["setting", "trial", "seed", *keys, "val_ap", "val_auc", "epochs_run", "wall_time"])
        for t in trials:
            w.writerow([t.setting, t.trial, t.seed, *(t.params.get(k, "") for k in keys),
                        repr(t.val_ap), repr(t.val_auc), t.epochs_run, f"{t.wall_time:.3f}"])


def write_loss_history(history: list[LossRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "L_D", "L_adv", "L_rec", "L_latent", "L_EG"])
        for h in history:
            w.writerow([h.epoch, repr(h.L_D), repr(h.L_adv), repr(h.L_rec), repr(h.L_latent), repr(h.L_EG)])
