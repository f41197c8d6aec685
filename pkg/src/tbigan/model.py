"""Transformer encoder, generator and joint discriminator for the BiGAN.

Tokens are time steps: a window ``x`` of shape ``(T, F)`` becomes ``T`` tokens
of width ``F`` which are linearly embedded to ``d_model``. Self-attention is
restricted to non-overlapping windows of ``attn_window`` tokens. All modules
accept an optional leading batch axis.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as tn
from .errors import ConfigError, DataError, ShapeError
from .tensor import Tensor

POSITIONAL_MODES = ("sinusoidal_fixed", "learnable")
CHECKPOINT_FORMAT = 1


@dataclass
class ModelConfig:
    feature_dim: int = 112
    window_len: int = 32
    d_model: int = 64
    latent_dim: int = 32
    num_blocks: int = 2
    num_heads: int = 4
    attn_window: int = 16
    mlp_ratio: float = 2.0
    dropout: float = 0.1
    positional_mode: str = "sinusoidal_fixed"
    spectral_norm: bool = True
    disc_blocks: int = 2
    sn_power_iters: int = 1
    ln_eps: float = 1e-5

    def validate(self) -> None:
        for name in ("feature_dim", "window_len", "d_model", "latent_dim", "num_heads", "attn_window"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.num_blocks < 0 or self.disc_blocks < 0:
            raise ConfigError("block counts must be >= 0")
        if self.d_model % self.num_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by num_heads={self.num_heads}")
        if self.attn_window > padded_length(self.window_len, self.attn_window):
            raise ConfigError("attention window larger than padded sequence")
        if not 0.0 <= self.dropout <= 0.5:
            raise ConfigError(f"dropout must lie in [0, 0.5], got {self.dropout}")
        if self.positional_mode not in POSITIONAL_MODES:
            raise ConfigError(f"positional_mode must be one of {POSITIONAL_MODES}")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive")

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        cfg = cls(**doc)
        cfg.validate()
        return cfg


def padded_length(T: int, W: int) -> int:
    return int(math.ceil(T / W) * W)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to two standard deviations by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def positional_encoding(T: int, d_model: int, mode: str = "sinusoidal_fixed",
                        rng: np.random.Generator | None = None):
    """Sinusoidal table (numpy array) or a trainable table (Tensor).

    Even columns hold ``sin(p / 10000**(2i/d))``, odd columns the matching cosine.
    """
    if mode not in POSITIONAL_MODES:
        raise ConfigError(f"unknown positional mode '{mode}'")
    pos = np.arange(T, dtype=np.float64)[:, None]
    i = np.arange(0, d_model, 2, dtype=np.float64)
    freq = np.exp(-math.log(10000.0) * i / d_model)
    table = np.zeros((T, d_model))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)[:, : d_model // 2]
    if mode == "sinusoidal_fixed":
        return table
    # learnable tables start from the sinusoid so ordering is informative from step 0
    return Tensor(table, requires_grad=True, name="pos_embed")


class Module:
    """Minimal parameter container; attributes that are Tensors with grad are parameters."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, list):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)


class SpectralNorm:
    """Power-iteration estimate of the top singular value with persistent vectors."""

    def __init__(self, shape: tuple[int, ...], rng: np.random.Generator, power_iters: int = 1):
        rows = shape[0]
        cols = int(np.prod(shape[1:]))
        self.power_iters = power_iters
        self.u = _unit(rng.standard_normal(rows), np.zeros(rows))
        self.v = _unit(rng.standard_normal(cols), np.zeros(cols))

    def refresh(self, w2d: np.ndarray, iters: int | None = None) -> None:
        for _ in range(self.power_iters if iters is None else iters):
            self.v = _unit(w2d.T @ self.u, self.v)
            self.u = _unit(w2d @ self.v, self.u)

    def sigma(self, w2d: np.ndarray) -> float:
        return float(self.u @ w2d @ self.v)

    def __call__(self, weight: Tensor, update: bool = True) -> Tensor:
        w2d = weight.data.reshape(weight.shape[0], -1)
        if update:
            self.refresh(w2d)
        if abs(self.sigma(w2d)) < 1e-12:
            return weight
        flat = weight if weight.ndim == 2 else weight.reshape(w2d.shape)
        sig = tn.matmul(tn.matmul(Tensor._wrap(self.u[None, :], "sn_u"), flat),
                        Tensor._wrap(self.v[:, None], "sn_v")).reshape(())
        out = flat / sig
        return out if weight.ndim == 2 else out.reshape(weight.shape)


def _unit(v: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    # a zero image (e.g. zero-initialised weight) keeps the previous direction
    n = np.linalg.norm(v)
    return v / n if n > 1e-12 else fallback


def spectral_normalize(weight, power_iters: int = 20, seed: int = 0) -> Tensor:
    """Divide ``weight`` by its power-iteration estimate of the largest singular value."""
    weight = tn.as_tensor(weight)
    if weight.ndim < 2:
        raise ShapeError(f"spectral_normalize needs a matrix, got shape {weight.shape}")
    sn = SpectralNorm(weight.shape, np.random.default_rng(seed), power_iters)
    return sn(weight, update=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, *,
                 zero_init: bool = False, spectral_norm: bool = False, sn_iters: int = 1):
        w = np.zeros((n_in, n_out)) if zero_init else trunc_normal(rng, (n_in, n_out))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True)
        self.sn = SpectralNorm((n_in, n_out), rng, sn_iters) if spectral_norm else None

    def effective_weight(self) -> Tensor:
        if self.sn is None:
            return self.weight
        return self.sn(self.weight, update=self.training)

    def __call__(self, x: Tensor) -> Tensor:
        w = self.effective_weight()
        if x.ndim == 1:
            return (tn.matmul(x.reshape(1, -1), w) + self.bias).reshape(-1)
        return tn.matmul(x, w) + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return tn.layer_norm(x, self.gain, self.bias, self.eps)


class WindowAttention(Module):
    """Multi-head self-attention computed independently inside each token window."""

    def __init__(self, d_model: int, num_heads: int, window: int, rng: np.random.Generator,
                 spectral_norm: bool = False, sn_iters: int = 1):
        if d_model % num_heads:
            raise ConfigError(f"d_model={d_model} not divisible by num_heads={num_heads}")
        kw = dict(spectral_norm=spectral_norm, sn_iters=sn_iters)
        self.q = Linear(d_model, d_model, rng, **kw)
        self.k = Linear(d_model, d_model, rng, **kw)
        self.v = Linear(d_model, d_model, rng, **kw)
        self.out = Linear(d_model, d_model, rng, zero_init=True, **kw)
        self.num_heads = num_heads
        self.window = window

    def __call__(self, x: Tensor, return_weights: bool = False):
        return window_attention(x, self, self.window, self.num_heads, return_weights)


def window_attention(tokens: Tensor, params: WindowAttention, W: int, H: int,
                     return_weights: bool = False):
    """Attention restricted to non-overlapping windows of ``W`` tokens.

    ``tokens`` has shape ``(..., T, d)``. The sequence is zero-padded to a
    multiple of ``W``; padded positions are masked out as keys and dropped
    from the output. With ``return_weights`` the per-window attention
    probabilities ``(..., T/W, H, W, W)`` are returned as well.
    """
    tokens = tn.as_tensor(tokens)
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = tokens.reshape((1,) + tokens.shape)
    T, d = tokens.shape[-2], tokens.shape[-1]
    lead = tokens.shape[:-2]
    if d % H:
        raise ConfigError(f"d_model={d} not divisible by {H} heads")
    Tp = padded_length(T, W)
    if W > Tp:
        raise ConfigError(f"attention window {W} exceeds padded length {Tp}")
    x = tokens.reshape((-1, T, d))
    if Tp != T:
        pad = Tensor._wrap(np.zeros((x.shape[0], Tp - T, d)), "pad")
        x = tn.concat([x, pad], axis=1)
    n_win, dh = Tp // W, d // H

    def heads(t: Tensor) -> Tensor:
        # (B, Tp, d) -> (B, n_win, H, W, dh)
        return t.reshape((-1, n_win, W, H, dh)).transpose(0, 1, 3, 2, 4)

    q, k, v = heads(params.q(x)), heads(params.k(x)), heads(params.v(x))
    scores = tn.matmul(q, tn.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
    if Tp != T:
        mask = np.zeros((n_win, 1, 1, W))
        key_pos = np.arange(Tp).reshape(n_win, W)
        mask[:, 0, 0, :] = np.where(key_pos >= T, -1e30, 0.0)
        scores = scores + Tensor._wrap(mask, "attn_mask")
    attn = tn.softmax(scores, axis=-1)
    ctx = tn.matmul(attn, v).transpose(0, 1, 3, 2, 4).reshape((-1, Tp, d))
    if Tp != T:
        ctx = ctx[:, :T, :]
    out = params.out(ctx).reshape(lead + (T, d))
    if squeeze:
        out = out.reshape((T, d))
    if return_weights:
        weights = attn.data.reshape(lead + (n_win, H, W, W))
        return out, (weights[0] if squeeze else weights)
    return out


class MLP(Module):
    def __init__(self, d_model: int, hidden: int, rng: np.random.Generator,
                 spectral_norm: bool = False, sn_iters: int = 1):
        self.fc1 = Linear(d_model, hidden, rng, spectral_norm=spectral_norm, sn_iters=sn_iters)
        self.fc2 = Linear(hidden, d_model, rng, zero_init=True,
                          spectral_norm=spectral_norm, sn_iters=sn_iters)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(tn.gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm block: ``x + Attn(LN(x))`` then ``+ MLP(LN(.))``."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, spectral_norm: bool = False):
        d = cfg.d_model
        self.ln1 = LayerNorm(d, cfg.ln_eps)
        self.attn = WindowAttention(d, cfg.num_heads, cfg.attn_window, rng,
                                    spectral_norm, cfg.sn_power_iters)
        self.ln2 = LayerNorm(d, cfg.ln_eps)
        self.mlp = MLP(d, max(1, int(round(d * cfg.mlp_ratio))), rng,
                       spectral_norm, cfg.sn_power_iters)
        self.dropout = cfg.dropout
        self.rng: np.random.Generator | None = None

    def __call__(self, x: Tensor) -> Tensor:
        return transformer_block(x, self)


def transformer_block(tokens: Tensor, params: TransformerBlock) -> Tensor:
    drop = params.training and params.dropout > 0
    h = params.attn(params.ln1(tokens))
    if drop:
        h = tn.dropout(h, params.dropout, params.rng, True)
    x = tokens + h
    h = params.mlp(params.ln2(x))
    if drop:
        h = tn.dropout(h, params.dropout, params.rng, True)
    return x + h


class _Trunk(Module):
    """Embedding + positional encoding + transformer blocks."""

    def __init__(self, cfg: ModelConfig, n_in: int, n_blocks: int, rng: np.random.Generator,
                 spectral_norm: bool = False):
        self.embed = Linear(n_in, cfg.d_model, rng, spectral_norm=spectral_norm,
                            sn_iters=cfg.sn_power_iters)
        pe = positional_encoding(cfg.window_len, cfg.d_model, cfg.positional_mode)
        if isinstance(pe, Tensor):
            self.pos = pe
        else:
            self.pos_table = pe
        self.blocks = [TransformerBlock(cfg, rng, spectral_norm) for _ in range(n_blocks)]

    def positions(self) -> Tensor:
        if "pos" in vars(self):
            return self.pos
        return Tensor._wrap(self.pos_table, "pos_table")

    def run_blocks(self, h: Tensor) -> Tensor:
        for block in self.blocks:
            h = block(h)
        return h


def _check_window(x: Tensor, cfg: ModelConfig) -> None:
    if x.shape[-2:] != (cfg.window_len, cfg.feature_dim):
        raise ShapeError(
            f"window shape {x.shape[-2:]} does not match config "
            f"(T={cfg.window_len}, F={cfg.feature_dim})"
        )


class Encoder(_Trunk):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__(cfg, cfg.feature_dim, cfg.num_blocks, rng)
        self.head = Linear(cfg.d_model, cfg.latent_dim, rng)
        self.cfg = cfg

    def __call__(self, x) -> Tensor:
        x = tn.as_tensor(x)
        _check_window(x, self.cfg)
        h = self.run_blocks(self.embed(x) + self.positions())
        return self.head(h.mean(axis=-2))


class Generator(_Trunk):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__(cfg, cfg.latent_dim, cfg.num_blocks, rng)
        self.head = Linear(cfg.d_model, cfg.feature_dim, rng)
        self.cfg = cfg

    def __call__(self, z) -> Tensor:
        z = tn.as_tensor(z)
        if z.shape[-1] != self.cfg.latent_dim:
            raise ShapeError(f"latent shape {z.shape} does not match latent_dim={self.cfg.latent_dim}")
        e = self.embed(z)
        lead = e.shape[:-1]
        tokens = tn.broadcast_to(e.reshape(lead + (1, self.cfg.d_model)),
                                 lead + (self.cfg.window_len, self.cfg.d_model))
        h = self.run_blocks(tokens + self.positions())
        return self.head(h)


class Discriminator(Module):
    """Scores (window, latent) pairs; returns logits, see :meth:`prob`."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        sn, it = cfg.spectral_norm, cfg.sn_power_iters
        d = cfg.d_model
        self.x_trunk = _Trunk(cfg, cfg.feature_dim, cfg.disc_blocks, rng, spectral_norm=sn)
        self.z1 = Linear(cfg.latent_dim, d, rng, spectral_norm=sn, sn_iters=it)
        self.z2 = Linear(d, d, rng, spectral_norm=sn, sn_iters=it)
        self.j1 = Linear(2 * d, d, rng, spectral_norm=sn, sn_iters=it)
        self.j2 = Linear(d, 1, rng, spectral_norm=sn, sn_iters=it)
        self.cfg = cfg

    def logits(self, x, z) -> Tensor:
        x, z = tn.as_tensor(x), tn.as_tensor(z)
        _check_window(x, self.cfg)
        hx = self.x_trunk.run_blocks(self.x_trunk.embed(x) + self.x_trunk.positions()).mean(axis=-2)
        hz = self.z2(tn.gelu(self.z1(z)))
        h = tn.gelu(self.j1(tn.concat([hx, hz], axis=-1)))
        out = self.j2(h)
        return out.reshape(out.shape[:-1])

    def prob(self, x, z) -> Tensor:
        return tn.sigmoid(self.logits(x, z))

    __call__ = prob

    def linear_layers(self) -> list[Linear]:
        return [m for m in self.modules() if isinstance(m, Linear)]


class TBiGAN(Module):
    """Encoder E, generator G and joint discriminator D sharing one config."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.config = cfg
        self.seed = seed
        root = np.random.SeedSequence(seed)
        se, sg, sd, sdrop = root.spawn(4)
        self.encoder = Encoder(cfg, np.random.default_rng(se))
        self.generator = Generator(cfg, np.random.default_rng(sg))
        self.discriminator = Discriminator(cfg, np.random.default_rng(sd))
        self.set_dropout_rng(np.random.default_rng(sdrop))

    def set_dropout_rng(self, rng: np.random.Generator) -> None:
        for m in self.modules():
            if isinstance(m, TransformerBlock):
                m.rng = rng

    # -- forward helpers --------------------------------------------------
    def encode(self, x) -> Tensor:
        return self.encoder(x)

    def generate(self, z) -> Tensor:
        return self.generator(z)

    def discriminate(self, x, z) -> Tensor:
        return self.discriminator.prob(x, z)

    def discriminate_logits(self, x, z) -> Tensor:
        return self.discriminator.logits(x, z)

    # -- parameter groups -------------------------------------------------
    def group_parameters(self, group: str) -> dict[str, Tensor]:
        part = {"encoder": self.encoder, "generator": self.generator,
                "discriminator": self.discriminator}[group]
        return dict(part.named_parameters(group + "."))

    def eg_parameters(self) -> list[Tensor]:
        return self.encoder.parameters() + self.generator.parameters()

    def d_parameters(self) -> list[Tensor]:
        return self.discriminator.parameters()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def sn_buffers(self) -> dict[str, dict[str, np.ndarray]]:
        out = {}
        for i, lin in enumerate(self.discriminator.linear_layers()):
            if lin.sn is not None:
                out[str(i)] = {"u": lin.sn.u.copy(), "v": lin.sn.v.copy()}
        return out

    def load_state(self, params: dict[str, np.ndarray], buffers: dict | None = None) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(params)
        extra = set(params) - set(own)
        if missing or extra:
            raise DataError(f"checkpoint mismatch: missing {sorted(missing)[:5]}, extra {sorted(extra)[:5]}")
        for name, p in own.items():
            arr = np.asarray(params[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise DataError(f"parameter {name}: checkpoint shape {arr.shape} != model {p.shape}")
            p.data = arr.copy()
        if buffers:
            layers = self.discriminator.linear_layers()
            for key, buf in buffers.items():
                sn = layers[int(key)].sn
                if sn is not None:
                    sn.u = np.asarray(buf["u"], dtype=np.float64)
                    sn.v = np.asarray(buf["v"], dtype=np.float64)

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(p.data.tobytes())
        return h.hexdigest()


def save_checkpoint(model: TBiGAN, path: str | Path, stats_ref: str | None = None,
                    extra: dict | None = None) -> None:
    """Write a JSON checkpoint (row-major float lists, exact round-trip)."""
    doc = {
        "format_version": CHECKPOINT_FORMAT,
        "config": asdict(model.config),
        "seed": model.seed,
        "stats_ref": stats_ref,
        "params": {
            name: {"shape": list(p.shape), "data": p.data.ravel().tolist()}
            for name, p in model.named_parameters()
        },
        "sn_buffers": {
            k: {"u": v["u"].tolist(), "v": v["v"].tolist()} for k, v in model.sn_buffers().items()
        },
    }
    if extra:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path) -> tuple[TBiGAN, dict]:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    if doc.get("format_version") != CHECKPOINT_FORMAT:
        raise DataError(f"unsupported checkpoint format {doc.get('format_version')}")
    cfg = ModelConfig.from_dict(doc["config"])
    model = TBiGAN(cfg, seed=doc.get("seed", 0))
    params = {
        name: np.array(rec["data"], dtype=np.float64).reshape(rec["shape"])
        for name, rec in doc["params"].items()
    }
    model.load_state(params, doc.get("sn_buffers"))
    model.eval()
    return model, doc
