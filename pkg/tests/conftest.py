import math

import numpy as np
import pytest

from tbigan import tensor as tn
from tbigan.model import ModelConfig, TBiGAN


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    if denom < 1e-6:
        # a structurally zero gradient: FD noise is compared in absolute terms
        return float(np.linalg.norm(a - b))
    return float(np.linalg.norm(a - b) / denom)


def refresh_spectral(module, iters: int = 50) -> None:
    """Re-converge persistent power-iteration vectors after weights were replaced."""
    from tbigan.model import Linear

    for m in module.modules():
        if isinstance(m, Linear) and m.sn is not None:
            m.sn.refresh(m.weight.data, iters=iters)


def numeric_grad(f, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``arr``, perturbed in place."""
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def check_grads(loss_fn, tensors, h: float = 1e-5) -> dict:
    """Analytic vs central-difference gradient relative error per tensor."""
    for t in tensors:
        t.grad = None
    tn.backward(loss_fn())
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in tensors]

    def value():
        with tn.no_grad():
            return loss_fn().item()

    errs = {}
    for i, (t, a) in enumerate(zip(tensors, analytic)):
        errs[getattr(t, "name", None) or i] = rel_err(a, numeric_grad(value, t.data, h))
    return errs


def full_attention_reference(x: np.ndarray, attn, H: int) -> np.ndarray:
    """Plain numpy multi-head self-attention over the whole sequence."""
    T, d = x.shape
    dh = d // H
    q = x @ attn.q.weight.data + attn.q.bias.data
    k = x @ attn.k.weight.data + attn.k.bias.data
    v = x @ attn.v.weight.data + attn.v.bias.data
    out = np.zeros_like(x)
    for h in range(H):
        s = slice(h * dh, (h + 1) * dh)
        sc = q[:, s] @ k[:, s].T / math.sqrt(dh)
        sc -= sc.max(axis=1, keepdims=True)
        p = np.exp(sc)
        p /= p.sum(axis=1, keepdims=True)
        out[:, s] = p @ v[:, s]
    return out @ attn.out.weight.data + attn.out.bias.data


def tiny_config(**kw) -> ModelConfig:
    base = dict(feature_dim=6, window_len=4, d_model=8, latent_dim=3, num_blocks=1, num_heads=2,
                attn_window=2, mlp_ratio=2.0, dropout=0.0, disc_blocks=1)
    base.update(kw)
    return ModelConfig(**base)


def randomize(module, rng: np.random.Generator, scale: float = 0.3) -> None:
    """Replace every parameter with random values so no branch is trivially zero."""
    for p in module.parameters():
        p.data = rng.normal(scale=scale, size=p.shape)


@pytest.fixture
def tiny_model():
    m = TBiGAN(tiny_config(), seed=0)
    randomize(m, np.random.default_rng(1))
    refresh_spectral(m)
    m.eval()
    return m


# criterion number -> (passed, title, detail); filled by the acceptance suite
ACCEPTANCE: dict[int, tuple[bool, str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[n]
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
