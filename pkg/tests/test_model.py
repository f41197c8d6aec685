import math

import numpy as np
import pytest

from tbigan import tensor as tn
from tbigan.errors import ConfigError, ShapeError
from tbigan.model import (
    ModelConfig, TBiGAN, TransformerBlock, WindowAttention, load_checkpoint, positional_encoding,
    save_checkpoint, spectral_normalize, transformer_block, window_attention,
)
from tbigan.tensor import Tensor

from conftest import check_grads, full_attention_reference, randomize, tiny_config


def random_attention(d, H, W, seed):
    rng = np.random.default_rng(seed)
    attn = WindowAttention(d, H, W, rng)
    randomize(attn, rng, scale=0.5)
    return attn


# -- positional encoding -------------------------------------------------------
def test_positional_encoding_examples():
    pe = positional_encoding(10, 8)
    np.testing.assert_array_equal(pe[0, 0::2], 0.0)
    np.testing.assert_array_equal(pe[0, 1::2], 1.0)
    np.testing.assert_array_equal(pe, positional_encoding(10, 8))


def test_positional_encoding_formula():
    T, d = 40, 6
    pe = positional_encoding(T, d)
    for p in range(T):
        for i in range(d // 2):
            angle = p / 10000 ** (2 * i / d)
            assert pe[p, 2 * i] == pytest.approx(math.sin(angle), abs=1e-12)
            assert pe[p, 2 * i + 1] == pytest.approx(math.cos(angle), abs=1e-12)
    # first pair has period 2*pi: rows p and p + 2*pi agree through the formula
    assert math.sin(3 + 2 * math.pi) == pytest.approx(pe[3, 0], abs=1e-12)


def test_positional_encoding_learnable_and_odd_width():
    pe = positional_encoding(5, 7, mode="learnable")
    assert isinstance(pe, Tensor) and pe.requires_grad and pe.shape == (5, 7)
    with pytest.raises(ConfigError):
        positional_encoding(5, 4, mode="rotary")


# -- window attention ----------------------------------------------------------
def test_attention_full_window_equals_reference():
    rng = np.random.default_rng(0)
    attn = random_attention(8, 2, 6, seed=1)
    x = rng.normal(size=(6, 8))
    out = window_attention(Tensor(x), attn, W=6, H=2).data
    np.testing.assert_allclose(out, full_attention_reference(x, attn, 2), rtol=0, atol=1e-10)


def test_attention_uniform_on_identical_tokens():
    attn = random_attention(8, 4, 4, seed=2)
    x = np.tile(np.random.default_rng(3).normal(size=8), (8, 1))
    _, w = window_attention(Tensor(x), attn, W=4, H=4, return_weights=True)
    assert w.shape == (2, 4, 4, 4)
    np.testing.assert_allclose(w, 0.25, atol=1e-15)


def test_attention_window_isolation_example():
    rng = np.random.default_rng(4)
    attn = random_attention(8, 2, 4, seed=5)
    x = rng.normal(size=(8, 8))
    y = x.copy()
    y[4:] = rng.normal(size=(4, 8)) * 10
    a = window_attention(Tensor(x), attn, W=4, H=2).data
    b = window_attention(Tensor(y), attn, W=4, H=2).data
    np.testing.assert_array_equal(a[:4], b[:4])
    assert not np.allclose(a[4:], b[4:])


def test_attention_padding_masks_pad_keys():
    # T=5, W=4: the second window holds one real token that must attend only to itself
    rng = np.random.default_rng(6)
    attn = random_attention(8, 2, 4, seed=7)
    x = rng.normal(size=(5, 8))
    out, w = window_attention(Tensor(x), attn, W=4, H=2, return_weights=True)
    assert out.shape == (5, 8)
    np.testing.assert_allclose(w[1, :, 0, 0], 1.0, atol=1e-15)
    single = window_attention(Tensor(x[4:5]), attn, W=1, H=2).data
    np.testing.assert_allclose(out.data[4], single[0], atol=1e-12)


def test_attention_batched_matches_unbatched():
    rng = np.random.default_rng(8)
    attn = random_attention(8, 2, 3, seed=9)
    x = rng.normal(size=(3, 7, 8))
    batched = window_attention(Tensor(x), attn, W=3, H=2).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], window_attention(Tensor(x[i]), attn, W=3, H=2).data,
                                   rtol=0, atol=1e-13)


def test_attention_gradients_fd():
    rng = np.random.default_rng(10)
    attn = random_attention(8, 2, 3, seed=11)
    x = Tensor(rng.normal(size=(2, 7, 8)), requires_grad=True)
    c = rng.normal(size=(2, 7, 8))
    errs = check_grads(lambda: (window_attention(x, attn, 3, 2) * c).sum(), [x] + attn.parameters())
    assert max(errs.values()) < 1e-5


def test_attention_bad_heads():
    with pytest.raises(ConfigError):
        WindowAttention(6, 4, 2, np.random.default_rng(0))


# -- transformer block ---------------------------------------------------------
def test_block_identity_at_init():
    cfg = tiny_config()
    block = TransformerBlock(cfg, np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(4, 8))
    np.testing.assert_array_equal(transformer_block(Tensor(x), block).data, x)


def test_block_eval_deterministic_and_dropout_only_in_training():
    cfg = tiny_config(dropout=0.3)
    block = TransformerBlock(cfg, np.random.default_rng(0))
    randomize(block, np.random.default_rng(1))
    block.rng = np.random.default_rng(2)
    x = Tensor(np.random.default_rng(3).normal(size=(4, 8)))
    block.eval()
    a, b = block(x).data, block(x).data
    assert a.tobytes() == b.tobytes()
    block.train()
    assert not np.allclose(block(x).data, a)


def test_block_gradients_fd():
    cfg = tiny_config()
    rng = np.random.default_rng(4)
    block = TransformerBlock(cfg, rng)
    randomize(block, rng)
    block.eval()
    x = Tensor(rng.normal(size=(2, 4, 8)), requires_grad=True)
    c = rng.normal(size=(2, 4, 8))
    errs = check_grads(lambda: (block(x) * c).sum(), [x] + block.parameters())
    assert max(errs.values()) < 1e-5


# -- encoder / generator / discriminator -----------------------------------------
def test_encode_contract(tiny_model):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 6))
    z = tiny_model.encode(x)
    assert z.shape == (3,)
    assert tiny_model.encode(x).data.tobytes() == z.data.tobytes()
    for t, f in [(0, 0), (3, 5), (2, 1)]:
        y = x.copy()
        y[t, f] += 1e-3
        assert not np.array_equal(tiny_model.encode(y).data, z.data)


def test_encode_sensitive_at_default_init():
    m = TBiGAN(tiny_config(), seed=3).eval()
    x = np.random.default_rng(0).normal(size=(4, 6))
    y = x.copy()
    y[1, 2] += 0.1
    assert not np.array_equal(m.encode(x).data, m.encode(y).data)


def test_generate_contract_and_gradient(tiny_model):
    z = Tensor(np.random.default_rng(1).normal(size=3), requires_grad=True)
    out = tiny_model.generate(z)
    assert out.shape == (4, 6)
    assert tiny_model.generate(z).data.tobytes() == out.data.tobytes()
    tn.get_tape().reset()
    errs = check_grads(lambda: (tiny_model.generate(z) ** 2).sum(), [z])
    assert max(errs.values()) < 1e-5


def test_discriminator_range_and_zero_head(tiny_model):
    rng = np.random.default_rng(2)
    x, z = rng.normal(size=(5, 4, 6)) * 3, rng.normal(size=(5, 3)) * 3
    p = tiny_model.discriminate(x, z).data
    assert p.shape == (5,) and np.all((p > 0) & (p < 1))
    m = TBiGAN(tiny_config(spectral_norm=False), seed=0).eval()
    m.discriminator.j2.weight.data[:] = 0.0
    np.testing.assert_array_equal(m.discriminate(x, z).data, 0.5)


def test_discriminator_gradients_fd(tiny_model):
    rng = np.random.default_rng(3)
    x, z = rng.normal(size=(2, 4, 6)), rng.normal(size=(2, 3))
    d = tiny_model.discriminator
    errs = check_grads(lambda: tn.log(d.prob(x, z)).sum(), d.parameters())
    assert max(errs.values()) < 1e-5


def test_window_shape_checked(tiny_model):
    with pytest.raises(ShapeError):
        tiny_model.encode(np.zeros((5, 6)))
    with pytest.raises(ShapeError):
        tiny_model.generate(np.zeros(4))


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=10, num_heads=4).validate()
    with pytest.raises(ConfigError):
        ModelConfig(dropout=0.6).validate()
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"d_model": 64, "colour": "red"})


def test_attention_window_need_not_divide_T():
    m = TBiGAN(tiny_config(window_len=5, attn_window=2), seed=0)
    assert m.encode(np.zeros((5, 6))).shape == (3,)


# -- spectral norm -------------------------------------------------------------
def test_spectral_norm_examples():
    out = spectral_normalize(np.diag([3.0, 1.0])).data
    np.testing.assert_allclose(out, np.diag([1.0, 1 / 3]), atol=1e-12)
    q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(5, 5)))
    np.testing.assert_allclose(spectral_normalize(q).data, q, atol=1e-6)


def test_spectral_norm_random_matrix():
    w = np.random.default_rng(1).normal(size=(8, 6))
    s = np.linalg.svd(spectral_normalize(w, power_iters=20).data, compute_uv=False)[0]
    assert 0.99 <= s <= 1.01


def test_spectral_norm_gradient_fd():
    from tbigan.model import SpectralNorm

    rng = np.random.default_rng(2)
    w = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    sn = SpectralNorm(w.shape, rng, power_iters=1)
    sn.refresh(w.data, iters=30)
    c = rng.normal(size=(5, 4))
    errs = check_grads(lambda: (sn(w, update=False) * c).sum(), [w])
    assert max(errs.values()) < 1e-5


# -- persistence -----------------------------------------------------------------
def test_param_count_pure_function_of_config():
    assert TBiGAN(ModelConfig(), seed=0).param_count() == TBiGAN(ModelConfig(), seed=9).param_count()
    assert TBiGAN(ModelConfig(), seed=0).param_count() == 241361


def test_checkpoint_round_trip(tmp_path):
    m = TBiGAN(tiny_config(positional_mode="learnable"), seed=4)
    randomize(m, np.random.default_rng(5))
    save_checkpoint(m, tmp_path / "c.json", stats_ref="stats.json")
    back, doc = load_checkpoint(tmp_path / "c.json")
    assert doc["stats_ref"] == "stats.json"
    assert back.fingerprint() == m.fingerprint()
    for (n1, p1), (n2, p2) in zip(m.named_parameters(), back.named_parameters()):
        assert n1 == n2 and p1.data.tobytes() == p2.data.tobytes()
    x = np.random.default_rng(6).normal(size=(4, 6))
    m.eval()
    assert m.encode(x).data.tobytes() == back.encode(x).data.tobytes()
