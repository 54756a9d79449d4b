import math
import warnings

import numpy as np
import pytest

from slimformer import encoder
from slimformer.data import toy_task
from slimformer.encoder import (
    F32,
    I8,
    ExecPlan,
    InputError,
    Model,
    ModelConfig,
    compare_plans,
    constant_matrices,
    forward,
    init_model,
    param_shapes,
    swap_activation,
)
from slimformer.runtime import Batch
from slimformer.tensor import gelu

SMALL = ModelConfig(num_layers=2, hidden=32, num_heads=4, ffn_size=64, vocab_size=40, max_seq_len=24, num_classes=3)


def _random_batch(rng, vocab=40, max_len=20, max_b=5):
    seqs = [rng.integers(1, vocab, size=int(rng.integers(1, max_len + 1))) for _ in range(int(rng.integers(1, max_b + 1)))]
    return Batch.from_sequences(seqs)


@pytest.mark.parametrize("kw", [dict(hidden=30, num_heads=4), dict(num_layers=0), dict(activation="tanh"), dict(ln_eps=0.0)])
def test_config_rejects_bad_geometry(kw):
    base = dict(num_layers=1, hidden=32, num_heads=4, ffn_size=8, vocab_size=10, max_seq_len=8, num_classes=2)
    base.update(kw)
    with pytest.raises(ValueError):
        ModelConfig(**base)


def test_param_shapes_and_audit():
    shapes = param_shapes(SMALL)
    assert shapes["layers.1.attn.q.weight"] == (32, 32)
    assert shapes["classifier.weight"] == (32, 3)
    assert len(constant_matrices(SMALL)) == 6 * SMALL.num_layers + 2
    m = init_model(SMALL, seed=0)
    params = dict(m.params)
    params["layers.0.ffn.in.weight"] = np.zeros((32, 63), np.float32)
    with pytest.raises(ValueError):
        Model(SMALL, params)
    del params["layers.0.ffn.in.weight"]
    with pytest.raises(ValueError):
        Model(SMALL, params)


def test_init_scheme():
    m = init_model(SMALL, seed=5)
    assert np.all(m.params["layers.0.attn.q.bias"] == 0)
    assert np.all(m.params["layers.0.attn.ln.gamma"] == 1) and np.all(m.params["layers.0.attn.ln.beta"] == 0)
    assert abs(float(m.params["embeddings.word"].std()) - 0.02) < 0.002
    again = init_model(SMALL, seed=5)
    assert all(np.array_equal(m.params[k], again.params[k]) for k in m.params)


def test_input_validation():
    m = init_model(SMALL)
    with pytest.raises(InputError):
        forward(m, Batch.from_sequences([[1, 40]]))
    with pytest.raises(InputError):
        forward(m, Batch.from_sequences([[1] * 25]))


def test_all_ones_masks_are_bitwise_neutral(rng):
    m = init_model(SMALL, seed=1)
    b = _random_batch(rng)
    ones_h = [np.ones(4, np.float32)] * 2
    ones_f = [np.ones(64, np.float32)] * 2
    for plan in (F32, I8, ExecPlan.optimized()):
        assert np.array_equal(forward(m, b, plan, ones_h, ones_f), forward(m, b, plan))


def _ln(x, g, b, eps):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def test_zero_head_mask_matches_attention_free_oracle(rng):
    cfg = SMALL
    m = init_model(cfg, seed=2, std=0.2)
    b = _random_batch(rng)
    P = {k: v.astype(np.float64) for k, v in m.params.items()}
    s = b.ids.shape[1]
    x = _ln(P["embeddings.word"][b.ids] + P["embeddings.position"][:s], P["embeddings.ln.gamma"], P["embeddings.ln.beta"], cfg.ln_eps)
    for l in range(cfg.num_layers):
        p = f"layers.{l}"
        # context is zero, so the attention block contributes only W_O's bias
        x = _ln(x + P[f"{p}.attn.o.bias"], P[f"{p}.attn.ln.gamma"], P[f"{p}.attn.ln.beta"], cfg.ln_eps)
        f = gelu(x @ P[f"{p}.ffn.in.weight"] + P[f"{p}.ffn.in.bias"]) @ P[f"{p}.ffn.out.weight"] + P[f"{p}.ffn.out.bias"]
        x = _ln(x + f, P[f"{p}.ffn.ln.gamma"], P[f"{p}.ffn.ln.beta"], cfg.ln_eps)
    pooled = np.tanh(x[:, 0] @ P["pooler.weight"] + P["pooler.bias"])
    expect = pooled @ P["classifier.weight"] + P["classifier.bias"]
    zeros = [np.zeros(cfg.num_heads)] * cfg.num_layers
    for plan in (F32, ExecPlan("f32", fused_attention=True)):
        np.testing.assert_allclose(forward(m, b, plan, head_mask=zeros), expect, atol=1e-5)


def test_padding_does_not_change_logits(rng):
    m = init_model(SMALL, seed=3, std=0.2)
    seq = rng.integers(1, 40, size=7)
    alone = forward(m, Batch.from_sequences([seq]))
    padded = forward(m, Batch.from_sequences([seq], pad_to=20))
    np.testing.assert_allclose(alone, padded, atol=1e-5)


def test_fused_attention_matches_unfused(rng):
    m = init_model(SMALL, seed=4, std=0.2)
    for _ in range(50):
        b = _random_batch(rng)
        hm = [rng.uniform(0, 1, 4).astype(np.float32) for _ in range(2)]
        ref = forward(m, b, F32, head_mask=hm)
        out = forward(m, b, ExecPlan("f32", True, True, True), head_mask=hm)
        assert np.abs(out - ref).max() <= 1e-5


def test_fused_attention_kernels_agree(backend, rng):
    from slimformer import _backend

    b, s, a, d = 3, 11, 4, 9
    q, k, v = (rng.standard_normal((b * s, a * d)).astype(np.float32) for _ in range(3))
    mask = np.zeros((b, s), np.float32)
    mask[1, 7:] = -1e4
    hm = rng.uniform(0, 1, a).astype(np.float32)
    out = _backend.impl.fused_attention(q, k, v, mask, hm, b, s, a, d, 1 / math.sqrt(d), 1)
    ref = encoder._attention_unfused(q, k, v, mask, hm, b, s, a, d)
    np.testing.assert_allclose(out, ref, atol=1e-5)


def test_i8_never_quantizes_attention_products(monkeypatch, rng):
    calls = []
    real = encoder.quantize_activations_dynamic

    def spy(x):
        calls.append(x.shape)
        return real(x)

    monkeypatch.setattr(encoder, "quantize_activations_dynamic", spy)
    m = init_model(SMALL, seed=5)
    b = Batch.from_sequences([[1, 2, 3, 4], [5, 6]])
    forward(m, b, I8)
    # one quantization per constant-weight GEMM and nothing else
    assert len(calls) == len(constant_matrices(SMALL))
    calls.clear()
    forward(m, b, ExecPlan.optimized())
    assert len(calls) == 4 * SMALL.num_layers + 2


def test_quantized_model_runs_every_plan(rng):
    m = init_model(SMALL, seed=6, std=0.1)
    q = m.quantize()
    assert q.is_quantized() and not m.is_quantized()
    b = _random_batch(rng)
    assert np.array_equal(forward(q, b, I8), forward(m, b, I8))
    np.testing.assert_allclose(forward(q, b, F32), forward(m, b, F32), atol=0.05)


def test_compare_plans_examples():
    m = init_model(ModelConfig(2, 64, 4, 128, 32, 32, 2), seed=7, std=0.1)
    same = compare_plans(m, [[1, 2, 3], [4, 5]], F32, F32)
    np.testing.assert_allclose(same.cosine, 1.0, atol=1e-12)
    assert same.agreement == 1.0
    assert compare_plans(m, [[1, 2, 3]]).rows == 1
    data = toy_task(200, seed=3)
    assert compare_plans(m, data.sequences).agreement >= 0.98
    with pytest.raises(ValueError):
        compare_plans(m, [])


def test_swap_activation(rng):
    m = init_model(SMALL, seed=8, std=0.2)
    r = swap_activation(m, "relu")
    assert r.config.activation == "relu"
    assert all(r.params[k] is m.params[k] for k in m.params)
    b = _random_batch(rng)
    assert not np.array_equal(forward(m, b), forward(r, b))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        assert swap_activation(r, "relu") is r
    assert caught
    with pytest.raises(ValueError):
        swap_activation(m, "tanh")
