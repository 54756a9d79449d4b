import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from slimformer import _backend
from slimformer.qgemm import (
    MAX_K,
    ActQuant,
    IntegrityError,
    PackCache,
    QuantizedWeight,
    gemm_i8,
    pack_weight,
    quantize_activations_dynamic,
    quantize_weight_per_column,
    round_half_away,
)
from slimformer.tensor import gemm_f32, mac_counter

BLOCKS = [(256, 64), (48, 20)]


def test_round_half_away():
    assert round_half_away(np.array([0.5, 1.5, -0.5, -2.5, 2.4])).tolist() == [1, 2, -1, -3, 2]


def test_activation_examples(backend):
    z = quantize_activations_dynamic(np.zeros((2, 3), np.float32))
    assert z.scale == 1.0 and z.zero_point == 0 and np.all(z.values == z.zero_point)
    q = quantize_activations_dynamic(np.array([[0.0, 2.55]], np.float32))
    assert q.scale == pytest.approx(0.01) and q.zero_point == 0
    assert q.values.tolist() == [[0, 255]]


def test_activation_zero_is_exact(backend, rng):
    x = rng.uniform(-3, 5, (4, 9)).astype(np.float32)
    x[0, 0] = 0.0
    q = quantize_activations_dynamic(x)
    assert q.dequantize()[0, 0] == 0.0


@pytest.mark.parametrize("bad", [np.nan, np.inf])
def test_activation_rejects_non_finite(bad):
    with pytest.raises(ValueError):
        quantize_activations_dynamic(np.array([[1.0, bad]], np.float32))


@settings(max_examples=80, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 12)), elements=st.floats(-10, 10, width=32)))
def test_activation_round_trip_bound(x):
    for name in _backend.available():
        with _backend.use(name):
            q = quantize_activations_dynamic(x)
            assert np.all(np.abs(q.dequantize() - x) <= q.scale / 2 * (1 + 1e-6))


def test_weight_subnormal_column():
    q = quantize_weight_per_column(np.array([[1e-45], [0.0]], np.float32))
    assert q.col_scales[0] == 1.0 and q.values[:, 0].tolist() == [0, 0]


def test_weight_examples():
    w = np.array([[-1.0, 0.0, 127.0], [0.5, 0.0, 0.0]], np.float32)
    q = quantize_weight_per_column(w)
    assert q.values[:, 0].tolist() == [-127, 64]
    assert q.col_scales[0] == np.float32(1 / 127)
    assert q.values[:, 1].tolist() == [0, 0] and q.col_scales[1] == 1.0
    assert q.values[0, 2] == 127 and q.col_scales[2] == 1.0


@settings(max_examples=80, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 8), st.integers(1, 8)), elements=st.floats(-50, 50, width=32)))
def test_weight_round_trip_bound(w):
    q = quantize_weight_per_column(w)
    assert q.values.min() >= -127 and q.values.max() <= 127
    err = np.abs(q.values.astype(np.float64) * q.col_scales.astype(np.float64) - w)
    assert np.all(err <= q.col_scales / 2 * (1 + 1e-6))


@pytest.mark.parametrize("kc,nc", BLOCKS)
def test_pack_round_trip(rng, kc, nc):
    wq = quantize_weight_per_column(rng.standard_normal((101, 77)).astype(np.float32))
    p = pack_weight(wq, "w", cache=PackCache(), kc=kc, nc=nc)
    back = p.unpack()
    assert np.array_equal(back.values, wq.values) and np.array_equal(back.col_scales, wq.col_scales)
    assert p.payload.size == p.k_blocks * p.n_blocks * p.kc * p.nc


def test_pack_minimal_and_layout():
    wq = QuantizedWeight(np.array([[5]], np.int8), np.ones(1, np.float32))
    p = pack_weight(wq, "one", cache=PackCache())
    assert (p.k_blocks, p.n_blocks, p.payload.tolist()) == (1, 1, [5])
    # 3x3 with 2x2 panels: row-of-panels order, zero padded
    wq = QuantizedWeight(np.arange(9, dtype=np.int8).reshape(3, 3), np.ones(3, np.float32))
    p = pack_weight(wq, "grid", cache=PackCache(), kc=2, nc=2)
    assert p.panel(0, 0).tolist() == [[0, 1], [3, 4]]
    assert p.panel(0, 1).tolist() == [[2, 0], [5, 0]]
    assert p.panel(1, 0).tolist() == [[6, 7], [0, 0]]
    assert p.panel(1, 1).tolist() == [[8, 0], [0, 0]]


def test_pack_cache_counters_and_integrity(rng):
    cache = PackCache()
    wq = quantize_weight_per_column(rng.standard_normal((8, 8)).astype(np.float32))
    a = pack_weight(wq, "x", cache=cache)
    b = pack_weight(wq, "x", cache=cache)
    assert a is b and (cache.misses, cache.hits) == (1, 1)
    other = quantize_weight_per_column(rng.standard_normal((8, 8)).astype(np.float32))
    with pytest.raises(IntegrityError):
        pack_weight(other, "x", cache=cache)
    with pytest.raises(IntegrityError):
        pack_weight(wq, "x", cache=cache, kc=4, nc=4)
    for i in range(5):
        for _ in range(3):
            pack_weight(wq, ("id", i), cache=cache)
    assert cache.misses == 6


def test_pack_cache_single_packer_under_contention(rng):
    cache = PackCache()
    calls = []
    gate = threading.Barrier(8)
    wq = quantize_weight_per_column(rng.standard_normal((64, 64)).astype(np.float32))

    def make():
        calls.append(1)
        return wq

    def worker():
        gate.wait()
        cache.get_or_pack("shared", make)

    threads = [threading.Thread(target=worker) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(calls) == 1 and cache.misses == 1 and cache.hits == 7


def _oracle(aq: ActQuant, wq: QuantizedWeight, bias=None):
    c = aq.dequantize() @ wq.dequantize().astype(np.float64)
    return c if bias is None else c + bias


def test_gemm_tiny_example(backend):
    aq = quantize_activations_dynamic(np.array([[1.0]], np.float32))
    p = pack_weight(quantize_weight_per_column(np.array([[2.0]], np.float32)), "tiny", cache=PackCache())
    assert abs(gemm_i8(aq, p)[0, 0] - 2.0) <= 0.05


def test_gemm_zero_activation_gives_bias(backend, rng):
    bias = rng.standard_normal(5).astype(np.float32)
    aq = quantize_activations_dynamic(np.zeros((3, 4), np.float32))
    p = pack_weight(quantize_weight_per_column(rng.standard_normal((4, 5)).astype(np.float32)), "z", cache=PackCache())
    assert np.array_equal(gemm_i8(aq, p, bias), np.tile(bias, (3, 1)))


@pytest.mark.parametrize("kc,nc", BLOCKS)
@pytest.mark.parametrize("m,k,n", [(1, 1, 1), (7, 5, 3), (6, 33, 17), (13, 300, 70), (64, 257, 129)])
def test_backends_bit_identical(rng, m, k, n, kc, nc):
    x = rng.standard_normal((m, k)).astype(np.float32)
    w = rng.standard_normal((k, n)).astype(np.float32)
    bias = rng.standard_normal(n).astype(np.float32)
    packed = pack_weight(quantize_weight_per_column(w), "w", cache=PackCache(), kc=kc, nc=nc)
    outs = []
    for name in _backend.available():
        with _backend.use(name):
            aq = quantize_activations_dynamic(x)
            for relu in ("none", "relu"):
                outs.append((name, relu, aq.values.copy(), gemm_i8(aq, packed, bias, relu)))
    ref = {relu: (vals, out) for name, relu, vals, out in outs if name == outs[0][0]}
    for name, relu, vals, out in outs:
        assert np.array_equal(vals, ref[relu][0]), name
        assert np.array_equal(out, ref[relu][1]), (name, relu)


@pytest.mark.parametrize("kc,nc", BLOCKS)
def test_gemm_matches_integer_oracle(backend, rng, kc, nc):
    x = rng.standard_normal((9, 70)).astype(np.float32)
    wq = quantize_weight_per_column(rng.standard_normal((70, 31)).astype(np.float32))
    aq = quantize_activations_dynamic(x)
    out = gemm_i8(aq, pack_weight(wq, "o", cache=PackCache(), kc=kc, nc=nc))
    acc = (aq.values.astype(np.int64) - aq.zero_point) @ wq.values.astype(np.int64)
    expect = (acc * (aq.scale * wq.col_scales.astype(np.float64))).astype(np.float32)
    assert np.array_equal(out, expect)


def test_relu_epilogue_equals_relu_after(backend, rng):
    x = rng.standard_normal((16, 40)).astype(np.float32)
    p = pack_weight(quantize_weight_per_column(rng.standard_normal((40, 24)).astype(np.float32)), "r", cache=PackCache())
    bias = rng.standard_normal(24).astype(np.float32)
    aq = quantize_activations_dynamic(x)
    assert np.array_equal(gemm_i8(aq, p, bias, "relu"), np.maximum(gemm_i8(aq, p, bias), 0))


def test_gemm_rounding_error_bound(backend, rng):
    # Per element: |C_q - C_f| <= 0.5 s_a sum_k |w_hat| + 0.5 s_j sum_k |x|  (plus f32 slack)
    x = rng.standard_normal((64, 768)).astype(np.float32)
    w = rng.standard_normal((768, 768)).astype(np.float32)
    wq = quantize_weight_per_column(w)
    aq = quantize_activations_dynamic(x)
    cq = gemm_i8(aq, pack_weight(wq, "big", cache=PackCache())).astype(np.float64)
    cf = x.astype(np.float64) @ w.astype(np.float64)
    w_hat = np.abs(wq.dequantize().astype(np.float64)).sum(axis=0)
    bound = 0.5 * aq.scale * w_hat[None, :] + 0.5 * wq.col_scales[None, :] * np.abs(x).sum(axis=1)[:, None]
    assert np.all(np.abs(cq - cf) <= bound * (1 + 1e-5) + 1e-4)


def test_gemm_thread_count_does_not_change_result(rng):
    x = rng.standard_normal((50, 90)).astype(np.float32)
    p = pack_weight(quantize_weight_per_column(rng.standard_normal((90, 40)).astype(np.float32)), "t", cache=PackCache())
    aq = quantize_activations_dynamic(x)
    assert np.array_equal(gemm_i8(aq, p, threads=1), gemm_i8(aq, p, threads=3))


def test_gemm_errors_and_macs(rng):
    p = pack_weight(quantize_weight_per_column(np.ones((4, 3), np.float32)), "e", cache=PackCache())
    aq = quantize_activations_dynamic(np.ones((2, 5), np.float32))
    with pytest.raises(ValueError):
        gemm_i8(aq, p)
    aq = quantize_activations_dynamic(np.ones((2, 4), np.float32))
    with pytest.raises(ValueError):
        gemm_i8(aq, p, epilogue="gelu")
    with pytest.raises(ValueError):
        gemm_i8(aq, p, bias=np.zeros(4, np.float32))
    with mac_counter() as c:
        gemm_i8(aq, p)
    assert c.total == 2 * 4 * 3
    assert MAX_K == 2**24


def test_frobenius_error_small(rng):
    for seed in range(5):
        r = np.random.default_rng(seed)
        a = r.standard_normal((64, 256)).astype(np.float32)
        w = r.standard_normal((256, 256)).astype(np.float32)
        cq = gemm_i8(quantize_activations_dynamic(a), pack_weight(quantize_weight_per_column(w), seed, cache=PackCache()))
        cf = gemm_f32(a, w)
        assert np.linalg.norm(cq - cf) / np.linalg.norm(cf) <= 0.02
