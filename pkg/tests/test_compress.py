import csv
import math

import numpy as np
import pytest

from slimformer.autodiff import forward_backward
from slimformer.compress import (
    DEFAULT_GRID,
    ImportanceScores,
    KDConfig,
    KeepSet,
    PruneSpec,
    apply_prune,
    compute_importance,
    distill,
    evaluate,
    finetune,
    keep_all,
    keep_count,
    kd_loss,
    kd_loss_grad,
    masks_for,
    prune,
    select_keep,
    sweep_prune_tradeoff,
    write_sweep_csv,
)
from slimformer.data import Dataset, toy_task
from slimformer.encoder import ModelConfig, forward, init_model, swap_activation
from slimformer.runtime import Batch, predict

CFG = ModelConfig(num_layers=2, hidden=32, num_heads=4, ffn_size=64, vocab_size=32, max_seq_len=16, num_classes=2)


def _scores(heads, units=None):
    heads = np.atleast_2d(np.asarray(heads, float))
    units = np.ones((heads.shape[0], 4)) if units is None else np.atleast_2d(np.asarray(units, float))
    return ImportanceScores(heads, units, 1)


def test_select_keep_examples():
    assert select_keep(_scores([3, 1, 2, 5]), PruneSpec(0.5)).heads[0].tolist() == [0, 3]
    assert select_keep(_scores([2, 2, 1]), PruneSpec(2 / 3)).heads[0].tolist() == [0, 1]
    assert select_keep(_scores([4, 1, 3]), PruneSpec(1.0)).heads[0].tolist() == [0, 1, 2]


def test_keep_counts():
    assert keep_count(12, 0.5) == 6
    assert keep_count(4, 0.1) == 1
    assert keep_count(100, 0.29) == 29
    assert PruneSpec(0.67, 0.5).heads_kept(12) == 8
    for bad in (0.0, 1.5, -0.1):
        with pytest.raises(ValueError):
            PruneSpec(bad)


def test_keep_all_is_bit_exact():
    m = init_model(CFG, seed=1)
    p = apply_prune(m, keep_all(CFG))
    assert p.config == m.config
    assert all(np.array_equal(p.params[k], m.params[k]) for k in m.params)


def test_prune_shapes():
    cfg = ModelConfig(1, 768, 12, 64, 8, 4, 2)
    m = init_model(cfg)
    keep = KeepSet([np.arange(0, 12, 2)], [np.arange(32)])
    p = apply_prune(m, keep)
    assert p.params["layers.0.attn.q.weight"].shape == (768, 384)
    assert p.params["layers.0.attn.o.weight"].shape == (384, 768)
    assert p.config.num_heads == 6 and p.config.head_dim == 64 and p.config.ffn_size == 32


def test_prune_rejects_bad_keep_sets():
    m = init_model(CFG)
    with pytest.raises(ValueError):
        apply_prune(m, KeepSet([np.arange(2), np.arange(3)], [np.arange(4)] * 2))
    with pytest.raises(ValueError):
        apply_prune(m, KeepSet([np.array([0, 0])] * 2, [np.arange(4)] * 2))
    with pytest.raises(ValueError):
        apply_prune(m, KeepSet([np.array([4])] * 2, [np.arange(4)] * 2))


def test_pruned_equals_masked(rng):
    m = init_model(CFG, seed=2, std=0.2)
    keep = KeepSet([np.array([1, 3]), np.array([0, 2])], [rng.choice(64, 20, replace=False) for _ in range(2)])
    keep.ffn_units = [np.sort(u) for u in keep.ffn_units]
    p = apply_prune(m, keep)
    hm, fm = masks_for(CFG, keep)
    for _ in range(20):
        b = Batch.from_sequences([rng.integers(1, 32, size=int(rng.integers(1, 16))) for _ in range(3)])
        assert np.abs(forward(p, b) - forward(m, b, head_mask=hm, ffn_mask=fm)).max() <= 1e-5


def test_pruning_a_quantized_model_keeps_i8():
    m = init_model(CFG, seed=3).quantize()
    p = apply_prune(m, KeepSet([np.array([0, 1])] * 2, [np.arange(10)] * 2))
    assert p.is_quantized()
    assert p.params["layers.0.attn.q.weight"].values.shape == (32, 16)


@pytest.fixture(scope="module")
def toy():
    return toy_task(64, seed=4)


def test_importance_basic_properties(toy):
    m = init_model(CFG, seed=5, std=0.2)
    s = compute_importance(m, toy, batch_size=16)
    assert s.examples_seen == 64
    assert s.heads.shape == (2, 4) and s.ffn_units.shape == (2, 64)
    assert np.all(s.heads >= 0) and np.all(s.ffn_units >= 0)
    with pytest.raises(ValueError):
        compute_importance(m, Dataset([]))


def test_importance_dead_head_scores_zero(toy):
    m = init_model(CFG, seed=6, std=0.2)
    w = m.params["layers.0.attn.o.weight"].copy()
    w[16:24] = 0
    s = compute_importance(m.with_params(**{"layers.0.attn.o.weight": w}), toy)
    assert s.heads[0, 2] == 0.0 and np.all(s.heads[0, [0, 1, 3]] > 0)


def test_importance_duplicate_heads_score_equal(toy):
    m = init_model(CFG, seed=7, std=0.2)
    up = {}
    for proj in "qkv":
        w = m.params[f"layers.1.attn.{proj}.weight"].copy()
        w[:, 8:16] = w[:, 0:8]
        up[f"layers.1.attn.{proj}.weight"] = w
    o = m.params["layers.1.attn.o.weight"].copy()
    o[8:16] = o[0:8]
    up["layers.1.attn.o.weight"] = o
    s = compute_importance(m.with_params(**up), toy, verify=True)
    assert abs(s.heads[1, 0] - s.heads[1, 1]) <= 1e-9


def test_importance_matches_finite_differences(toy):
    m = init_model(CFG, seed=8, std=0.3)
    data = toy.subset(range(24))
    s = compute_importance(m, data, batch_size=8, verify=True)
    params = m.dense_params(np.float64)
    eps = 1e-4
    expect = np.zeros((2, 4))
    for start in range(0, 24, 8):
        b = Batch.from_sequences(data.sequences[start : start + 8])
        y = data.labels[start : start + 8]
        for layer in range(2):
            for head in range(4):
                vals = []
                for sign in (1, -1):
                    hm = [np.ones(4) for _ in range(2)]
                    hm[layer][head] += sign * eps
                    vals.append(forward_backward(CFG, params, b.ids, b.mask, labels=y, head_mask=hm, need_grad=False)[0])
                expect[layer, head] += abs((vals[0] - vals[1]) / (2 * eps))
    np.testing.assert_allclose(s.heads, expect, rtol=1e-3)


def test_kd_loss_examples(rng):
    for c in (2, 5):
        assert kd_loss(np.zeros((3, c)), np.zeros((3, c))) == pytest.approx(math.log(c), rel=1e-12)
    sharp = np.array([[50.0, -50.0], [-50.0, 50.0]])
    assert kd_loss(sharp, sharp) <= 1e-8
    s, t = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    from slimformer.tensor import softmax_rows

    for temp in (1.0, 3.0):
        expect = (softmax_rows(s / temp) - softmax_rows(t / temp)) / temp / 4
        np.testing.assert_allclose(kd_loss_grad(s, t, temp), expect, atol=1e-6)


def test_kd_config_validation():
    for kw in (dict(steps=-1), dict(lr=-1), dict(batch_size=0), dict(temperature=0), dict(momentum=1.0)):
        with pytest.raises(ValueError):
            KDConfig(**kw)


def test_distill_lr_zero_flat_curve(toy):
    teacher = init_model(CFG, seed=9, std=0.2)
    data = toy.subset(range(16))
    res = distill(teacher, teacher.copy(), data, KDConfig(steps=5, lr=0.0, batch_size=16))
    assert len(set(res.losses)) == 1
    assert all(np.array_equal(res.model.params[k], teacher.params[k]) for k in teacher.params)


def test_distill_zero_steps_and_determinism(toy):
    teacher = init_model(CFG, seed=10, std=0.2)
    student = init_model(CFG.replace(num_layers=1), seed=3)
    res = distill(teacher, student, toy, KDConfig(steps=0))
    assert res.losses == []
    assert all(np.array_equal(res.model.params[k], student.params[k]) for k in student.params)
    a = distill(teacher, student, toy, KDConfig(steps=5, seed=2))
    b = distill(teacher, student, toy, KDConfig(steps=5, seed=2))
    assert a.losses == b.losses
    assert all(np.array_equal(a.model.params[k], b.model.params[k]) for k in a.model.params)


def test_distill_rejects_mismatch():
    teacher = init_model(CFG)
    with pytest.raises(ValueError):
        distill(teacher, init_model(CFG.replace(num_classes=3)), toy_task(4), KDConfig(steps=1))
    with pytest.raises(ValueError):
        distill(teacher, init_model(CFG.replace(vocab_size=40)), toy_task(4), KDConfig(steps=1))
    with pytest.raises(ValueError):
        finetune(teacher, Dataset([[1, 2]]), KDConfig(steps=1))


def test_swap_then_redistill_recovers_teacher():
    train = toy_task(400, seed=1)
    test = toy_task(200, seed=2)
    cfg = CFG.replace(num_layers=1)
    teacher = finetune(init_model(cfg, seed=0, std=0.1), train, KDConfig(steps=200)).model
    assert evaluate(teacher, test) >= 0.95
    swapped = swap_activation(teacher, "relu")
    student = distill(teacher, swapped, train, KDConfig(steps=200)).model
    agree = np.mean(predict(student, test.sequences).argmax(1) == predict(teacher, test.sequences).argmax(1))
    assert agree >= 0.95


def test_sweep_table(toy, tmp_path):
    m = init_model(CFG, seed=12, std=0.2)
    assert (0.5, 0.25) in DEFAULT_GRID and (0.5, 0.5) in DEFAULT_GRID
    pts = sweep_prune_tradeoff(m, toy.subset(range(16)))
    by = {(p.head_ratio, p.ffn_ratio): p for p in pts}
    assert by[(1.0, 1.0)].mac_ratio == 1.0
    ratios = sorted({r for r, _ in by})
    for i in range(len(ratios) - 1):
        for r in ratios:
            assert by[(ratios[i], r)].macs < by[(ratios[i + 1], r)].macs
            assert by[(r, ratios[i])].macs < by[(r, ratios[i + 1])].macs
    write_sweep_csv(pts, tmp_path / "s.csv")
    rows = list(csv.reader(open(tmp_path / "s.csv", encoding="utf-8")))
    assert rows[0] == ["head_ratio", "ffn_ratio", "mac_ratio", "accuracy", "seconds"] and len(rows) == 17
    with pytest.raises(ValueError):
        sweep_prune_tradeoff(m, toy, ratio_grid=())


def test_prune_end_to_end(toy):
    m = init_model(CFG, seed=13, std=0.2)
    p = prune(m, compute_importance(m, toy), PruneSpec(0.5, 0.25))
    assert (p.config.num_heads, p.config.ffn_size) == (2, 16)
    assert predict(p, toy.sequences[:3]).shape == (3, 2)
