import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import fd_max_rel_error, hinge_clearance
from reflab.model import NonFiniteError, ce_loss_and_grad, init_params, tensorize
from reflab.training import (
    Adam,
    ContrastiveConfig,
    MTLConfig,
    ModelConfig,
    Schedule,
    TrainConfig,
    _aggregate,
    accuracy,
    contrastive_batch_loss,
    contrastive_loss_and_grad,
    hinge,
    lr_at,
    sample_negatives,
    train,
    train_qa_only,
)
from reflab.worldgen import GenConfig, generate_instances, generate_qa_examples

FAST = TrainConfig(epochs=3, batch_size=32)


def with_splits(items, n_dev):
    return [replace(x, split="dev" if k < n_dev else "train") for k, x in enumerate(items)]


@pytest.fixture(scope="module")
def data():
    return with_splits(generate_instances(1, 160), 40)


@pytest.fixture(scope="module")
def qa():
    return with_splits(generate_qa_examples(1, 120), 30)


def test_hinge():
    assert hinge(-1.3) == 0
    assert hinge(0.9) == 0.9
    assert hinge(0.0) == 0


def test_aggregation_arithmetic():
    h = np.array([[0.2, 0.0, 0.5]])
    s, ws = _aggregate(h, "sum_h")
    m, wm = _aggregate(h, "max_h")
    assert abs(s[0] - 0.7) <= 1e-12 and m[0] == 0.5
    assert list(ws[0]) == [1, 0, 1] and list(wm[0]) == [0, 0, 1]


def test_max_ties_go_to_lowest_index():
    _, w = _aggregate(np.array([[0.4, 0.4, 0.1]]), "max_h")
    assert list(w[0]) == [1, 0, 0]


def test_margin_arithmetic():
    tau = 0.2
    assert hinge(0.3 - 0.9 - tau) == 0
    assert abs(hinge(1.5 - 0.4 - tau) - 0.9) <= 1e-12


def test_sample_negatives():
    negs = sample_negatives(10, 4, seed=3)
    assert negs.shape == (10, 4)
    for i, row in enumerate(negs):
        assert i not in row and len(set(row)) == 4 and list(row) == sorted(row)
    assert np.array_equal(negs, sample_negatives(10, 4, seed=3))
    assert sample_negatives(10, 64, seed=3).shape == (10, 9)
    assert sample_negatives(2, 64, seed=0).tolist() == [[1], [0]]
    with pytest.raises(ValueError):
        sample_negatives(1, 4, seed=0)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 40), st.integers(1, 70), st.integers(0, 2**64 - 1))
def test_negatives_never_pick_the_anchor(b, k, seed):
    negs = sample_negatives(b, k, seed)
    assert negs.shape == (b, min(k, b - 1))
    assert not np.any(negs == np.arange(b)[:, None])


def test_zero_hinge_weight_is_plain_ce(data):
    g = tensorize(data[:16])
    p = init_params(1, "seq")
    cfg = ContrastiveConfig(hinge_weight=0.0)
    loss, grads = contrastive_loss_and_grad(p, g, cfg, seed=0)
    ce, ce_grads = ce_loss_and_grad(p, g)
    assert abs(loss - ce) <= 1e-12
    for k, v in grads.arrays().items():
        assert np.allclose(v, ce_grads.arrays()[k], rtol=0, atol=1e-14)


@pytest.mark.parametrize("aggregation", ["sum_h", "max_h"])
def test_contrastive_bounds_and_gradient(data, aggregation):
    g = tensorize(data[:6])
    cfg = ContrastiveConfig(aggregation=aggregation)
    seed = 2
    while hinge_clearance(p := init_params(seed, "seq", d=8, scale=1.0), g, cfg, 4) < 1e-3:
        seed += 1
    loss, grads = contrastive_loss_and_grad(p, g, cfg, seed=4)
    ce = ce_loss_and_grad(p, g, False)[0]
    assert loss >= ce - 1e-12
    huge_tau = ContrastiveConfig(aggregation=aggregation, tau=1e6)
    assert abs(contrastive_batch_loss(p, g, huge_tau, 4) - ce) <= 1e-12
    assert fd_max_rel_error(lambda pp: contrastive_batch_loss(pp, g, cfg, 4), p, grads) < 1e-4


def test_config_validation():
    with pytest.raises(ValueError):
        ContrastiveConfig(aggregation="mean")
    with pytest.raises(ValueError):
        ContrastiveConfig(negatives_per_example=0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(ValueError):
        TrainConfig(schedule="cosine")
    with pytest.raises(ValueError):
        MTLConfig(mixing_ratio=0)


def test_lr_schedule():
    s = Schedule("warmup_linear_decay", lr=0.1, warmup_steps=10, total_steps=110)
    assert lr_at(0, s) == 0
    assert lr_at(10, s) == 0.1
    assert lr_at(110, s) == 0
    assert abs(lr_at(60, s) - 0.05) <= 1e-15
    assert lr_at(500, Schedule("constant", lr=0.3)) == 0.3
    with pytest.raises(ValueError):
        Schedule("warmup_linear_decay", lr=0.1, warmup_steps=10, total_steps=10)
    with pytest.raises(ValueError):
        lr_at(-1, s)


def test_adam_first_step_moves_by_lr():
    p = init_params(0, "seq", d=4)
    g = p.zeros_like()
    g.q[...] = np.array([3.0, -0.5, 1e-3, 0.0])
    before = p.q.copy()
    Adam(p).step(p, g, 0.01)
    expected = before - 0.01 * np.sign(g.q) * (np.abs(g.q) / (np.abs(g.q) + 1e-8))
    assert np.allclose(p.q, expected, rtol=0, atol=1e-15)


def test_zero_lr_keeps_metrics_constant(data):
    r = train(data, regime="ce", train_cfg=TrainConfig(epochs=3, lr=0.0, patience=10), seed=1)
    assert len({e["train_acc"] for e in r.log}) == 1
    assert len({e["dev_acc"] for e in r.log}) == 1


def test_attribute_only_is_learnable():
    items = generate_instances(2, 200, GenConfig(form_mix=(1, 0, 0)))
    r = train(items, regime="ce", train_cfg=TrainConfig(epochs=25), seed=0)
    assert accuracy(r.params, tensorize(items)) >= 0.95


@pytest.mark.parametrize("regime", ["ce", "contrastive", "mtl", "tl"])
def test_regimes_are_deterministic(data, qa, regime):
    a = train(data, qa, regime, train_cfg=FAST, seed=3)
    b = train(data, qa, regime, train_cfg=FAST, seed=3)
    assert a.log == b.log
    for k, v in a.params.arrays().items():
        assert np.array_equal(v, b.params.arrays()[k])


@pytest.mark.parametrize("r", [1, 2, 3])
def test_mtl_update_counts(data, qa, r):
    res = train(data, qa, "mtl", train_cfg=FAST, mtl_cfg=MTLConfig(mixing_ratio=r), seed=0)
    g_batches = math.ceil(120 / 32)
    for e in res.log:
        assert e["grounding_updates"] == g_batches
        assert e["qa_updates"] == math.ceil(g_batches / r)


def test_tl_pretrains_on_qa(data, qa):
    res = train(data, qa, "tl", train_cfg=FAST, seed=0)
    phases = [e["phase"] for e in res.log]
    assert phases == ["qa_pretrain"] * 3 + ["main"] * 3
    assert res.qa_only_dev_acc is not None


def test_best_epoch_is_returned(data):
    res = train(data, regime="ce", train_cfg=TrainConfig(epochs=6, batch_size=32), seed=2)
    best = max(range(len(res.log)), key=lambda k: (res.log[k]["dev_acc"], -k))
    assert res.best_epoch == best + 1
    dev = tensorize([x for x in data if x.split == "dev"])
    assert accuracy(res.params, dev) == res.log[best]["dev_acc"]


def test_early_stopping(data):
    res = train(data, regime="ce", train_cfg=TrainConfig(epochs=25, lr=0.0, patience=2), seed=0)
    assert len(res.log) == 3


def test_checkpoints_per_epoch(data, tmp_path):
    train(data, regime="ce", train_cfg=TrainConfig(epochs=2, batch_size=64, checkpoint_dir=str(tmp_path)), seed=0)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["epoch_1", "epoch_2"]
    assert (tmp_path / "epoch_1" / "params.json").exists()


def test_divergence_is_reported(data):
    cfg = TrainConfig(epochs=2, optimizer="sgd", lr=1e300)
    with np.errstate(all="ignore"), pytest.raises(NonFiniteError, match="epoch 1"):
        train(data, regime="ce", train_cfg=cfg, seed=0)


def test_argument_errors(data, qa):
    with pytest.raises(ValueError):
        train(data, regime="rl")
    with pytest.raises(ValueError):
        train(data, None, "mtl")
    with pytest.raises(ValueError):
        train(data, regime="contrastive", train_cfg=TrainConfig(batch_size=1))
    with pytest.raises(ValueError):
        train([x for x in data if x.split == "dev"])


def test_qa_only_baseline(qa):
    res = train_qa_only(qa, ModelConfig(), FAST, seed=0)
    assert 0 <= res.qa_only_dev_acc <= 1
    assert res.log[res.best_epoch - 1]["qa_dev_acc"] == res.qa_only_dev_acc
