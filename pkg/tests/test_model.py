import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import fd_max_rel_error
from reflab.geometry import Box
from reflab.model import (
    FEATURE_DIM,
    N_ANSWERS,
    ModelParams,
    NonFiniteError,
    backward,
    box_features,
    ce_loss_and_grad,
    ce_output_grads,
    ce_per_example,
    encode_batch,
    encode_expression,
    grounding_loss,
    grounding_scores,
    init_params,
    load_params,
    masked_log_softmax,
    params_from_dict,
    params_to_dict,
    qa_loss,
    qa_loss_and_grad,
    save_params,
    tensorize,
    tensorize_qa,
    token_ids,
)
from reflab.training import SGD
from reflab.worldgen import (
    NP,
    VOCAB,
    Expression,
    Instance,
    Parse,
    Scene,
    generate_instances,
    generate_qa_examples,
    render,
)


def B(id, x, y, cat="ball", color="red", size="big", w=0.1, h=0.1):
    return Box(id, x, y, w, h, cat, color, size)


def inst(scene, parse, gold):
    tokens, pos = render(parse)
    return Instance(0, scene, Expression(0, tokens, pos, parse, gold, parse.form))


@pytest.fixture(scope="module")
def small():
    return tensorize(generate_instances(1, 6)), tensorize_qa(generate_qa_examples(1, 6))


def test_box_features():
    x = box_features(Box(0, 0.0, 0.0, 1.0, 1.0, "ball", "red", "big"))
    assert x.shape == (FEATURE_DIM,) == (21,)
    assert list(x[:6]) == [0.5, 0.5, 1.0, 1.0, 1.0, 1.0]
    assert x[6:13].sum() == 0
    segs = [(5, 13), (13, 19), (19, 21)]
    for lo, hi in segs:
        assert x[lo:hi].sum() == 1
    y = box_features(Box(0, 0.0, 0.0, 1.0, 1.0, "ball", "blue", "big"))
    assert set(np.flatnonzero(x != y)) <= set(range(13, 19))


def test_token_errors():
    with pytest.raises(ValueError):
        token_ids(["the", "unicorn"], 16)
    with pytest.raises(ValueError):
        token_ids(["the"] * 17, 16)
    with pytest.raises(ValueError):
        token_ids([], 16)


def test_seq_single_token():
    p = init_params(0, "seq")
    u = encode_expression(p, ["ball"])
    assert np.allclose(u, p.E[VOCAB.index("ball")] + p.P[0], rtol=0, atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.permutations(range(7)))
def test_bow_is_order_free(seed, perm):
    p = init_params(seed, "bow", scale=1.0)
    tokens = ["the", "red", "ball", "left", "of", "the", "cup"]
    a = encode_expression(p, tokens)
    b = encode_expression(p, [tokens[i] for i in perm])
    assert np.array_equal(a, b)


def test_seq_swap_changes_encoding():
    p = init_params(1, "seq", scale=1.0)
    a = encode_expression(p, ["red", "ball", "cup"])
    b = encode_expression(p, ["cup", "ball", "red"])
    assert np.linalg.norm(a - b) > 0


def test_uniform_logits_give_log_n():
    p = init_params(0, "seq")
    p.W[...] = 0
    p.c[...] = 0
    for n in (2, 3, 7):
        scene = Scene(0, tuple(B(k, 0.12 * k, 0.1) for k in range(n)))
        loss, logits = grounding_loss(p, inst(scene, Parse(NP("ball")), 0))
        assert np.all(logits == 0)
        assert abs(loss - math.log(n)) <= 1e-12


def test_binary_closed_form():
    s = np.array([[1.7, 1.7 - 0.8]])
    logp = masked_log_softmax(s, np.ones_like(s, dtype=bool))
    assert abs(-logp[0, 0] - math.log1p(math.exp(-0.8))) <= 1e-12


def test_softmax_normalizes_under_mask():
    rng = np.random.default_rng(0)
    s = rng.normal(size=(20, 9)) * 10
    mask = rng.random((20, 9)) < 0.7
    mask[:, 0] = True
    logp = masked_log_softmax(s, mask)
    assert np.all(np.abs(np.exp(np.where(mask, logp, -np.inf)).sum(1) - 1) <= 1e-12)


def test_ce_gradient_wrt_logits(small):
    g, _ = small
    p = init_params(2, "seq")
    s = grounding_scores(p, g)
    prob = np.exp(masked_log_softmax(s, g.box_mask))
    prob[~g.box_mask] = 0
    expected = prob.copy()
    expected[np.arange(len(g)), g.gold] -= 1
    # with unit weights, dL/du_m = sum_b (softmax - onehot)[m, b] v_b
    _, fwd = ce_per_example(p, g)
    dV, du = ce_output_grads(g, fwd, np.ones(len(g)))
    V = fwd[2]
    assert np.allclose(du, np.einsum("mb,mbd->md", expected, V), atol=1e-14)


def test_qa_zero_head_is_log_a(small):
    _, q = small
    p = init_params(3, "seq")
    p.U[...] = 0
    p.d0[...] = 0
    loss, _ = qa_loss_and_grad(p, q, with_grad=False)
    assert abs(loss - math.log(N_ANSWERS)) <= 1e-12
    ex = generate_qa_examples(1, 1)[0]
    loss1, logits = qa_loss(p, ex)
    assert abs(loss1 - math.log(8)) <= 1e-12 and np.all(logits == 0)


def test_qa_saturation(small):
    _, q = small
    p = init_params(3, "seq")
    p.U[...] = 0
    p.d0[...] = 0
    p.d0[q.answer[0]] = 50.0
    loss, _ = qa_loss_and_grad(p, q.take([0]), with_grad=False)
    assert 0 <= loss < 1e-20


def test_init_loss_is_near_log_n():
    data = generate_instances(2, 100)
    p = init_params(4, "seq")
    loss, _ = ce_loss_and_grad(p, tensorize(data), with_grad=False)
    mean_log_n = np.mean([math.log(len(i.scene.boxes)) for i in data])
    assert abs(loss - mean_log_n) <= 0.5


@pytest.mark.parametrize("encoder", ["seq", "bow"])
@pytest.mark.parametrize("spec", ["ce", "qa", "mtl"])
def test_gradients_match_finite_differences(small, encoder, spec):
    g, q = small
    p = init_params(5, encoder, d=8, scale=1.0)
    batch = {"ce": g, "qa": q, "mtl": (g, q)}[spec]
    _, grads = backward(p, batch, spec)
    loss = {
        "ce": lambda pp: ce_loss_and_grad(pp, g, False)[0],
        "qa": lambda pp: qa_loss_and_grad(pp, q, False)[0],
        "mtl": lambda pp: ce_loss_and_grad(pp, g, False)[0] + qa_loss_and_grad(pp, q, False)[0],
    }[spec]
    assert fd_max_rel_error(loss, p, grads) < 1e-4


@pytest.mark.parametrize("draw", range(6))
def test_gradients_at_default_init(draw):
    # central differences carry ~1e-11 of absolute round-off, which swamps
    # the relative error of entries below ~1e-7; those are judged absolutely
    encoder = ("seq", "bow")[draw % 2]
    g = tensorize(generate_instances(100 + draw, 5))
    q = tensorize_qa(generate_qa_examples(100 + draw, 5))
    p = init_params(draw, encoder, d=8)
    for spec, batch, loss in [
        ("ce", g, lambda pp: ce_loss_and_grad(pp, g, False)[0]),
        ("qa", q, lambda pp: qa_loss_and_grad(pp, q, False)[0]),
    ]:
        _, grads = backward(p, batch, spec)
        assert fd_max_rel_error(loss, p, grads, atol=1e-10) < 1e-4


def test_untouched_rows_have_zero_gradient(small):
    g, _ = small
    p = init_params(6, "seq")
    _, grads = ce_loss_and_grad(p, g)
    used = set(np.unique(g.tokens[g.tok_mask]))
    for row in range(len(VOCAB)):
        if row not in used:
            assert not grads.E[row].any()
    L = g.tokens.shape[1]
    assert not grads.P[L:].any()
    assert not grads.U.any() and not grads.d0.any()


def test_zero_lr_step_keeps_loss(small):
    g, _ = small
    p = init_params(7, "seq")
    before, grads = ce_loss_and_grad(p, g)
    SGD().step(p, grads, 0.0)
    assert ce_loss_and_grad(p, g, False)[0] == before


def test_non_finite_is_reported(small):
    g, _ = small
    p = init_params(8, "seq")
    p.W[0, 0] = np.nan
    with pytest.raises(NonFiniteError):
        ce_loss_and_grad(p, g)


def test_checkpoint_round_trip(tmp_path):
    p = init_params(9, "bow", d=4)
    path = tmp_path / "p.json"
    save_params(p, path)
    q = load_params(path)
    assert q.encoder == "bow"
    for k, v in p.arrays().items():
        assert np.array_equal(v, q.arrays()[k])
    assert params_to_dict(q) == params_to_dict(p)
    with pytest.raises(ValueError):
        params_from_dict({**params_to_dict(p), "version": 99})


def test_seq_order_flips_argmax():
    # the same bag of words in two orders picks different boxes
    scene = Scene(0, (B(0, 0.1, 0.1, "ball", "red"), B(1, 0.6, 0.1, "cup", "blue")))
    a = ["the", "red", "ball", "left", "of", "the", "blue", "cup"]
    b = ["the", "blue", "cup", "left", "of", "the", "red", "ball"]
    data = tensorize([inst(scene, Parse(NP("ball")), 0)] * 2)
    for seed in itertools.count():
        p = init_params(seed, "seq", scale=1.0)
        ids = np.array([token_ids(a, 16), token_ids(b, 16)])
        u, _ = encode_batch(p, ids, np.ones_like(ids, dtype=bool))
        V = np.tanh(data.feats[0] @ p.W.T + p.c)
        if (V @ u[0]).argmax() != (V @ u[1]).argmax():
            break
        assert seed < 1000
    bow = ModelParams(**p.arrays(), encoder="bow")
    ub, _ = encode_batch(bow, ids, np.ones_like(ids, dtype=bool))
    assert np.array_equal(ub[0], ub[1])
