import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from seqco import numcore as nc
from seqco import objective as O
from seqco.geometry import box_distance, giou
from seqco.matching import Assignment, build_branch_cost, build_rps_cost, hungarian, one_by_one
from seqco.model import SequencePrediction


def t64(x, grad=False):
    return nc.Tensor(np.asarray(x, float), requires_grad=grad, dtype=np.float64)


def pred(rng, n=6, d=3, grad=False):
    return SequencePrediction(t64(rng.normal(0, 2, n), grad), t64(rng.uniform(0.2, 0.7, (n, 4)), grad),
                              t64(rng.normal(size=(n, d)), grad))


def focal_oracle(logits, positives, alpha=0.25, gamma=2.0):
    total = 0.0
    for i, x in enumerate(logits):
        p = 1 / (1 + math.exp(-x))
        if i in positives:
            total += -(alpha if alpha is not None else 1) * (1 - p) ** gamma * math.log(p)
        else:
            total += -((1 - alpha) if alpha is not None else 1) * p ** gamma * math.log(1 - p)
    return total / max(1, len(positives))


def test_default_weights_are_published_constants():
    w = O.LossWeights()
    assert (w.lambda_cm, w.lambda_bm) == (2.0, 5.0)
    assert (w.lambda_f, w.lambda_b, w.lambda_e) == (2.0, 5.0, 10.0)
    assert (w.focal_alpha, w.focal_gamma, w.giou_sub_weight) == (0.25, 2.0, 0.4)
    assert O.EmaConfig().beta == 0.996


def test_weight_validation():
    with pytest.raises(ValueError):
        O.LossWeights(lambda_e=-1.0)
    with pytest.raises(ValueError):
        O.LossWeights(lambda_cm=3.0)
    with pytest.raises(ValueError):
        O.EmaConfig(beta=1.5)


def test_focal_single_positive_at_zero_logit():
    loss = O.focal_loss(t64([0.0]), Assignment((0,)))
    assert loss.item() == pytest.approx(0.25 * 0.5 ** 2 * math.log(2))


def test_focal_gamma_zero_is_bce(rng):
    x = rng.normal(size=5)
    loss = O.focal_loss(t64(x), Assignment((1, 3)), alpha=None, gamma=0.0).item()
    p = 1 / (1 + np.exp(-x))
    t = np.array([0, 1, 0, 1, 0])
    bce = -(t * np.log(p) + (1 - t) * np.log(1 - p)).sum() / 2
    assert loss == pytest.approx(bce, rel=1e-12)


def test_focal_saturated_logits():
    x = np.array([20.0, -20.0, -20.0])
    assert O.focal_loss(t64(x), Assignment((0,))).item() < 1e-6


@given(st.integers(0, 2**32 - 1))
def test_focal_matches_oracle_and_gradient(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(0, 3, 7)
    pos = tuple(int(q) for q in rng.choice(7, int(rng.integers(0, 4)), replace=False))
    xt = t64(x, grad=True)
    loss = O.focal_loss(xt, Assignment(pos) if pos else None)
    assert loss.item() == pytest.approx(focal_oracle(x, set(pos)), rel=1e-10, abs=1e-12)
    assert loss.item() >= 0
    g = nc.backward(loss).get(xt)
    if g is not None:
        num = nc.numerical_gradient(lambda: O.focal_loss(xt, Assignment(pos) if pos else None), xt)
        np.testing.assert_allclose(g, num, atol=1e-7)


def test_box_loss_components():
    preds = np.array([[0.5, 0.5, 0.2, 0.2], [0.3, 0.3, 0.2, 0.1], [0.7, 0.7, 0.1, 0.1]])
    tgts = np.array([[0.5, 0.5, 0.4, 0.4], [0.3, 0.35, 0.2, 0.1]])
    a = Assignment((0, 1))
    oracle = ((0.4 + 0.4 * (1 - giou(preds[0], tgts[0]))) + (0.05 + 0.4 * (1 - giou(preds[1], tgts[1])))) / 2
    assert O.box_loss(t64(preds), tgts, a).item() == pytest.approx(oracle)
    assert O.box_loss(t64(preds), preds[:2], a).item() == pytest.approx(0.0, abs=1e-9)  # GIoU eps residual
    assert O.box_loss(t64(preds), np.zeros((0, 4)), None).item() == 0.0


def test_similarity_examples(rng):
    assert O.similarity_loss(np.array([[1.0, 0.0]]), t64([[0.0, 0.0]]), Assignment((0,))).item() == 1.0
    z = rng.normal(size=(3, 2))
    assert O.similarity_loss(z, t64(z), one_by_one(3)).item() == 0.0
    with pytest.raises(ValueError):
        O.similarity_loss(z, t64(z), Assignment((0, 1)))
    with pytest.raises(ValueError):
        O.similarity_loss(z, t64(z), one_by_one(3), kind="cosine")


@pytest.mark.parametrize("kind", O.SIMILARITIES)
def test_similarity_oracle_and_stop_gradient(kind, rng):
    zm, zo = t64(rng.normal(size=(4, 5)), grad=True), t64(rng.normal(size=(4, 5)), grad=True)
    a = Assignment((2, 0, 3, 1))
    loss = O.similarity_loss(zm, zo, a, kind)
    ref = 0.0
    for i, q in enumerate(a.queries):
        for d in range(5):
            diff = zm.data[i, d] - zo.data[q, d]
            ref += diff * diff if kind == "l2" else abs(diff)
    assert loss.item() == pytest.approx(ref / 4, abs=1e-10)
    grads = nc.backward(loss)
    assert zm not in grads and zo in grads


def test_total_loss_is_sum_of_components(rng):
    on, mo = pred(rng), pred(rng)
    props = rng.uniform(0.2, 0.7, (3, 4))
    w = O.LossWeights()
    total, diag = O.total_loss(on, mo, props, w)
    rps = hungarian(build_rps_cost(on, props))
    branch = hungarian(build_branch_cost(on, mo))
    assert diag.rps_assignment == rps and diag.branch_assignment == branch
    focal = focal_oracle(on.class_logits.data, set(rps.queries))
    box = np.mean([box_distance(on.boxes.data[q], props[t]) for t, q in rps.pairs])
    sim = np.mean([((mo.projections.data[i] - on.projections.data[q]) ** 2).sum() for i, q in branch.pairs])
    assert total.item() == pytest.approx(2 * focal + 5 * box + 10 * sim, abs=1e-10)
    assert diag.loss_rps == pytest.approx(2 * focal + 5 * box, abs=1e-10)
    assert diag.loss_ssl == pytest.approx(10 * sim, abs=1e-10)
    assert diag.n_matched == 3 and min(diag.focal, diag.box, diag.similarity) >= 0


def test_zero_lambda_e_is_rps_only(rng):
    on, mo = pred(rng), pred(rng)
    props = rng.uniform(0.2, 0.7, (2, 4))
    total, diag = O.total_loss(on, mo, props, O.LossWeights(lambda_e=0.0))
    assert total.item() == pytest.approx(diag.loss_rps)


def test_perfect_identical_branches_zero_loss():
    n = 4
    props = np.array([[0.3, 0.3, 0.2, 0.2], [0.7, 0.6, 0.3, 0.2]])
    boxes = np.vstack([props, [[0.5, 0.5, 0.1, 0.1]] * 2])
    logits = np.array([30.0, 30.0, -30.0, -30.0])
    z = np.arange(n * 3, dtype=float).reshape(n, 3)
    p = SequencePrediction(t64(logits), t64(boxes), t64(z))
    total, _ = O.total_loss(p, p, props)
    assert total.item() <= 1e-6


def test_no_proposals_gives_all_background(rng):
    on, mo = pred(rng), pred(rng)
    total, diag = O.total_loss(on, mo, np.zeros((0, 4)))
    assert diag.rps_assignment is None and diag.n_matched == 0 and diag.box == 0.0
    assert diag.focal == pytest.approx(focal_oracle(on.class_logits.data, set()))


@given(st.integers(0, 2**32 - 1))
def test_one_by_one_never_beats_hungarian(seed):
    rng = np.random.default_rng(seed)
    on, mo = pred(rng), pred(rng)
    _, d_h = O.total_loss(on, mo, rng.uniform(0.2, 0.7, (2, 4)), matcher="hungarian")
    _, d_o = O.total_loss(on, mo, rng.uniform(0.2, 0.7, (2, 4)), matcher="one_by_one")
    assert d_h.branch_cost <= d_o.branch_cost + 1e-12


def store(rng, dtype=np.float32):
    return {n: nc.Tensor(rng.normal(size=s), dtype=dtype) for n, s in [("a", (3, 4)), ("b", (5,)), ("c", ())]}


@pytest.mark.parametrize("beta", [0.0, 0.5, 0.996, 1.0])
def test_ema_formula(beta, rng):
    for _ in range(25):
        mom, onl = store(rng), store(rng)
        before = {k: v.data.copy() for k, v in mom.items()}
        online_before = {k: v.data.copy() for k, v in onl.items()}
        O.ema_update(mom, onl, beta)
        for k in mom:
            want = beta * before[k].astype(np.float64) + (1 - beta) * online_before[k].astype(np.float64)
            assert np.all(np.abs(mom[k].data - want) <= np.spacing(np.abs(want).astype(np.float32)))
            np.testing.assert_array_equal(onl[k].data, online_before[k])
            if beta == 1.0:
                np.testing.assert_array_equal(mom[k].data, before[k])
            if beta == 0.0:
                np.testing.assert_array_equal(mom[k].data, online_before[k])


def test_ema_scalar_example_and_errors(rng):
    mom = {"w": nc.Tensor(np.array([1.0]), dtype=np.float64)}
    O.ema_update(mom, {"w": nc.Tensor(np.array([0.0]), dtype=np.float64)}, 0.996)
    assert mom["w"].data[0] == 0.996
    with pytest.raises(ValueError):
        O.ema_update(store(rng), {"a": nc.Tensor(np.zeros((3, 4)))}, 0.5)
    with pytest.raises(ValueError):
        O.ema_update(store(rng), store(rng), -0.1)


@given(st.integers(0, 2**32 - 1), st.floats(0.01, 0.99))
def test_ema_momentum_lies_between(seed, beta):
    rng = np.random.default_rng(seed)
    mom, onl = store(rng, np.float64), store(rng, np.float64)
    before = {k: v.data.copy() for k, v in mom.items()}
    O.ema_update(mom, onl, beta)
    for k in mom:
        lo = np.minimum(before[k], onl[k].data)
        hi = np.maximum(before[k], onl[k].data)
        assert np.all((mom[k].data >= lo) & (mom[k].data <= hi))
