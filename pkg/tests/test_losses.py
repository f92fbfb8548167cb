import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import central_diff, rel_error
from sanerec.backbone import NodeRepresentations
from sanerec.data import graph_from_edges
from sanerec.losses import (COMPONENTS, DistillConfig, LossWeights, TripletBatch, bpr_loss,
                            contrastive_negatives, kd_contrastive, kd_local, kl_cluster_loss,
                            l2_penalty, sane_loss, total_loss)


def _reps(rng, n_u=4, n_i=6, d=3):
    return NodeRepresentations(rng.normal(size=(n_u, d)), rng.normal(size=(n_i, d)))


def _batch(rng, n_u=4, n_i=6, n=7, mult=False):
    m = rng.integers(1, 4, n) if mult else None
    return TripletBatch(rng.integers(0, n_u, n), rng.integers(0, n_i, n), rng.integers(0, n_i, n), m)


def test_bpr_equal_scores_is_ln2():
    reps = NodeRepresentations(np.ones((1, 2)), np.array([[1.0, 0.0], [0.0, 1.0]]))
    value, _ = bpr_loss(TripletBatch([0, 0], [0, 1], [1, 0]), reps)
    assert value == pytest.approx(2 * math.log(2))


def test_bpr_large_gap_is_stable():
    reps = NodeRepresentations(np.array([[1e4]]), np.array([[1e4], [-1e4]]))
    v, g = bpr_loss(TripletBatch([0], [0], [1]), reps)
    assert v == 0.0 and np.isfinite(g["user"]).all()
    v, g = bpr_loss(TripletBatch([0], [1], [0]), reps)
    assert v == pytest.approx(2e8) and np.isfinite(g["item"]).all()


def test_bpr_rejects_multiplicities_and_empty():
    reps = _reps(np.random.default_rng(0))
    with pytest.raises(ValueError):
        bpr_loss(TripletBatch([0], [0], [1], [2]), reps)
    with pytest.raises(ValueError):
        bpr_loss(TripletBatch([], [], []), reps)
    with pytest.raises(ValueError):
        TripletBatch([0], [0], [1], [0])


def test_sane_hand_case():
    reps = NodeRepresentations(np.ones((1, 2)), np.array([[1.0, 0.0], [0.0, 1.0]]))
    v, _ = sane_loss(TripletBatch([0], [0], [1], [3]), reps)
    assert v == pytest.approx(3 * math.log(2))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_sane_unit_equals_bpr_bitwise(seed):
    rng = np.random.default_rng(seed)
    reps, batch = _reps(rng), _batch(rng)
    vb, gb = bpr_loss(batch, reps, 0.01)
    vs, gs = sane_loss(batch, reps, 0.01)
    assert vb == vs
    assert all(np.array_equal(gb[k], gs[k]) for k in gb)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_sane_multiplicity_equals_duplication(seed):
    rng = np.random.default_rng(seed)
    reps, batch = _reps(rng), _batch(rng, mult=True)
    v1, g1 = sane_loss(batch, reps)
    v2, g2 = sane_loss(batch.expand(), reps)
    assert v1 == v2
    for k in g1:
        assert np.allclose(g1[k], g2[k], rtol=1e-12, atol=1e-14)


def _check_grads(fn, reps, tol=1e-5):
    _, g = fn()
    for key, arr in (("user", reps.user_reps), ("item", reps.item_reps)):
        fd = central_diff(lambda: fn()[0], arr)
        assert rel_error(g[key], fd) < tol, key


@pytest.mark.parametrize("seed", range(20))
def test_bpr_sane_gradients(seed):
    rng = np.random.default_rng(seed)
    reps = _reps(rng)
    b1, b2 = _batch(rng), _batch(rng, mult=True)
    _check_grads(lambda: bpr_loss(b1, reps, 0.05), reps)
    _check_grads(lambda: sane_loss(b2, reps, 0.05), reps)


def _prev_graph(rng, n_u=4, n_i=6, n=9):
    return graph_from_edges(rng.integers(0, n_u, n), rng.integers(0, n_i, n), n_u, n_i)


@pytest.mark.parametrize("seed", range(20))
def test_kd_gradients(seed):
    rng = np.random.default_rng(seed)
    g = _prev_graph(rng)
    teacher = _reps(rng, 5, 7)
    student = _reps(rng, 5, 7)
    _check_grads(lambda: kd_local(teacher, student, g), student)
    cfg = DistillConfig("contrastive", tau_c=float(rng.uniform(0.3, 2.0)), n_negatives=3, seed=seed)
    negs = contrastive_negatives(g, 3, seed)
    _check_grads(lambda: kd_contrastive(teacher, student, g, cfg, negs), student)


def test_kd_local_identity_and_hand_case():
    rng = np.random.default_rng(0)
    g = _prev_graph(rng)
    r = _reps(rng)
    assert kd_local(r, r, g)[0] == 0.0
    g1 = graph_from_edges([0], [0], 1, 1)
    teacher = NodeRepresentations(np.array([[1.0]]), np.array([[1.0]]))
    student = NodeRepresentations(np.array([[1.0]]), np.array([[0.0]]))
    assert kd_local(teacher, student, g1, sides="user")[0] == pytest.approx(1.0)


def test_kd_local_isolated_user_contributes_zero():
    g = graph_from_edges([0], [0], 2, 1)
    teacher = NodeRepresentations(np.array([[1.0], [5.0]]), np.array([[1.0]]))
    student = NodeRepresentations(np.array([[1.0], [-3.0]]), np.array([[1.0]]))
    assert kd_local(teacher, student, g)[0] == 0.0


def test_kd_contrastive_hand_cases():
    g = graph_from_edges([0], [0], 1, 2)
    t = NodeRepresentations(np.array([[1.0]]), np.array([[1.0], [1.0]]))
    s = NodeRepresentations(np.array([[0.7]]), np.array([[1.0], [1.0]]))
    cfg = DistillConfig("contrastive")
    only_pos = kd_contrastive(t, s, g, cfg, negatives=[np.array([], dtype=np.int64)])
    item_term = kd_local(t, s, g, sides="item")[0]
    assert only_pos[0] - item_term == pytest.approx(0.0, abs=1e-15)
    with_neg = kd_contrastive(t, s, g, cfg, negatives=[np.array([1])])
    assert with_neg[0] - item_term == pytest.approx(math.log(2))


def test_kd_requires_coverage():
    g = graph_from_edges([0, 1], [0, 1], 2, 2)
    small = NodeRepresentations(np.ones((1, 2)), np.ones((2, 2)))
    with pytest.raises(ValueError):
        kd_local(small, small, g)


def test_contrastive_negatives_exclude_neighbours():
    rng = np.random.default_rng(3)
    g = _prev_graph(rng, 5, 10, 20)
    negs = contrastive_negatives(g, 4, 0)
    for u, n in enumerate(negs):
        assert not set(n.tolist()) & set(g.user_adj[u].tolist())
        assert len(set(n.tolist())) == len(n)


def test_l2_penalty_touched_rows():
    tables = (np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1.0, 0.0], [0.0, 2.0], [5.0, 5.0]]))
    v, g = l2_penalty(tables, [0, 0], [1], 0.5)
    assert v == pytest.approx(0.5 * (5 + 4))
    assert np.array_equal(g["user_table"][1], [0.0, 0.0]) and np.array_equal(g["item_table"][1], [0.0, 2.0])


def test_kl_component_shape():
    rng = np.random.default_rng(0)
    reps = _reps(rng)
    p = np.full((6, 2), 0.5)
    v, g = kl_cluster_loss(p, reps, rng.normal(size=(2, 3)))
    assert v >= 0 and g["item"].shape == reps.item_reps.shape and g["centroids"].shape == (2, 3)


def _component(rng, value):
    return value, {"user": rng.normal(size=(2, 2)), "item": rng.normal(size=(3, 2))}


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_total_loss_weighted_sum(seed):
    rng = np.random.default_rng(seed)
    comps = {c: _component(rng, float(rng.uniform(0, 10))) for c in COMPONENTS}
    w = LossWeights(float(rng.uniform(0, 3)), float(rng.uniform(0, 3)), 0.1)
    total, grads, weighted = total_loss(comps, w)
    scale = {"triplet": 1.0, "kd": w.lambda_kd, "sane": 1.0, "kl": w.beta, "reg": 1.0}
    expect = sum(scale[c] * comps[c][0] for c in COMPONENTS)
    assert abs(total - expect) <= 1e-12 * max(1.0, abs(expect))
    g_user = sum(scale[c] * comps[c][1]["user"] for c in COMPONENTS)
    assert np.allclose(grads["user"], g_user, atol=1e-12)


def test_total_loss_reductions_and_errors():
    rng = np.random.default_rng(0)
    comps = {"triplet": _component(rng, 2.0), "sane": _component(rng, 1.5), "kd": _component(rng, 9.0),
             "kl": _component(rng, 7.0)}
    assert total_loss(comps, LossWeights(0, 0, 0))[0] == 3.5
    assert total_loss({"triplet": comps["triplet"]}, LossWeights())[0] == 2.0
    with pytest.raises(FloatingPointError, match="kd"):
        total_loss({"kd": (float("nan"), {})}, LossWeights(1.0))
    with pytest.raises(ValueError):
        LossWeights(-1.0)
    with pytest.raises(ValueError):
        DistillConfig("contrastive", tau_c=0.0)
