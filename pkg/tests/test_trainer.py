import dataclasses

import numpy as np
import pytest

from sanerec.backbone import forward, init_embeddings
from sanerec.data import build_block_graph, make_log, split_blocks
from sanerec.losses import DistillConfig, LossWeights, TripletBatch
from sanerec.reservoir import ReservoirConfig
from sanerec.synth import synth_drift_dataset
from sanerec.trainer import (Adam, IncrementalContext, TrainerConfig, base_step_loss, format_records,
                             incremental_step_loss, make_eval_request, train_base_block,
                             train_incremental_block, uniform_negatives)
from sanerec.losses import total_loss

FAST = TrainerConfig(batch_size=32, learning_rate=0.01, dim=8, n_layers=1, dropout=0.0,
                     min_epochs_base=5, max_epochs_base=5, min_epochs_incremental=6,
                     max_epochs_incremental=6, patience=100)


def _planted_log(seed=0, n_events=600):
    rng = np.random.default_rng(seed)
    users = rng.integers(0, 20, n_events)
    items = np.where(users < 10, rng.integers(0, 15, n_events), rng.integers(15, 30, n_events))
    return make_log(users.tolist(), items.tolist(), rng.permutation(n_events).tolist())


def test_uniform_negatives_examples():
    assert uniform_negatives([{0}], 2, 20, [0], 1).ravel().tolist() == [1] * 20
    a = uniform_negatives([{0}, {1}], 5, 4, [0, 1, 0], 7)
    b = uniform_negatives([{0}, {1}], 5, 4, [0, 1, 0], 7)
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        uniform_negatives([{0, 1}], 2, 1, [0], 0)


def test_uniform_negatives_frequencies():
    n = 100_000
    draws = uniform_negatives([{10, 11}], 12, n, [0], 3).ravel()
    freq = np.bincount(draws, minlength=12)
    assert freq[10] == freq[11] == 0
    sigma = np.sqrt(n * 0.1 * 0.9)
    assert np.all(np.abs(freq[:10] - n / 10) <= 3 * sigma)


def test_adam_first_step_is_lr_sign():
    p = np.array([1.0, -2.0])
    opt = Adam([p], lr=0.1)
    opt.step([np.array([3.0, -0.5])])
    assert np.allclose(p, [0.9, -1.9], atol=1e-6)


def test_base_training_loss_decreases():
    log = _planted_log()
    sched = split_blocks(log, 0.6, 2)
    _, records = train_base_block(log, sched, dataclasses.replace(FAST, learning_rate=0.003))
    totals = [r.total for r in records]
    assert len(totals) == 5 and all(a > b for a, b in zip(totals, totals[1:]))


def test_base_training_deterministic():
    log = _planted_log()
    sched = split_blocks(log, 0.6, 2)
    s1, r1 = train_base_block(log, sched, FAST)
    s2, r2 = train_base_block(log, sched, FAST)
    assert s1.checksum() == s2.checksum()
    assert [r.total for r in r1] == [r.total for r in r2]


def test_base_training_rejects_zero_epochs():
    log = _planted_log()
    with pytest.raises(ValueError):
        train_base_block(log, split_blocks(log, 0.6, 2), dataclasses.replace(FAST, max_epochs_base=0))


def test_records_sum_components():
    log = _planted_log()
    sched = split_blocks(log, 0.6, 2)
    state, _ = train_base_block(log, sched, FAST)
    res = train_incremental_block(state, state.copy(), log, sched, 1, None, FAST,
                                  LossWeights(0.5, 0.1, 1e-4), DistillConfig("local"),
                                  ReservoirConfig(Q=5, K=3, refresh_every_f=2))
    for r in res.records:
        assert abs(r.total - sum(r.losses.values())) <= 1e-9 * max(1.0, abs(r.total))
    header, first = format_records(res.records).splitlines()[:2]
    assert header.split("\t")[:3] == ["block", "epoch", "triplet"]
    assert len(first.split("\t")) == len(header.split("\t"))


def test_refresh_schedule_and_teacher_untouched():
    log = _planted_log()
    sched = split_blocks(log, 0.6, 2)
    state, _ = train_base_block(log, sched, FAST)
    teacher = state.copy()
    before = teacher.checksum()
    res = train_incremental_block(state, teacher, log, sched, 1, None, FAST,
                                  LossWeights(1.0, 0.1), DistillConfig("contrastive"),
                                  ReservoirConfig(Q=5, K=3, refresh_every_f=2))
    assert res.refresh_epochs == [0, 2, 4]
    assert len(res.records) == 6
    assert teacher.checksum() == before
    assert res.reservoir is not None and res.categories is not None


def test_incremental_argument_errors():
    log = _planted_log()
    sched = split_blocks(log, 0.6, 2)
    state, _ = train_base_block(log, sched, FAST)
    with pytest.raises(ValueError):
        train_incremental_block(state, None, log, sched, 1, None, FAST)
    with pytest.raises(ValueError):
        train_incremental_block(state, state, log, sched, 0, None, FAST)


@pytest.mark.parametrize("seed", range(5))
def test_incremental_step_reduces_to_fine_tune(seed):
    rng = np.random.default_rng(seed)
    log = _planted_log(seed)
    sched = split_blocks(log, 0.6, 2)
    graph = build_block_graph(log, sched, 1)
    state = init_embeddings(graph.n_users, graph.n_items, 6, seed, n_layers=2)
    reps = forward(state, graph)
    idx = rng.choice(graph.n_edges, 16, replace=False)
    users, pos = graph.edge_users[idx], graph.edge_items[idx]
    negs = uniform_negatives(graph.positives(), graph.n_items, 5, users, rng)
    w = LossWeights(0.0, 0.0, 1e-3)
    base = total_loss(base_step_loss(state, reps, users, pos, negs, w.lambda_reg), w)
    inc = total_loss(incremental_step_loss(state, reps, users, pos, negs, None, w,
                                           IncrementalContext()), w)
    assert abs(base[0] - inc[0]) <= 1e-9
    for k in base[1]:
        assert np.allclose(base[1][k], inc[1][k], atol=1e-12)


def test_eval_request_excludes_history():
    log = make_log(["a", "a", "a", "b"], ["x", "y", "x", "z"], [0, 1, 2, 3])
    state = init_embeddings(2, 3, 4, n_layers=0)
    req = make_eval_request(forward(state, build_block_graph(log, split_blocks(log, 0.5, 1, 0.0), 0)),
                            log, 2, (2, 4), 3, (3,))
    # "a" re-consumed x, which is history, so only "b" is evaluated
    assert req.users.tolist() == [1] and req.truth == [{2}]
    req = make_eval_request(forward(state, build_block_graph(log, split_blocks(log, 0.5, 1, 0.0), 0)),
                            log, 1, (1, 4), 3, (3,))
    assert req.truth[0] == {1} and 0 not in req.ranked[0]


def test_drift_block_with_true_categories():
    ds = synth_drift_dataset(40, 120, events_per_user_block=5, flip_block=1, seed=0)
    sched = split_blocks(ds.log, 0.25, 3)
    cfg = dataclasses.replace(FAST, n_layers=0, min_epochs_incremental=2, max_epochs_incremental=2)
    state, _ = train_base_block(ds.log, sched, cfg)
    res = train_incremental_block(state, state.copy(), ds.log, sched, 1, None, cfg,
                                  res_cfg=ReservoirConfig(Q=10, K=4), categories=ds.categories,
                                  track_negatives=True)
    ru, ri, rc = res.negatives.arrays()[2:]
    assert rc.sum() == cfg.n_reservoir * build_block_graph(ds.log, sched, 1).n_edges * 2
    for u, i in zip(ru[:50], ri[:50]):
        assert i in res.reservoir.items[u]
