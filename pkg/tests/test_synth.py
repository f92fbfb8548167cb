import numpy as np
import pytest

from sanerec.data import build_block_graph, category_histogram, split_blocks
from sanerec.metrics import interest_shift_indicator, normalise_rows
from sanerec.synth import synth_drift_dataset


def _block_hist(ds, blk):
    K = int(ds.categories.max()) + 1
    sel = ds.log.timestamps // 1_000_000 == blk
    h = np.zeros((ds.log.n_users, K))
    np.add.at(h, (ds.log.users[sel], ds.categories[ds.log.items[sel]]), 1)
    return normalise_rows(h)


def test_deterministic():
    a = synth_drift_dataset(30, 60, seed=4, events_per_user_block=3)
    b = synth_drift_dataset(30, 60, seed=4, events_per_user_block=3)
    assert np.array_equal(a.log.items, b.log.items) and np.array_equal(a.categories, b.categories)


def test_no_drift_keeps_distributions():
    ds = synth_drift_dataset(40, 80, drift_fraction=0.0, events_per_user_block=4, seed=1)
    assert not ds.drifting.any()
    for b in range(1, ds.n_blocks):
        assert np.array_equal(ds.user_probs[b], ds.user_probs[0])


def test_full_drift_raises_iss_at_flip():
    ds = synth_drift_dataset(60, 400, drift_fraction=1.0, flip_block=2, n_blocks=4,
                             events_per_user_block=20, seed=2, dominant_weight=0.9)
    h0, h1, h2 = (_block_hist(ds, b) for b in range(3))
    assert np.all(interest_shift_indicator(h2, h1) > interest_shift_indicator(h1, h0))


def test_ground_truth_consistency():
    ds = synth_drift_dataset(50, 200, seed=0, events_per_user_block=5)
    assert ds.drifting.sum() == 15
    assert np.all(ds.old_dominant[ds.drifting] != ds.new_dominant[ds.drifting])
    assert np.all(ds.old_dominant[~ds.drifting] == ds.new_dominant[~ds.drifting])
    assert np.allclose(ds.user_probs.sum(-1), 1.0)
    pairs = set(zip(ds.log.users.tolist(), ds.log.items.tolist()))
    assert len(pairs) == len(ds.log)


def test_blocks_align_with_schedule():
    ds = synth_drift_dataset(20, 80, n_blocks=4, events_per_user_block=5, seed=3)
    sched = split_blocks(ds.log, 0.25, 3, 0.0)
    g = build_block_graph(ds.log, sched, 1)
    assert category_histogram(g, ds.categories, 4).sum() == 100


@pytest.mark.parametrize("kw", [dict(K_true=1), dict(drift_fraction=1.5), dict(n_items=10),
                                dict(flip_block=9)])
def test_infeasible(kw):
    args = dict(n_users=10, n_items=100, events_per_user_block=2) | kw
    with pytest.raises(ValueError):
        synth_drift_dataset(**args)
