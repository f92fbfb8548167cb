import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import ap_def, ndcg_def, permutation_cases, precision_def, recall_def
from sanerec.metrics import (EvalRequest, evaluate, high_shift_cohort, interest_shift_indicator,
                             map_at_k, ndcg_at_k, normalise_rows, recall_precision_at_k)


def _req(ranked, truth, cutoffs=(1,)):
    return EvalRequest(np.arange(len(ranked)), ranked, truth, cutoffs)


def test_ndcg_hand_cases():
    assert ndcg_at_k(_req([[0, 1, 2]], [{0, 2}]), 3)[1] == pytest.approx(0.70392, abs=1e-5)
    assert ndcg_at_k(_req([[0, 1]], [{0}]), 2)[1] == pytest.approx(0.61315, abs=1e-5)
    assert ndcg_at_k(_req([[0, 1, 2]], [{0, 1, 2}]), 3)[1] == pytest.approx(1.0)
    assert ndcg_at_k(_req([[0, 1, 2]], [{7}]), 3)[1] == 0.0


def test_map_hand_cases():
    assert map_at_k(_req([[0, 1]], [{1}]), 2)[1] == 0.5
    assert map_at_k(_req([[1, 0]], [{1}]), 2)[1] == 1.0


def test_recall_precision_hand_case():
    rec, prec, mrec, mprec = recall_precision_at_k(_req([[3, 1, 2], [5, 6, 7]], [{1, 9}, {5}]), 2)
    assert rec.tolist() == [0.5, 1.0] and prec.tolist() == [0.5, 0.5]


def test_empty_truth_users_skipped():
    rec = recall_precision_at_k(_req([[0, 1], [0, 1]], [set(), {1}]), 2)[0]
    assert rec.tolist() == [1.0]
    with pytest.raises(ValueError):
        recall_precision_at_k(_req([[0]], [set()]), 1)
    with pytest.raises(ValueError):
        ndcg_at_k(_req([[0]], [{0}]), 0)


def test_exhaustive_permutations_match_definitions():
    for ranked, truth in permutation_cases(6):
        for k in range(1, len(ranked) + 2):
            req = _req([ranked], [truth])
            rec, prec, _, _ = recall_precision_at_k(req, k)
            assert rec[0] == pytest.approx(recall_def(ranked, truth, k), abs=1e-12)
            assert prec[0] == pytest.approx(precision_def(ranked, truth, k), abs=1e-12)
            assert ndcg_at_k(req, k)[0][0] == pytest.approx(ndcg_def(ranked, truth, k), abs=1e-12)
            assert map_at_k(req, k)[0][0] == pytest.approx(ap_def(ranked, truth, k), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_metric_properties(data):
    n = data.draw(st.integers(1, 6))
    ranked = data.draw(st.permutations(list(range(n))))
    truth = set(data.draw(st.lists(st.integers(0, 8), min_size=1, max_size=6)))
    req = _req([ranked], [truth], (1, 2, 3, 4, 5, 6))
    res = evaluate(req)
    for key, (_, mean) in res.items():
        assert 0.0 <= mean <= 1.0 + 1e-12
    recalls = [res[("recall", k)][1] for k in range(1, 7)]
    assert all(a <= b for a, b in zip(recalls, recalls[1:]))
    for k in range(1, 7):
        all_relevant = len(ranked) >= k and all(i in truth for i in ranked[:k])
        assert (abs(res[("ndcg", k)][1] - 1.0) < 1e-12) == all_relevant


def test_iss_examples():
    a = np.array([[1.0, 0.0]])
    assert interest_shift_indicator(a, a).tolist() == [0.0]
    assert interest_shift_indicator(a, np.array([[0.0, 1.0]])).tolist() == [1.0]
    with pytest.raises(ValueError):
        interest_shift_indicator(a, np.zeros((1, 3)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_iss_symmetric(seed):
    rng = np.random.default_rng(seed)
    a = normalise_rows(rng.integers(0, 5, (4, 3)))
    b = normalise_rows(rng.integers(0, 5, (4, 3)))
    assert np.array_equal(interest_shift_indicator(a, b), interest_shift_indicator(b, a))


def test_cohort_top_fraction():
    iss = np.array([0.1, 0.9, 0.5, 0.9, 0.0, 0.2, 0.3, 0.4, 0.6, 0.7])
    assert high_shift_cohort(iss, 0.2).tolist() == [1, 3]
    mask = np.ones(10, bool)
    mask[3] = False
    assert high_shift_cohort(iss, 0.2, mask).tolist() == [1, 9]


def test_normalise_rows_zero_row():
    assert normalise_rows(np.array([[0, 0], [1, 3]])).tolist() == [[0.0, 0.0], [0.25, 0.75]]
