"""Top-K ranking metrics and the per-user interest shift indicator."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_CUTOFFS = (5, 10, 15, 20)


@dataclass
class EvalRequest:
    """Ranked lists and ground truth for the users being evaluated.

    ``ranked[n]`` is user ``users[n]``'s ranking (longest cutoff or more),
    ``truth[n]`` the set of items that user interacted with in the
    evaluation range.
    """

    users: np.ndarray
    ranked: list
    truth: list
    cutoffs: tuple = DEFAULT_CUTOFFS


def _hits(ranked, truth, k):
    return np.fromiter((item in truth for item in ranked[:k]), dtype=bool, count=min(k, len(ranked)))


def _evaluable(request: EvalRequest) -> list[int]:
    keep = [n for n, t in enumerate(request.truth) if len(t) > 0]
    if not keep:
        raise ValueError("no user has ground-truth interactions")
    return keep


def recall_precision_at_k(request: EvalRequest, k: int):
    """Per-user recall/precision at ``k`` and their means.

    Users with empty ground truth are skipped.
    """
    if k < 1:
        raise ValueError("cutoff must be >= 1")
    keep = _evaluable(request)
    recall = np.empty(len(keep))
    precision = np.empty(len(keep))
    for r, n in enumerate(keep):
        h = _hits(request.ranked[n], request.truth[n], k).sum()
        recall[r] = h / len(request.truth[n])
        precision[r] = h / k
    return recall, precision, float(recall.mean()), float(precision.mean())


def ndcg_at_k(request: EvalRequest, k: int):
    """NDCG with the whole-prefix normaliser sum_{r<=k} 1/log2(1+r).

    The denominator does not depend on how many relevant items the user
    has, so a single relevant item at rank 1 scores below 1 when k > 1.
    """
    if k < 1:
        raise ValueError("cutoff must be >= 1")
    keep = _evaluable(request)
    discounts = 1.0 / np.log2(np.arange(2, k + 2))
    norm = discounts.sum()
    out = np.empty(len(keep))
    for r, n in enumerate(keep):
        h = _hits(request.ranked[n], request.truth[n], k)
        out[r] = (h * discounts[: h.shape[0]]).sum() / norm
    return out, float(out.mean())


def map_at_k(request: EvalRequest, k: int):
    """AP@k = (1/|truth|) * sum of precision@r at each relevant rank r <= k."""
    if k < 1:
        raise ValueError("cutoff must be >= 1")
    keep = _evaluable(request)
    out = np.empty(len(keep))
    for r, n in enumerate(keep):
        h = _hits(request.ranked[n], request.truth[n], k)
        prec = np.cumsum(h) / np.arange(1, h.shape[0] + 1)
        out[r] = (prec * h).sum() / len(request.truth[n])
    return out, float(out.mean())


METRICS = ("recall", "precision", "map", "ndcg")


def evaluate(request: EvalRequest) -> dict:
    """``{(metric, k): (per_user_values, mean)}`` for every cutoff."""
    out = {}
    for k in request.cutoffs:
        rec, prec, mrec, mprec = recall_precision_at_k(request, k)
        out[("recall", k)] = (rec, mrec)
        out[("precision", k)] = (prec, mprec)
        out[("map", k)] = map_at_k(request, k)
        out[("ndcg", k)] = ndcg_at_k(request, k)
    return out


def normalise_rows(hist: np.ndarray) -> np.ndarray:
    """L1-normalise histogram rows; all-zero rows stay zero."""
    h = np.asarray(hist, dtype=np.float64)
    total = h.sum(axis=1, keepdims=True)
    return np.divide(h, total, out=np.zeros_like(h), where=total > 0)


def interest_shift_indicator(i_t: np.ndarray, i_prev: np.ndarray) -> np.ndarray:
    """Per-user mean squared change of normalised category proportions."""
    a, b = np.asarray(i_t, dtype=np.float64), np.asarray(i_prev, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return ((a - b) ** 2).mean(axis=1)


def high_shift_cohort(iss: np.ndarray, fraction: float = 0.15, eligible=None) -> np.ndarray:
    """Ids of the top ``fraction`` users by ISS (ties by ascending id).

    ``eligible`` optionally restricts the candidate users (boolean mask).
    """
    ids = np.arange(iss.shape[0]) if eligible is None else np.flatnonzero(eligible)
    n = max(1, int(round(fraction * ids.shape[0]))) if ids.size else 0
    order = np.lexsort((ids, -iss[ids]))
    return np.sort(ids[order[:n]])
