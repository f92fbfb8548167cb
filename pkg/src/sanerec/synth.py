"""Synthetic interaction logs with planted per-user category drift."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import InteractionLog, make_log

BLOCK_SPAN = 1_000_000


@dataclass(frozen=True)
class SynthDataset:
    """Generated log plus ground truth, all indexed by the log's dense ids.

    ``user_probs[b, u]`` is user u's category distribution in block b;
    ``old_dominant``/``new_dominant`` give each user's favourite category
    before and after ``flip_block`` (equal for non-drifting users).
    """

    log: InteractionLog
    categories: np.ndarray
    user_probs: np.ndarray
    drifting: np.ndarray
    old_dominant: np.ndarray
    new_dominant: np.ndarray
    n_blocks: int
    flip_block: int


def synth_drift_dataset(n_users: int, n_items: int, K_true: int = 4, drift_fraction: float = 0.3,
                        flip_block: int = 2, n_blocks: int = 4, events_per_user_block: int = 10,
                        seed: int = 0, dominant_weight: float = 0.7,
                        popularity_exponent: float = 0.8) -> SynthDataset:
    """Sample a block-structured log in which some users switch favourite category.

    Items are split evenly into ``K_true`` categories with Zipf-like
    popularity inside each category. Every user mixes a dominant category
    (weight ``dominant_weight``) with a Dirichlet spread over the rest.
    A ``drift_fraction`` of users swap their dominant category for another
    one from ``flip_block`` onwards. Each user draws
    ``events_per_user_block`` distinct, never-before-seen items per block.
    """
    if K_true < 2:
        raise ValueError("need at least two categories")
    if not 0.0 <= drift_fraction <= 1.0:
        raise ValueError("drift_fraction must lie in [0, 1]")
    if n_users < 1 or n_items < K_true or n_blocks < 1 or events_per_user_block < 1:
        raise ValueError("infeasible dataset sizes")
    if events_per_user_block * n_blocks > n_items // K_true:
        raise ValueError("a user could exhaust a category; increase n_items or reduce events")
    if not 0 <= flip_block <= n_blocks:
        raise ValueError("flip_block outside [0, n_blocks]")

    rng = np.random.default_rng(seed)
    cats = np.arange(n_items) % K_true
    rng.shuffle(cats)
    pop = np.empty(n_items)
    for k in range(K_true):
        members = np.flatnonzero(cats == k)
        ranks = rng.permutation(members.shape[0])
        pop[members] = 1.0 / (1.0 + ranks) ** popularity_exponent

    old_dom = rng.integers(K_true, size=n_users)
    n_drift = int(round(drift_fraction * n_users))
    drifting = np.zeros(n_users, dtype=bool)
    drifting[rng.choice(n_users, size=n_drift, replace=False)] = True
    new_dom = old_dom.copy()
    offsets = rng.integers(1, K_true, size=n_users)
    new_dom[drifting] = (old_dom[drifting] + offsets[drifting]) % K_true

    base = np.empty((n_users, K_true))
    for u in range(n_users):
        rest = rng.dirichlet(np.ones(K_true - 1))
        row = np.insert(rest * (1.0 - dominant_weight), old_dom[u], 0.0)
        row[old_dom[u]] += dominant_weight
        base[u] = row
    probs = np.repeat(base[None], n_blocks, axis=0)
    for u in np.flatnonzero(drifting):
        a, b = old_dom[u], new_dom[u]
        probs[flip_block:, u, [a, b]] = probs[flip_block:, u, [b, a]]

    users, items, stamps = [], [], []
    seen = np.zeros((n_users, n_items), dtype=bool)
    for blk in range(n_blocks):
        for u in range(n_users):
            w = probs[blk, u, cats] * pop
            w[seen[u]] = 0.0
            chosen = rng.choice(n_items, size=events_per_user_block, replace=False, p=w / w.sum())
            seen[u, chosen] = True
            users.extend([u] * events_per_user_block)
            items.extend(chosen.tolist())
            stamps.extend((blk * BLOCK_SPAN + rng.integers(BLOCK_SPAN, size=events_per_user_block)).tolist())

    log = make_log(users, items, stamps)
    raw_u = np.asarray(log.raw_users)
    raw_i = np.asarray(log.raw_items)
    # items never drawn have no dense id and are dropped
    return SynthDataset(log, cats[raw_i], probs[:, raw_u], drifting[raw_u], old_dom[raw_u],
                        new_dom[raw_u], n_blocks, flip_block)
