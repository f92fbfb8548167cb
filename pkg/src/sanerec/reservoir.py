"""Personalised negative reservoir driven by per-user interest shift.

For each user the reservoir holds the Q items the model currently ranks
highest among items the user did not interact with in this block. A
Dirichlet prior built from the user's category interest shift is combined
with the category counts of those reservoir items; the posterior mean
weights each reservoir slot by its category.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import RankingContext


class EmptyReservoir(LookupError):
    """The user has no reservoir items; callers fall back to uniform negatives."""


@dataclass(frozen=True)
class ReservoirConfig:
    Q: int = 100
    lam: float = 1.0
    K: int = 10
    refresh_every_f: int = 2
    flip_sign: bool = False

    def __post_init__(self):
        if self.Q < 1:
            raise ValueError("Q must be >= 1")
        if not self.lam > 0:
            raise ValueError("prior strength must be positive")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.refresh_every_f < 1:
            raise ValueError("refresh_every_f must be >= 1")


@dataclass
class ReservoirState:
    items: list
    alpha: np.ndarray
    theta_hat: np.ndarray
    counts: np.ndarray
    M: list

    def dump(self) -> str:
        """One tab-separated row per user: user, alpha..., theta..., items."""
        rows = []
        for u, items in enumerate(self.items):
            a = " ".join(f"{v:.6g}" for v in self.alpha[u])
            th = " ".join(f"{v:.6g}" for v in self.theta_hat[u])
            it = " ".join(str(int(i)) for i in items)
            rows.append(f"{u}\t{a}\t{th}\t{it}\n")
        return "".join(rows)


@dataclass
class NegativeDraw:
    user: int
    items: np.ndarray
    multiplicities: np.ndarray

    @property
    def total(self) -> int:
        return int(self.multiplicities.sum())


def _normalise(row: np.ndarray) -> np.ndarray:
    total = row.sum()
    if total == 0:
        return np.full(row.shape[0], 1.0 / row.shape[0])
    return row / total


def interest_shift(h_t, h_prev) -> np.ndarray:
    """Difference of L1-normalised category histograms (current minus previous).

    An all-zero row counts as the uniform distribution.
    """
    a = np.asarray(h_t, dtype=np.float64)
    b = np.asarray(h_prev, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"histogram length mismatch: {a.shape} vs {b.shape}")
    return _normalise(a) - _normalise(b)


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


def prior_alpha(shift, lam: float, Q: int, flip_sign: bool = False) -> np.ndarray:
    """Dirichlet concentration ``lam * Q * softmax(-shift)``.

    Categories a user is drifting away from (negative shift) get more mass.
    ``flip_sign`` uses ``softmax(+shift)`` instead, for ablations.
    """
    s = np.asarray(shift, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise ValueError("shift has non-finite entries")
    if not lam > 0 or Q < 1:
        raise ValueError("need lam > 0 and Q >= 1")
    return lam * Q * _softmax(s if flip_sign else -s)


def posterior_theta(alpha, counts) -> np.ndarray:
    """Posterior mean of a Dirichlet(alpha) prior after multinomial ``counts``."""
    post = np.asarray(alpha, dtype=np.float64) + np.asarray(counts, dtype=np.float64)
    return post / post.sum()


def sampling_probs(theta_hat, reservoir_items, categories) -> np.ndarray:
    """Probability of each reservoir slot, proportional to its category's theta."""
    items = np.asarray(reservoir_items, dtype=np.int64)
    if items.size == 0:
        raise EmptyReservoir("empty reservoir")
    w = np.asarray(theta_hat, dtype=np.float64)[np.asarray(categories)[items]]
    return w / w.sum()


def category_counts(reservoir_items, categories, K: int) -> np.ndarray:
    cats = np.asarray(categories)[np.asarray(reservoir_items, dtype=np.int64)]
    return np.bincount(cats, minlength=K).astype(np.int64)


def update_reservoir(ranking: RankingContext, h_t: np.ndarray, h_prev: np.ndarray,
                     categories, config: ReservoirConfig) -> ReservoirState:
    """Rebuild every user's reservoir distribution from fresh top-Q lists.

    ``h_t``/``h_prev`` are category histograms of the current and previous
    block. Users with no interactions in either block get a zero shift,
    i.e. the uniform prior.
    """
    cats = np.asarray(categories)
    n_users = len(ranking.items)
    K = config.K
    for items in ranking.items:
        if items.size and (items.max() >= cats.shape[0] or cats[items].min() < 0
                           or cats[items].max() >= K):
            raise ValueError("category map is missing a reservoir item")
    alpha = np.empty((n_users, K))
    theta = np.empty((n_users, K))
    counts = np.zeros((n_users, K), dtype=np.int64)
    M = []
    for u in range(n_users):
        cur = h_t[u] if u < h_t.shape[0] else np.zeros(K)
        prev = h_prev[u] if u < h_prev.shape[0] else np.zeros(K)
        if cur.sum() == 0 or prev.sum() == 0:
            shift = np.zeros(K)
        else:
            shift = interest_shift(cur, prev)
        alpha[u] = prior_alpha(shift, config.lam, config.Q, config.flip_sign)
        items = ranking.items[u]
        counts[u] = category_counts(items, cats, K)
        theta[u] = posterior_theta(alpha[u], counts[u])
        M.append(sampling_probs(theta[u], items, cats) if items.size else np.empty(0))
    return ReservoirState(list(ranking.items), alpha, theta, counts, M)


def draw_negatives(state: ReservoirState, u: int, n_draws: int, rng_seed=None) -> NegativeDraw:
    """Multinomial draw of ``n_draws`` reservoir negatives for user ``u``.

    ``rng_seed`` may be an int or a ``numpy.random.Generator``.
    """
    probs = state.M[u]
    if probs.size == 0:
        raise EmptyReservoir(f"user {u} has an empty reservoir")
    rng = np.random.default_rng(rng_seed)
    mult = rng.multinomial(n_draws, probs)
    hit = np.flatnonzero(mult)
    return NegativeDraw(u, state.items[u][hit], mult[hit])
