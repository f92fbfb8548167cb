"""Item pseudo-categories from self-trained soft clustering of item representations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ClusterState:
    centroids: np.ndarray
    nu: float = 1.0
    tau: float = 1.0
    q_matrix: np.ndarray | None = None
    p_matrix: np.ndarray | None = None

    @property
    def K(self) -> int:
        return int(self.centroids.shape[0])


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d2 = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d2, 0.0)


def kmeans_init(item_reps: np.ndarray, K: int, seed: int = 0, max_iters: int = 100) -> np.ndarray:
    """Lloyd iterations from k-means++ seeding.

    A cluster that loses all its points is re-seeded at the point farthest
    from its current centroid.
    """
    x = np.asarray(item_reps, dtype=np.float64)
    n = x.shape[0]
    if K < 1 or K > n:
        raise ValueError(f"K={K} must lie in [1, n_items={n}]")
    rng = np.random.default_rng(seed)
    centroids = np.empty((K, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    closest = _sq_dists(x, centroids[:1]).ravel()
    for k in range(1, K):
        total = closest.sum()
        if total <= 0.0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=closest / total)
        centroids[k] = x[idx]
        closest = np.minimum(closest, _sq_dists(x, centroids[k:k + 1]).ravel())

    for _ in range(max_iters):
        d2 = _sq_dists(x, centroids)
        labels = d2.argmin(1)
        new = centroids.copy()
        for k in range(K):
            members = labels == k
            if members.any():
                new[k] = x[members].mean(0)
            else:
                far = d2[np.arange(n), labels].argmax()
                new[k] = x[far]
                labels[far] = k
                d2[far] = 0.0
        if np.array_equal(new, centroids):
            break
        centroids = new
    return centroids


def _kernel(item_reps, centroids, nu):
    d2 = _sq_dists(np.asarray(item_reps, dtype=np.float64), centroids)
    base = 1.0 + d2 / nu
    return base, base ** (-(nu + 1.0) / 2.0)


def soft_assign(item_reps: np.ndarray, centroids: np.ndarray, nu: float = 1.0) -> np.ndarray:
    """Student-t kernel similarities to each centroid, normalised per item."""
    if nu <= 0:
        raise ValueError("degrees of freedom must be positive")
    _, w = _kernel(item_reps, centroids, nu)
    return w / w.sum(axis=1, keepdims=True)


def sharpen(q_matrix: np.ndarray) -> np.ndarray:
    """Square assignments, divide by cluster frequency, renormalise rows."""
    q = np.asarray(q_matrix, dtype=np.float64)
    freq = q.sum(axis=0)
    if np.any(freq <= 0.0):
        raise ValueError("a cluster has zero total assignment mass")
    w = q * q / freq
    return w / w.sum(axis=1, keepdims=True)


def kl_divergence(p_matrix: np.ndarray, q_matrix: np.ndarray) -> float:
    p, q = np.asarray(p_matrix), np.asarray(q_matrix)
    if np.any((q <= 0.0) & (p > 0.0)):
        raise ValueError("q has zero mass where p is positive")
    mask = p > 0.0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def kl_loss(p_matrix: np.ndarray, item_reps: np.ndarray, centroids: np.ndarray, nu: float = 1.0):
    """KL(P || Q) with Q recomputed from ``item_reps``/``centroids``.

    P is a fixed target. Returns ``(loss, grad_item_reps, grad_centroids)``.
    """
    x = np.asarray(item_reps, dtype=np.float64)
    base, w = _kernel(x, centroids, nu)
    q = w / w.sum(axis=1, keepdims=True)
    loss = kl_divergence(p_matrix, q)
    # dL/dx_i = (nu+1)/nu * sum_k (p_ik - q_ik) (x_i - mu_k) / base_ik
    coef = (nu + 1.0) / nu * (np.asarray(p_matrix) - q) / base
    grad_x = coef.sum(axis=1, keepdims=True) * x - coef @ centroids
    grad_c = -(coef.T @ x - coef.sum(axis=0)[:, None] * centroids)
    return loss, grad_x, grad_c


def membership(p_row: np.ndarray, tau: float = 1.0) -> tuple[np.ndarray, int]:
    """Temperature softmax over a sharpened row plus its hard category."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    p = np.asarray(p_row, dtype=np.float64)
    z = p / tau
    e = np.exp(z - z.max())
    return e / e.sum(), int(np.argmax(p))


def memberships(p_matrix: np.ndarray, tau: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise :func:`membership` for a whole assignment matrix."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    p = np.asarray(p_matrix, dtype=np.float64)
    z = p / tau
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True), p.argmax(axis=1)


def refresh(state: ClusterState, item_reps: np.ndarray) -> np.ndarray:
    """Recompute Q and the sharpened target P; return hard categories."""
    state.q_matrix = soft_assign(item_reps, state.centroids, state.nu)
    state.p_matrix = sharpen(state.q_matrix)
    _, hard = memberships(state.p_matrix, state.tau)
    return hard


def format_assignments(categories) -> str:
    return "".join(f"{i}\t{int(c)}\n" for i, c in enumerate(categories))
