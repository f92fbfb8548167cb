"""Training objectives with hand-derived gradients.

Every loss returns ``(value, grads)`` where ``grads`` maps a target name
(``"user"``, ``"item"`` for representation matrices, ``"centroids"``) to an
array of the target's shape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .backbone import NodeRepresentations, mean_adjacency
from .clustering import kl_loss as _kl_loss
from .data import InteractionGraph


@dataclass
class TripletBatch:
    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray
    mult: np.ndarray | None = None
    reservoir: bool = False

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.pos = np.asarray(self.pos, dtype=np.int64)
        self.neg = np.asarray(self.neg, dtype=np.int64)
        if self.mult is None:
            self.mult = np.ones(self.users.shape[0], dtype=np.int64)
        self.mult = np.asarray(self.mult, dtype=np.int64)
        if not (self.users.shape == self.pos.shape == self.neg.shape == self.mult.shape):
            raise ValueError("triplet arrays must have equal length")
        if self.mult.size and self.mult.min() < 1:
            raise ValueError("multiplicities must be >= 1")

    def __len__(self) -> int:
        return int(self.users.shape[0])

    def expand(self) -> "TripletBatch":
        """Replicate each triple by its multiplicity."""
        return TripletBatch(np.repeat(self.users, self.mult), np.repeat(self.pos, self.mult),
                            np.repeat(self.neg, self.mult), None, self.reservoir)

    @staticmethod
    def concat(batches) -> "TripletBatch":
        batches = list(batches)
        return TripletBatch(np.concatenate([b.users for b in batches]),
                            np.concatenate([b.pos for b in batches]),
                            np.concatenate([b.neg for b in batches]),
                            np.concatenate([b.mult for b in batches]),
                            batches[0].reservoir if batches else False)


@dataclass(frozen=True)
class LossWeights:
    lambda_kd: float = 0.0
    beta: float = 0.0
    lambda_reg: float = 1e-4

    def __post_init__(self):
        if min(self.lambda_kd, self.beta, self.lambda_reg) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class DistillConfig:
    mode: str = "none"
    tau_c: float = 1.0
    n_negatives: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("none", "local", "contrastive"):
            raise ValueError(f"unknown distillation mode {self.mode!r}")
        if not self.tau_c > 0:
            raise ValueError("contrastive temperature must be positive")


def _zeros_like(reps: NodeRepresentations) -> dict:
    return {"user": np.zeros_like(reps.user_reps), "item": np.zeros_like(reps.item_reps)}


def _log_sigmoid_neg(x: np.ndarray) -> np.ndarray:
    """-ln(sigmoid(x)) = softplus(-x), stable for large |x|."""
    return np.logaddexp(0.0, -x)


def _row_l2(reps: NodeRepresentations, batch: TripletBatch, lam: float, grads: dict) -> float:
    if lam == 0.0:
        return 0.0
    users = np.unique(batch.users)
    items = np.unique(np.concatenate([batch.pos, batch.neg]))
    ru, ri = reps.user_reps[users], reps.item_reps[items]
    grads["user"][users] += 2.0 * lam * ru
    grads["item"][items] += 2.0 * lam * ri
    return lam * (math.fsum((ru * ru).ravel()) + math.fsum((ri * ri).ravel()))


def _weighted_triplet(batch: TripletBatch, reps: NodeRepresentations, lam: float):
    if len(batch) == 0:
        raise ValueError("empty triplet batch")
    ru = reps.user_reps[batch.users]
    ri = reps.item_reps[batch.pos]
    rj = reps.item_reps[batch.neg]
    gap = np.einsum("nd,nd->n", ru, ri - rj)
    terms = _log_sigmoid_neg(gap)
    value = math.fsum(np.repeat(terms, batch.mult))
    # d/dgap softplus(-gap) = -sigmoid(-gap) = -exp(-softplus(gap))
    coef = -batch.mult * np.exp(-np.logaddexp(0.0, gap))
    grads = _zeros_like(reps)
    np.add.at(grads["user"], batch.users, coef[:, None] * (ri - rj))
    np.add.at(grads["item"], batch.pos, coef[:, None] * ru)
    np.add.at(grads["item"], batch.neg, -coef[:, None] * ru)
    value += _row_l2(reps, batch, lam, grads)
    return value, grads


def bpr_loss(batch: TripletBatch, reps: NodeRepresentations, lam: float = 0.0):
    """Sum of -ln sigmoid(y_ui - y_uj) over unit-multiplicity triples.

    ``lam`` adds an L2 penalty on the representation rows the batch touches.
    """
    if np.any(batch.mult != 1):
        raise ValueError("BPR expects unit multiplicities; use sane_loss")
    return _weighted_triplet(batch, reps, lam)


def sane_loss(batch: TripletBatch, reps: NodeRepresentations, lam: float = 0.0):
    """Multiplicity-weighted triplet loss: sum of -N_uj ln sigmoid(y_ui - y_uj)."""
    return _weighted_triplet(batch, reps, lam)


def l2_penalty(tables: tuple[np.ndarray, np.ndarray], users, items, lam: float):
    """``lam`` times the squared norm of the touched embedding-table rows."""
    users, items = np.unique(users), np.unique(items)
    gu = np.zeros_like(tables[0])
    gi = np.zeros_like(tables[1])
    if lam == 0.0:
        return 0.0, {"user_table": gu, "item_table": gi}
    ru, ri = tables[0][users], tables[1][items]
    gu[users] = 2.0 * lam * ru
    gi[items] = 2.0 * lam * ri
    value = lam * (math.fsum((ru * ru).ravel()) + math.fsum((ri * ri).ravel()))
    return value, {"user_table": gu, "item_table": gi}


# --------------------------------------------------------------------------
# distillation

def _side_local(t_node, t_other, s_node, s_other, adj, denom, g_node, g_other) -> float:
    """Squared gap between teacher and student (node . neighbourhood-mean) dots."""
    t_dot = np.einsum("nd,nd->n", t_node, adj @ t_other)
    s_mean = adj @ s_other
    s_dot = np.einsum("nd,nd->n", s_node, s_mean)
    has = np.asarray(adj.sum(axis=1)).ravel() > 0
    diff = np.where(has, s_dot - t_dot, 0.0)
    coef = 2.0 * diff / denom
    g_node += coef[:, None] * s_mean
    g_other += adj.T @ (coef[:, None] * s_node)
    return math.fsum(diff * diff) / denom


def _prev_views(teacher, student, graph_prev):
    nu, ni = graph_prev.n_users, graph_prev.n_items
    if teacher.user_reps.shape[0] < nu or teacher.item_reps.shape[0] < ni:
        raise ValueError("teacher does not cover the previous block's node universe")
    if student.user_reps.shape[0] < nu or student.item_reps.shape[0] < ni:
        raise ValueError("student does not cover the previous block's node universe")
    a_ui, a_iu = mean_adjacency(graph_prev, nu, ni)
    return nu, ni, a_ui, a_iu


def kd_local(teacher: NodeRepresentations, student: NodeRepresentations,
             graph_prev: InteractionGraph, sides: str = "both"):
    """Local-structure distillation over the previous block's neighbourhoods.

    Per node, the teacher's dot product with its neighbourhood mean is
    matched by the student's; the squared gaps are averaged over the
    previous block's users (and, separately, items) and the two sides added.
    Nodes without previous-block neighbours contribute 0.
    """
    nu, ni, a_ui, a_iu = _prev_views(teacher, student, graph_prev)
    grads = _zeros_like(student)
    value = 0.0
    if sides in ("both", "user"):
        value += _side_local(teacher.user_reps[:nu], teacher.item_reps[:ni],
                             student.user_reps[:nu], student.item_reps[:ni], a_ui, nu,
                             grads["user"][:nu], grads["item"][:ni])
    if sides in ("both", "item"):
        value += _side_local(teacher.item_reps[:ni], teacher.user_reps[:nu],
                             student.item_reps[:ni], student.user_reps[:nu], a_iu, ni,
                             grads["item"][:ni], grads["user"][:nu])
    return value, grads


def contrastive_negatives(graph_prev: InteractionGraph, n_negatives: int, seed: int = 0) -> list:
    """Per user, ``n_negatives`` distinct previous-universe items outside its neighbourhood."""
    rng = np.random.default_rng(seed)
    out = []
    for u in range(graph_prev.n_users):
        nbrs = np.unique(graph_prev.user_adj[u])
        pool = np.setdiff1d(np.arange(graph_prev.n_items), nbrs, assume_unique=True)
        k = min(n_negatives, pool.shape[0])
        out.append(np.sort(rng.choice(pool, size=k, replace=False)) if k else np.empty(0, np.int64))
    return out


def kd_contrastive(teacher: NodeRepresentations, student: NodeRepresentations,
                   graph_prev: InteractionGraph, cfg: DistillConfig, negatives=None):
    """Item-side local distillation plus a user-side InfoNCE term.

    For user u with previous neighbours N(u) and candidate set D(u) =
    N(u) + sampled negatives, the term is the mean over i in N(u) of
    -log softmax_{D(u)}(s_u . t_i / tau)[i], averaged over the previous
    block's users. Teacher representations are constants.
    """
    nu, ni, a_ui, a_iu = _prev_views(teacher, student, graph_prev)
    if negatives is None:
        negatives = contrastive_negatives(graph_prev, cfg.n_negatives, cfg.seed)
    value, grads = kd_local(teacher, student, graph_prev, sides="item")
    tau = cfg.tau_c
    terms = []
    for u in range(nu):
        nbrs = np.unique(graph_prev.user_adj[u])
        if nbrs.size == 0:
            continue
        cand = np.concatenate([nbrs, np.asarray(negatives[u], dtype=np.int64)])
        if cand.size == 0:
            raise ValueError(f"user {u}: empty contrastive candidate set")
        t_c = teacher.item_reps[cand]
        logits = t_c @ student.user_reps[u] / tau
        m = logits.max()
        lse = m + math.log(np.exp(logits - m).sum())
        terms.append(lse - logits[: nbrs.size].mean())
        soft = np.exp(logits - lse)
        grads["user"][u] += (soft @ t_c - t_c[: nbrs.size].mean(axis=0)) / (tau * nu)
    value += math.fsum(terms) / nu
    return value, grads


# --------------------------------------------------------------------------

def kl_cluster_loss(p_matrix, reps: NodeRepresentations, centroids, nu: float = 1.0):
    """Clustering KL term in the common ``(value, grads)`` shape."""
    value, g_items, g_cent = _kl_loss(p_matrix, reps.item_reps, centroids, nu)
    return value, {"item": g_items, "centroids": g_cent}


COMPONENTS = ("triplet", "kd", "sane", "kl", "reg")


def total_loss(components: dict, weights: LossWeights):
    """``triplet + lambda_kd * kd + sane + beta * kl + reg``.

    ``components`` maps names from :data:`COMPONENTS` to ``(value, grads)``;
    missing names count as zero. Returns ``(total, grads, weighted)`` where
    ``weighted`` holds each component's contribution to the total.
    """
    scale = {"triplet": 1.0, "kd": weights.lambda_kd, "sane": 1.0, "kl": weights.beta, "reg": 1.0}
    weighted, grads = {}, {}
    for name in COMPONENTS:
        if name not in components:
            weighted[name] = 0.0
            continue
        value, g = components[name]
        if not np.isfinite(value):
            raise FloatingPointError(f"loss component {name!r} is not finite ({value})")
        w = scale[name]
        weighted[name] = w * value
        if w == 0.0:
            continue
        for key, arr in g.items():
            if key in grads:
                grads[key] = grads[key] + w * arr
            else:
                grads[key] = w * arr
    total = math.fsum(weighted[n] for n in COMPONENTS)
    return total, grads, weighted
