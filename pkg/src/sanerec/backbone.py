"""Embedding backbone: mean-aggregation message passing, dot-product scores.

Layer k computes, for every node v,

    a_v = mean of h_w over neighbours w        (zero for isolated nodes)
    h_v = act([h_v, a_v] @ W_k + b_k)

with one ``(W_k, b_k)`` shared by the user and item sides. ``n_layers=0``
degenerates to plain matrix factorisation. Gradients are written by hand
(``backward``) so every loss can be checked against finite differences.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .data import InteractionGraph

ACTIVATIONS = ("tanh", "linear")


@dataclass
class EmbeddingState:
    user_table: np.ndarray
    item_table: np.ndarray
    weights: list[np.ndarray] = field(default_factory=list)
    biases: list[np.ndarray] = field(default_factory=list)
    activation: str = "tanh"

    @property
    def d(self) -> int:
        return int(self.user_table.shape[1])

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_users(self) -> int:
        return int(self.user_table.shape[0])

    @property
    def n_items(self) -> int:
        return int(self.item_table.shape[0])

    def params(self) -> list[np.ndarray]:
        """Parameter arrays in a fixed order (tables first, then layers)."""
        out = [self.user_table, self.item_table]
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "EmbeddingState":
        return EmbeddingState(self.user_table.copy(), self.item_table.copy(),
                              [w.copy() for w in self.weights], [b.copy() for b in self.biases],
                              self.activation)

    def checksum(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for p in self.params():
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()


@dataclass
class NodeRepresentations:
    user_reps: np.ndarray
    item_reps: np.ndarray


def init_embeddings(n_users: int, n_items: int, d: int, seed: int = 0, n_layers: int = 2,
                    activation: str = "tanh") -> EmbeddingState:
    """Draw N(0, 1/d) tables so rows have roughly unit norm.

    Layer weights start at ``[I; I] / 2`` plus small noise, i.e. each layer
    initially averages a node with its neighbourhood.
    """
    if n_users < 1 or n_items < 1:
        raise ValueError("need at least one user and one item")
    if d < 1:
        raise ValueError("embedding dimension must be >= 1")
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(d)
    users = rng.normal(0.0, scale, size=(n_users, d))
    items = rng.normal(0.0, scale, size=(n_items, d))
    eye = np.eye(d)
    weights = [np.vstack([eye, eye]) * 0.5 + rng.normal(0.0, 0.01, size=(2 * d, d))
               for _ in range(n_layers)]
    biases = [np.zeros(d) for _ in range(n_layers)]
    return EmbeddingState(users, items, weights, biases, activation)


def grow_embeddings(state: EmbeddingState, n_users: int, n_items: int, seed: int = 0) -> EmbeddingState:
    """Append freshly initialised rows for users/items first seen in a new block."""
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(state.d)
    new = state.copy()
    if n_users > state.n_users:
        extra = rng.normal(0.0, scale, size=(n_users - state.n_users, state.d))
        new.user_table = np.vstack([new.user_table, extra])
    if n_items > state.n_items:
        extra = rng.normal(0.0, scale, size=(n_items - state.n_items, state.d))
        new.item_table = np.vstack([new.item_table, extra])
    return new


def mean_adjacency(graph: InteractionGraph, n_users: int, n_items: int) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Row-normalised user->item and item->user operators padded to the table sizes."""
    if graph.n_users > n_users or graph.n_items > n_items:
        raise ValueError(f"graph universe ({graph.n_users}, {graph.n_items}) exceeds "
                         f"embedding tables ({n_users}, {n_items})")
    ones = np.ones(graph.n_edges)
    counts = sp.csr_matrix((ones, (graph.edge_users, graph.edge_items)), shape=(n_users, n_items))
    deg_u = np.asarray(counts.sum(axis=1)).ravel()
    deg_i = np.asarray(counts.sum(axis=0)).ravel()
    inv_u = np.divide(1.0, deg_u, out=np.zeros_like(deg_u), where=deg_u > 0)
    inv_i = np.divide(1.0, deg_i, out=np.zeros_like(deg_i), where=deg_i > 0)
    a_ui = sp.diags(inv_u) @ counts
    a_iu = sp.diags(inv_i) @ counts.T.tocsr()
    return a_ui.tocsr(), a_iu.tocsr()


@dataclass
class ForwardCache:
    adj: tuple
    inputs: list  # per layer: (cat_u, cat_i, z_u, z_i)
    masks: tuple | None = None


def _act(z, kind):
    return np.tanh(z) if kind == "tanh" else z


def _act_grad(z, out, kind):
    return 1.0 - out * out if kind == "tanh" else np.ones_like(z)


def forward(state: EmbeddingState, graph: InteractionGraph, n_layers: int | None = None,
            dropout: float = 0.0, rng: np.random.Generator | None = None,
            return_cache: bool = False):
    """Propagate embeddings through ``n_layers`` layers (default: all of them)."""
    n_layers = state.n_layers if n_layers is None else n_layers
    if n_layers < 0 or n_layers > state.n_layers:
        raise ValueError(f"n_layers must lie in [0, {state.n_layers}]")
    adj = mean_adjacency(graph, state.n_users, state.n_items)
    h_u, h_i = state.user_table, state.item_table
    inputs = []
    for k in range(n_layers):
        a_u = adj[0] @ h_i
        a_i = adj[1] @ h_u
        cat_u = np.hstack([h_u, a_u])
        cat_i = np.hstack([h_i, a_i])
        z_u = cat_u @ state.weights[k] + state.biases[k]
        z_i = cat_i @ state.weights[k] + state.biases[k]
        inputs.append((cat_u, cat_i, z_u, z_i))
        h_u, h_i = _act(z_u, state.activation), _act(z_i, state.activation)
    masks = None
    if dropout > 0.0:
        if rng is None:
            raise ValueError("dropout needs an rng")
        keep = 1.0 - dropout
        masks = ((rng.random(h_u.shape) < keep) / keep, (rng.random(h_i.shape) < keep) / keep)
        h_u, h_i = h_u * masks[0], h_i * masks[1]
    reps = NodeRepresentations(h_u, h_i)
    if return_cache:
        return reps, ForwardCache(adj, inputs, masks)
    return reps


def backward(state: EmbeddingState, cache: ForwardCache, grad_users: np.ndarray,
             grad_items: np.ndarray) -> list[np.ndarray]:
    """Chain representation gradients back to ``state.params()`` order."""
    g_u, g_i = grad_users, grad_items
    if cache.masks is not None:
        g_u, g_i = g_u * cache.masks[0], g_i * cache.masks[1]
    d = state.d
    a_ui, a_iu = cache.adj
    layer_grads = []
    for k in reversed(range(len(cache.inputs))):
        cat_u, cat_i, z_u, z_i = cache.inputs[k]
        out_u, out_i = _act(z_u, state.activation), _act(z_i, state.activation)
        dz_u = g_u * _act_grad(z_u, out_u, state.activation)
        dz_i = g_i * _act_grad(z_i, out_i, state.activation)
        gw = cat_u.T @ dz_u + cat_i.T @ dz_i
        gb = dz_u.sum(axis=0) + dz_i.sum(axis=0)
        layer_grads.append((gw, gb))
        w = state.weights[k]
        dcat_u = dz_u @ w.T
        dcat_i = dz_i @ w.T
        g_u = dcat_u[:, :d] + a_iu.T @ dcat_i[:, d:]
        g_i = dcat_i[:, :d] + a_ui.T @ dcat_u[:, d:]
    grads = [np.asarray(g_u), np.asarray(g_i)]
    for gw, gb in reversed(layer_grads):
        grads += [gw, gb]
    return grads


def score(reps: NodeRepresentations, u: int, i: int) -> float:
    if not (0 <= u < reps.user_reps.shape[0] and 0 <= i < reps.item_reps.shape[0]):
        raise IndexError(f"pair ({u}, {i}) outside representation tables")
    return float(reps.user_reps[u] @ reps.item_reps[i])


# --------------------------------------------------------------------------
# ranking

def top_k_desc(scores: np.ndarray, candidates: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """k best ``candidates`` by score (descending), ties by ascending id.

    Uses introselect to find the k-th largest value, then sorts only the
    selected items, so the cost is linear in ``len(candidates)`` plus
    ``k log k``.
    """
    k = min(k, candidates.shape[0])
    if k <= 0:
        return np.empty(0, dtype=np.int64), np.empty(0)
    vals = scores[candidates]
    kth = np.partition(vals, vals.shape[0] - k)[vals.shape[0] - k]
    above = candidates[vals > kth]
    tied = candidates[vals == kth]
    chosen = np.concatenate([above, np.sort(tied)[: k - above.shape[0]]])
    chosen_vals = scores[chosen]
    order = np.lexsort((chosen, -chosen_vals))
    return chosen[order], chosen_vals[order]


@dataclass
class RankingContext:
    positives: list
    items: list
    scores: list


def rank_top_negatives(reps: NodeRepresentations, positives, Q: int, n_items: int | None = None,
                       chunk: int = 1024) -> RankingContext:
    """Each user's Q highest-scoring items outside their current positives.

    ``n_items`` restricts candidates to the first ``n_items`` item ids
    (the item universe known so far).
    """
    if Q < 1:
        raise ValueError("Q must be >= 1")
    n_items = reps.item_reps.shape[0] if n_items is None else n_items
    n_users = len(positives)
    if n_users > reps.user_reps.shape[0]:
        raise ValueError("more positive sets than user representations")
    item_reps = reps.item_reps[:n_items]
    all_items = np.arange(n_items)
    out_items, out_scores = [], []
    for start in range(0, n_users, chunk):
        block = reps.user_reps[start:start + chunk] @ item_reps.T
        for r in range(block.shape[0]):
            pos = positives[start + r]
            if pos:
                keep = np.ones(n_items, dtype=bool)
                keep[[p for p in pos if p < n_items]] = False
                cand = all_items[keep]
            else:
                cand = all_items
            items, vals = top_k_desc(block[r], cand, Q)
            out_items.append(items)
            out_scores.append(vals)
    return RankingContext(list(positives), out_items, out_scores)


# --------------------------------------------------------------------------
# checkpoint: magic, version, then little-endian u32 header and f32 payload

_MAGIC = b"SANECKPT"
_VERSION = 1


def save_checkpoint(state: EmbeddingState, path: str | Path) -> None:
    """Write ``state`` as: magic(8) | u32 version, n_users, n_items, d,
    n_layers, activation code | user table | item table | (W_k, b_k)..."""
    act = ACTIVATIONS.index(state.activation)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<6I", _VERSION, state.n_users, state.n_items, state.d,
                             state.n_layers, act))
        for p in state.params():
            fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> EmbeddingState:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, n_users, n_items, d, n_layers, act = struct.unpack_from("<6I", raw, 8)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    offset = 8 + 24

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset += 4 * count
        return arr.astype(np.float64)

    users = take((n_users, d))
    items = take((n_items, d))
    weights, biases = [], []
    for _ in range(n_layers):
        weights.append(take((2 * d, d)))
        biases.append(take((d,)))
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return EmbeddingState(users, items, weights, biases, ACTIVATIONS[act])
