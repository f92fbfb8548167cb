"""Base-block training and the incremental loop with the negative reservoir."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import clustering
from .backbone import (EmbeddingState, NodeRepresentations, backward, forward, grow_embeddings,
                       init_embeddings, rank_top_negatives, top_k_desc)
from .data import BlockSchedule, InteractionGraph, InteractionLog, build_block_graph, category_histogram
from .losses import (COMPONENTS, DistillConfig, LossWeights, TripletBatch, bpr_loss,
                     contrastive_negatives, kd_contrastive, kd_local, l2_penalty,
                     sane_loss, total_loss)
from .metrics import EvalRequest, recall_precision_at_k
from .reservoir import EmptyReservoir, ReservoirConfig, ReservoirState, draw_negatives, update_reservoir


@dataclass(frozen=True)
class TrainerConfig:
    batch_size: int = 64
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    n_uniform: int = 5
    n_reservoir: int = 5
    min_epochs_base: int = 10
    max_epochs_base: int = 50
    min_epochs_incremental: int = 3
    max_epochs_incremental: int = 15
    patience: int = 2
    refresh_every_f: int = 2
    dropout: float = 0.2
    dim: int = 128
    n_layers: int = 2
    activation: str = "tanh"
    early_stop_k: int = 20
    negative_source: str = "reservoir"
    seed: int = 0

    def __post_init__(self):
        if self.n_uniform + self.n_reservoir < 1:
            raise ValueError("need at least one negative per positive")
        if min(self.n_uniform, self.n_reservoir) < 0:
            raise ValueError("negative counts must be non-negative")
        if self.patience < 1 or self.batch_size < 1 or self.refresh_every_f < 1:
            raise ValueError("patience, batch_size and refresh_every_f must be >= 1")
        if self.negative_source not in ("reservoir", "popularity"):
            raise ValueError(f"unknown negative source {self.negative_source!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# --------------------------------------------------------------------------
# negatives

def uniform_negatives(positives, n_items: int, n_per: int, users, rng=None) -> np.ndarray:
    """``n_per`` uniform items outside each listed user's positive set.

    Returns an array of shape ``(len(users), n_per)``.
    """
    rng = np.random.default_rng(rng)
    users = np.asarray(users, dtype=np.int64)
    out = rng.integers(n_items, size=(users.shape[0], n_per))
    for r, u in enumerate(users):
        pos = positives[u]
        if len(pos) >= n_items and all(p < n_items for p in pos):
            raise ValueError(f"user {u} has interacted with every item")
        for c in range(n_per):
            while out[r, c] in pos:
                out[r, c] = rng.integers(n_items)
    return out


def popularity_negatives(positives, popularity: np.ndarray, n_per: int, users, rng) -> np.ndarray:
    """Negatives drawn proportionally to item popularity, rejecting positives."""
    p = popularity / popularity.sum()
    out = rng.choice(p.shape[0], size=(len(users), n_per), p=p)
    for r, u in enumerate(users):
        pos = positives[u]
        for c in range(n_per):
            while out[r, c] in pos:
                out[r, c] = rng.choice(p.shape[0], p=p)
    return out


def _triples(users, pos, negs) -> TripletBatch:
    n_per = negs.shape[1]
    return TripletBatch(np.repeat(users, n_per), np.repeat(pos, n_per), negs.ravel())


# --------------------------------------------------------------------------
# evaluation helpers

def history_sets(log: InteractionLog, end: int, n_users: int) -> list[set]:
    hist = [set() for _ in range(n_users)]
    for u, i in zip(log.users[:end].tolist(), log.items[:end].tolist()):
        if u < n_users:
            hist[u].add(i)
    return hist


def make_eval_request(reps: NodeRepresentations, log: InteractionLog, hist_end: int, eval_range,
                      n_items: int, cutoffs=(20,)) -> EvalRequest:
    """Rank known items for every known user with evaluation interactions.

    Items the user interacted with before ``hist_end`` are excluded from
    both the ranking and the ground truth.
    """
    n_users = reps.user_reps.shape[0]
    hist = history_sets(log, hist_end, n_users)
    s, e = eval_range
    truth: dict[int, set] = {}
    for u, i in zip(log.users[s:e].tolist(), log.items[s:e].tolist()):
        if u < n_users and i not in hist[u]:
            truth.setdefault(u, set()).add(i)
    users = np.array(sorted(truth), dtype=np.int64)
    kmax = max(cutoffs)
    all_items = np.arange(n_items)
    ranked = []
    item_reps = reps.item_reps[:n_items]
    for u in users:
        scores = item_reps @ reps.user_reps[u]
        if hist[u]:
            keep = np.ones(n_items, dtype=bool)
            keep[[i for i in hist[u] if i < n_items]] = False
            cand = all_items[keep]
        else:
            cand = all_items
        ranked.append(top_k_desc(scores, cand, kmax)[0].tolist())
    return EvalRequest(users, ranked, [truth[u] for u in users.tolist()], tuple(cutoffs))


def validation_recall(state, graph, log, block, k) -> float:
    s, e = block.val
    if e <= s:
        return float("nan")
    reps = forward(state, graph)
    req = make_eval_request(reps, log, s, (s, e), graph.n_items, (k,))
    if len(req.users) == 0:
        return float("nan")
    return recall_precision_at_k(req, k)[2]


# --------------------------------------------------------------------------
# step losses

def base_step_loss(state: EmbeddingState, reps: NodeRepresentations, users, pos, uniform_neg,
                   lambda_reg: float):
    """BPR over uniform negatives plus table L2 on touched rows."""
    batch = _triples(users, pos, uniform_neg)
    comps = {"triplet": bpr_loss(batch, reps)}
    comps["reg"] = l2_penalty((state.user_table, state.item_table), batch.users,
                              np.concatenate([batch.pos, batch.neg]), lambda_reg)
    return comps


@dataclass
class IncrementalContext:
    """Per-block constants used by every incremental step."""

    teacher_reps: NodeRepresentations | None = None
    graph_prev: InteractionGraph | None = None
    distill: DistillConfig = field(default_factory=DistillConfig)
    contrastive_neg: list | None = None
    cluster: clustering.ClusterState | None = None


def incremental_step_loss(state: EmbeddingState, reps: NodeRepresentations, users, pos,
                          uniform_neg, reservoir_batch: TripletBatch | None,
                          weights: LossWeights, ctx: IncrementalContext):
    """Loss components of one incremental step (unweighted)."""
    comps = {}
    touched_items = [pos]
    if uniform_neg is not None and uniform_neg.size:
        batch = _triples(users, pos, uniform_neg)
        comps["triplet"] = bpr_loss(batch, reps)
        touched_items.append(batch.neg)
    if reservoir_batch is not None and len(reservoir_batch):
        comps["sane"] = sane_loss(reservoir_batch, reps)
        touched_items.append(reservoir_batch.neg)
    if weights.lambda_kd > 0 and ctx.distill.mode != "none":
        if ctx.teacher_reps is None:
            raise ValueError("distillation needs a teacher snapshot")
        if ctx.distill.mode == "local":
            comps["kd"] = kd_local(ctx.teacher_reps, reps, ctx.graph_prev)
        else:
            comps["kd"] = kd_contrastive(ctx.teacher_reps, reps, ctx.graph_prev, ctx.distill,
                                         ctx.contrastive_neg)
    if weights.beta > 0 and ctx.cluster is not None and ctx.cluster.p_matrix is not None:
        n = ctx.cluster.p_matrix.shape[0]
        value, g_x, g_c = clustering.kl_loss(ctx.cluster.p_matrix, reps.item_reps[:n],
                                             ctx.cluster.centroids, ctx.cluster.nu)
        g_items = np.zeros_like(reps.item_reps)
        g_items[:n] = g_x
        comps["kl"] = (value, {"item": g_items, "centroids": g_c})
    comps["reg"] = l2_penalty((state.user_table, state.item_table), users,
                              np.concatenate(touched_items), weights.lambda_reg)
    return comps


def _apply(state, cache, grads, extra=()):
    g_user = grads.get("user")
    g_item = grads.get("item")
    if g_user is None:
        g_user = np.zeros((state.n_users, state.d))
    if g_item is None:
        g_item = np.zeros((state.n_items, state.d))
    param_grads = backward(state, cache, g_user, g_item)
    if "user_table" in grads:
        param_grads[0] = param_grads[0] + grads["user_table"]
        param_grads[1] = param_grads[1] + grads["item_table"]
    return param_grads + list(extra)


# --------------------------------------------------------------------------
# records

RECORD_FIELDS = ("block", "epoch") + COMPONENTS + ("total", "val_recall", "seconds")


@dataclass
class TrainRecord:
    block: int
    epoch: int
    losses: dict
    total: float
    val_recall: float
    seconds: float

    def row(self) -> str:
        vals = [str(self.block), str(self.epoch)]
        vals += [repr(float(self.losses[c])) for c in COMPONENTS]
        vals += [repr(float(self.total)), repr(float(self.val_recall)), f"{self.seconds:.3f}"]
        return "\t".join(vals)


def format_records(records) -> str:
    return "\t".join(RECORD_FIELDS) + "\n" + "".join(r.row() + "\n" for r in records)


class _EarlyStopper:
    def __init__(self, min_epochs, patience):
        self.min_epochs, self.patience = min_epochs, patience
        self.best = -np.inf
        self.best_epoch = -1
        self.snapshot = None
        self.stale = 0

    def update(self, epoch, metric, snapshot_fn) -> bool:
        """Record ``metric``; return True when training should stop."""
        if np.isnan(metric):
            self.snapshot = snapshot_fn()
            return False
        if metric > self.best:
            self.best, self.best_epoch, self.stale = metric, epoch, 0
            self.snapshot = snapshot_fn()
        else:
            self.stale += 1
        return epoch + 1 >= self.min_epochs and self.stale >= self.patience


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


# --------------------------------------------------------------------------
# base block

def train_base_block(log: InteractionLog, schedule: BlockSchedule, config: TrainerConfig,
                     weights: LossWeights = LossWeights()):
    """BPR-only training on block 0 with uniform negatives and early stopping."""
    if config.max_epochs_base < max(1, config.min_epochs_base):
        raise ValueError("max_epochs_base must be >= max(1, min_epochs_base)")
    graph = build_block_graph(log, schedule, 0)
    if graph.n_edges == 0:
        raise ValueError("empty base block")
    rng = np.random.default_rng([config.seed, 0])
    state = init_embeddings(graph.n_users, graph.n_items, config.dim, config.seed,
                            config.n_layers, config.activation)
    positives = graph.positives()
    n_neg = config.n_uniform + config.n_reservoir
    opt = Adam(state.params(), config.learning_rate, config.beta1, config.beta2, config.eps)
    stopper = _EarlyStopper(config.min_epochs_base, config.patience)
    records = []
    for epoch in range(config.max_epochs_base):
        t0 = time.perf_counter()
        sums = dict.fromkeys(COMPONENTS, 0.0)
        total = 0.0
        for idx in _batches(graph.n_edges, config.batch_size, rng):
            users, pos = graph.edge_users[idx], graph.edge_items[idx]
            reps, cache = forward(state, graph, dropout=config.dropout, rng=rng, return_cache=True)
            negs = uniform_negatives(positives, graph.n_items, n_neg, users, rng)
            comps = base_step_loss(state, reps, users, pos, negs, weights.lambda_reg)
            value, grads, weighted = total_loss(comps, weights)
            opt.step(_apply(state, cache, grads))
            total += value
            for c in COMPONENTS:
                sums[c] += weighted[c]
        val = validation_recall(state, graph, log, schedule.blocks[0], config.early_stop_k)
        records.append(TrainRecord(0, epoch, sums, total, val, time.perf_counter() - t0))
        if stopper.update(epoch, val, state.copy):
            break
    return (stopper.snapshot or state), records


# --------------------------------------------------------------------------
# incremental block

@dataclass
class NegativeLog:
    """Negatives drawn during a block, for sampler diagnostics."""

    uniform_users: list = field(default_factory=list)
    uniform_items: list = field(default_factory=list)
    reservoir_users: list = field(default_factory=list)
    reservoir_items: list = field(default_factory=list)
    reservoir_counts: list = field(default_factory=list)

    def arrays(self):
        cat = lambda xs: np.concatenate(xs) if xs else np.empty(0, dtype=np.int64)
        return (cat(self.uniform_users), cat(self.uniform_items), cat(self.reservoir_users),
                cat(self.reservoir_items), cat(self.reservoir_counts))


@dataclass
class IncrementalResult:
    state: EmbeddingState
    reservoir: ReservoirState | None
    records: list
    refresh_epochs: list
    cluster: clustering.ClusterState | None
    categories: np.ndarray | None
    negatives: NegativeLog


def _reservoir_batch(res: ReservoirState, users, pos, n_draws, rng, positives, n_items,
                     neg_log: NegativeLog | None) -> TripletBatch:
    bu, bp, bn, bm = [], [], [], []
    for u, i in zip(users.tolist(), pos.tolist()):
        try:
            draw = draw_negatives(res, u, n_draws, rng)
            items, mult = draw.items, draw.multiplicities
        except (EmptyReservoir, IndexError):
            items = uniform_negatives(positives, n_items, n_draws, [u], rng)[0]
            mult = np.ones(n_draws, dtype=np.int64)
        bu.append(np.full(items.shape[0], u))
        bp.append(np.full(items.shape[0], i))
        bn.append(items)
        bm.append(mult)
    batch = TripletBatch(np.concatenate(bu), np.concatenate(bp), np.concatenate(bn),
                         np.concatenate(bm), reservoir=True)
    if neg_log is not None:
        neg_log.reservoir_users.append(batch.users)
        neg_log.reservoir_items.append(batch.neg)
        neg_log.reservoir_counts.append(batch.mult)
    return batch


def train_incremental_block(state: EmbeddingState, teacher: EmbeddingState | None,
                            log: InteractionLog, schedule: BlockSchedule, t: int,
                            cluster_state: clustering.ClusterState | None,
                            config: TrainerConfig, weights: LossWeights = LossWeights(),
                            distill: DistillConfig = DistillConfig(),
                            res_cfg: ReservoirConfig = ReservoirConfig(),
                            categories=None, track_negatives: bool = False) -> IncrementalResult:
    """Train block ``t >= 1`` following the reservoir-refresh loop.

    Every ``res_cfg.refresh_every_f`` epochs (starting at epoch 0) item
    categories are refreshed from the clustering state (unless fixed
    ``categories`` are given) and every user's reservoir is rebuilt from
    fresh top-Q rankings. Each step uses ``n_uniform`` uniform negatives
    per positive for the triplet term and ``n_reservoir`` reservoir draws
    for the multiplicity-weighted term.
    """
    if t < 1:
        raise ValueError("block 0 is trained with train_base_block")
    if teacher is None:
        raise ValueError("incremental training needs the previous block's teacher snapshot")
    if config.max_epochs_incremental < max(1, config.min_epochs_incremental):
        raise ValueError("max_epochs_incremental must be >= max(1, min_epochs_incremental)")
    graph = build_block_graph(log, schedule, t)
    graph_prev = build_block_graph(log, schedule, t - 1)
    rng = np.random.default_rng([config.seed, t])
    state = grow_embeddings(state, graph.n_users, graph.n_items, seed=config.seed * 7919 + t)
    positives = graph.positives()
    K = res_cfg.K

    use_reservoir = config.n_reservoir > 0 and config.negative_source == "reservoir"
    need_clusters = (categories is None and use_reservoir) or weights.beta > 0
    if need_clusters:
        if cluster_state is None:
            item_reps = forward(state, graph).item_reps[:graph.n_items]
            cluster_state = clustering.ClusterState(clustering.kmeans_init(item_reps, K, config.seed))
        else:
            cluster_state = clustering.ClusterState(cluster_state.centroids.copy(), cluster_state.nu,
                                                    cluster_state.tau)
    ctx = IncrementalContext(graph_prev=graph_prev, distill=distill, cluster=cluster_state)
    if weights.lambda_kd > 0 and distill.mode != "none":
        ctx.teacher_reps = forward(teacher, graph_prev)
        if distill.mode == "contrastive":
            ctx.contrastive_neg = contrastive_negatives(graph_prev, distill.n_negatives,
                                                        distill.seed + t)
    popularity = None
    if config.negative_source == "popularity" and config.n_reservoir > 0:
        popularity = np.bincount(graph.edge_items, minlength=graph.n_items).astype(np.float64) + 1.0

    params = state.params()
    if cluster_state is not None:
        params = params + [cluster_state.centroids]
    opt = Adam(params, config.learning_rate, config.beta1, config.beta2, config.eps)
    stopper = _EarlyStopper(config.min_epochs_incremental, config.patience)
    neg_log = NegativeLog() if track_negatives else None
    records, refreshes = [], []
    res_state = None
    cats = None if categories is None else np.asarray(categories)[:graph.n_items]
    f = res_cfg.refresh_every_f

    for epoch in range(config.max_epochs_incremental):
        t0 = time.perf_counter()
        if epoch % f == 0:
            refreshes.append(epoch)
            eval_reps = forward(state, graph)
            if cluster_state is not None:
                hard = clustering.refresh(cluster_state, eval_reps.item_reps[:graph.n_items])
                if categories is None:
                    cats = hard
            if use_reservoir:
                h_t = category_histogram(graph, cats, K)
                h_prev = category_histogram(graph_prev, cats, K)
                ranking = rank_top_negatives(eval_reps, positives, res_cfg.Q, graph.n_items)
                res_state = update_reservoir(ranking, h_t, h_prev, cats, res_cfg)
        sums = dict.fromkeys(COMPONENTS, 0.0)
        total = 0.0
        for idx in _batches(graph.n_edges, config.batch_size, rng):
            users, pos = graph.edge_users[idx], graph.edge_items[idx]
            reps, cache = forward(state, graph, dropout=config.dropout, rng=rng, return_cache=True)
            uneg = None
            if config.n_uniform:
                uneg = uniform_negatives(positives, graph.n_items, config.n_uniform, users, rng)
                if neg_log is not None:
                    neg_log.uniform_users.append(np.repeat(users, config.n_uniform))
                    neg_log.uniform_items.append(uneg.ravel())
            rbatch = None
            if use_reservoir:
                rbatch = _reservoir_batch(res_state, users, pos, config.n_reservoir, rng,
                                          positives, graph.n_items, neg_log)
            elif popularity is not None:
                pneg = popularity_negatives(positives, popularity, config.n_reservoir, users, rng)
                rbatch = _triples(users, pos, pneg)
            comps = incremental_step_loss(state, reps, users, pos, uneg, rbatch, weights, ctx)
            value, grads, weighted = total_loss(comps, weights)
            extra = ()
            if cluster_state is not None:
                extra = (grads.get("centroids", np.zeros_like(cluster_state.centroids)),)
            opt.step(_apply(state, cache, grads, extra))
            total += value
            for c in COMPONENTS:
                sums[c] += weighted[c]
        val = validation_recall(state, graph, log, schedule.blocks[t], config.early_stop_k)
        records.append(TrainRecord(t, epoch, sums, total, val, time.perf_counter() - t0))
        if stopper.update(epoch, val, state.copy):
            break
    final = stopper.snapshot or state
    return IncrementalResult(final, res_state, records, refreshes, cluster_state, cats,
                             neg_log or NegativeLog())
