"""End-to-end runs: split, base training, incremental loop, per-block evaluation."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import EmbeddingState, forward, load_checkpoint, save_checkpoint
from .clustering import format_assignments, kmeans_init
from .config import ConfigError, RunConfig, load_config
from .data import (BlockSchedule, InteractionLog, build_block_graph, category_histogram,
                   ingest_interactions, split_blocks)
from .metrics import METRICS, evaluate, high_shift_cohort, interest_shift_indicator, normalise_rows
from .synth import SynthDataset, synth_drift_dataset
from .trainer import (IncrementalResult, format_records, make_eval_request, train_base_block,
                      train_incremental_block)

log = logging.getLogger(__name__)

METRIC_HEADER = "block\tcutoff\tmetric\tvalue\n"


@dataclass
class BlockReport:
    block: int
    n_users: int
    means: dict
    cohort_recall: float | None = None
    cohort_size: int = 0


@dataclass
class RunResult:
    config: RunConfig
    schedule: BlockSchedule
    reports: list
    states: dict = field(default_factory=dict)
    incremental: dict = field(default_factory=dict)
    synth: SynthDataset | None = None

    def metrics_table(self) -> str:
        rows = [METRIC_HEADER]
        for rep in self.reports:
            for k in self.config.cutoff_list():
                for m in METRICS:
                    rows.append(f"{rep.block}\t{k}\t{m}\t{rep.means[(m, k)]:.10f}\n")
            if rep.cohort_recall is not None:
                rows.append(f"{rep.block}\t20\trecall_high_shift\t{rep.cohort_recall:.10f}\n")
        return "".join(rows)

    def summary(self) -> dict:
        cutoffs = self.config.cutoff_list()
        blocks = []
        for rep in self.reports:
            entry = {"block": rep.block, "n_eval_users": rep.n_users,
                     "metrics": {f"{m}@{k}": round(rep.means[(m, k)], 10)
                                 for k in cutoffs for m in METRICS}}
            if rep.cohort_recall is not None:
                entry["recall_high_shift@20"] = round(rep.cohort_recall, 10)
                entry["cohort_size"] = rep.cohort_size
            blocks.append(entry)
        inc = [r for r in self.reports if r.block >= 1]
        averages = {f"{m}@{k}": round(float(np.mean([r.means[(m, k)] for r in inc])), 10)
                    for k in cutoffs for m in METRICS} if inc else {}
        cohort = [r.cohort_recall for r in inc if r.cohort_recall is not None]
        if cohort:
            averages["recall_high_shift@20"] = round(float(np.mean(cohort)), 10)
        return {"seed": self.config.seed, "config_digest": self.config.digest(),
                "split_mode": self.schedule.mode, "blocks": blocks,
                "incremental_average": averages}


def load_source(cfg: RunConfig):
    """Return ``(log, true_categories or None, synth dataset or None)``."""
    if cfg.input == "synthetic":
        ds = synth_drift_dataset(cfg.synth_n_users, cfg.synth_n_items, cfg.synth_k_true,
                                 cfg.synth_drift_fraction, cfg.synth_flip_block, cfg.synth_n_blocks,
                                 cfg.synth_events_per_user_block, cfg.seed)
        return ds.log, ds.categories, ds
    if not cfg.input:
        raise ConfigError("config key 'input' is required")
    delim = "\t" if cfg.delimiter in ("tab", "\\t") else cfg.delimiter
    data = ingest_interactions(cfg.input, delim)
    cats = None
    if cfg.categories:
        cats = read_categories(cfg.categories, data, delim)
    return data, cats, None


def read_categories(path, data: InteractionLog, delimiter=",") -> np.ndarray:
    """Raw ``item, category`` pairs mapped onto the log's dense item ids."""
    index = {raw: k for k, raw in enumerate(data.raw_items)}
    cats = np.full(data.n_items, -1, dtype=np.int64)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(delimiter if delimiter in line else None)]
            if len(parts) != 2:
                raise ValueError(f"{path} line {lineno}: expected 'item{delimiter}category'")
            if parts[0] in index:
                cats[index[parts[0]]] = int(parts[1])
    if (cats < 0).any():
        raise ValueError(f"{path}: {(cats < 0).sum()} items lack a category")
    return cats


def _eval_categories(cfg, true_cats, state, graph):
    if true_cats is not None:
        return np.asarray(true_cats), int(np.max(true_cats)) + 1
    reps = forward(state, graph).item_reps[:graph.n_items]
    k = min(cfg.K, graph.n_items)
    cents = kmeans_init(reps, k, cfg.seed)
    d2 = ((reps[:, None, :] - cents[None]) ** 2).sum(-1)
    return d2.argmin(1), k


def evaluate_block(cfg: RunConfig, data: InteractionLog, schedule: BlockSchedule, t: int,
                   state: EmbeddingState, true_cats=None) -> BlockReport | None:
    """Metrics for the model trained on block ``t`` over its evaluation range.

    For t >= 1 the report also carries Recall@20 of the top-ISS cohort
    (ISS between blocks t-1 and t).
    """
    rng = schedule.eval_range(t)
    if rng is None or rng[1] <= rng[0]:
        return None
    graph = build_block_graph(data, schedule, t)
    reps = forward(state, graph)
    cutoffs = cfg.cutoff_list()
    req = make_eval_request(reps, data, rng[0], rng, graph.n_items, cutoffs)
    if len(req.users) == 0:
        return None
    results = evaluate(req)
    means = {key: val[1] for key, val in results.items()}
    report = BlockReport(t, len(req.users), means)
    if t >= 1 and 20 in cutoffs:
        graph_prev = build_block_graph(data, schedule, t - 1)
        cats, k = _eval_categories(cfg, true_cats, state, graph)
        h_t = normalise_rows(category_histogram(graph, cats, k))
        h_prev = category_histogram(graph_prev, cats, k)
        h_prev = np.vstack([h_prev, np.zeros((graph.n_users - h_prev.shape[0], k))])
        h_prev = normalise_rows(h_prev)
        iss = interest_shift_indicator(h_t, h_prev)
        in_eval = np.zeros(graph.n_users, dtype=bool)
        in_eval[req.users[req.users < graph.n_users]] = True
        eligible = in_eval & (h_t.sum(1) > 0) & (h_prev.sum(1) > 0)
        if eligible.any():
            cohort = high_shift_cohort(iss, cfg.cohort_fraction, eligible)
            per_user = results[("recall", 20)][0]
            pos = {u: n for n, u in enumerate(req.users.tolist())}
            report.cohort_recall = float(np.mean([per_user[pos[u]] for u in cohort.tolist()]))
            report.cohort_size = int(cohort.shape[0])
    return report


def run_experiment(cfg: RunConfig | str | Path, keep_states: bool = False,
                   track_negatives: bool = False,
                   base_state: EmbeddingState | None = None) -> RunResult:
    """Split, train the base block, run every incremental block, evaluate.

    ``base_state`` skips base training and starts the incremental loop from
    the given block-0 model, so two configurations can share one base.

    When ``cfg.output_dir`` is set the run writes ``schedule.tsv``,
    ``metrics.tsv``, ``summary.json``, per-block ``train_block{t}.tsv`` and
    ``checkpoint_block{t}.bin``, and the raw-to-dense id maps.
    """
    if not isinstance(cfg, RunConfig):
        cfg = load_config(cfg)
    data, true_cats, synth = load_source(cfg)
    schedule = split_blocks(data, cfg.base_fraction, cfg.n_incremental, cfg.val_fraction,
                            cfg.split_mode)
    out = Path(cfg.output_dir) if cfg.output_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "schedule.tsv").write_text(schedule.summary())
        (out / "user_ids.tsv").write_text("".join(f"{raw}\t{k}\n" for k, raw in enumerate(data.raw_users)))
        (out / "item_ids.tsv").write_text("".join(f"{raw}\t{k}\n" for k, raw in enumerate(data.raw_items)))

    tcfg = cfg.trainer()
    weights = cfg.weights()
    fixed_cats = true_cats if cfg.use_true_categories else None
    if cfg.use_true_categories and true_cats is None:
        raise ConfigError("use_true_categories needs a categories file or synthetic input")
    res_cfg = cfg.reservoir()
    if fixed_cats is not None:
        res_cfg = dataclasses.replace(res_cfg, K=int(np.max(fixed_cats)) + 1)

    result = RunResult(cfg, schedule, [], synth=synth)
    log.info("training base block (%d events)", schedule.base.train[1] - schedule.base.train[0])
    if base_state is None:
        state, records = train_base_block(data, schedule, tcfg, weights)
    else:
        state, records = base_state.copy(), []
    _block_outputs(out, 0, state, records)
    if keep_states:
        result.states[0] = state.copy()
    rep = evaluate_block(cfg, data, schedule, 0, state, true_cats)
    if rep:
        result.reports.append(rep)

    for t in schedule.trainable()[1:]:
        log.info("training incremental block %d", t)
        inc: IncrementalResult = train_incremental_block(
            state, state.copy(), data, schedule, t, None, tcfg, weights, cfg.distill(), res_cfg,
            fixed_cats, track_negatives)
        state = inc.state
        if track_negatives or keep_states:
            result.incremental[t] = inc
        if keep_states:
            result.states[t] = state.copy()
        _block_outputs(out, t, state, inc.records)
        if out is not None and inc.categories is not None:
            (out / f"categories_block{t}.tsv").write_text(format_assignments(inc.categories))
        rep = evaluate_block(cfg, data, schedule, t, state, true_cats)
        if rep:
            result.reports.append(rep)

    if out is not None:
        (out / "metrics.tsv").write_text(result.metrics_table())
        (out / "summary.json").write_text(json.dumps(result.summary(), indent=2, sort_keys=True) + "\n")
    return result


def _block_outputs(out, t, state, records):
    if out is None:
        return
    (out / f"train_block{t}.tsv").write_text(format_records(records))
    save_checkpoint(state, out / f"checkpoint_block{t}.bin")


def evaluate_checkpoint(cfg: RunConfig | str | Path, checkpoint: str | Path, t: int) -> BlockReport:
    """Recompute block ``t``'s metrics from a saved checkpoint."""
    if not isinstance(cfg, RunConfig):
        cfg = load_config(cfg)
    data, true_cats, _ = load_source(cfg)
    schedule = split_blocks(data, cfg.base_fraction, cfg.n_incremental, cfg.val_fraction,
                            cfg.split_mode)
    state = load_checkpoint(checkpoint)
    rep = evaluate_block(cfg, data, schedule, t, state, true_cats)
    if rep is None:
        raise ValueError(f"block {t} has no evaluation range")
    return rep


# --------------------------------------------------------------------------
# drift comparison on synthetic data

@dataclass
class DriftComparison:
    """One seed of the reservoir-vs-fine-tune comparison on drifting users.

    ``uniform_fraction``/``reservoir_fraction`` are the shares of drifting
    users' negatives that fall in the category they abandoned, for the
    uniform and the reservoir sampler, during the block where the drift
    happens. Cohort recalls are Recall@20 of the high-ISS cohort averaged
    over evaluated incremental blocks.
    """

    seed: int
    uniform_fraction: float
    reservoir_fraction: float
    cohort_reservoir: float
    cohort_fine_tune: float
    seconds: float

    @property
    def abandon_ratio(self) -> float:
        return self.reservoir_fraction / self.uniform_fraction

    @property
    def reservoir_wins(self) -> bool:
        return self.cohort_reservoir > self.cohort_fine_tune


def fine_tune_config(cfg: RunConfig) -> RunConfig:
    """Same run without reservoir negatives, distillation or clustering."""
    return cfg.replace(n_reservoir=0, lambda_kd=0.0, beta=0.0, distill_mode="none")


def drift_comparison(cfg: RunConfig) -> DriftComparison:
    """Run ``cfg`` (synthetic input) and its fine-tune twin from one shared base model."""
    if cfg.input != "synthetic":
        raise ConfigError("drift_comparison needs input = synthetic")
    t0 = time.perf_counter()
    sane = run_experiment(cfg.replace(output_dir=""), keep_states=True, track_negatives=True)
    ft = run_experiment(fine_tune_config(cfg).replace(output_dir=""), base_state=sane.states[0])
    ds = sane.synth
    t = max(1, ds.flip_block)
    if t not in sane.incremental:
        raise ConfigError(f"flip block {ds.flip_block} is not an incremental block of the schedule")
    uu, ui, ru, ri, rc = sane.incremental[t].negatives.arrays()
    cats, old = ds.categories, ds.old_dominant
    m = ds.drifting[uu]
    uniform = float(np.mean(cats[ui[m]] == old[uu[m]]))
    m = ds.drifting[ru]
    reservoir = float(np.sum(rc[m] * (cats[ri[m]] == old[ru[m]])) / np.sum(rc[m]))

    def cohort(result):
        vals = [r.cohort_recall for r in result.reports if r.block >= 1 and r.cohort_recall is not None]
        return float(np.mean(vals))

    return DriftComparison(cfg.seed, uniform, reservoir, cohort(sane), cohort(ft),
                           time.perf_counter() - t0)
