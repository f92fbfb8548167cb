"""Interaction logs, chronological block schedules and per-block graphs."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class IngestionError(ValueError):
    """Raised for malformed or empty interaction sources."""


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class InteractionLog:
    """Time-sorted implicit-feedback events with dense 0-based ids.

    ``user_ids[k]`` / ``item_ids[k]`` / ``timestamps[k]`` describe event k.
    Dense ids are assigned in first-appearance order of the sorted stream, so
    the users (items) seen in any prefix of the log form a prefix of ids.
    """

    users: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray
    raw_users: tuple = ()
    raw_items: tuple = ()

    def __post_init__(self):
        for arr in (self.users, self.items, self.timestamps):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return int(self.users.shape[0])

    @property
    def n_users(self) -> int:
        return int(self.users.max()) + 1 if len(self) else 0

    @property
    def n_items(self) -> int:
        return int(self.items.max()) + 1 if len(self) else 0


def _reindex(values: Sequence) -> tuple[np.ndarray, tuple]:
    mapping: dict = {}
    dense = np.empty(len(values), dtype=np.int64)
    for k, v in enumerate(values):
        idx = mapping.get(v)
        if idx is None:
            idx = mapping[v] = len(mapping)
        dense[k] = idx
    return dense, tuple(mapping)


def make_log(users: Sequence, items: Sequence, timestamps: Sequence[int]) -> InteractionLog:
    """Stable-sort events by timestamp and re-index users/items densely."""
    ts = np.asarray(timestamps, dtype=np.int64)
    if ts.size == 0:
        raise IngestionError("no interaction events")
    order = np.argsort(ts, kind="stable")
    users = [users[k] for k in order]
    items = [items[k] for k in order]
    dense_u, raw_u = _reindex(users)
    dense_i, raw_i = _reindex(items)
    return InteractionLog(dense_u, dense_i, ts[order], raw_u, raw_i)


def ingest_interactions(source: str | Path | Iterable[str], delimiter: str = ",") -> InteractionLog:
    """Parse ``user,item,timestamp`` records into an :class:`InteractionLog`.

    ``source`` may be a path or any iterable of lines. Blank lines and lines
    starting with ``#`` are skipped. User and item fields are kept as opaque
    strings; the timestamp must be an integer.
    """
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8") as fh:
            return ingest_interactions(fh, delimiter)
    users, items, stamps = [], [], []
    for lineno, line in enumerate(source, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = [f.strip() for f in line.split(delimiter)]
        if len(fields) != 3:
            raise IngestionError(f"line {lineno}: expected 3 fields, got {len(fields)}")
        try:
            ts = int(fields[2])
        except ValueError:
            raise IngestionError(f"line {lineno}: non-numeric timestamp {fields[2]!r}") from None
        users.append(fields[0])
        items.append(fields[1])
        stamps.append(ts)
    if not stamps:
        raise IngestionError("empty interaction source")
    return make_log(users, items, stamps)


def format_log(log: InteractionLog, delimiter: str = ",") -> str:
    buf = io.StringIO()
    for u, i, t in zip(log.users, log.items, log.timestamps):
        buf.write(f"{log.raw_users[u] if log.raw_users else u}{delimiter}"
                  f"{log.raw_items[i] if log.raw_items else i}{delimiter}{t}\n")
    return buf.getvalue()


# --------------------------------------------------------------------------
# block schedule

Range = tuple[int, int]


@dataclass(frozen=True)
class Block:
    index: int
    span: Range
    train: Range
    val: Range
    test: Range | None = None


@dataclass(frozen=True)
class BlockSchedule:
    """Block 0 is the base block; blocks 1.. are incremental."""

    blocks: tuple[Block, ...]
    mode: str = "standard"

    @property
    def base(self) -> Block:
        return self.blocks[0]

    @property
    def incremental(self) -> tuple[Block, ...]:
        return self.blocks[1:]

    def __len__(self) -> int:
        return len(self.blocks)

    def trainable(self) -> list[int]:
        """Blocks with a non-empty training range under this mode."""
        return [b.index for b in self.blocks if b.train[1] > b.train[0]]

    def eval_range(self, t: int) -> Range | None:
        """Range used to test the model trained on block ``t``."""
        if self.mode == "tuning":
            return self.blocks[t].test
        if t + 1 < len(self.blocks):
            return self.blocks[t + 1].span
        return None

    def summary(self) -> str:
        lines = ["block\tstart\tstop\ttrain\tval\ttest"]
        for b in self.blocks:
            test = f"{b.test[0]}-{b.test[1]}" if b.test else "-"
            lines.append(f"{b.index}\t{b.span[0]}\t{b.span[1]}\t{b.train[0]}-{b.train[1]}"
                         f"\t{b.val[0]}-{b.val[1]}\t{test}")
        return "\n".join(lines) + "\n"


def split_blocks(log: InteractionLog | int, base_fraction: float = 0.6, n_incremental: int = 4,
                 val_fraction: float = 0.05, mode: str = "standard") -> BlockSchedule:
    """Partition the log chronologically into a base block and incremental blocks.

    Block sizes use floor division; leftover events go to the last block.
    In standard mode the trailing ``val_fraction`` of each block is held out
    for validation. In tuning mode block t trains on all of its events,
    validates on the first half of block t+1 and tests on the second half;
    the final block is only ever used for validation/testing.
    """
    n = log if isinstance(log, int) else len(log)
    if not 0.0 < base_fraction < 1.0:
        raise ScheduleError("base_fraction must lie in (0, 1)")
    if n_incremental < 1:
        raise ScheduleError("need at least one incremental block")
    if mode not in ("standard", "tuning"):
        raise ScheduleError(f"unknown split mode {mode!r}")
    n_base = int(np.floor(n * base_fraction))
    per_block = (n - n_base) // n_incremental
    bounds = [0, n_base] + [n_base + per_block * (k + 1) for k in range(n_incremental)]
    bounds[-1] = n
    spans = [(bounds[k], bounds[k + 1]) for k in range(n_incremental + 1)]
    for k, (s, e) in enumerate(spans):
        if e <= s:
            raise ScheduleError(f"block {k} would be empty ({n} events)")

    blocks = []
    for k, (s, e) in enumerate(spans):
        if mode == "standard":
            n_val = int(np.floor((e - s) * val_fraction))
            if e - s - n_val < 1:
                raise ScheduleError(f"block {k} has no training events after validation carve-out")
            blocks.append(Block(k, (s, e), (s, e - n_val), (e - n_val, e)))
        else:
            if k + 1 < len(spans):
                ns, ne = spans[k + 1]
                mid = ns + (ne - ns) // 2
                if mid <= ns or ne <= mid:
                    raise ScheduleError(f"block {k + 1} too small to halve into validation/test")
                blocks.append(Block(k, (s, e), (s, e), (ns, mid), (mid, ne)))
            else:
                blocks.append(Block(k, (s, e), (e, e), (e, e), None))
    return BlockSchedule(tuple(blocks), mode)


# --------------------------------------------------------------------------
# graphs and histograms

@dataclass(frozen=True)
class InteractionGraph:
    """Bipartite adjacency of one block over the cumulative node universe.

    Duplicate events are kept, so adjacency lists may repeat ids.
    """

    n_users: int
    n_items: int
    edge_users: np.ndarray
    edge_items: np.ndarray
    user_adj: tuple = field(repr=False, default=())
    item_adj: tuple = field(repr=False, default=())

    def __post_init__(self):
        for arr in (self.edge_users, self.edge_items):
            arr.setflags(write=False)

    @property
    def n_edges(self) -> int:
        return int(self.edge_users.shape[0])

    def positives(self) -> list[set]:
        return [set(a.tolist()) for a in self.user_adj]

    def degree(self) -> np.ndarray:
        return np.bincount(self.edge_users, minlength=self.n_users)


def graph_from_edges(edge_users, edge_items, n_users: int, n_items: int) -> InteractionGraph:
    eu = np.asarray(edge_users, dtype=np.int64)
    ei = np.asarray(edge_items, dtype=np.int64)
    if eu.size and (eu.max() >= n_users or ei.max() >= n_items or eu.min() < 0 or ei.min() < 0):
        raise ValueError("edge endpoint outside the node universe")
    order_u = np.argsort(eu, kind="stable")
    split_u = np.searchsorted(eu[order_u], np.arange(1, n_users))
    order_i = np.argsort(ei, kind="stable")
    split_i = np.searchsorted(ei[order_i], np.arange(1, n_items))
    user_adj = tuple(np.split(ei[order_u], split_u))
    item_adj = tuple(np.split(eu[order_i], split_i))
    return InteractionGraph(n_users, n_items, eu, ei, user_adj, item_adj)


def build_block_graph(log: InteractionLog, schedule: BlockSchedule, t: int,
                      part: str = "train") -> InteractionGraph:
    """Graph of block ``t``'s ``part`` range ("train", "val", "test" or "span").

    Node universes cover every user/item seen in the log up to the end of
    the selected range, so they only grow with t.
    """
    if not 0 <= t < len(schedule):
        raise IndexError(f"block index {t} out of range [0, {len(schedule)})")
    rng = getattr(schedule.blocks[t], part)
    if rng is None or rng[1] <= rng[0]:
        raise ScheduleError(f"block {t} has an empty {part} range")
    s, e = rng
    n_users = int(log.users[:e].max()) + 1
    n_items = int(log.items[:e].max()) + 1
    return graph_from_edges(log.users[s:e], log.items[s:e], n_users, n_items)


def category_histogram(graph: InteractionGraph, categories, K: int) -> np.ndarray:
    """Per-user counts of block interactions falling in each category."""
    cats = np.asarray(categories)
    if cats.shape[0] < graph.n_items:
        raise ValueError(f"categories cover {cats.shape[0]} items, graph has {graph.n_items}")
    edge_cats = cats[graph.edge_items]
    if edge_cats.size and (edge_cats.min() < 0 or edge_cats.max() >= K):
        raise ValueError("an item in the graph lacks a category in [0, K)")
    hist = np.zeros((graph.n_users, K), dtype=np.int64)
    np.add.at(hist, (graph.edge_users, edge_cats), 1)
    return hist
