"""Incremental implicit-feedback recommendation with an interest-shift-aware negative reservoir."""

from .backbone import (EmbeddingState, NodeRepresentations, RankingContext, forward, init_embeddings,
                       load_checkpoint, rank_top_negatives, save_checkpoint)
from .config import ConfigError, RunConfig, load_config, parse_config
from .data import (BlockSchedule, InteractionGraph, InteractionLog, build_block_graph,
                   ingest_interactions, split_blocks)
from .experiment import evaluate_checkpoint, run_experiment
from .reservoir import ReservoirConfig, ReservoirState, draw_negatives, update_reservoir
from .synth import synth_drift_dataset

__version__ = "0.1.0"
