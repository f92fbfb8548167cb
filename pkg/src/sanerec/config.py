"""Flat ``key = value`` run configuration."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .losses import DistillConfig, LossWeights
from .reservoir import ReservoirConfig
from .trainer import TrainerConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # data
    input: str = ""
    delimiter: str = ","
    categories: str = ""
    base_fraction: float = 0.6
    n_incremental: int = 4
    val_fraction: float = 0.05
    split_mode: str = "standard"
    output_dir: str = ""
    # synthetic source, used when input = synthetic
    synth_n_users: int = 200
    synth_n_items: int = 300
    synth_k_true: int = 4
    synth_drift_fraction: float = 0.3
    synth_flip_block: int = 2
    synth_n_blocks: int = 4
    synth_events_per_user_block: int = 10
    # trainer
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
    # reservoir
    Q: int = 100
    lam: float = 1.0
    K: int = 10
    flip_sign: bool = False
    use_true_categories: bool = False
    # losses
    lambda_kd: float = 0.0
    beta: float = 0.0
    lambda_reg: float = 1e-4
    distill_mode: str = "none"
    tau_c: float = 1.0
    distill_negatives: int = 5
    # clustering
    nu: float = 1.0
    tau: float = 1.0
    # evaluation
    cutoffs: str = "5,10,15,20"
    cohort_fraction: float = 0.15
    seed: int = 0

    def trainer(self) -> TrainerConfig:
        names = {f.name for f in fields(TrainerConfig)}
        return TrainerConfig(**{n: getattr(self, n) for n in names})

    def reservoir(self) -> ReservoirConfig:
        return ReservoirConfig(self.Q, self.lam, self.K, self.refresh_every_f, self.flip_sign)

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_kd, self.beta, self.lambda_reg)

    def distill(self) -> DistillConfig:
        return DistillConfig(self.distill_mode, self.tau_c, self.distill_negatives, self.seed)

    def cutoff_list(self) -> tuple[int, ...]:
        return tuple(int(k) for k in self.cutoffs.split(",") if k.strip())

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))

    def digest(self) -> str:
        """SHA-256 of the canonical text form (output_dir excluded)."""
        text = dataclasses.replace(self, output_dir="").to_text()
        return hashlib.sha256(text.encode()).hexdigest()

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _convert(name: str, kind, raw: str):
    try:
        if kind in (bool, "bool"):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"config key {name!r}: cannot parse {raw!r}") from None


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"unknown config key {key!r} (line {lineno})")
        values[key] = _convert(key, types[key], raw)
    return dataclasses.replace(base or RunConfig(), **values)


def load_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)
