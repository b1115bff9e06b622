"""Flat ``key = value`` run configuration.

Lines are ``key = value``; ``#`` starts a comment. Unknown keys and values
of the wrong type are rejected before anything runs. The path given on the
command line can be overridden with the ``HYBRIDNMT_CONFIG`` environment
variable.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .model import ModelConfig, Variant
from .parallel.placement import Strategy
from .simulator import CostModel

CONFIG_ENV = "HYBRIDNMT_CONFIG"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # model (desk-scale defaults)
    vocab_size: int = 50
    emb_size: int = 32
    hidden_size: int = 64
    depth: int = 2
    variant: str = "input_feeding"
    dropout: float = 0.0
    precision: int = 32
    # execution
    strategy: str = "serial"
    n_devices: int = 1
    batch_size: int = 64
    seed: int = 1
    # optimisation
    epochs: int = 30
    lr: float = 0.001
    lr_decay: float = 0.7
    lr_decay_interval: int = 50
    clip_norm: float = 0.0
    max_batches: int = 0
    # data
    train_src: str = ""
    train_tgt: str = ""
    dev_src: str = ""
    dev_tgt: str = ""
    vocab: str = ""
    toy_task: str = "reverse"
    toy_train: int = 2000
    toy_dev: int = 200
    toy_max_len: int = 10
    # outputs
    checkpoint: str = ""
    metrics: str = ""
    out_dir: str = ""
    # simulator
    compute_cost: float = 0.004
    fixed_cost: float = 1.0
    transfer_cost: float = 10.0
    sync_cost: float = 60.0
    softmax_factor: float = 1.0
    backward_factor: float = 2.0
    src_len: int = 25
    tgt_len: int = 25
    # bench
    bench_steps: int = 3
    bench_len: int = 10

    def __post_init__(self):
        try:
            self.model_config()
            Strategy.parse(self.strategy)
            self.cost_model()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        positive = ("n_devices", "batch_size", "epochs", "lr_decay_interval", "toy_max_len",
                    "src_len", "tgt_len", "bench_steps", "bench_len")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.lr <= 0 or not 0 < self.lr_decay <= 1:
            raise ConfigError("lr must be > 0 and lr_decay in (0, 1]")
        if self.clip_norm < 0 or self.max_batches < 0:
            raise ConfigError("clip_norm and max_batches must be >= 0")
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, str) and ("#" in v or "\n" in v or v != v.strip()):
                raise ConfigError(f"{f.name}: value {v!r} cannot be written as key = value")
        if self.toy_task not in ("copy", "reverse"):
            raise ConfigError(f"toy_task must be copy or reverse, got {self.toy_task!r}")

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.vocab_size, self.emb_size, self.hidden_size, self.depth,
                           Variant(self.variant), self.dropout, self.precision)

    def cost_model(self) -> CostModel:
        return CostModel(compute_cost=self.compute_cost, fixed_cost=self.fixed_cost,
                         transfer_cost=self.transfer_cost, sync_cost=self.sync_cost,
                         softmax_factor=self.softmax_factor,
                         backward_factor=self.backward_factor)

    @property
    def strategy_enum(self) -> Strategy:
        return Strategy.parse(self.strategy)

    def with_updates(self, **kw) -> "RunConfig":
        try:
            return replace(self, **kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


_FIELDS = {f.name: f for f in fields(RunConfig)}
_CASTS = {"int": int, "float": float, "str": str}


def parse_config(text: str) -> RunConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        cast = _CASTS[_FIELDS[key].type]
        try:
            values[key] = cast(value)
        except ValueError:
            raise ConfigError(f"line {lineno}: {key} expects {_FIELDS[key].type},"
                              f" got {value!r}") from None
    return RunConfig(**values)


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{name} = {getattr(cfg, name)}\n" for name in _FIELDS)


def config_path(path: str | None) -> str | None:
    return os.environ.get(CONFIG_ENV) or path


def load_config(path: str | None) -> RunConfig:
    path = config_path(path)
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
