"""Experiment configuration and its YAML file format."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from ..errors import InvalidArgument
from ..kernels import RuleKind
from .data import RecallTaskConfig

__all__ = ["ExperimentConfig", "load_config", "dump_config", "MODEL_KINDS", "EXAMPLE_CONFIG"]

MODEL_KINDS = ("mom", "single", "expanded")

EXAMPLE_CONFIG = """\
# Experiment config for `python -m mom train --config <this file>`.
name: mom-default
model: mom            # mom | single | expanded (single memory with widened values)
num_memories: 4       # routed memories (ignored by single/expanded)
top_k: 2              # memories activated per token
shared: true          # always-on shared memory
d: 64                 # model width
d_k: 8                # key dimension of every memory
d_v: 8                # value dimension of every memory
num_layers: 2
rule: GatedDeltaNet   # LinearAttn | RetNet | GLA | Mamba2 | GatedDeltaNet for training
gamma: null           # RetNet decay constant
a_bias: 5.0           # initial decay-gate bias (sigmoid(5) ~ 0.993 retention)
b_bias: 0.0           # initial write-strength bias
aux_scale: 0.001      # load-balance loss weight
lr: 0.003
weight_decay: 0.01
clip: 1.0
warmup: 50
steps: 2000
batch_size: 32
seed: 0
eval_sequences: 512
log_every: 50
task:
  vocab_size: 66      # 32 key ids, 32 value ids, pad and query marker
  num_pairs: 16       # twice the key dimension, so one memory is over capacity
  num_queries: 16
  seq_len: 64
  seed: 0
  num_sequences: 16384
"""


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "mom"
    model: str = "mom"
    num_memories: int = 4
    top_k: int = 2
    shared: bool = True
    d: int = 64
    d_k: int = 8
    d_v: int = 8
    num_layers: int = 2
    rule: str = "GatedDeltaNet"
    gamma: Optional[float] = None
    a_bias: float = 5.0
    b_bias: float = 0.0
    aux_scale: float = 1e-3
    lr: float = 3e-3
    weight_decay: float = 0.01
    clip: float = 1.0
    warmup: int = 50
    steps: int = 2000
    batch_size: int = 32
    seed: int = 0
    eval_sequences: int = 512
    log_every: int = 50
    task: RecallTaskConfig = field(default_factory=lambda: RecallTaskConfig(
        vocab_size=66, num_pairs=16, num_queries=16, seq_len=64))

    def __post_init__(self):
        if isinstance(self.task, dict):
            object.__setattr__(self, "task", RecallTaskConfig(**self.task))
        if self.model not in MODEL_KINDS:
            raise InvalidArgument(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        RuleKind(self.rule)
        if self.model == "mom" and not 1 <= self.top_k <= self.num_memories:
            raise InvalidArgument("top_k must lie in [1, num_memories]")
        if self.steps < 0 or self.batch_size < 1:
            raise InvalidArgument("steps must be >= 0 and batch_size >= 1")

    def layer_shape(self) -> dict:
        """Effective per-layer memory layout for this model kind."""
        if self.model == "mom":
            return dict(num_memories=self.num_memories, top_k=self.top_k,
                        shared=self.shared, d_k=self.d_k, d_v=self.d_v)
        if self.model == "single":
            return dict(num_memories=1, top_k=1, shared=False, d_k=self.d_k, d_v=self.d_v)
        width = (self.top_k + int(self.shared)) * self.d_v
        return dict(num_memories=1, top_k=1, shared=False, d_k=self.d_k, d_v=width)

    def activated_state_size(self) -> int:
        shape = self.layer_shape()
        return (shape["top_k"] + int(shape["shared"])) * shape["d_k"] * shape["d_v"]

    def replace(self, **changes) -> "ExperimentConfig":
        task = changes.pop("task", None)
        if isinstance(task, dict):
            task = dataclasses.replace(self.task, **task)
        cfg = dataclasses.replace(self, **changes)
        return dataclasses.replace(cfg, task=task) if task is not None else cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - names
        if unknown:
            raise InvalidArgument(f"unknown config keys: {sorted(unknown)}")
        return cls(**obj)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        obj = yaml.safe_load(fh) or {}
    return ExperimentConfig.from_dict(obj)


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
