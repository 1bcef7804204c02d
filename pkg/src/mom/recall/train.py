"""Training, evaluation and run records for the recall experiments."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..errors import TrainingDiverged
from ..router import LoadBalanceStats
from .config import ExperimentConfig
from .data import RecallDataset, RecallTaskConfig, gen_recall_dataset
from .model import RecallModel, forward, init_model, loss_and_grads
from .optim import AdamW, clip_by_global_norm, cosine_lr

__all__ = [
    "RunRecord",
    "make_datasets",
    "build_model",
    "train",
    "evaluate",
    "routing_fractions",
    "write_run",
]

log = logging.getLogger(__name__)

EVAL_SEED_OFFSET = 1_000_003


@dataclass
class RunRecord:
    fingerprint: str
    config: dict
    losses: list = field(default_factory=list)       # [step, total, aux]
    final_accuracy: float = 0.0
    train_accuracy: float = 0.0
    routing_fractions: list = field(default_factory=list)   # [layer][memory]
    routing_history: list = field(default_factory=list)     # [step, [layer][memory]]
    wall_time: float = 0.0

    def to_json(self) -> str:
        # wall_time lives in timing.json so run.json stays byte-reproducible
        obj = asdict(self)
        obj.pop("wall_time")
        return json.dumps(obj, indent=1, sort_keys=True)


def make_datasets(cfg: ExperimentConfig):
    """Training set from the task seed, evaluation set from a disjoint seed."""
    train_ds = gen_recall_dataset(cfg.task)
    eval_task = RecallTaskConfig(**{**asdict(cfg.task), "seed": cfg.task.seed + EVAL_SEED_OFFSET,
                                    "num_sequences": cfg.eval_sequences})
    return train_ds, gen_recall_dataset(eval_task)


def build_model(cfg: ExperimentConfig, rng) -> RecallModel:
    return init_model(
        cfg.task.vocab_size, cfg.d, cfg.num_layers, rule=cfg.rule, gamma=cfg.gamma,
        a_bias=cfg.a_bias, b_bias=cfg.b_bias, rng=rng, **cfg.layer_shape(),
    )


def _batches(ds: RecallDataset, batch_size: int):
    for start in range(0, len(ds), batch_size):
        yield ds.batch(slice(start, start + batch_size))


def evaluate(model: RecallModel, dataset: RecallDataset, batch_size: int = 128) -> float:
    """Fraction of query positions whose argmax prediction is the bound value."""
    hits = total = 0
    for b in _batches(dataset, batch_size):
        logits, _ = forward(model, b.tokens)
        mask = b.query_mask
        hits += int(np.sum((np.argmax(logits, axis=-1) == b.targets) & mask))
        total += int(mask.sum())
    return hits / max(total, 1)


def routing_fractions(model: RecallModel, dataset: RecallDataset, batch_size: int = 128) -> list:
    """Per-layer token routing fractions over ``dataset`` (each row sums to one)."""
    per_layer: list[Optional[LoadBalanceStats]] = [None] * len(model.layers)
    for b in _batches(dataset, batch_size):
        _, (_, _, caches, _, _) = forward(model, b.tokens)
        for i, (_, _, cache) in enumerate(caches):
            s = LoadBalanceStats.from_arrays(cache.indices, cache.probs)
            per_layer[i] = s if per_layer[i] is None else per_layer[i] + s
    return [s.fractions.tolist() for s in per_layer]


def train(cfg: ExperimentConfig, data=None, *, return_model: bool = False):
    """Train one arm. ``data`` is ``(train_ds, eval_ds)``; generated when omitted."""
    t0 = time.perf_counter()
    train_ds, eval_ds = make_datasets(cfg) if data is None else data
    rng = np.random.default_rng(cfg.seed)
    model = build_model(cfg, rng)
    params = model.arrays()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    record = RunRecord(cfg.fingerprint(), cfg.to_dict())
    for step in range(cfg.steps):
        idx = rng.integers(0, len(train_ds), size=cfg.batch_size)
        batch = train_ds.batch(idx)
        total, ce, aux, grads, stats = loss_and_grads(model, batch.tokens, batch.targets, cfg.aux_scale)
        if not np.isfinite(total):
            raise TrainingDiverged(f"{cfg.name}: loss became {total} at step {step}")
        clip_by_global_norm(grads, cfg.clip)
        lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.warmup)
        params = opt.step(params, grads, lr)
        model = model.with_arrays(params)
        record.losses.append([step, total, aux])
        if cfg.log_every and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            record.routing_history.append([step, [s.fractions.tolist() for s in stats]])
            log.debug("%s step %d loss %.4f aux %.2e", cfg.name, step, total, aux)
    record.final_accuracy = evaluate(model, eval_ds)
    record.train_accuracy = evaluate(model, train_ds.batch(slice(0, cfg.eval_sequences)))
    record.routing_fractions = routing_fractions(model, eval_ds)
    record.wall_time = time.perf_counter() - t0
    return (record, model) if return_model else record


def write_run(record: RunRecord, out_dir) -> Path:
    """Write ``run.json``, ``loss.csv``, ``routing.csv`` and ``timing.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.json").write_text(record.to_json())
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "aux_loss"])
        for step, total, aux in record.losses:
            w.writerow([step, repr(float(total)), repr(float(aux))])
    with open(out / "routing.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "memory", "fraction"])
        for layer, row in enumerate(record.routing_fractions):
            for m, frac in enumerate(row):
                w.writerow([layer, m, repr(float(frac))])
    (out / "timing.json").write_text(json.dumps({"wall_time": record.wall_time}))
    return out
