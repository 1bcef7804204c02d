"""Multi-seed comparisons, memory-count sweeps and the aux-loss ablation."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from ..errors import InvalidArgument
from .config import ExperimentConfig
from .train import RunRecord, make_datasets, train, write_run

__all__ = [
    "ArmSummary",
    "Comparison",
    "RunCache",
    "compare",
    "routing_imbalance",
    "memory_sweep_configs",
    "aux_ablation_configs",
]


def routing_imbalance(fractions) -> list[float]:
    """Per-layer max/min routing fraction (``inf`` when a memory is never used)."""
    out = []
    for row in np.asarray(fractions, dtype=float).reshape(len(fractions), -1):
        lo = row.min()
        out.append(float(row.max() / lo) if lo > 0 else float("inf"))
    return out


class RunCache:
    """Memoizes finished runs so arms shared between experiments train once.

    The arm name is ignored when matching, so a cached record keeps the
    name of whichever arm trained it first.
    """

    def __init__(self):
        self._runs: dict[str, RunRecord] = {}
        self._data: dict[str, tuple] = {}

    def data_for(self, cfg: ExperimentConfig):
        key = json.dumps([cfg.task.__dict__, cfg.eval_sequences], sort_keys=True)
        if key not in self._data:
            self._data[key] = make_datasets(cfg)
        return self._data[key]

    def run(self, cfg: ExperimentConfig) -> RunRecord:
        fp = cfg.replace(name="").fingerprint()
        if fp not in self._runs:
            self._runs[fp] = train(cfg, self.data_for(cfg))
        return self._runs[fp]

    def __len__(self):
        return len(self._runs)


@dataclass
class ArmSummary:
    name: str
    seeds: list[int]
    accuracies: list[float]
    routing: list = field(default_factory=list)   # mean fractions, [layer][memory]
    imbalance: list = field(default_factory=list)  # per seed, worst layer

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))

    @property
    def median(self) -> float:
        return float(np.median(self.accuracies))

    def to_dict(self) -> dict:
        return dict(name=self.name, seeds=self.seeds, accuracies=self.accuracies,
                    mean=self.mean, std=self.std, median=self.median,
                    routing=self.routing, imbalance=self.imbalance)


@dataclass
class Comparison:
    arms: list[ArmSummary]
    records: dict[str, list[RunRecord]]

    def arm(self, name: str) -> ArmSummary:
        for a in self.arms:
            if a.name == name:
                return a
        raise KeyError(name)

    def table(self) -> str:
        width = max(len(a.name) for a in self.arms)
        lines = [f"{'arm':<{width}}  mean    std     median  seeds"]
        for a in self.arms:
            lines.append(f"{a.name:<{width}}  {a.mean:.4f}  {a.std:.4f}  {a.median:.4f}  {len(a.seeds)}")
        return "\n".join(lines)

    def write(self, out_dir) -> Path:
        """Per-run directories plus ``summary.json``, ``summary.csv`` and ``routing_heatmap.csv``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, recs in self.records.items():
            for seed, rec in zip(self.arm(name).seeds, recs):
                write_run(rec, out / name / f"seed{seed}")
        (out / "summary.json").write_text(
            json.dumps([a.to_dict() for a in self.arms], indent=1, sort_keys=True))
        with open(out / "summary.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["arm", "seed", "accuracy"])
            for a in self.arms:
                for s, acc in zip(a.seeds, a.accuracies):
                    w.writerow([a.name, s, repr(float(acc))])
        with open(out / "routing_heatmap.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["arm", "layer", "memory", "fraction"])
            for a in self.arms:
                for layer, row in enumerate(a.routing):
                    for m, frac in enumerate(row):
                        w.writerow([a.name, layer, m, repr(float(frac))])
        return out


def compare(arms: Sequence[ExperimentConfig], seeds: int | Iterable[int] = 3,
            cache: Optional[RunCache] = None, out_dir=None) -> Comparison:
    """Train every arm over the same seeds and data, summarizing accuracy and routing.

    Arms are keyed by ``cfg.name``, which must be unique.
    """
    seed_list = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    if len(seed_list) < 1:
        raise InvalidArgument("need at least one seed")
    names = [c.name for c in arms]
    if len(set(names)) != len(names):
        raise InvalidArgument(f"arm names must be unique, got {names}")
    cache = RunCache() if cache is None else cache
    summaries, records = [], {}
    for cfg in arms:
        recs = [cache.run(cfg.replace(seed=s)) for s in seed_list]
        routing = np.mean([r.routing_fractions for r in recs], axis=0).tolist()
        summaries.append(ArmSummary(
            cfg.name, seed_list, [r.final_accuracy for r in recs], routing,
            [max(routing_imbalance(r.routing_fractions)) for r in recs]))
        records[cfg.name] = recs
    result = Comparison(summaries, records)
    if out_dir is not None:
        result.write(out_dir)
    return result


def memory_sweep_configs(base: ExperimentConfig, counts=(1, 2, 4, 8), ratio: float = 0.5):
    """MoM arms with ``top_k = max(1, round(ratio * M))``; every other setting is shared."""
    if not 0 < ratio <= 1:
        raise InvalidArgument("ratio must lie in (0, 1]")
    return [base.replace(name=f"M{m}", model="mom", num_memories=m,
                         top_k=max(1, int(round(ratio * m))))
            for m in counts]


def aux_ablation_configs(base: ExperimentConfig, scales=(0.0, 1e-3)):
    return [base.replace(name=f"aux{s:g}", aux_scale=s) for s in scales]
