"""Randomized agreement checks between the varlen and token-by-token paths."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .kernels import RuleKind
from .layer import forward_sequence_naive, init_layer_params
from .varlen import forward_varlen

__all__ = ["EquivalenceCase", "EquivalenceReport", "random_case", "run_equivalence", "TOLERANCES"]

TOLERANCES = {"float64": 1e-10, "float32": 1e-4}

_RULES = [r.value for r in RuleKind]


@dataclass(frozen=True)
class EquivalenceCase:
    rule: str
    batch: int
    seq_len: int
    d: int
    num_memories: int
    top_k: int
    shared: bool
    seed: int


@dataclass
class EquivalenceReport:
    trials: int
    max_error: dict            # dtype -> worst |varlen - naive|
    failures: list             # [case dict, dtype, error]

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_json(self) -> str:
        return json.dumps(dict(trials=self.trials, max_error=self.max_error,
                               failures=self.failures, passed=self.passed), indent=1, sort_keys=True)


def random_case(rng: np.random.Generator, index: int = 0) -> EquivalenceCase:
    """Draw a layer configuration; rules cycle so every kind appears."""
    M = int(rng.integers(1, 9))
    return EquivalenceCase(
        rule=_RULES[index % len(_RULES)],
        batch=int(rng.integers(1, 5)),
        seq_len=int(rng.integers(1, 65)),
        d=int(rng.integers(2, 9)),
        num_memories=M,
        top_k=int(rng.integers(1, min(M, 4) + 1)),
        shared=bool(index // len(_RULES) % 2),
        seed=int(rng.integers(2**31)),
    )


def case_error(case: EquivalenceCase, dtype) -> float:
    rng = np.random.default_rng(case.seed)
    params = init_layer_params(case.d, case.num_memories, case.top_k, case.rule,
                               shared=case.shared, rng=rng, dtype=dtype)
    X = rng.normal(size=(case.batch, case.seq_len, case.d)).astype(dtype)
    naive = np.stack([forward_sequence_naive(params, x)[0] for x in X])
    return float(np.max(np.abs(forward_varlen(params, X) - naive)))


def run_equivalence(trials: int = 200, seed: int = 0,
                    dtypes=("float64", "float32")) -> EquivalenceReport:
    rng = np.random.default_rng(seed)
    worst = {dt: 0.0 for dt in dtypes}
    failures = []
    for i in range(trials):
        case = random_case(rng, i)
        for dt in dtypes:
            err = case_error(case, np.dtype(dt))
            worst[dt] = max(worst[dt], err)
            if not err < TOLERANCES[dt]:
                failures.append([asdict(case), dt, err])
    return EquivalenceReport(trials, worst, failures)
