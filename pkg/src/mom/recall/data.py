"""Multi-query associative recall sequences.

Token ``0`` is padding (it also stands in as the "previous token" of the
first position) and token ``1`` is the query marker. Keys are drawn from
``2..n_keys+1`` and values from the remaining ids, so a key can never be
mistaken for a value.

Each query is the key followed by the marker; the answer is expected at the
marker position. The key therefore sits one step back at both write time
(``k v``) and read time (``k ?``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InvalidArgument

__all__ = ["RecallTaskConfig", "RecallDataset", "gen_recall_dataset", "PAD", "QUERY"]

PAD = 0
QUERY = 1


@dataclass(frozen=True)
class RecallTaskConfig:
    vocab_size: int = 64
    num_pairs: int = 8
    num_queries: int = 8
    seq_len: int = 32
    seed: int = 0
    num_sequences: int = 16384

    def __post_init__(self):
        if self.num_pairs < 1 or self.num_queries < 1:
            raise InvalidArgument("num_pairs and num_queries must be positive")
        if self.seq_len < 2 * self.num_pairs + 2 * self.num_queries:
            raise InvalidArgument(
                f"seq_len {self.seq_len} cannot hold {self.num_pairs} pairs "
                f"and {self.num_queries} queries"
            )
        if self.num_pairs > self.num_keys:
            raise InvalidArgument(
                f"vocab_size {self.vocab_size} leaves only {self.num_keys} key ids "
                f"for {self.num_pairs} distinct keys"
            )
        if self.num_values < 1:
            raise InvalidArgument("vocab_size leaves no value ids")

    @property
    def num_keys(self) -> int:
        return (self.vocab_size - 2) // 2

    @property
    def num_values(self) -> int:
        return self.vocab_size - 2 - self.num_keys

    def key_ids(self) -> np.ndarray:
        return np.arange(2, 2 + self.num_keys)

    def value_ids(self) -> np.ndarray:
        return np.arange(2 + self.num_keys, self.vocab_size)


@dataclass
class RecallDataset:
    """``tokens`` and ``targets`` are ``(N, seq_len)``; targets are ``-1``
    except at query positions, where they hold the bound value."""

    tokens: np.ndarray
    targets: np.ndarray
    config: RecallTaskConfig

    def __len__(self):
        return len(self.tokens)

    @property
    def query_mask(self) -> np.ndarray:
        return self.targets >= 0

    def batch(self, idx) -> "RecallDataset":
        return RecallDataset(self.tokens[idx], self.targets[idx], self.config)

    def to_bytes(self) -> bytes:
        return self.tokens.tobytes() + self.targets.tobytes()


def gen_recall_dataset(cfg: RecallTaskConfig) -> RecallDataset:
    """Deterministic in ``cfg.seed``.

    Layout per sequence: ``k1 v1 k2 v2 ... kP vP``, padding, then
    ``q1 ? q2 ? ...`` filling the last ``2 * num_queries`` positions.
    """
    rng = np.random.default_rng(cfg.seed)
    N, P, Qn, T = cfg.num_sequences, cfg.num_pairs, cfg.num_queries, cfg.seq_len
    keys_pool, values_pool = cfg.key_ids(), cfg.value_ids()
    tokens = np.full((N, T), PAD, dtype=np.int64)
    targets = np.full((N, T), -1, dtype=np.int64)
    for n in range(N):
        keys = rng.choice(keys_pool, size=P, replace=False)
        values = rng.choice(values_pool, size=P, replace=True)
        tokens[n, 0 : 2 * P : 2] = keys
        tokens[n, 1 : 2 * P : 2] = values
        which = rng.choice(P, size=Qn, replace=Qn > P)
        tokens[n, T - 2 * Qn :: 2] = keys[which]
        tokens[n, T - 2 * Qn + 1 :: 2] = QUERY
        targets[n, T - 2 * Qn + 1 :: 2] = values[which]
    return RecallDataset(tokens, targets, cfg)
