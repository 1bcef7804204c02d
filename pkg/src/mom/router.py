"""Top-k token-to-memory routing and the Switch-style load-balance loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidArgument

__all__ = [
    "RouterParams",
    "RouterDecision",
    "softmax",
    "top_k_select",
    "route",
    "route_batch",
    "LoadBalanceStats",
    "aux_load_balance_loss",
    "aux_loss_and_grad",
    "DEFAULT_AUX_SCALE",
]

DEFAULT_AUX_SCALE = 1e-3


@dataclass
class RouterParams:
    W_g: np.ndarray
    top_k: int

    def __post_init__(self):
        if self.W_g.ndim != 2:
            raise InvalidArgument(f"W_g must be (d, M), got shape {self.W_g.shape}")
        if not 1 <= self.top_k <= self.num_memories:
            raise InvalidArgument(
                f"top_k must be in [1, {self.num_memories}], got {self.top_k}"
            )

    @property
    def num_memories(self) -> int:
        return self.W_g.shape[1]


@dataclass(frozen=True)
class RouterDecision:
    """Selected memories (ascending), their renormalised weights, and the full softmax."""

    indices: tuple
    weights: np.ndarray
    full_probs: np.ndarray

    @property
    def dense_weights(self) -> np.ndarray:
        out = np.zeros_like(self.full_probs)
        out[list(self.indices)] = self.weights
        return out


def softmax(z, axis=-1):
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def top_k_select(probs: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries along the last axis, ascending.

    Ties go to the lowest index (stable sort on the negated values).
    """
    order = np.argsort(-probs, axis=-1, kind="stable")[..., :k]
    return np.sort(order, axis=-1)


def route_batch(X: np.ndarray, W_g: np.ndarray, top_k: int, indices=None):
    """Vectorised routing for ``X`` of shape ``(..., d)``.

    Returns ``(indices, weights, probs)`` with shapes ``(..., k)``, ``(..., k)``
    and ``(..., M)``. Passing ``indices`` pins the selection (used when routing
    must stay frozen, e.g. under finite differencing).
    """
    probs = softmax(X @ W_g)
    if indices is None:
        indices = top_k_select(probs, top_k)
    picked = np.take_along_axis(probs, indices, axis=-1)
    weights = picked / picked.sum(axis=-1, keepdims=True)
    return indices, weights, probs


def route(x, params: RouterParams) -> RouterDecision:
    x = np.asarray(x)
    if x.shape != (params.W_g.shape[0],):
        raise InvalidArgument(f"x must have shape ({params.W_g.shape[0]},), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidArgument("router input contains non-finite values")
    idx, w, probs = route_batch(x, params.W_g, params.top_k)
    return RouterDecision(tuple(int(i) for i in idx), w, probs)


@dataclass
class LoadBalanceStats:
    """Additive sufficient statistics of the load-balance loss.

    Shards of a batch can be reduced independently and summed with ``+``.
    """

    selection_counts: np.ndarray
    prob_sums: np.ndarray
    num_tokens: int
    top_k: int

    @classmethod
    def from_arrays(cls, indices: np.ndarray, probs: np.ndarray) -> "LoadBalanceStats":
        M = probs.shape[-1]
        idx = indices.reshape(-1, indices.shape[-1])
        counts = np.bincount(idx.ravel(), minlength=M).astype(float)
        return cls(counts, probs.reshape(-1, M).sum(axis=0), idx.shape[0], idx.shape[1])

    @classmethod
    def from_decisions(cls, decisions: Sequence[RouterDecision], num_memories: int):
        if len(decisions) == 0:
            raise InvalidArgument("load-balance loss needs at least one decision")
        idx = np.array([d.indices for d in decisions])
        probs = np.array([d.full_probs for d in decisions])
        if probs.shape[1] != num_memories or idx.max() >= num_memories:
            raise InvalidArgument("decisions do not match num_memories")
        return cls.from_arrays(idx, probs)

    def __add__(self, other: "LoadBalanceStats") -> "LoadBalanceStats":
        if self.top_k != other.top_k:
            raise InvalidArgument("cannot combine stats with different top_k")
        return LoadBalanceStats(
            self.selection_counts + other.selection_counts,
            self.prob_sums + other.prob_sums,
            self.num_tokens + other.num_tokens,
            self.top_k,
        )

    @property
    def fractions(self) -> np.ndarray:
        """Routing fractions ``f_m``; they sum to one for any ``top_k``."""
        return self.selection_counts / (self.num_tokens * self.top_k)

    @property
    def mean_probs(self) -> np.ndarray:
        return self.prob_sums / self.num_tokens

    def loss(self, scale: float) -> float:
        M = len(self.selection_counts)
        return float(scale * M * np.dot(self.fractions, self.mean_probs))


def aux_load_balance_loss(
    decisions: Sequence[RouterDecision], num_memories: int, scale: float = DEFAULT_AUX_SCALE
) -> float:
    """``scale * M * sum_m f_m * P_m`` over a batch of routing decisions."""
    return LoadBalanceStats.from_decisions(decisions, num_memories).loss(scale)


def aux_loss_and_grad(indices: np.ndarray, probs: np.ndarray, scale: float):
    """Loss and its gradient with respect to ``probs`` (``f`` is held constant)."""
    stats = LoadBalanceStats.from_arrays(indices, probs)
    M = probs.shape[-1]
    grad = np.broadcast_to(scale * M * stats.fractions / stats.num_tokens, probs.shape)
    return stats.loss(scale), np.array(grad)
