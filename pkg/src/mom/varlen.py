"""Varlen execution of a MoM layer.

Tokens are bucketed by ``(batch, memory)``, concatenated into one flat
sequence with cumulative boundaries, each bucket is scanned independently
with its memory's projections, and the per-memory readouts are scattered
back and recombined with the routing weights. The result matches
:func:`mom.layer.forward_sequence_naive` token for token.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidArgument
from .kernels import GateValues, scan
from .layer import MomLayerParams, normalize_key, output_head, sigmoid
from .router import RouterDecision, route

__all__ = [
    "VarlenPlan",
    "build_plan",
    "build_plan_from_arrays",
    "gather",
    "dispatch",
    "scatter_combine",
    "route_tokens",
    "forward_varlen",
]


@dataclass
class VarlenPlan:
    """Bucket layout for a ``(B, T)`` batch over ``S`` memory slots.

    Bucket ``p = b * S + s`` holds the time indices routed to slot ``s`` of
    batch element ``b`` in increasing order. ``boundaries[p]:boundaries[p+1]``
    is its segment in the flat sequence, and ``flat_to_src[u] = (b, t, s)``.
    ``weights[b, t, s]`` is the mixing weight; routed slots sum to one per
    token and the shared slot (``s = M`` when present) carries weight one.
    """

    index_sets: dict
    boundaries: np.ndarray
    flat_to_src: np.ndarray
    weights: np.ndarray
    num_memories: int
    shared: bool = False

    @property
    def batch_size(self) -> int:
        return self.weights.shape[0]

    @property
    def seq_len(self) -> int:
        return self.weights.shape[1]

    @property
    def num_slots(self) -> int:
        return self.weights.shape[2]

    @property
    def num_buckets(self) -> int:
        return len(self.boundaries) - 1

    def bucket(self, p: int) -> slice:
        return slice(int(self.boundaries[p]), int(self.boundaries[p + 1]))

    def bucket_key(self, p: int) -> tuple:
        return divmod(p, self.num_slots)

    def to_json(self) -> str:
        return json.dumps(
            {
                "boundaries": self.boundaries.tolist(),
                "flat_to_src": self.flat_to_src.tolist(),
                "weights": self.weights.ravel().tolist(),
                "shape": list(self.weights.shape),
                "num_memories": self.num_memories,
                "shared": self.shared,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "VarlenPlan":
        obj = json.loads(text)
        weights = np.asarray(obj["weights"], dtype=float).reshape(obj["shape"])
        flat = np.asarray(obj["flat_to_src"], dtype=np.int64).reshape(-1, 3)
        boundaries = np.asarray(obj["boundaries"], dtype=np.int64)
        S = weights.shape[2]
        index_sets = {
            divmod(p, S): flat[boundaries[p] : boundaries[p + 1], 1].copy()
            for p in range(len(boundaries) - 1)
        }
        return cls(index_sets, boundaries, flat, weights, obj["num_memories"], obj["shared"])


def build_plan_from_arrays(
    indices: np.ndarray, weights: np.ndarray, num_memories: int, shared: bool = False
) -> VarlenPlan:
    """Plan from ``(B, T, k)`` selected indices and their mixing weights."""
    indices = np.asarray(indices)
    if indices.ndim != 3 or np.shape(weights) != indices.shape:
        raise InvalidArgument("indices and weights must both be (B, T, k)")
    if indices.size and (indices.min() < 0 or indices.max() >= num_memories):
        raise InvalidArgument(f"memory index out of range [0, {num_memories})")
    B, T, _ = indices.shape
    S = num_memories + int(shared)
    alpha = np.zeros((B, T, S), dtype=np.result_type(weights, float))
    selected = np.zeros((B, T, S), dtype=bool)
    np.put_along_axis(alpha, indices, weights, axis=-1)
    np.put_along_axis(selected, indices, True, axis=-1)
    if shared:
        alpha[:, :, num_memories] = 1.0
        selected[:, :, num_memories] = True

    index_sets = {}
    lengths = np.empty(B * S, dtype=np.int64)
    sources = []
    for b in range(B):
        for s in range(S):
            ts = np.flatnonzero(selected[b, :, s])
            index_sets[(b, s)] = ts
            lengths[b * S + s] = len(ts)
            sources.append(np.stack([np.full_like(ts, b), ts, np.full_like(ts, s)], axis=1))
    boundaries = np.concatenate([[0], np.cumsum(lengths)])
    flat_to_src = np.concatenate(sources) if sources else np.zeros((0, 3), np.int64)
    return VarlenPlan(index_sets, boundaries, flat_to_src, alpha, num_memories, shared)


def build_plan(
    decisions: Sequence[Sequence[RouterDecision]], num_memories: int, shared: bool = False
) -> VarlenPlan:
    """Plan from a ``B x T`` nested sequence of router decisions."""
    indices = np.array([[d.indices for d in row] for row in decisions])
    weights = np.array([[d.weights for d in row] for row in decisions])
    return build_plan_from_arrays(indices, weights, num_memories, shared)


def gather(X: np.ndarray, plan: VarlenPlan) -> np.ndarray:
    """Flat varlen sequence: position ``u`` holds ``X[b, t]`` for ``flat_to_src[u]``."""
    X = np.asarray(X)
    if X.shape[:2] != (plan.batch_size, plan.seq_len):
        raise InvalidArgument(
            f"X has leading shape {X.shape[:2]}, plan expects {(plan.batch_size, plan.seq_len)}"
        )
    return X[plan.flat_to_src[:, 0], plan.flat_to_src[:, 1]]


def _run_bucket(params: MomLayerParams, Xs: np.ndarray, slot: int) -> np.ndarray:
    kind = params.rule.kind
    K = Xs @ params.W_k[slot]
    if kind.normalizes_key:
        K = normalize_key(K)
    V = Xs @ params.W_v[slot]
    Q = Xs @ params.W_q
    n = len(Xs)
    a = sigmoid(Xs @ params.W_a[slot] + params.b_a[slot]) if kind.gate_a else None
    b = sigmoid(Xs @ params.W_b[slot] + params.b_b[slot]) if kind.has_gate_b else None
    gates = []
    for i in range(n):
        g = {}
        if kind.gate_a == "scalar":
            g["a_scalar"] = a[i, 0]
        elif kind.gate_a == "vector":
            g["a_vector"] = a[i]
        if b is not None:
            g["b_scalar"] = b[i]
        gates.append(GateValues(**g))
    M0 = np.zeros((params.d_k, params.d_v), dtype=params.dtype)
    states = scan(params.rule, M0, K, V, gates)
    return np.einsum("ti,tij->tj", Q, states)


def dispatch(
    plan: VarlenPlan,
    X_flat: np.ndarray,
    params: MomLayerParams,
    bucket_order: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """Run every bucket from a zero state and read it out with the shared query map.

    Buckets are independent; ``bucket_order`` only changes the visiting
    order and never the result.
    """
    if plan.num_slots != params.num_slots or plan.num_memories != params.num_memories:
        raise InvalidArgument("plan and params disagree on the memory layout")
    if X_flat.shape[0] != plan.boundaries[-1]:
        raise InvalidArgument("flat input length does not match the plan")
    out = np.zeros((X_flat.shape[0], params.d_v), dtype=params.dtype)
    order = range(plan.num_buckets) if bucket_order is None else bucket_order
    for p in order:
        seg = plan.bucket(p)
        if seg.stop == seg.start:
            continue
        _, slot = plan.bucket_key(p)
        out[seg] = _run_bucket(params, X_flat[seg], slot)
    return out


def scatter_combine(O_flat: np.ndarray, plan: VarlenPlan) -> np.ndarray:
    """``y[b, t] = sum_s weights[b, t, s] * o[b, t, s]`` back in original order."""
    if O_flat.shape[0] != plan.flat_to_src.shape[0]:
        raise InvalidArgument("flat output length does not match the plan")
    b, t, s = plan.flat_to_src.T
    Y = np.zeros((plan.batch_size, plan.seq_len) + O_flat.shape[1:], dtype=O_flat.dtype)
    w = plan.weights[b, t, s].astype(O_flat.dtype)
    np.add.at(Y, (b, t), w.reshape((-1,) + (1,) * (O_flat.ndim - 1)) * O_flat)
    return Y


def route_tokens(params: MomLayerParams, X: np.ndarray) -> list:
    """Router decisions for every token of a ``(B, T, d)`` batch."""
    router = params.router
    return [[route(x, router) for x in row] for row in X]


def forward_varlen(params: MomLayerParams, X) -> np.ndarray:
    """Route, gather, dispatch, scatter, mix and apply the output head."""
    X = np.asarray(X)
    if X.ndim != 3 or X.shape[1] < 1:
        raise InvalidArgument(f"X must be (B, T>=1, d), got {X.shape}")
    plan = build_plan(route_tokens(params, X), params.num_memories, params.shared)
    O_flat = dispatch(plan, gather(X, plan), params)
    return output_head(scatter_combine(O_flat, plan), params)
