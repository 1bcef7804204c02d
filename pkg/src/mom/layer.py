"""One Mixture-of-Memories token-mixing layer with a sequential reference path.

Parameters for the routed memories and the shared memory are stored stacked
along a leading "slot" axis: slots ``0..M-1`` are the routed memories and,
when ``shared`` is on, slot ``M`` is the always-active shared memory.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InvalidArgument
from .kernels import GateValues, UpdateRuleSpec, read, step
from .router import RouterDecision, RouterParams, route

__all__ = [
    "MomLayerParams",
    "MomState",
    "init_layer_params",
    "sigmoid",
    "normalize_key",
    "rms_normalize",
    "output_head",
    "slot_projections",
    "forward_step",
    "forward_sequence_naive",
    "KEY_NORM_EPS",
]

KEY_NORM_EPS = 1e-12

ARRAY_FIELDS = ("W_g", "W_q", "W_k", "W_v", "W_a", "b_a", "W_b", "b_b", "W_o")


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def normalize_key(k):
    return k / np.sqrt(np.sum(k * k, axis=-1, keepdims=True) + KEY_NORM_EPS)


def rms_normalize(o, eps):
    return o / np.sqrt(np.mean(o * o, axis=-1, keepdims=True) + eps)


@dataclass
class MomLayerParams:
    """Weights of one layer.

    Shapes (``S = M + shared``): ``W_g (d, M)``, ``W_q (d, d_k)``,
    ``W_k (S, d, d_k)``, ``W_v (S, d, d_v)``, ``W_a (S, d, d_a)`` with
    ``d_a = 1`` for scalar and ``d_k`` for vector decay gates, ``b_a (S, d_a)``,
    ``W_b (S, d)``, ``b_b (S,)``, ``W_o (d_v, d)``. Gate arrays are ``None``
    when the rule has no such gate.
    """

    rule: UpdateRuleSpec
    top_k: int
    shared: bool
    W_g: np.ndarray
    W_q: np.ndarray
    W_k: np.ndarray
    W_v: np.ndarray
    W_o: np.ndarray
    W_a: Optional[np.ndarray] = None
    b_a: Optional[np.ndarray] = None
    W_b: Optional[np.ndarray] = None
    b_b: Optional[np.ndarray] = None
    norm_eps: float = 1e-6

    def __post_init__(self):
        self.rule = UpdateRuleSpec.of(self.rule)
        d, M = self.W_g.shape
        S, d_k, d_v = self.num_slots, self.d_k, self.d_v
        if S != M + int(self.shared):
            raise InvalidArgument(
                f"expected {M + int(self.shared)} key/value slots, got {S}"
            )
        expect = {
            "W_q": (d, d_k),
            "W_k": (S, d, d_k),
            "W_v": (S, d, d_v),
            "W_o": (d_v, d),
        }
        kind = self.rule.kind
        if kind.gate_a is not None:
            d_a = 1 if kind.gate_a == "scalar" else d_k
            expect.update(W_a=(S, d, d_a), b_a=(S, d_a))
        if kind.has_gate_b:
            expect.update(W_b=(S, d), b_b=(S,))
        for name in ("W_a", "b_a", "W_b", "b_b"):
            if name not in expect and getattr(self, name) is not None:
                raise InvalidArgument(f"{kind.value} takes no {name}")
        for name, shape in expect.items():
            arr = getattr(self, name)
            if arr is None or arr.shape != shape:
                got = None if arr is None else arr.shape
                raise InvalidArgument(f"{name} must have shape {shape}, got {got}")
        if not 1 <= self.top_k <= M:
            raise InvalidArgument(f"top_k must be in [1, {M}], got {self.top_k}")
        if self.norm_eps <= 0:
            raise InvalidArgument("norm_eps must be positive")

    @property
    def d_model(self) -> int:
        return self.W_g.shape[0]

    @property
    def num_memories(self) -> int:
        return self.W_g.shape[1]

    @property
    def num_slots(self) -> int:
        return self.W_k.shape[0]

    @property
    def d_k(self) -> int:
        return self.W_k.shape[2]

    @property
    def d_v(self) -> int:
        return self.W_v.shape[2]

    @property
    def dtype(self):
        return self.W_q.dtype

    @property
    def router(self) -> RouterParams:
        return RouterParams(self.W_g, self.top_k)

    def arrays(self) -> dict:
        """Learnable arrays keyed by field name (gates omitted when unused)."""
        return {n: getattr(self, n) for n in ARRAY_FIELDS if getattr(self, n) is not None}

    def with_arrays(self, arrays: dict) -> "MomLayerParams":
        return dataclasses.replace(self, **arrays)

    def astype(self, dtype) -> "MomLayerParams":
        return self.with_arrays({n: a.astype(dtype) for n, a in self.arrays().items()})


def init_layer_params(
    d: int,
    num_memories: int,
    top_k: int,
    rule="GatedDeltaNet",
    *,
    d_k: Optional[int] = None,
    d_v: Optional[int] = None,
    shared: bool = True,
    gamma: Optional[float] = None,
    a_bias: float = 0.0,
    b_bias: float = 0.0,
    norm_eps: float = 1e-6,
    rng=None,
    dtype=np.float64,
) -> MomLayerParams:
    """Fan-in scaled uniform initialisation; gate biases are constants."""
    rng = np.random.default_rng(rng)
    rule = UpdateRuleSpec.of(rule, gamma)
    d_k = d if d_k is None else d_k
    d_v = d if d_v is None else d_v
    S = num_memories + int(shared)

    def uni(fan_in, *shape):
        lim = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-lim, lim, size=shape).astype(dtype)

    W_g = uni(d, d, num_memories)
    W_q = uni(d, d, d_k)
    W_k = uni(d, S, d, d_k)
    W_v = uni(d, S, d, d_v)
    W_o = uni(d_v, d_v, d)
    gates = {}
    if rule.kind.gate_a is not None:
        d_a = 1 if rule.kind.gate_a == "scalar" else d_k
        gates["W_a"] = uni(d, S, d, d_a)
        gates["b_a"] = np.full((S, d_a), a_bias, dtype=dtype)
    if rule.kind.has_gate_b:
        gates["W_b"] = uni(d, S, d)
        gates["b_b"] = np.full((S,), b_bias, dtype=dtype)
    return MomLayerParams(
        rule=rule, top_k=top_k, shared=shared, W_g=W_g, W_q=W_q, W_k=W_k,
        W_v=W_v, W_o=W_o, norm_eps=norm_eps, **gates,
    )


@dataclass
class MomState:
    memories: np.ndarray
    shared: Optional[np.ndarray] = None

    @classmethod
    def zeros(cls, params: MomLayerParams) -> "MomState":
        shape = (params.d_k, params.d_v)
        mem = np.zeros((params.num_memories,) + shape, dtype=params.dtype)
        shared = np.zeros(shape, dtype=params.dtype) if params.shared else None
        return cls(mem, shared)


def slot_projections(params: MomLayerParams, x: np.ndarray, slot: int):
    """Key, value and gates of one slot for a single token ``x``."""
    k = x @ params.W_k[slot]
    if params.rule.kind.normalizes_key:
        k = normalize_key(k)
    v = x @ params.W_v[slot]
    kind = params.rule.kind
    gates = {}
    if kind.gate_a is not None:
        a = sigmoid(x @ params.W_a[slot] + params.b_a[slot])
        if kind.gate_a == "scalar":
            gates["a_scalar"] = a[0]
        else:
            gates["a_vector"] = a
    if kind.has_gate_b:
        gates["b_scalar"] = sigmoid(x @ params.W_b[slot] + params.b_b[slot])
    return k, v, GateValues(**gates)


def output_head(o: np.ndarray, params: MomLayerParams) -> np.ndarray:
    """RMS-normalise the readout and project back to the model width."""
    o = np.asarray(o)
    if o.shape[-1] != params.d_v:
        raise InvalidArgument(f"readout must have last dim {params.d_v}, got {o.shape}")
    return rms_normalize(o, params.norm_eps) @ params.W_o


def _check_state(params: MomLayerParams, state: MomState):
    shape = (params.num_memories, params.d_k, params.d_v)
    if state.memories.shape != shape:
        raise InvalidArgument(f"memories must have shape {shape}, got {state.memories.shape}")
    if params.shared != (state.shared is not None):
        raise InvalidArgument("shared memory presence differs between params and state")
    if state.shared is not None and state.shared.shape != shape[1:]:
        raise InvalidArgument(f"shared memory must have shape {shape[1:]}")


def _token_update(params: MomLayerParams, state: MomState, x: np.ndarray):
    _check_state(params, state)
    if x.shape != (params.d_model,):
        raise InvalidArgument(f"x must have shape ({params.d_model},), got {x.shape}")
    decision = route(x, params.router)
    memories = state.memories.copy()
    for m in decision.indices:
        k, v, gates = slot_projections(params, x, m)
        memories[m] = step(params.rule, state.memories[m], k, v, gates)
    shared = None
    mixed = np.zeros((params.d_k, params.d_v), dtype=params.dtype)
    if params.shared:
        k, v, gates = slot_projections(params, x, params.num_memories)
        shared = step(params.rule, state.shared, k, v, gates)
        mixed = mixed + shared
    for m, g in zip(decision.indices, decision.weights):
        mixed = mixed + g * memories[m]
    o = read(mixed, x @ params.W_q)
    return o, MomState(memories, shared), decision


def forward_step(params: MomLayerParams, state: MomState, x) -> tuple:
    """Advance one token. Returns ``(y, new_state)``; ``state`` is not modified."""
    o, new_state, _ = _token_update(params, state, np.asarray(x))
    return output_head(o, params), new_state


def forward_sequence_naive(params: MomLayerParams, X, state: Optional[MomState] = None):
    """Token-by-token reference forward over ``X`` of shape ``(T, d)``.

    Returns ``(Y, decisions)`` where ``decisions`` holds one
    :class:`RouterDecision` per token.
    """
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[0] < 1:
        raise InvalidArgument(f"X must be (T>=1, d), got {X.shape}")
    state = MomState.zeros(params) if state is None else state
    outs = []
    decisions: list[RouterDecision] = []
    for x in X:
        o, state, decision = _token_update(params, state, x)
        outs.append(o)
        decisions.append(decision)
    return output_head(np.stack(outs), params), decisions
