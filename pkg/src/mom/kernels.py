"""Memory update rules for matrix-valued recurrent states.

A memory state is a plain ``(d_k, d_v)`` array. Every rule maps the previous
state, a key row ``k``, a value row ``v`` and a set of gates to a new state.
Keys multiply from the left (``k^T v`` is the outer product ``k ⊗ v``) and
queries read with ``q @ M``.

The module exposes a validated single-step API (:func:`step`, :func:`read`,
:func:`scan`) and an unvalidated broadcasting core (:func:`apply_rule`) that
the layer, scheduler and training engine share.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidArgument

__all__ = [
    "RuleKind",
    "UpdateRuleSpec",
    "GateValues",
    "apply_rule",
    "step",
    "read",
    "scan",
    "DEFAULT_RETNET_GAMMA",
]

DEFAULT_RETNET_GAMMA = 0.9


class RuleKind(str, enum.Enum):
    LINEAR_ATTN = "LinearAttn"
    RETNET = "RetNet"
    GLA = "GLA"
    DELTANET = "DeltaNet"
    GATED_DELTANET = "GatedDeltaNet"
    TTT = "TTT"
    TITANS = "Titans"
    MAMBA2 = "Mamba2"
    HGRN2 = "HGRN2"
    RWKV6 = "RWKV6"
    RWKV7 = "RWKV7"

    @property
    def gate_a(self) -> Optional[str]:
        """``"scalar"``, ``"vector"`` or ``None`` for the decay gate."""
        return _GATE_A[self]

    @property
    def has_gate_b(self) -> bool:
        return self in _GATE_B

    @property
    def normalizes_key(self) -> bool:
        # Rules whose transition contains (I - k^T k); unit keys keep it a contraction.
        return self in _NORMALIZED_KEY


_GATE_A = {
    RuleKind.LINEAR_ATTN: None,
    RuleKind.RETNET: None,
    RuleKind.GLA: "vector",
    RuleKind.DELTANET: None,
    RuleKind.GATED_DELTANET: "scalar",
    RuleKind.TTT: None,
    RuleKind.TITANS: "scalar",
    RuleKind.MAMBA2: "scalar",
    RuleKind.HGRN2: "vector",
    RuleKind.RWKV6: "scalar",
    RuleKind.RWKV7: "vector",
}
_GATE_B = {
    RuleKind.DELTANET,
    RuleKind.GATED_DELTANET,
    RuleKind.TTT,
    RuleKind.TITANS,
    RuleKind.MAMBA2,
    RuleKind.RWKV7,
}
_NORMALIZED_KEY = {
    RuleKind.DELTANET,
    RuleKind.GATED_DELTANET,
    RuleKind.TTT,
    RuleKind.TITANS,
    RuleKind.RWKV7,
}


@dataclass(frozen=True)
class UpdateRuleSpec:
    """A rule kind plus its data-independent constant (RetNet's ``gamma``)."""

    kind: RuleKind
    gamma: Optional[float] = None

    def __post_init__(self):
        kind = RuleKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is RuleKind.RETNET:
            gamma = DEFAULT_RETNET_GAMMA if self.gamma is None else float(self.gamma)
            if not 0.0 < gamma <= 1.0:
                raise InvalidArgument(f"RetNet gamma must lie in (0, 1], got {gamma}")
            object.__setattr__(self, "gamma", gamma)
        elif self.gamma is not None:
            raise InvalidArgument(f"gamma is only meaningful for RetNet, not {kind.value}")

    @classmethod
    def of(cls, kind, gamma=None) -> "UpdateRuleSpec":
        return kind if isinstance(kind, cls) else cls(RuleKind(kind), gamma)


@dataclass(frozen=True)
class GateValues:
    a_scalar: Optional[float] = None
    a_vector: Optional[np.ndarray] = None
    b_scalar: Optional[float] = None

    def validate(self, kind: RuleKind, d_k: int) -> None:
        want_scalar = kind.gate_a == "scalar"
        want_vector = kind.gate_a == "vector"
        _check_presence("a_scalar", self.a_scalar, want_scalar, kind)
        _check_presence("a_vector", self.a_vector, want_vector, kind)
        _check_presence("b_scalar", self.b_scalar, kind.has_gate_b, kind)
        if want_vector and np.shape(self.a_vector) != (d_k,):
            raise InvalidArgument(
                f"a_vector must have shape ({d_k},), got {np.shape(self.a_vector)}"
            )
        for name in ("a_scalar", "a_vector", "b_scalar"):
            val = getattr(self, name)
            if val is None:
                continue
            val = np.asarray(val, dtype=float)
            if not np.all(np.isfinite(val)) or np.any(val < 0.0) or np.any(val > 1.0):
                raise InvalidArgument(f"gate {name} must lie in [0, 1]")


def _check_presence(name, value, wanted, kind):
    if wanted and value is None:
        raise InvalidArgument(f"{kind.value} requires gate {name}")
    if not wanted and value is not None:
        raise InvalidArgument(f"{kind.value} does not take gate {name}")


def vecmat(x, A):
    """Batched row-vector times matrix, ``x @ A`` over leading axes."""
    return (x[..., None, :] @ A)[..., 0, :]


def matvec(A, x):
    return (A @ x[..., :, None])[..., 0]


def _project_out(M, k):
    """``(I - k^T k) M`` for a batch of keys."""
    return M - k[..., :, None] * vecmat(k, M)[..., None, :]


def _regression_grad(M, k, v):
    """Gradient of ``0.5 * ||k M - v||^2`` with respect to ``M``."""
    resid = vecmat(k, M) - v
    return k[..., :, None] * resid[..., None, :]


def apply_rule(rule: UpdateRuleSpec, M, k, v, a=None, b=None):
    """Broadcasting transition without validation.

    ``M`` is ``(..., d_k, d_v)``, ``k`` is ``(..., d_k)``, ``v`` is ``(..., d_v)``.
    A scalar ``a`` or ``b`` is ``(...)``; a vector ``a`` is ``(..., d_k)``.
    """
    kind = rule.kind
    outer = k[..., :, None] * v[..., None, :]
    if kind is RuleKind.LINEAR_ATTN:
        return M + outer
    if kind is RuleKind.RETNET:
        return rule.gamma * M + outer
    if kind is RuleKind.GLA:
        return a[..., :, None] * M + outer
    if kind is RuleKind.DELTANET:
        return _project_out(M, k) + b[..., None, None] * outer
    if kind is RuleKind.GATED_DELTANET:
        return a[..., None, None] * _project_out(M, k) + b[..., None, None] * outer
    if kind is RuleKind.MAMBA2:
        return a[..., None, None] * M + b[..., None, None] * outer
    if kind is RuleKind.HGRN2:
        return a[..., :, None] * M + (1.0 - a)[..., :, None] * v[..., None, :]
    if kind is RuleKind.RWKV6:
        return a[..., None, None] * M + outer
    if kind is RuleKind.TTT:
        return M - b[..., None, None] * _regression_grad(M, k, v)
    if kind is RuleKind.TITANS:
        return a[..., None, None] * M - b[..., None, None] * _regression_grad(M, k, v)
    if kind is RuleKind.RWKV7:
        return a[..., :, None] * M - b[..., None, None] * _regression_grad(M, k, v)
    raise InvalidArgument(f"unknown rule kind {kind!r}")


def _gate_arrays(gates: GateValues, kind: RuleKind, dtype):
    if kind.gate_a == "scalar":
        a = np.asarray(gates.a_scalar, dtype=dtype)
    elif kind.gate_a == "vector":
        a = np.asarray(gates.a_vector, dtype=dtype)
    else:
        a = None
    b = np.asarray(gates.b_scalar, dtype=dtype) if kind.has_gate_b else None
    return a, b


def step(rule: UpdateRuleSpec, M: np.ndarray, k, v, gates: GateValues = GateValues()) -> np.ndarray:
    """One recurrent update. Returns a new array; ``M`` is left untouched."""
    rule = UpdateRuleSpec.of(rule)
    M = np.asarray(M)
    k = np.asarray(k, dtype=M.dtype)
    v = np.asarray(v, dtype=M.dtype)
    if M.ndim != 2 or k.shape != (M.shape[0],) or v.shape != (M.shape[1],):
        raise InvalidArgument(
            f"shape mismatch: M {M.shape}, k {k.shape}, v {v.shape}"
        )
    gates.validate(rule.kind, M.shape[0])
    a, b = _gate_arrays(gates, rule.kind, M.dtype)
    return apply_rule(rule, M, k, v, a, b)


def read(M: np.ndarray, q) -> np.ndarray:
    """Query readout ``q @ M``."""
    M = np.asarray(M)
    q = np.asarray(q, dtype=M.dtype)
    if M.ndim != 2 or q.shape != (M.shape[0],):
        raise InvalidArgument(f"shape mismatch: M {M.shape}, q {q.shape}")
    return q @ M


def scan(
    rule: UpdateRuleSpec,
    M0: np.ndarray,
    keys: np.ndarray,
    values: np.ndarray,
    gates: Sequence[GateValues],
) -> np.ndarray:
    """Apply :func:`step` over ``T`` tokens; returns the ``(T, d_k, d_v)`` state trajectory."""
    M0 = np.asarray(M0)
    keys = np.asarray(keys, dtype=M0.dtype)
    values = np.asarray(values, dtype=M0.dtype)
    T = keys.shape[0]
    if values.shape[0] != T or len(gates) != T:
        raise InvalidArgument(
            f"length mismatch: {T} keys, {values.shape[0]} values, {len(gates)} gates"
        )
    out = np.empty((T,) + M0.shape, dtype=M0.dtype)
    M = M0
    for t in range(T):
        M = step(rule, M, keys[t], values[t], gates[t])
        out[t] = M
    return out
