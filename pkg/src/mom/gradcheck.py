"""Independent checks for the recurrent kernels and the analytic backward pass."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .backward import layer_forward, layer_backward
from .errors import InconsistentFunction, InvalidArgument
from .layer import MomLayerParams

__all__ = [
    "parallel_form_oracle",
    "finite_diff_grad",
    "routing_margin",
    "GradReport",
    "compare_gradients",
    "check_layer_gradients",
    "GRAD_FLOOR",
]

GRAD_FLOOR = 1e-8


def parallel_form_oracle(Q, K, V) -> np.ndarray:
    """Causal linear attention in quadratic form: ``o_t = sum_{i<=t} (q_t . k_i) v_i``."""
    Q, K, V = (np.asarray(a) for a in (Q, K, V))
    if Q.ndim != 2 or Q.shape != K.shape or V.ndim != 2 or V.shape[0] != Q.shape[0]:
        raise InvalidArgument(f"shape mismatch: Q {Q.shape}, K {K.shape}, V {V.shape}")
    if Q.shape[0] < 1:
        raise InvalidArgument("need at least one token")
    scores = np.tril(Q @ K.T)
    return scores @ V


def finite_diff_grad(loss_fn: Callable[[dict], float], params: dict, epsilon: float = 1e-5) -> dict:
    """Central differences of ``loss_fn`` with respect to every scalar in ``params``.

    ``params`` maps names to arrays and is not modified.
    """
    if epsilon <= 0:
        raise InvalidArgument("epsilon must be positive")
    base = {n: np.array(a, dtype=float, copy=True) for n, a in params.items()}
    f0 = loss_fn(base)
    if loss_fn(base) != f0:
        raise InconsistentFunction("loss function returned different values for the same input")
    grads = {}
    for name, arr in base.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = loss_fn(base)
            flat[i] = orig - epsilon
            f_minus = loss_fn(base)
            flat[i] = orig
            g.reshape(-1)[i] = (f_plus - f_minus) / (2.0 * epsilon)
        grads[name] = g
    return grads


def routing_margin(probs: np.ndarray, top_k: int) -> float:
    """Smallest gap between the k-th and (k+1)-th router probability over all tokens."""
    M = probs.shape[-1]
    if top_k >= M:
        return np.inf
    srt = -np.sort(-probs, axis=-1)
    return float(np.min(srt[..., top_k - 1] - srt[..., top_k]))


@dataclass
class GradReport:
    max_rel_error: dict
    max_abs_error: dict
    passed: bool
    fingerprint: str
    tolerance: float = 1e-6
    skipped: list = field(default_factory=list)

    @property
    def worst_rel_error(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def compare_gradients(analytic: dict, numeric: dict, tol: float = 1e-6, floor: float = GRAD_FLOOR,
                      fingerprint: str = "") -> GradReport:
    """Per-tensor relative error ``max|ga - gn| / max(max|ga|, max|gn|)``.

    Tensors whose gradient magnitude never exceeds ``floor`` are reported
    as skipped instead of failing on a meaningless ratio.
    """
    rel, ab, skipped = {}, {}, []
    for name, ga in analytic.items():
        gn = numeric[name]
        diff = float(np.max(np.abs(ga - gn))) if ga.size else 0.0
        scale = max(float(np.max(np.abs(ga), initial=0.0)), float(np.max(np.abs(gn), initial=0.0)))
        ab[name] = diff
        if scale <= floor:
            skipped.append(name)
            rel[name] = 0.0
        else:
            rel[name] = diff / scale
    passed = all(r < tol for r in rel.values())
    return GradReport(rel, ab, passed, fingerprint, tol, skipped)


def _fingerprint(params: MomLayerParams, X) -> str:
    desc = {
        "rule": params.rule.kind.value,
        "gamma": params.rule.gamma,
        "d": params.d_model,
        "d_k": params.d_k,
        "d_v": params.d_v,
        "M": params.num_memories,
        "top_k": params.top_k,
        "shared": params.shared,
        "shape": list(np.shape(X)),
    }
    return hashlib.sha256(json.dumps(desc, sort_keys=True).encode()).hexdigest()[:16]


def check_layer_gradients(
    params: MomLayerParams, X, upstream, epsilon: float = 1e-5, tol: float = 1e-6,
    min_margin: float = 1e-4,
) -> GradReport:
    """Analytic layer gradients against central differences with routing frozen.

    Raises :class:`InvalidArgument` when a token sits within ``min_margin``
    of a routing tie, since perturbations could then flip the selection.
    """
    params = params.astype(np.float64)
    X = np.asarray(X, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    _, cache = layer_forward(params, X)
    if routing_margin(cache.probs, params.top_k) < min_margin:
        raise InvalidArgument("test point is too close to a routing tie")
    grads, dX = layer_backward(params, cache, upstream)
    frozen = cache.indices
    analytic = dict(grads, X=dX)

    def loss(arrs):
        arrs = dict(arrs)
        x = arrs.pop("X")
        Y, _ = layer_forward(params.with_arrays(arrs), x, frozen)
        return float(np.sum(upstream * Y))

    numeric = finite_diff_grad(loss, dict(params.arrays(), X=X), epsilon)
    return compare_gradients(analytic, numeric, tol, fingerprint=_fingerprint(params, X))
