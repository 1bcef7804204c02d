"""Batched MoM layer forward with recorded activations, and its reverse pass.

The forward here processes a whole ``(B, T, d)`` batch with one loop over
time. All slots advance together and unselected slots are restored with a
mask, which gives the same states as the sequential reference path. The
reverse pass is written out by hand for the rules in
:data:`DIFFERENTIABLE_RULES`. Routing selections are piecewise constant and
are treated as fixed. Gradients reach the router through the renormalised
weights of the selected memories.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _fused
from .errors import InvalidArgument, UnsupportedOperation
from .kernels import RuleKind, apply_rule, matvec, vecmat
from .layer import KEY_NORM_EPS, MomLayerParams, sigmoid
from .router import route_batch

__all__ = [
    "DIFFERENTIABLE_RULES",
    "USE_FUSED",
    "LayerCache",
    "layer_forward",
    "layer_backward",
    "backward",
]

DIFFERENTIABLE_RULES = frozenset(
    {
        RuleKind.LINEAR_ATTN,
        RuleKind.RETNET,
        RuleKind.GLA,
        RuleKind.MAMBA2,
        RuleKind.GATED_DELTANET,
    }
)

# Compiled recurrences for the differentiable rules; flip off to force the numpy loop.
USE_FUSED = _fused.AVAILABLE


@dataclass
class LayerCache:
    X: np.ndarray
    indices: np.ndarray
    weights: np.ndarray
    probs: np.ndarray
    alpha: np.ndarray       # (B, T, S)
    selected: np.ndarray    # (B, T, S) bool
    K_raw: np.ndarray       # (B, T, S, d_k)
    K: np.ndarray
    V: np.ndarray           # (B, T, S, d_v)
    Q: np.ndarray           # (B, T, d_k)
    A: Optional[np.ndarray]  # (B, T, S, d_a)
    Bg: Optional[np.ndarray]  # (B, T, S)
    prev_states: Optional[np.ndarray]  # (T, B, S, d_k, d_v) before step t; numpy path only
    states: np.ndarray       # (T, B, S, d_k, d_v), state after step t
    R: np.ndarray           # (B, T, S, d_v), per-slot readouts
    O: np.ndarray           # (B, T, d_v), mixed readout
    rms: np.ndarray         # (B, T, 1)
    N: np.ndarray           # (B, T, d_v), normalised readout
    fused: Optional[tuple] = None  # (D, W, delta) when the compiled scan ran


def _flat(a):
    return a.reshape(-1, a.shape[-1])


def _slot_proj(X, W):
    """``X (B, T, d)`` through per-slot maps ``W (S, d, e)`` -> ``(B, T, S, e)``."""
    S, d, e = W.shape
    return (X @ W.transpose(1, 0, 2).reshape(d, S * e)).reshape(X.shape[:-1] + (S, e))


def _slot_proj_back(X, dOut, W):
    S, d, e = W.shape
    flat = dOut.reshape(-1, S * e)
    dW = (_flat(X).T @ flat).reshape(d, S, e).transpose(1, 0, 2)
    dX = (flat @ W.transpose(1, 0, 2).reshape(d, S * e).T).reshape(X.shape)
    return dW, dX


def _gate_a(A, kind):
    if A is None:
        return None
    return A[..., 0] if kind.gate_a == "scalar" else A


def _fused_operands(params: MomLayerParams, K, A, Bg):
    """Decay rows, write strengths and delta flag of the shared transition form."""
    kind = params.rule.kind
    shape = K.shape
    if kind is RuleKind.LINEAR_ATTN:
        D = np.ones(shape, dtype=K.dtype)
    elif kind is RuleKind.RETNET:
        D = np.full(shape, params.rule.gamma, dtype=K.dtype)
    elif kind is RuleKind.GLA:
        D = np.ascontiguousarray(A)
    else:
        D = np.ascontiguousarray(np.broadcast_to(A[..., :1], shape))
    W = np.ones(shape[:-1], dtype=K.dtype) if Bg is None else np.ascontiguousarray(Bg)
    return D, W, kind is RuleKind.GATED_DELTANET


def layer_forward(params: MomLayerParams, X, indices=None):
    """Forward over ``X`` of shape ``(B, T, d)``. Returns ``(Y, cache)``.

    ``indices`` of shape ``(B, T, top_k)`` pins the routing selection.
    """
    X = np.asarray(X, dtype=params.dtype)
    if X.ndim != 3 or X.shape[2] != params.d_model:
        raise InvalidArgument(f"X must be (B, T, {params.d_model}), got {X.shape}")
    B, T, _ = X.shape
    M, S = params.num_memories, params.num_slots
    kind = params.rule.kind

    indices, weights, probs = route_batch(X, params.W_g, params.top_k, indices)
    alpha = np.zeros((B, T, S), dtype=X.dtype)
    np.put_along_axis(alpha[..., :M], indices, weights, axis=-1)
    selected = np.zeros((B, T, S), dtype=bool)
    np.put_along_axis(selected[..., :M], indices, True, axis=-1)
    if params.shared:
        alpha[..., M] = 1.0
        selected[..., M] = True

    K_raw = _slot_proj(X, params.W_k)
    if kind.normalizes_key:
        K = K_raw / np.sqrt(np.sum(K_raw * K_raw, axis=-1, keepdims=True) + KEY_NORM_EPS)
    else:
        K = K_raw
    V = _slot_proj(X, params.W_v)
    Q = X @ params.W_q
    A = Bg = None
    if kind.gate_a is not None:
        A = sigmoid(_slot_proj(X, params.W_a) + params.b_a)
    if kind.has_gate_b:
        Bg = sigmoid(X @ params.W_b.T + params.b_b)
    a_all = _gate_a(A, kind)

    fused = None
    if USE_FUSED and kind in DIFFERENTIABLE_RULES:
        fused = _fused_operands(params, K, A, Bg)
        D, W, delta = fused
        states, R = _fused.scan_forward(np.ascontiguousarray(K), V, D, W, selected, delta, Q)
        prev_states = None
    else:
        prev_states = np.empty((T, B, S, params.d_k, params.d_v), dtype=X.dtype)
        states = np.empty_like(prev_states)
        Mst = np.zeros((B, S, params.d_k, params.d_v), dtype=X.dtype)
        for t in range(T):
            prev_states[t] = Mst
            a_t = None if a_all is None else a_all[:, t]
            b_t = None if Bg is None else Bg[:, t]
            new = apply_rule(params.rule, Mst, K[:, t], V[:, t], a_t, b_t)
            Mst = np.where(selected[:, t, :, None, None], new, Mst)
            states[t] = Mst
        R = vecmat(Q.transpose(1, 0, 2)[:, :, None, :], states).transpose(1, 0, 2, 3)

    O = vecmat(alpha, R)
    rms = np.sqrt(np.mean(O * O, axis=-1, keepdims=True) + params.norm_eps)
    N = O / rms
    Y = N @ params.W_o
    cache = LayerCache(
        X, indices, weights, probs, alpha, selected, K_raw, K, V, Q, A, Bg,
        prev_states, states, R, O, rms, N, fused,
    )
    return Y, cache


def _step_backward(rule, G, Mp, k, v, a, b):
    """Reverse one transition. Returns ``(dM_prev, dk, dv, da, db)``.

    Shapes carry leading ``(B, S)`` axes; ``a`` is scalar ``(B, S)`` or
    vector ``(B, S, d_k)``.
    """
    kind = rule.kind
    w = b if kind in (RuleKind.MAMBA2, RuleKind.GATED_DELTANET) else None
    Gv = matvec(G, v)
    kG = vecmat(k, G)
    if w is None:
        dk, dv, db = Gv, kG, None
    else:
        dk = w[..., None] * Gv
        dv = w[..., None] * kG
        db = np.sum(Gv * k, axis=-1)
    da = None
    if kind is RuleKind.LINEAR_ATTN:
        dM = G
    elif kind is RuleKind.RETNET:
        dM = rule.gamma * G
    elif kind is RuleKind.GLA:
        dM = a[..., :, None] * G
        da = np.sum(G * Mp, axis=-1)
    elif kind is RuleKind.MAMBA2:
        dM = a[..., None, None] * G
        da = np.sum(G * Mp, axis=(-2, -1))
    elif kind is RuleKind.GATED_DELTANET:
        u = vecmat(k, Mp)
        P = Mp - k[..., :, None] * u[..., None, :]
        da = np.sum(G * P, axis=(-2, -1))
        dP = a[..., None, None] * G
        du = -vecmat(k, dP)
        dM = dP + k[..., :, None] * du[..., None, :]
        dk = dk - matvec(dP, u) + matvec(Mp, du)
    else:
        raise UnsupportedOperation(f"no analytic backward for {kind.value}")
    return dM, dk, dv, da, db


def _reverse_loop(params: MomLayerParams, c: LayerCache, dR):
    T = c.X.shape[1]
    a_all = _gate_a(c.A, params.rule.kind)
    dK = np.zeros_like(c.K)
    dV = np.zeros_like(c.V)
    da_all = None if a_all is None else np.zeros_like(a_all)
    db_all = None if c.Bg is None else np.zeros_like(c.Bg)
    G = np.zeros_like(c.states[0])
    for t in range(T - 1, -1, -1):
        G = G + c.Q[:, t, None, :, None] * dR[:, t, :, None, :]
        a_t = None if a_all is None else a_all[:, t]
        b_t = None if c.Bg is None else c.Bg[:, t]
        dMp, dk, dv, da, db = _step_backward(
            params.rule, G, c.prev_states[t], c.K[:, t], c.V[:, t], a_t, b_t
        )
        sel = c.selected[:, t]
        dK[:, t] = np.where(sel[..., None], dk, 0.0)
        dV[:, t] = np.where(sel[..., None], dv, 0.0)
        if da is not None:
            da_all[:, t] = np.where(sel[..., None] if da.ndim == 3 else sel, da, 0.0)
        if db is not None:
            db_all[:, t] = np.where(sel, db, 0.0)
        G = np.where(sel[..., None, None], dMp, G)
    return dK, dV, da_all, db_all


def layer_backward(params: MomLayerParams, cache: LayerCache, dY, d_probs=None):
    """Reverse pass. Returns ``(grads, dX)`` with ``grads`` keyed like
    :meth:`MomLayerParams.arrays`.

    ``d_probs`` is an optional extra gradient on the full router softmax,
    e.g. from the load-balance loss.
    """
    kind = params.rule.kind
    if kind not in DIFFERENTIABLE_RULES:
        raise UnsupportedOperation(f"no analytic backward for {kind.value}")
    c = cache
    dY = np.asarray(dY, dtype=params.dtype)
    B, T, _ = c.X.shape
    M = params.num_memories

    # output head
    dW_o = _flat(c.N).T @ _flat(dY)
    dN = dY @ params.W_o.T
    dO = (dN - c.N * np.mean(dN * c.N, axis=-1, keepdims=True)) / c.rms

    # mixing and readout
    dalpha = matvec(c.R, dO)
    dR = c.alpha[..., None] * dO[:, :, None, :]

    # recurrence
    if c.fused is not None:
        D, W, delta = c.fused
        dQ, dK, dV, dD, dW = _fused.scan_backward(
            np.ascontiguousarray(c.K), c.V, D, W, c.selected, delta, c.states,
            np.ascontiguousarray(c.Q), np.ascontiguousarray(dR),
        )
        da_all = None if kind.gate_a is None else (dD.sum(axis=-1) if kind.gate_a == "scalar" else dD)
        db_all = None if c.Bg is None else dW
    else:
        dQ = matvec(c.states, dR.transpose(1, 0, 2, 3)).sum(axis=2).transpose(1, 0, 2)
        dK, dV, da_all, db_all = _reverse_loop(params, c, dR)

    grads = {}
    X = c.X
    if kind.normalizes_key:
        nrm = np.sqrt(np.sum(c.K_raw * c.K_raw, axis=-1, keepdims=True) + KEY_NORM_EPS)
        dK_raw = dK / nrm - c.K_raw * np.sum(c.K_raw * dK, axis=-1, keepdims=True) / nrm**3
    else:
        dK_raw = dK
    grads["W_k"], dX = _slot_proj_back(X, dK_raw, params.W_k)
    grads["W_v"], dXv = _slot_proj_back(X, dV, params.W_v)
    grads["W_q"] = _flat(X).T @ _flat(dQ)
    dX += dXv + dQ @ params.W_q.T
    if c.A is not None:
        dA = da_all[..., None] if kind.gate_a == "scalar" else da_all
        dzA = dA * c.A * (1.0 - c.A)
        grads["W_a"], dXa = _slot_proj_back(X, dzA, params.W_a)
        grads["b_a"] = dzA.sum(axis=(0, 1))
        dX += dXa
    if c.Bg is not None:
        dzB = db_all * c.Bg * (1.0 - c.Bg)
        grads["W_b"] = _flat(dzB).T @ _flat(X)
        grads["b_b"] = dzB.sum(axis=(0, 1))
        dX += dzB @ params.W_b

    # router: renormalised top-k weights, then softmax
    dg = np.take_along_axis(dalpha[..., :M], c.indices, axis=-1)
    picked = np.take_along_axis(c.probs, c.indices, axis=-1)
    total = picked.sum(axis=-1, keepdims=True)
    dpicked = (dg - np.sum(dg * c.weights, axis=-1, keepdims=True)) / total
    dprobs = np.zeros_like(c.probs)
    np.put_along_axis(dprobs, c.indices, dpicked, axis=-1)
    if d_probs is not None:
        dprobs = dprobs + d_probs
    dlogits = c.probs * (dprobs - np.sum(c.probs * dprobs, axis=-1, keepdims=True))
    grads["W_g"] = _flat(X).T @ _flat(dlogits)
    dX += dlogits @ params.W_g.T
    grads["W_o"] = dW_o
    return {n: grads[n] for n in params.arrays()}, dX


def backward(params: MomLayerParams, X, upstream, indices=None):
    """Gradients of ``sum(upstream * Y)`` for ``Y = layer(X)``.

    Accepts ``X`` as ``(T, d)`` or ``(B, T, d)``; ``dX`` comes back in the
    same layout.
    """
    if params.rule.kind not in DIFFERENTIABLE_RULES:
        raise UnsupportedOperation(f"no analytic backward for {params.rule.kind.value}")
    X = np.asarray(X)
    squeeze = X.ndim == 2
    if squeeze:
        X, upstream = X[None], np.asarray(upstream)[None]
        if indices is not None:
            indices = np.asarray(indices)[None]
    _, cache = layer_forward(params, X, indices)
    grads, dX = layer_backward(params, cache, upstream)
    return grads, (dX[0] if squeeze else dX)
