"""Compiled recurrences for the trainable rules.

Every rule with a hand-written reverse pass fits one transition,

    M' = diag(d) (M - delta * k (k M)) + w * k v^T

with a per-row decay ``d``, a flag ``delta`` for the delta-rule projection
and a scalar write strength ``w``. The kernels below run that transition
for every ``(batch, slot)`` pair and skip unselected slots entirely, so their
states are carried over untouched. The numpy loop in :mod:`mom.backward`
is the reference; these are only used when numba is importable.
"""
from __future__ import annotations

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None

__all__ = ["AVAILABLE", "scan_forward", "scan_backward"]

AVAILABLE = numba is not None


def _scan_forward(K, V, D, W, sel, delta, Q, states, R):
    T, B, S, dk, dv = states.shape
    u = np.empty(dv, dtype=states.dtype)
    for b in range(B):
        for s in range(S):
            M = np.zeros((dk, dv), dtype=states.dtype)
            for t in range(T):
                if sel[b, t, s]:
                    k = K[b, t, s]
                    v = V[b, t, s]
                    w = W[b, t, s]
                    if delta:
                        for j in range(dv):
                            acc = 0.0
                            for i in range(dk):
                                acc += k[i] * M[i, j]
                            u[j] = acc
                    for i in range(dk):
                        di = D[b, t, s, i]
                        for j in range(dv):
                            m = M[i, j]
                            if delta:
                                m -= k[i] * u[j]
                            M[i, j] = di * m + w * k[i] * v[j]
                states[t, b, s] = M
                q = Q[b, t]
                for j in range(dv):
                    acc = 0.0
                    for i in range(dk):
                        acc += q[i] * M[i, j]
                    R[b, t, s, j] = acc


def _scan_backward(K, V, D, W, sel, delta, states, Q, dR, dQ, dK, dV, dD, dW):
    T, B, S, dk, dv = states.shape
    u = np.empty(dv, dtype=states.dtype)
    du = np.empty(dv, dtype=states.dtype)
    dP = np.empty((dk, dv), dtype=states.dtype)
    zero = np.zeros((dk, dv), dtype=states.dtype)
    for b in range(B):
        for s in range(S):
            G = np.zeros((dk, dv), dtype=states.dtype)
            for t in range(T - 1, -1, -1):
                q = Q[b, t]
                r = dR[b, t, s]
                St = states[t, b, s]
                for i in range(dk):
                    acc = 0.0
                    for j in range(dv):
                        G[i, j] += q[i] * r[j]
                        acc += St[i, j] * r[j]
                    dQ[b, t, i] += acc
                if not sel[b, t, s]:
                    continue
                Mp = states[t - 1, b, s] if t > 0 else zero
                k = K[b, t, s]
                v = V[b, t, s]
                w = W[b, t, s]
                if delta:
                    for j in range(dv):
                        acc = 0.0
                        for i in range(dk):
                            acc += k[i] * Mp[i, j]
                        u[j] = acc
                # write term
                dw = 0.0
                for i in range(dk):
                    acc = 0.0
                    for j in range(dv):
                        acc += G[i, j] * v[j]
                    dK[b, t, s, i] = w * acc
                    dw += k[i] * acc
                for j in range(dv):
                    acc = 0.0
                    for i in range(dk):
                        acc += k[i] * G[i, j]
                    dV[b, t, s, j] = w * acc
                dW[b, t, s] = dw
                # decay and projection
                for i in range(dk):
                    di = D[b, t, s, i]
                    acc = 0.0
                    for j in range(dv):
                        p = Mp[i, j]
                        if delta:
                            p -= k[i] * u[j]
                        acc += G[i, j] * p
                        dP[i, j] = di * G[i, j]
                    dD[b, t, s, i] = acc
                if delta:
                    for j in range(dv):
                        acc = 0.0
                        for i in range(dk):
                            acc += k[i] * dP[i, j]
                        du[j] = -acc
                    for i in range(dk):
                        acc = 0.0
                        for j in range(dv):
                            acc += -dP[i, j] * u[j] + Mp[i, j] * du[j]
                        dK[b, t, s, i] += acc
                    for i in range(dk):
                        for j in range(dv):
                            G[i, j] = dP[i, j] + k[i] * du[j]
                else:
                    for i in range(dk):
                        for j in range(dv):
                            G[i, j] = dP[i, j]


if AVAILABLE:
    _scan_forward = numba.njit(cache=True)(_scan_forward)
    _scan_backward = numba.njit(cache=True)(_scan_backward)


def scan_forward(K, V, D, W, sel, delta: bool, Q):
    """States after each step, shaped ``(T, B, S, d_k, d_v)``, and the
    per-slot readouts ``R[b, t, s] = Q[b, t] @ states[t, b, s]``."""
    B, T, S, dk = K.shape
    dv = V.shape[-1]
    states = np.empty((T, B, S, dk, dv), dtype=K.dtype)
    R = np.empty((B, T, S, dv), dtype=K.dtype)
    _scan_forward(K, V, D, W, sel, delta, Q, states, R)
    return states, R


def scan_backward(K, V, D, W, sel, delta: bool, states, Q, dR):
    """Reverse of :func:`scan_forward` given the gradient ``dR`` on per-slot
    readouts ``R[b, t, s] = Q[b, t] @ states[t, b, s]``.

    Returns ``(dQ, dK, dV, dD, dW)`` shaped like the inputs.
    """
    dQ = np.zeros_like(Q)
    dK = np.zeros_like(K)
    dV = np.zeros_like(V)
    dD = np.zeros_like(D)
    dW = np.zeros_like(W)
    _scan_backward(K, V, D, W, sel, delta, states, Q, dR, dQ, dK, dV, dD, dW)
    return dQ, dK, dV, dD, dW
