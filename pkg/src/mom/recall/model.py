"""Token-level recall model built from stacked MoM layers.

embedding (+ previous-token embedding) -> [pre-norm MoM layer + residual] x L
-> final RMS norm -> tied output projection.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from ..backward import layer_backward, layer_forward
from ..layer import init_layer_params
from ..router import LoadBalanceStats, aux_loss_and_grad
from .data import PAD

__all__ = ["RecallModel", "init_model", "forward", "loss_and_grads", "predict"]


@dataclass
class RecallModel:
    embed: np.ndarray
    prev_embed: np.ndarray
    layers: list
    norm_eps: float = 1e-6

    @property
    def vocab_size(self) -> int:
        return self.embed.shape[0]

    def arrays(self) -> dict:
        out = {"embed": self.embed, "prev_embed": self.prev_embed}
        for i, layer in enumerate(self.layers):
            for name, arr in layer.arrays().items():
                out[f"layers.{i}.{name}"] = arr
        return out

    def with_arrays(self, arrays: dict) -> "RecallModel":
        layers = []
        for i, layer in enumerate(self.layers):
            prefix = f"layers.{i}."
            upd = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
            layers.append(layer.with_arrays(upd) if upd else layer)
        return replace(
            self,
            embed=arrays.get("embed", self.embed),
            prev_embed=arrays.get("prev_embed", self.prev_embed),
            layers=layers,
        )

    def num_parameters(self) -> int:
        return int(sum(a.size for a in self.arrays().values()))


def init_model(
    vocab_size: int,
    d: int,
    num_layers: int,
    *,
    num_memories: int,
    top_k: int,
    shared: bool,
    rule="GatedDeltaNet",
    gamma: Optional[float] = None,
    d_k: Optional[int] = None,
    d_v: Optional[int] = None,
    a_bias: float = 0.0,
    b_bias: float = 0.0,
    rng=None,
) -> RecallModel:
    rng = np.random.default_rng(rng)
    embed = rng.normal(0.0, 1.0 / np.sqrt(d), size=(vocab_size, d))
    prev_embed = rng.normal(0.0, 1.0 / np.sqrt(d), size=(vocab_size, d))
    layers = [
        init_layer_params(
            d, num_memories, top_k, rule, d_k=d_k, d_v=d_v, shared=shared, gamma=gamma,
            a_bias=a_bias, b_bias=b_bias, rng=rng,
        )
        for _ in range(num_layers)
    ]
    return RecallModel(embed, prev_embed, layers)


def _rms(h, eps):
    r = np.sqrt(np.mean(h * h, axis=-1, keepdims=True) + eps)
    return h / r, r


def _rms_back(dn, n, r):
    return (dn - n * np.mean(dn * n, axis=-1, keepdims=True)) / r


def _previous(tokens):
    prev = np.full_like(tokens, PAD)
    prev[:, 1:] = tokens[:, :-1]
    return prev


def forward(model: RecallModel, tokens: np.ndarray):
    """Logits ``(B, T, V)`` and everything the reverse pass needs."""
    prev = _previous(tokens)
    h = model.embed[tokens] + model.prev_embed[prev]
    layer_caches = []
    for layer in model.layers:
        u, r = _rms(h, model.norm_eps)
        y, cache = layer_forward(layer, u)
        layer_caches.append((u, r, cache))
        h = h + y
    z, rz = _rms(h, model.norm_eps)
    logits = z @ model.embed.T
    return logits, (tokens, prev, layer_caches, z, rz)


def predict(model: RecallModel, tokens: np.ndarray) -> np.ndarray:
    logits, _ = forward(model, tokens)
    return np.argmax(logits, axis=-1)


def loss_and_grads(model: RecallModel, tokens, targets, aux_scale: float = 0.0):
    """Mean cross-entropy over query positions plus the scaled load-balance loss.

    Returns ``(total, ce, aux, grads, stats)`` where ``stats`` lists one
    :class:`LoadBalanceStats` per layer.
    """
    logits, (tokens, prev, layer_caches, z, rz) = forward(model, tokens)
    mask = targets >= 0
    n_q = max(int(mask.sum()), 1)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    tgt = np.where(mask, targets, 0)
    picked = np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0]
    ce = float(-(picked * mask).sum() / n_q)

    dlogits = np.exp(logp)
    np.put_along_axis(dlogits, tgt[..., None], np.take_along_axis(dlogits, tgt[..., None], -1) - 1.0, -1)
    dlogits *= mask[..., None] / n_q

    grads = {"embed": dlogits.reshape(-1, model.vocab_size).T @ z.reshape(-1, z.shape[-1])}
    dz = dlogits @ model.embed
    dh = _rms_back(dz, z, rz)

    aux_total = 0.0
    stats = []
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        u, r, cache = layer_caches[i]
        d_probs = None
        if aux_scale:
            aux, d_probs = aux_loss_and_grad(cache.indices, cache.probs, aux_scale)
            aux_total += aux
        stats.append(LoadBalanceStats.from_arrays(cache.indices, cache.probs))
        g, du = layer_backward(layer, cache, dh, d_probs)
        for name, arr in g.items():
            grads[f"layers.{i}.{name}"] = arr
        dh = dh + _rms_back(du, u, r)
    stats.reverse()

    V, d = model.embed.shape
    np.add.at(grads["embed"], tokens.ravel(), dh.reshape(-1, d))
    grads["prev_embed"] = np.zeros_like(model.prev_embed)
    np.add.at(grads["prev_embed"], prev.ravel(), dh.reshape(-1, d))
    return ce + aux_total, ce, aux_total, grads, stats
