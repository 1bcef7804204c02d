import numpy as np
import pytest

from mom.errors import InvalidArgument
from mom.kernels import GateValues, RuleKind, read, scan
from mom.layer import (
    MomState,
    forward_sequence_naive,
    forward_step,
    init_layer_params,
    output_head,
    slot_projections,
)
from mom.router import route


def sig(z):
    return 1.0 / (1.0 + np.exp(-z))


def straight_line_gdn(p, X):
    """Token-by-token Gated DeltaNet MoM written out by hand."""
    d, M = p.W_g.shape
    mems = [np.zeros((p.d_k, p.d_v)) for _ in range(M)]
    shared = np.zeros((p.d_k, p.d_v))
    ys = []
    for x in X:
        z = x @ p.W_g
        e = np.exp(z - z.max())
        probs = e / e.sum()
        top = sorted(sorted(range(M), key=lambda m: (-probs[m], m))[: p.top_k])
        g = {m: probs[m] / sum(probs[j] for j in top) for m in top}

        def upd(S, slot):
            k = x @ p.W_k[slot]
            k = k / np.sqrt(k @ k + 1e-12)
            v = x @ p.W_v[slot]
            a = sig(x @ p.W_a[slot, :, 0] + p.b_a[slot, 0])
            b = sig(x @ p.W_b[slot] + p.b_b[slot])
            return a * (S - np.outer(k, k @ S)) + b * np.outer(k, v)

        for m in top:
            mems[m] = upd(mems[m], m)
        mixed = np.zeros_like(shared)
        if p.shared:
            shared = upd(shared, M)
            mixed += shared
        for m in top:
            mixed += g[m] * mems[m]
        o = (x @ p.W_q) @ mixed
        n = o / np.sqrt(np.mean(o**2) + p.norm_eps)
        ys.append(n @ p.W_o)
    return np.array(ys)


def test_matches_straight_line_transcription():
    p = init_layer_params(6, 4, 2, "GatedDeltaNet", rng=0, a_bias=1.0)
    X = np.random.default_rng(1).normal(size=(12, 6))
    Y, _ = forward_sequence_naive(p, X)
    np.testing.assert_allclose(Y, straight_line_gdn(p, X), rtol=0, atol=1e-12)


def test_all_memories_identical_reduces_to_single_memory():
    rng = np.random.default_rng(2)
    p = init_layer_params(5, 3, 3, "LinearAttn", shared=False, rng=rng)
    p.W_k[:] = p.W_k[0]
    p.W_v[:] = p.W_v[0]
    X = rng.normal(size=(7, 5))
    Y, _ = forward_sequence_naive(p, X)
    states = scan("LinearAttn", np.zeros((5, 5)), X @ p.W_k[0], X @ p.W_v[0], [GateValues()] * 7)
    o = np.array([read(S, x @ p.W_q) for S, x in zip(states, X)])
    np.testing.assert_allclose(Y, output_head(o, p), atol=1e-12)


def test_zero_input():
    p = init_layer_params(4, 4, 2, "LinearAttn", rng=3)
    state = MomState.zeros(p)
    y, new = forward_step(p, state, np.zeros(4))
    np.testing.assert_array_equal(y, np.zeros(4))
    np.testing.assert_array_equal(new.memories, state.memories)


def test_single_token_sequence_equals_step():
    p = init_layer_params(4, 4, 2, "GLA", rng=4)
    x = np.random.default_rng(5).normal(size=4)
    y, _ = forward_step(p, MomState.zeros(p), x)
    Y, decisions = forward_sequence_naive(p, x[None])
    np.testing.assert_array_equal(Y[0], y)
    assert len(decisions) == 1


def final_states(p, X):
    state = MomState.zeros(p)
    for x in X:
        _, state = forward_step(p, state, x)
    return state.memories


def test_linear_attention_states_commute_over_token_swaps():
    rng = np.random.default_rng(6)
    p = init_layer_params(5, 4, 1, "LinearAttn", shared=False, rng=rng)
    X = rng.normal(size=(8, 5))
    base = final_states(p, X)
    for i, j in [(0, 7), (2, 3), (1, 5)]:
        Xs = X.copy()
        Xs[[i, j]] = Xs[[j, i]]
        np.testing.assert_allclose(final_states(p, Xs), base, atol=1e-13)


def test_output_head_examples():
    p = init_layer_params(3, 2, 1, "LinearAttn", d_v=4, rng=7)
    np.testing.assert_array_equal(output_head(np.zeros(4), p), np.zeros(3))
    q = init_layer_params(3, 2, 1, "LinearAttn", d_v=4, rng=7, norm_eps=1e-300)
    np.testing.assert_allclose(output_head(np.full(4, 2.5), q), np.ones(4) @ q.W_o, rtol=1e-14)
    wide = init_layer_params(6, 2, 1, "LinearAttn", d_v=4, rng=7)
    o = np.random.default_rng(8).normal(size=(10, 4)) * 5
    n = output_head(o, wide) @ np.linalg.pinv(wide.W_o)
    np.testing.assert_allclose(np.sqrt(np.mean(n**2, axis=-1)), 1.0, atol=1e-6)


@pytest.mark.parametrize("kind", list(RuleKind))
def test_unselected_memories_untouched(kind):
    rng = np.random.default_rng(9)
    p = init_layer_params(4, 5, 2, kind.value, rng=rng)
    state = MomState.zeros(p)
    state.memories[:] = rng.normal(size=state.memories.shape)
    for x in rng.normal(size=(20, 4)):
        before = state.memories.copy()
        _, new = forward_step(p, state, x)
        np.testing.assert_array_equal(state.memories, before)
        sel = set(route(x, p.router).indices)
        for m in range(5):
            if m not in sel:
                assert new.memories[m].tobytes() == before[m].tobytes()
        state = new


def test_single_memory_without_shared_is_plain_rule():
    rng = np.random.default_rng(10)
    p = init_layer_params(4, 1, 1, "Mamba2", shared=False, rng=rng)
    X = rng.normal(size=(9, 4))
    Y, decisions = forward_sequence_naive(p, X)
    assert all(d.weights[0] == 1.0 for d in decisions)
    proj = [slot_projections(p, x, 0) for x in X]
    states = scan(p.rule, np.zeros((4, 4)), np.array([k for k, _, _ in proj]),
                  np.array([v for _, v, _ in proj]), [g for _, _, g in proj])
    o = np.array([read(S, x @ p.W_q) for S, x in zip(states, X)])
    np.testing.assert_array_equal(Y, output_head(o, p))


def test_forward_is_deterministic():
    p = init_layer_params(5, 4, 2, "RWKV7", rng=11)
    X = np.random.default_rng(12).normal(size=(10, 5))
    assert forward_sequence_naive(p, X)[0].tobytes() == forward_sequence_naive(p, X)[0].tobytes()


def test_shape_errors():
    p = init_layer_params(4, 2, 1, "LinearAttn", rng=0)
    with pytest.raises(InvalidArgument):
        forward_step(p, MomState.zeros(p), np.zeros(3))
    bad = MomState(np.zeros((3, 4, 4)), np.zeros((4, 4)))
    with pytest.raises(InvalidArgument):
        forward_step(p, bad, np.zeros(4))
    with pytest.raises(InvalidArgument):
        init_layer_params(4, 2, 3, "LinearAttn")
    with pytest.raises(InvalidArgument):
        output_head(np.zeros(3), p)
