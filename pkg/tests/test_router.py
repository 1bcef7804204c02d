import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mom.errors import InvalidArgument
from mom.gradcheck import finite_diff_grad
from mom.router import (
    LoadBalanceStats,
    RouterDecision,
    RouterParams,
    aux_load_balance_loss,
    aux_loss_and_grad,
    route,
    softmax,
)


def params_with_logits(logits, k):
    """Router whose logits for x = e_0 equal ``logits``."""
    W = np.zeros((2, len(logits)))
    W[0] = logits
    return RouterParams(W, k), np.array([1.0, 0.0])


def test_uniform_logits_break_ties_low():
    p, x = params_with_logits([0.0] * 4, 2)
    d = route(x, p)
    np.testing.assert_allclose(d.full_probs, 0.25)
    assert d.indices == (0, 1)
    np.testing.assert_allclose(d.weights, [0.5, 0.5])


def test_top1_softmax_by_hand():
    p, x = params_with_logits([np.log(2.0), 0.0, 0.0], 1)
    d = route(x, p)
    np.testing.assert_allclose(d.full_probs, [0.5, 0.25, 0.25], atol=1e-15)
    assert d.indices == (0,)
    np.testing.assert_allclose(d.weights, [1.0])


def test_full_selection_keeps_probs():
    p, x = params_with_logits([0.3, -1.2], 2)
    d = route(x, p)
    np.testing.assert_allclose(d.weights, d.full_probs, atol=1e-15)


def test_route_rejects_bad_input():
    p, _ = params_with_logits([0.0, 0.0], 1)
    with pytest.raises(InvalidArgument):
        route(np.array([np.nan, 0.0]), p)
    with pytest.raises(InvalidArgument):
        RouterParams(np.zeros((2, 3)), 4)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8), st.floats(-50, 50))
def test_shift_invariance_and_normalisation(seed, M, shift):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, M + 1))
    logits = rng.normal(size=M) * 3
    a = route(np.array([1.0, 0.0]), params_with_logits(logits, k)[0])
    b = route(np.array([1.0, 0.0]), params_with_logits(logits + shift, k)[0])
    assert a.indices == b.indices
    np.testing.assert_allclose(a.weights, b.weights, rtol=0, atol=1e-12)
    assert abs(a.weights.sum() - 1.0) < 1e-6
    assert np.all(a.weights > 0)
    assert list(a.indices) == sorted(set(a.indices))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_larger_logit_selected_first(seed):
    rng = np.random.default_rng(seed)
    M = int(rng.integers(2, 9))
    k = int(rng.integers(1, M + 1))
    logits = rng.normal(size=M)
    d = route(np.array([1.0, 0.0]), params_with_logits(logits, k)[0])
    for i in range(M):
        for j in range(M):
            if logits[j] > logits[i] and i in d.indices:
                assert j in d.indices


def decision(probs, idx):
    probs = np.asarray(probs, float)
    w = probs[list(idx)] / probs[list(idx)].sum()
    return RouterDecision(tuple(idx), w, probs)


def test_aux_loss_examples():
    M, scale = 4, 0.7
    uniform = [decision([0.25] * 4, (m,)) for m in range(4)]
    assert aux_load_balance_loss(uniform, M, scale) == pytest.approx(scale, abs=1e-15)
    collapsed = [decision([1.0, 0, 0, 0], (0,))] * 5
    assert aux_load_balance_loss(collapsed, M, scale) == pytest.approx(scale * M)
    two = [decision([0.9, 0.1], (0,)), decision([0.2, 0.8], (1,))]
    assert aux_load_balance_loss(two, 2, scale) == pytest.approx(scale * 1.0, abs=1e-15)


def test_aux_fractions_divide_by_k():
    decs = [decision([0.25] * 4, (0, 1)), decision([0.25] * 4, (2, 3))]
    stats = LoadBalanceStats.from_decisions(decs, 4)
    np.testing.assert_allclose(stats.fractions, 0.25)
    assert stats.loss(1.0) == pytest.approx(1.0)


def test_aux_loss_rejects_empty():
    with pytest.raises(InvalidArgument):
        aux_load_balance_loss([], 4)


def random_batch(rng, N, M, k):
    probs = softmax(rng.normal(size=(N, M)) * 2)
    idx = np.sort(np.argsort(-probs, axis=1)[:, :k], axis=1)
    return idx, probs


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_aux_loss_at_least_scale_when_fractions_are_uniform(seed):
    rng = np.random.default_rng(seed)
    M = int(rng.integers(1, 9))
    idx, probs = random_batch(rng, int(rng.integers(1, 40)), M, M)
    assert LoadBalanceStats.from_arrays(idx, probs).loss(1e-3) == pytest.approx(1e-3, rel=1e-12)
    idx, probs = random_batch(rng, 1, M, 1)
    assert LoadBalanceStats.from_arrays(idx, probs).loss(1e-3) >= 1e-3 * (1 - 1e-12)


def test_aux_loss_can_dip_below_scale():
    # each token's top choice is the other token's least likely memory
    probs = np.array([[0.5, 0.49, 0.01], [0.01, 0.49, 0.5]])
    stats = LoadBalanceStats.from_arrays(np.array([[0], [2]]), probs)
    assert stats.loss(1.0) == pytest.approx(0.765, abs=1e-12)


def test_stats_shard_additively():
    rng = np.random.default_rng(0)
    idx, probs = random_batch(rng, 30, 5, 2)
    whole = LoadBalanceStats.from_arrays(idx, probs)
    parts = LoadBalanceStats.from_arrays(idx[:11], probs[:11]) + LoadBalanceStats.from_arrays(idx[11:], probs[11:])
    np.testing.assert_array_equal(whole.selection_counts, parts.selection_counts)
    np.testing.assert_allclose(whole.prob_sums, parts.prob_sums, rtol=1e-15)
    assert whole.num_tokens == parts.num_tokens


def test_aux_grad_matches_differences():
    rng = np.random.default_rng(1)
    idx, probs = random_batch(rng, 7, 4, 2)
    _, grad = aux_loss_and_grad(idx, probs, 0.3)
    num = finite_diff_grad(lambda a: LoadBalanceStats.from_arrays(idx, a["p"]).loss(0.3), {"p": probs})
    np.testing.assert_allclose(grad, num["p"], atol=1e-10)
