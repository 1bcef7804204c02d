"""Routing tokens to memories and mixing what they hold.

A single layer with four routed memories and one shared memory. We follow
which memories each token touches, confirm that untouched memories stay
frozen, and look at the load-balance loss the router is trained with.
"""
import numpy as np

from mom import (
    LoadBalanceStats,
    MomState,
    aux_load_balance_loss,
    forward_sequence_naive,
    forward_step,
    init_layer_params,
)

rng = np.random.default_rng(1)
params = init_layer_params(16, num_memories=4, top_k=2, rule="GatedDeltaNet",
                           d_k=8, d_v=8, shared=True, rng=rng)
X = rng.normal(size=(10, 16))

Y, decisions = forward_sequence_naive(params, X)
print("token  memories  weights")
for t, d in enumerate(decisions):
    w = ", ".join(f"{x:.2f}" for x in d.weights)
    print(f"{t:>5}  {str(d.indices):<8}  {w}")

# A memory not chosen for a token keeps its state bit-for-bit.
state = MomState.zeros(params)
for x in X[:5]:
    _, state = forward_step(params, state, x)
_, after = forward_step(params, state, X[5])
untouched = sorted(set(range(4)) - set(decisions[5].indices))
same = all(np.array_equal(state.memories[m], after.memories[m]) for m in untouched)
print(f"\nmemories {untouched} skipped at token 5; unchanged: {same}")
print(f"shared memory updated anyway: {not np.array_equal(state.shared, after.shared)}")

stats = LoadBalanceStats.from_decisions(decisions, 4)
print("\nrouting fractions f:", np.round(stats.fractions, 3))
print("mean router probs P:", np.round(stats.mean_probs, 3))
print(f"load-balance loss (scale 1): {aux_load_balance_loss(decisions, 4, scale=1.0):.4f}")
print("Even routing fractions give exactly 1.0; piling tokens onto one memory pushes it up.")
