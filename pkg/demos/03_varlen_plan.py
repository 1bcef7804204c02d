"""The variable-length execution plan.

Instead of running every memory over every token, the layer groups the
tokens routed to each memory into one contiguous segment, runs each segment
as a short sequence, and scatters the results back. Here we build such a
plan by hand, inspect it, and check it against the token-by-token forward.
"""
import time

import numpy as np

from mom import build_plan, forward_sequence_naive, forward_varlen, init_layer_params
from mom.varlen import route_tokens

rng = np.random.default_rng(2)
params = init_layer_params(12, num_memories=3, top_k=1, rule="GLA", d_k=4, d_v=4,
                           shared=True, rng=rng)
X = rng.normal(size=(2, 6, 12))

plan = build_plan(route_tokens(params, X), params.num_memories, params.shared)
print("bucket (batch, slot) -> time steps")
for p in range(plan.num_buckets):
    b, s = plan.bucket_key(p)
    label = "shared" if s == params.num_memories else f"memory {s}"
    print(f"  ({b}, {label:<8}) {plan.index_sets[(b, s)].tolist()}")
print("segment boundaries:", plan.boundaries.tolist())

Y_plan = forward_varlen(params, X)
Y_ref = np.stack([forward_sequence_naive(params, x)[0] for x in X])
print(f"\nvarlen vs token-by-token: max difference {np.abs(Y_plan - Y_ref).max():.1e}")

# The plan is a pure function of the routing, so it round-trips through JSON.
again = type(plan).from_json(plan.to_json())
print("plan survives a JSON round trip:",
      np.array_equal(again.flat_to_src, plan.flat_to_src))

big = rng.normal(size=(4, 64, 12))
for name, fn in [("varlen", lambda: forward_varlen(params, big)),
                 ("naive", lambda: [forward_sequence_naive(params, x) for x in big])]:
    start = time.perf_counter()
    fn()
    print(f"{name:<7} {1000 * (time.perf_counter() - start):7.1f} ms for a 4 x 64 batch")
