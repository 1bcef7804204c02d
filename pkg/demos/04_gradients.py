"""Checking the hand-written backward pass.

The training engine differentiates the layer by hand. Two independent
references keep it honest: the quadratic parallel form of linear attention,
and central finite differences on every parameter tensor.
"""
import numpy as np

from mom import check_layer_gradients, init_layer_params, parallel_form_oracle
from mom.kernels import UpdateRuleSpec, scan, GateValues

rng = np.random.default_rng(3)
T, d_k, d_v = 12, 4, 3
Q, K, V = rng.normal(size=(T, d_k)), rng.normal(size=(T, d_k)), rng.normal(size=(T, d_v))

# Linear attention two ways: a running sum of outer products, or masked QK^T V.
states = scan(UpdateRuleSpec("LinearAttn"), np.zeros((d_k, d_v)), K, V, [GateValues()] * T)
recurrent = np.einsum("ti,tij->tj", Q, states)
print(f"recurrent vs parallel form: {np.abs(recurrent - parallel_form_oracle(Q, K, V)).max():.1e}")

print("\nfinite-difference check of the full layer (tolerance 1e-6)")
for rule in ["LinearAttn", "RetNet", "GLA", "Mamba2", "GatedDeltaNet"]:
    params = init_layer_params(6, num_memories=3, top_k=2, rule=rule, d_k=3, d_v=3,
                               shared=True, a_bias=0.5, rng=np.random.default_rng(4))
    X = rng.normal(size=(2, 5, 6))
    report = check_layer_gradients(params, X, rng.normal(size=X.shape))
    print(f"  {rule:<14} worst relative error {report.worst_rel_error:.1e}  "
          f"{'ok' if report.passed else 'FAILED'}")
