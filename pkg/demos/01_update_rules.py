"""A tour of the memory update rules.

Each rule maps a (d_k, d_v) memory, a key, a value and some gates to a new
memory. We write a few key/value pairs into every rule, read them back, and
watch where the rules differ: additive rules blur old associations while the
delta rule overwrites them.
"""
import numpy as np

from mom import GateValues, RuleKind, UpdateRuleSpec, read, step


def gates_for(kind: RuleKind, d_k: int, a=0.95, b=1.0) -> GateValues:
    g = {}
    if kind.gate_a == "scalar":
        g["a_scalar"] = a
    elif kind.gate_a == "vector":
        g["a_vector"] = np.full(d_k, a)
    if kind.has_gate_b:
        g["b_scalar"] = b
    return GateValues(**g)


def unit(x):
    return x / np.linalg.norm(x)


rng = np.random.default_rng(0)
d_k, d_v = 8, 4
keys = np.stack([unit(rng.normal(size=d_k)) for _ in range(3)])
values = rng.normal(size=(3, d_v))

print("Write three pairs, then ask for the first value back.")
print(f"{'rule':<14}{'recall error':>14}")
for kind in RuleKind:
    rule = UpdateRuleSpec(kind)
    M = np.zeros((d_k, d_v))
    for k, v in zip(keys, values):
        M = step(rule, M, k, v, gates_for(kind, d_k))
    err = np.linalg.norm(read(M, keys[0]) - values[0])
    print(f"{kind.value:<14}{err:>14.4f}")
# Keys are not orthogonal, so every rule leaks some crosstalk. HGRN2 writes
# with strength (1 - a), which is faint when a is close to one.

# Overwriting: the same key, a new value.
print("\nRebind key 0 to a new value and read it back.")
new_value = rng.normal(size=d_v)
for kind in (RuleKind.LINEAR_ATTN, RuleKind.DELTANET):
    rule = UpdateRuleSpec(kind)
    M = np.zeros((d_k, d_v))
    for v in (values[0], new_value):
        M = step(rule, M, keys[0], v, gates_for(kind, d_k))
    got = read(M, keys[0])
    print(f"{kind.value:<14} new-value error {np.linalg.norm(got - new_value):.4f}")
print("Linear attention returns the sum of both values; the delta rule keeps only the latest.")

# With the forgetting gate at one and full write strength, the gated delta
# rule is exactly the plain delta rule.
M = rng.normal(size=(d_k, d_v))
k, v = keys[1], values[1]
gated = step(UpdateRuleSpec("GatedDeltaNet"), M, k, v, GateValues(a_scalar=1.0, b_scalar=1.0))
plain = step(UpdateRuleSpec("DeltaNet"), M, k, v, GateValues(b_scalar=1.0))
print(f"\nGatedDeltaNet(a=1) vs DeltaNet: max difference {np.abs(gated - plain).max():.1e}")
