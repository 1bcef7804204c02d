"""Associative recall in a few seconds.

Sequences list key/value pairs and then ask for some keys back. We train a
small mixture-of-memories model and a single-memory model with the same
activated state size, then look at how the router spread keys across
memories.

Run from the repository root: ``python demos/05_recall_quick.py``.
"""
from pathlib import Path

import numpy as np

from mom.recall import compare, load_config
from mom.recall.data import gen_recall_dataset

cfg = load_config(Path(__file__).resolve().parent.parent / "configs" / "quick.yaml")

sample = gen_recall_dataset(cfg.task)
print("one training sequence (1 marks a query, -1 targets are not scored):")
print("  tokens ", sample.tokens[0].tolist())
print("  targets", sample.targets[0].tolist())

arms = [cfg.replace(name="mom"), cfg.replace(name="expanded", model="expanded")]
result = compare(arms, seeds=2)
print()
print(result.table())

print("\nshare of routed tokens per memory (mom, layer 0):")
print("  ", np.round(result.arm("mom").routing[0], 3))
