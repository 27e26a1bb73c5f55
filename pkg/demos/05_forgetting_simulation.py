"""
Watching a small model forget
=============================

A small MLP learns a classification task, then is trained on three shifted
versions of it in turn.  Accuracy on the first task collapses unless some
of its data is replayed.  Merging and alpha discounting are applied on top.
"""
import numpy as np

from forgetkit.simulator import SimulationConfig, simulate

config = SimulationConfig(seeds=3, strategies=("none", "replay", "merge-linear", "scale", "replay+merge", "replay+scale"))
result = simulate(config)

print("task-0 accuracy after each stage (mean of 3 seeds)")
for name in result.strategies:
    curve = result.mean(name)[:, 0]
    print(f"  {name:14s}", "  ".join(f"{a:.3f}" for a in curve))

final = {name: result.mean(name)[-1] for name in result.strategies}
print("\nfinal accuracy on every task")
for name, row in final.items():
    print(f"  {name:14s}", "  ".join(f"{a:.3f}" for a in row), f" mean {np.mean(row):.3f}")
