"""
Merging stage checkpoints
=========================

Four snapshots of a model, each after one more fine-tuning stage, are
combined with linear averaging, TIES and DARE.  The bundled presets weight
the newest snapshot heavily and keep a small share of the older ones.
"""
import numpy as np

from forgetkit.merge import load_preset, merge_dare, merge_linear, merge_ties, task_vector, trim
from forgetkit.tensor_store import Checkpoint

rng = np.random.default_rng(1)

# theta0 is the base; every later stage drifts a little further away
theta = [Checkpoint({"w": rng.normal(size=(3, 4))})]
for k in range(3):
    theta.append(Checkpoint({"w": theta[-1]["w"] + 0.3 * rng.normal(size=(3, 4))}))

linear = load_preset("linear")
print("linear preset weights:", linear.weights)
avg = merge_linear(theta, linear.weights)
print("linear merge, distance to newest snapshot:", np.abs(avg["w"] - theta[3]["w"]).max().round(4))

# a task vector is just the difference from the base
tv = task_vector(theta[3], theta[0])
print("task vector norm:", np.linalg.norm(tv.tensors["w"]).round(4))

# trimming keeps the largest-magnitude entries
delta = tv.tensors["w"].ravel()
print("nonzeros after trim to density 0.5:", np.count_nonzero(trim(delta, 0.5)), "of", delta.size)

ties = load_preset("ties")
merged_ties = merge_ties(theta[0], theta[1:], ties.weights, ties.densities)
merged_dare = merge_dare(theta[0], theta[1:], ties.weights, ties.densities, seed=0)
for name, m in (("ties", merged_ties), ("dare", merged_dare)):
    print(f"{name}: max |merged - newest| = {np.abs(m['w'] - theta[3]['w']).max():.4f}")

# DARE is random, but reproducible given the seed
again = merge_dare(theta[0], theta[1:], ties.weights, ties.densities, seed=0)
print("dare reproducible:", again == merged_dare)
print("merge metadata:", merged_ties.metadata)
