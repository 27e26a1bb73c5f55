"""
Discounting a LoRA adapter
==========================

A LoRA adapter adds (alpha / r) * B @ A to a frozen weight.  Lowering alpha
after training shrinks the adapter's contribution linearly, which pulls the
model back toward its pre-adaptation behaviour without any retraining.
"""
import numpy as np

from forgetkit.lora import LoraAdapter, discount, fold_lora, lora_forward
from forgetkit.tensor_store import Checkpoint

rng = np.random.default_rng(2)
W = rng.normal(size=(6, 8))
adapter = LoraAdapter(A=rng.normal(size=(4, 8)) * 0.3, B=rng.normal(size=(6, 4)) * 0.3, alpha=16.0, target="proj")
x = rng.normal(size=8)

base_out = W @ x
for alpha in (16.0, 15.0, 14.0, 8.0):
    y = lora_forward(W, discount({"proj": adapter}, alpha)["proj"], x)
    shift = np.linalg.norm(y - base_out)
    print(f"alpha={alpha:4.1f}  adapter shift {shift:.4f}")

# folding bakes the adapter into the weight; the output matches the adapter path
base = Checkpoint({"proj": W})
folded = fold_lora(base, {"proj": adapter}, alpha_override=14.0)
y_fold = folded["proj"].astype(np.float64) @ x
y_path = lora_forward(W, discount({"proj": adapter}, 14.0)["proj"], x)
print("folded vs adapter path:", np.abs(y_fold - y_path).max())
print("recorded:", folded.metadata)
