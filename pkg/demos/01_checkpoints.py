"""
Reading and writing checkpoints
===============================

A checkpoint is a flat mapping from tensor name to a float32 array plus a
small string-to-string metadata dictionary.  Files are self-describing:
an 8-byte header length, a JSON header, then raw little-endian data.
"""
import tempfile
from pathlib import Path

import numpy as np

from forgetkit import Checkpoint, read_checkpoint, validate_compatible, write_checkpoint

rng = np.random.default_rng(0)

# build a tiny two-layer "model"
ck = Checkpoint(
    {"layer0.weight": rng.normal(size=(4, 3)), "layer0.bias": np.zeros(4), "head.weight": rng.normal(size=(2, 4))},
    metadata={"note": "demo"},
)
print("tensors:", ck.names())
print("shapes: ", ck.shapes())

# everything is stored as float32; the input float64 arrays were converted
print("dtype:  ", ck["layer0.weight"].dtype)

out = Path(tempfile.mkdtemp()) / "demo.ckpt"
write_checkpoint(ck, out)
back = read_checkpoint(out)
print("round trip equal:", back == ck, f"({out.stat().st_size} bytes)")

# writing the same checkpoint twice gives identical bytes
write_checkpoint(back, out.with_name("again.ckpt"))
print("byte identical:  ", out.read_bytes() == out.with_name("again.ckpt").read_bytes())

# compatibility is a report, not just a yes/no answer
other = Checkpoint({"layer0.weight": np.zeros((4, 5)), "layer0.bias": np.zeros(4)})
print(validate_compatible(ck, other).describe())
