"""LoRA adapter arithmetic: forward pass, folding, and alpha discounting.

The adapted forward is ``y = W x + (alpha / r) * B (A x)``. Lowering ``alpha``
at export time weakens the adapter without retraining; :func:`fold_lora`
bakes the (possibly discounted) update into a plain checkpoint.

Adapter files reuse the checkpoint container with tensors
``<target>.lora_A`` / ``<target>.lora_B`` and metadata ``rank`` / ``alpha``.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from .tensor_store import Checkpoint, read_checkpoint, write_checkpoint

SUFFIX_A = ".lora_A"
SUFFIX_B = ".lora_B"


class AdapterError(ValueError):
    pass


@dataclass(frozen=True)
class LoraAdapter:
    A: np.ndarray  # [r, d_in]
    B: np.ndarray  # [d_out, r]
    alpha: float
    target: str = ""

    def __post_init__(self):
        A = np.asarray(self.A)
        B = np.asarray(self.B)
        if A.ndim != 2 or B.ndim != 2:
            raise AdapterError(f"adapter {self.target!r}: A and B must be matrices")
        if A.shape[0] != B.shape[1] or A.shape[0] < 1:
            raise AdapterError(f"adapter {self.target!r}: rank mismatch, A {A.shape} vs B {B.shape}")
        if not (math.isfinite(self.alpha) and self.alpha > 0):
            raise AdapterError(f"adapter {self.target!r}: alpha must be finite and positive, got {self.alpha}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def d_in(self) -> int:
        return self.A.shape[1]

    @property
    def d_out(self) -> int:
        return self.B.shape[0]

    def delta(self, alpha: float | None = None) -> np.ndarray:
        """``(alpha / r) * B @ A`` in float64."""
        a = self.alpha if alpha is None else alpha
        return (a / self.rank) * (self.B.astype(np.float64) @ self.A.astype(np.float64))


AdapterSet = Mapping[str, LoraAdapter]


def lora_forward(W: np.ndarray, adapter: LoraAdapter, x: np.ndarray) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if W.shape != (adapter.d_out, adapter.d_in):
        raise AdapterError(f"W has shape {W.shape}, adapter expects {(adapter.d_out, adapter.d_in)}")
    if x.shape[0] != adapter.d_in:
        raise AdapterError(f"x has leading dimension {x.shape[0]}, expected {adapter.d_in}")
    A = adapter.A.astype(np.float64)
    B = adapter.B.astype(np.float64)
    return W @ x + (adapter.alpha / adapter.rank) * (B @ (A @ x))


def check_adapters(base: Checkpoint, adapters: AdapterSet) -> None:
    for target, ad in adapters.items():
        if target not in base:
            raise AdapterError(f"adapter target {target!r} not found in base checkpoint")
        shape = base[target].shape
        if shape != (ad.d_out, ad.d_in):
            raise AdapterError(f"target {target!r} has shape {shape}, adapter implies {(ad.d_out, ad.d_in)}")


def fold_lora(base: Checkpoint, adapters: AdapterSet, alpha_override: float | None = None) -> Checkpoint:
    """Return a checkpoint with ``W + (alpha_eff / r) B A`` written into every target.

    ``alpha_override=0`` is accepted and yields the base weights.
    """
    if alpha_override is not None and not (math.isfinite(alpha_override) and alpha_override >= 0):
        raise AdapterError(f"alpha_override must be finite and >= 0, got {alpha_override}")
    check_adapters(base, adapters)
    out = dict(base.tensors)
    for target, ad in adapters.items():
        out[target] = (base[target].astype(np.float64) + ad.delta(alpha_override)).astype(np.float32)
    meta = dict(base.metadata)
    alphas = {alpha_override if alpha_override is not None else ad.alpha for ad in adapters.values()}
    if len(alphas) == 1:
        meta["lora.alpha_eff"] = repr(float(alphas.pop()))
    meta["lora.folded"] = ",".join(sorted(adapters))
    return Checkpoint(out, meta)


def discount(adapters: AdapterSet, alpha_new: float) -> dict[str, LoraAdapter]:
    if not (math.isfinite(alpha_new) and alpha_new > 0):
        raise AdapterError(f"alpha_new must be positive, got {alpha_new}")
    return {name: replace(ad, alpha=float(alpha_new)) for name, ad in adapters.items()}


# -- adapter container ------------------------------------------------------

def adapters_to_checkpoint(adapters: AdapterSet) -> Checkpoint:
    if not adapters:
        raise AdapterError("empty adapter set")
    ranks = {ad.rank for ad in adapters.values()}
    alphas = {ad.alpha for ad in adapters.values()}
    if len(ranks) != 1 or len(alphas) != 1:
        raise AdapterError("adapter files hold one shared rank and alpha")
    tensors = {}
    for target, ad in adapters.items():
        tensors[target + SUFFIX_A] = ad.A
        tensors[target + SUFFIX_B] = ad.B
    return Checkpoint(tensors, {"rank": str(ranks.pop()), "alpha": repr(float(alphas.pop()))})


def adapters_from_checkpoint(ckpt: Checkpoint) -> dict[str, LoraAdapter]:
    try:
        rank = int(ckpt.metadata["rank"])
        alpha = float(ckpt.metadata["alpha"])
    except KeyError as exc:
        raise AdapterError(f"adapter file lacks metadata key {exc.args[0]!r}") from None
    except ValueError as exc:
        raise AdapterError(f"bad adapter metadata: {exc}") from None
    targets = sorted(n[: -len(SUFFIX_A)] for n in ckpt if n.endswith(SUFFIX_A))
    extra = [n for n in ckpt if not (n.endswith(SUFFIX_A) or n.endswith(SUFFIX_B))]
    if extra:
        raise AdapterError(f"unexpected tensors in adapter file: {extra}")
    out = {}
    for t in targets:
        if t + SUFFIX_B not in ckpt:
            raise AdapterError(f"adapter {t!r} has A but no B")
        ad = LoraAdapter(ckpt[t + SUFFIX_A], ckpt[t + SUFFIX_B], alpha, t)
        if ad.rank != rank:
            raise AdapterError(f"adapter {t!r} has rank {ad.rank}, metadata says {rank}")
        out[t] = ad
    orphans = [n for n in ckpt if n.endswith(SUFFIX_B) and n[: -len(SUFFIX_B)] not in out]
    if orphans:
        raise AdapterError(f"B without A: {orphans}")
    return out


def read_adapters(path: str | os.PathLike) -> dict[str, LoraAdapter]:
    return adapters_from_checkpoint(read_checkpoint(path))


def write_adapters(adapters: AdapterSet, path: str | os.PathLike) -> None:
    write_checkpoint(adapters_to_checkpoint(adapters), path)
