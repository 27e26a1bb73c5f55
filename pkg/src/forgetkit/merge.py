"""Linear, TIES and DARE merging of stage checkpoints.

All arithmetic is accumulated in float64 and rounded to float32 once per
output tensor. Random draws (DARE) come from a per-tensor generator keyed on
``(seed, tensor name, model index)``, so results do not depend on the order in
which tensors are visited.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor_store import Checkpoint, IncompatibleCheckpointsError, require_compatible, validate_compatible

METHODS = ("linear", "ties", "dare")


@dataclass(frozen=True)
class TaskVector:
    """Elementwise ``model - base``, kept in float64."""

    tensors: dict[str, np.ndarray]
    model_ref: str = ""
    base_ref: str = ""


def task_vector(model: Checkpoint, base: Checkpoint, model_ref: str = "", base_ref: str = "") -> TaskVector:
    report = validate_compatible(model, base)
    if not report.compatible:
        raise IncompatibleCheckpointsError(report, "task_vector")
    deltas = {n: model[n].astype(np.float64) - base[n].astype(np.float64) for n in base}
    return TaskVector(deltas, model_ref, base_ref)


def _check_lists(models: Sequence[Checkpoint], weights: Sequence[float], densities: Sequence[float] | None = None):
    if not models:
        raise ValueError("at least one model is required")
    if len(weights) != len(models):
        raise ValueError(f"{len(models)} models but {len(weights)} weights")
    if not all(math.isfinite(w) for w in weights):
        raise ValueError("weights must be finite")
    if densities is not None:
        if len(densities) != len(models):
            raise ValueError(f"{len(models)} models but {len(densities)} densities")
        for d in densities:
            if not (0.0 < d <= 1.0):
                raise ValueError(f"density {d} outside (0, 1]")


def _spec_metadata(method: str, weights, densities=None, seed=None, excluded=()) -> dict[str, str]:
    meta = {"merge.method": method, "merge.weights": json.dumps([float(w) for w in weights])}
    if densities is not None:
        meta["merge.densities"] = json.dumps([float(d) for d in densities])
    if seed is not None:
        meta["merge.seed"] = str(seed)
    if excluded:
        meta["merge.excluded"] = json.dumps(sorted(excluded))
    return meta


def merge_linear(
    models: Sequence[Checkpoint], weights: Sequence[float], exclude: Sequence[str] = ()
) -> Checkpoint:
    """``out[n] = sum_i weights[i] * models[i][n]``.

    Weights are used as given (no renormalization). Tensors named in
    ``exclude`` are copied from the last model.
    """
    _check_lists(models, weights)
    require_compatible(models, "merge_linear")
    out = {}
    for name in models[0]:
        if name in exclude:
            out[name] = models[-1][name]
            continue
        acc = np.zeros(models[0][name].shape, dtype=np.float64)
        for w, m in zip(weights, models):
            acc += float(w) * m[name].astype(np.float64)
        out[name] = acc.astype(np.float32)
    return Checkpoint(out, _spec_metadata("linear", weights, excluded=exclude))


def keep_count(density: float, size: int) -> int:
    """``ceil(density * size)``, robust to float noise such as ``0.9 * 10``."""
    return min(size, math.ceil(round(density * size, 9)))


def trim(delta: np.ndarray, density: float) -> np.ndarray:
    """Keep the ``keep_count(density, K)`` largest-magnitude entries, zero the rest.

    Equal magnitudes are resolved in favour of the lower flat index.
    """
    flat = np.asarray(delta, dtype=np.float64).ravel()
    k = keep_count(density, flat.size)
    order = np.argsort(-np.abs(flat), kind="stable")
    out = np.zeros_like(flat)
    keep = order[:k]
    out[keep] = flat[keep]
    return out.reshape(np.shape(delta))


def ties_combine(deltas: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """Sign election plus disjoint weighted mean over already trimmed deltas.

    The elected sign is ``sign(sum_i w_i * d_i)`` with zero counted as
    positive. Contributors are the nonzero entries whose sign equals the
    elected one; their weighted mean is scaled by the total weight.
    """
    stack = np.stack([np.asarray(d, dtype=np.float64) for d in deltas])
    w = np.asarray(weights, dtype=np.float64).reshape((-1,) + (1,) * (stack.ndim - 1))
    elected = np.where((w * stack).sum(axis=0) >= 0, 1.0, -1.0)
    agree = (stack != 0) & (np.sign(stack) == elected)
    num = np.where(agree, w * stack, 0.0).sum(axis=0)
    den = np.where(agree, w, 0.0).sum(axis=0)
    safe = np.where(den != 0, den, 1.0)
    mean = np.where(den != 0, num / safe, 0.0)
    return mean * float(sum(float(x) for x in weights))


def merge_ties(
    base: Checkpoint,
    models: Sequence[Checkpoint],
    weights: Sequence[float],
    densities: Sequence[float],
    seed: int = 0,
    exclude: Sequence[str] = (),
) -> Checkpoint:
    """Trim, elect sign, disjoint mean; result is ``base + merged delta``.

    ``seed`` is accepted for a uniform merge signature; TIES draws nothing.
    """
    _check_lists(models, weights, densities)
    require_compatible([base, *models], "merge_ties")
    out = {}
    for name in base:
        if name in exclude:
            out[name] = models[-1][name]
            continue
        b = base[name].astype(np.float64)
        trimmed = [trim(m[name].astype(np.float64) - b, d) for m, d in zip(models, densities)]
        out[name] = (b + ties_combine(trimmed, weights)).astype(np.float32)
    return Checkpoint(out, _spec_metadata("ties", weights, densities, seed, exclude))


def tensor_seed(seed: int, name: str, model_index: int) -> int:
    """Stable 64-bit seed for one (tensor, model) pair."""
    key = f"{int(seed)}\x00{name}\x00{int(model_index)}".encode("utf-8")
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


def dare_process(delta: np.ndarray, density: float, rng: np.random.Generator) -> np.ndarray:
    """Drop each entry with probability ``1 - density``; rescale survivors by ``1/density``."""
    delta = np.asarray(delta, dtype=np.float64)
    keep = rng.random(delta.shape) < density
    return np.where(keep, delta / density, 0.0)


def merge_dare(
    base: Checkpoint,
    models: Sequence[Checkpoint],
    weights: Sequence[float],
    densities: Sequence[float],
    seed: int = 0,
    exclude: Sequence[str] = (),
) -> Checkpoint:
    """``base + sum_i w_i * dare_process(model_i - base)``, deterministic in ``seed``."""
    _check_lists(models, weights, densities)
    require_compatible([base, *models], "merge_dare")
    out = {}
    for name in base:
        if name in exclude:
            out[name] = models[-1][name]
            continue
        b = base[name].astype(np.float64)
        acc = b.copy()
        for i, (m, w, d) in enumerate(zip(models, weights, densities)):
            rng = np.random.default_rng(tensor_seed(seed, name, i))
            acc += float(w) * dare_process(m[name].astype(np.float64) - b, d, rng)
        out[name] = acc.astype(np.float32)
    return Checkpoint(out, _spec_metadata("dare", weights, densities, seed, exclude))


# -- merge specifications ---------------------------------------------------

@dataclass(frozen=True)
class MergeEntry:
    ref: str
    weight: float
    density: float | None = None


@dataclass(frozen=True)
class MergeSpec:
    method: str
    entries: tuple[MergeEntry, ...]
    base: str | None = None
    seed: int = 0
    exclude: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown merge method {self.method!r}; expected one of {METHODS}")
        if not self.entries:
            raise ValueError("merge spec needs at least one model")
        if not (0 <= int(self.seed) < 2**64):
            raise ValueError("seed must be a 64-bit unsigned integer")
        for e in self.entries:
            if not math.isfinite(e.weight):
                raise ValueError(f"weight for {e.ref!r} is not finite")
        if self.method == "linear":
            if self.base is not None:
                raise ValueError("linear merge takes no base model")
            if any(e.density is not None for e in self.entries):
                raise ValueError("linear merge takes no densities")
        else:
            if self.base is None:
                raise ValueError(f"{self.method} merge requires a base model")
            if any(e.ref == self.base for e in self.entries):
                raise ValueError("base model must not also be listed among the merged models")
            for e in self.entries:
                if e.density is None or not (0.0 < e.density <= 1.0):
                    raise ValueError(f"{self.method} entry {e.ref!r} needs a density in (0, 1]")

    @property
    def weights(self) -> list[float]:
        return [e.weight for e in self.entries]

    @property
    def densities(self) -> list[float]:
        return [e.density for e in self.entries]  # type: ignore[misc]

    @classmethod
    def from_dict(cls, raw: dict) -> "MergeSpec":
        if not isinstance(raw, dict):
            raise ValueError("merge spec must be a JSON object")
        unknown = set(raw) - {"method", "base", "models", "seed", "exclude"}
        if unknown:
            raise ValueError(f"unknown merge spec field(s): {sorted(unknown)}")
        try:
            models = raw["models"]
            entries = tuple(
                MergeEntry(str(m["path"]), float(m["weight"]), None if m.get("density") is None else float(m["density"]))
                for m in models
            )
            return cls(
                method=str(raw["method"]),
                entries=entries,
                base=raw.get("base"),
                seed=int(raw.get("seed", 0)),
                exclude=tuple(raw.get("exclude", ())),
            )
        except KeyError as exc:
            raise ValueError(f"merge spec missing field {exc.args[0]!r}") from None
        except TypeError as exc:
            raise ValueError(f"malformed merge spec: {exc}") from None

    def to_dict(self) -> dict:
        out: dict = {"method": self.method}
        if self.base is not None:
            out["base"] = self.base
        models = []
        for e in self.entries:
            item: dict = {"path": e.ref, "weight": e.weight}
            if e.density is not None:
                item["density"] = e.density
            models.append(item)
        out["models"] = models
        out["seed"] = int(self.seed)
        if self.exclude:
            out["exclude"] = list(self.exclude)
        return out

    @classmethod
    def load(cls, path: str | Path) -> "MergeSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


PRESET_NAMES = ("linear", "ties", "dare")


def load_preset(name: str) -> MergeSpec:
    """Shipped stage-merging configurations (base theta0, stages theta1..theta3)."""
    if name not in PRESET_NAMES:
        raise ValueError(f"unknown preset {name!r}; expected one of {PRESET_NAMES}")
    text = resources.files("forgetkit").joinpath("presets", f"{name}.json").read_text(encoding="utf-8")
    return MergeSpec.from_dict(json.loads(text))


def apply_spec(spec: MergeSpec, checkpoints: dict[str, Checkpoint]) -> Checkpoint:
    """Run ``spec`` with references resolved through ``checkpoints``."""
    models = [checkpoints[e.ref] for e in spec.entries]
    if spec.method == "linear":
        return merge_linear(models, spec.weights, exclude=spec.exclude)
    base = checkpoints[spec.base]  # type: ignore[index]
    fn = merge_ties if spec.method == "ties" else merge_dare
    return fn(base, models, spec.weights, spec.densities, seed=spec.seed, exclude=spec.exclude)
