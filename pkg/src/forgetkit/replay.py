"""Experience-replay manifests.

Stage ``i`` trains on its own dataset plus ``round_half_up(s * |D_i|)``
examples drawn without replacement from every earlier dataset ``D_0..D_{i-1}``
(capped at each source's size). Draws are seeded per source so the plan is
reproducible and independent of how many sources there are.
"""
from __future__ import annotations

import json
import os
from collections import Counter
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Sequence

import numpy as np

TASKS = ("asr", "tts", "sqa", "text")
ORDERS = ("shuffle", "concat")
_SHUFFLE_STREAM = 2**32 - 1


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    dataset_label: str
    stage: str
    task: str
    payload_ref: str = ""
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ManifestError(f"record {self.id!r}: task {self.task!r} not in {TASKS}")

    def to_json(self) -> dict:
        out = dict(self.extra)
        out.update(
            id=self.id, dataset_label=self.dataset_label, stage=self.stage, task=self.task, payload_ref=self.payload_ref
        )
        return out

    @classmethod
    def from_json(cls, raw: dict) -> "ManifestRecord":
        try:
            extra = {k: v for k, v in raw.items() if k not in ("id", "dataset_label", "stage", "task", "payload_ref")}
            return cls(
                id=str(raw["id"]),
                dataset_label=str(raw["dataset_label"]),
                stage=str(raw["stage"]),
                task=str(raw["task"]),
                payload_ref=str(raw.get("payload_ref", "")),
                extra=extra,
            )
        except KeyError as exc:
            raise ManifestError(f"manifest record missing field {exc.args[0]!r}") from None


@dataclass(frozen=True)
class Manifest:
    records: tuple[ManifestRecord, ...]
    stage_label: str = ""
    source_counts: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        dup = [k for k, n in Counter(r.id for r in self.records).items() if n > 1]
        if dup:
            raise ManifestError(f"duplicate ids in manifest: {dup[:5]}")
        if not self.source_counts:
            counts = Counter(r.dataset_label for r in self.records)
            object.__setattr__(self, "source_counts", dict(sorted(counts.items())))

    def __len__(self) -> int:
        return len(self.records)

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]


def read_manifest(path: str | os.PathLike, stage_label: str = "") -> Manifest:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(ManifestRecord.from_json(json.loads(line)))
            except (json.JSONDecodeError, ManifestError) as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
    return Manifest(tuple(records), stage_label)


def write_manifest(manifest: Manifest, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in manifest.records:
            fh.write(json.dumps(r.to_json(), sort_keys=True, ensure_ascii=False) + "\n")


# -- planning -----------------------------------------------------------------

def replay_count(s: float, current_size: int) -> int:
    """``round_half_up(s * current_size)``, computed in decimal so 0.005 * 999 is exactly 4.995."""
    return int((Decimal(repr(float(s))) * current_size).quantize(Decimal(1), rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class ReplayPlan:
    stage_index: int
    sampling_ratio: float
    per_source: dict[int, int]
    seed: int = 0

    def to_json(self) -> dict:
        return {
            "i": self.stage_index,
            "s": self.sampling_ratio,
            "seed": self.seed,
            "per_source": {str(j): n for j, n in sorted(self.per_source.items())},
        }

    @classmethod
    def from_json(cls, raw: dict) -> "ReplayPlan":
        return cls(int(raw["i"]), float(raw["s"]), {int(j): int(n) for j, n in raw["per_source"].items()}, int(raw["seed"]))


def plan_replay(stage_sizes: Sequence[int], i: int, s: float, seed: int = 0) -> ReplayPlan:
    """Per-source replay counts for stage ``i`` given sizes of ``D_0..D_i`` (or more)."""
    if not (1 <= i < len(stage_sizes)):
        raise ValueError(f"stage index {i} out of range for {len(stage_sizes)} dataset sizes")
    if not (0.0 <= s <= 1.0):
        raise ValueError(f"sampling ratio {s} outside [0, 1]")
    if any(int(n) <= 0 for n in stage_sizes[: i + 1]):
        raise ValueError("dataset sizes must be positive")
    want = replay_count(s, int(stage_sizes[i]))
    per_source = {j: min(want, int(stage_sizes[j])) for j in range(i)}
    return ReplayPlan(i, float(s), per_source, int(seed))


def source_rng(seed: int, j: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(j)])


def build_augmented_manifest(manifests: Sequence[Manifest], plan: ReplayPlan, order: str = "shuffle") -> Manifest:
    """``D_i`` together with the planned draws from each earlier manifest.

    Replayed records keep their original dataset label, stage and task.
    """
    i = plan.stage_index
    if len(manifests) <= i:
        raise ManifestError(f"plan is for stage {i} but only {len(manifests)} manifests were given")
    if set(plan.per_source) != set(range(i)):
        raise ManifestError(f"plan covers sources {sorted(plan.per_source)}, expected 0..{i - 1}")
    if order not in ORDERS:
        raise ValueError(f"order must be one of {ORDERS}")
    expected = replay_count(plan.sampling_ratio, len(manifests[i]))
    for j in range(i):
        if plan.per_source[j] != min(expected, len(manifests[j])):
            raise ManifestError(
                f"plan asks {plan.per_source[j]} from source {j} but manifest sizes imply {min(expected, len(manifests[j]))}"
            )

    current = manifests[i]
    pool = list(current.records)
    counts = {current.stage_label or "D%d" % i: len(current)}
    for j in range(i):
        src = manifests[j]
        k = plan.per_source[j]
        picks = source_rng(plan.seed, j).choice(len(src), size=k, replace=False) if k else []
        pool.extend(src.records[int(p)] for p in picks)
        counts[src.stage_label or "D%d" % j] = k

    if order == "shuffle":
        perm = np.random.default_rng([int(plan.seed), _SHUFFLE_STREAM, i]).permutation(len(pool))
        pool = [pool[int(p)] for p in perm]
    try:
        return Manifest(tuple(pool), current.stage_label, counts)
    except ManifestError as exc:
        raise ManifestError(f"replayed ids collide with stage {i} ids ({exc})") from None


def manifest_from_ids(ids: Iterable[str], stage_label: str, task: str = "text") -> Manifest:
    """Convenience constructor for in-memory manifests."""
    return Manifest(tuple(ManifestRecord(x, stage_label, stage_label, task) for x in ids), stage_label)
