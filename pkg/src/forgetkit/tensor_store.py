"""Checkpoint container: named float32 tensors with bit-exact serialization.

File layout::

    [8 bytes]  little-endian u64 header length N
    [N bytes]  UTF-8 JSON header, space-padded to a multiple of 8
    [...]      data section, raw little-endian f32 values

The header maps each tensor name to ``{"dtype", "shape", "data_offsets"}``
where offsets are ``[begin, end)`` relative to the start of the data section.
Free-form string metadata lives under the reserved ``"__metadata__"`` key.
Tensors are laid out in lexicographic name order, so the bytes on disk are a
pure function of the checkpoint value.
"""
from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

METADATA_KEY = "__metadata__"
DTYPE = "F32"
_LE_F32 = np.dtype("<f4")


class CheckpointError(Exception):
    """Base class for container problems. ``tensor`` names the culprit when known."""

    def __init__(self, message: str, tensor: str | None = None):
        super().__init__(message)
        self.tensor = tensor


class MalformedHeaderError(CheckpointError):
    pass


class TruncatedDataError(CheckpointError):
    pass


class DuplicateTensorError(CheckpointError):
    pass


class NonFiniteValueError(CheckpointError, ValueError):
    pass


def _as_tensor(name: str, value) -> np.ndarray:
    arr = np.array(value, dtype=np.float32, copy=True)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValueError(f"tensor {name!r} contains NaN or Inf", tensor=name)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Checkpoint:
    """Immutable mapping of tensor name to float32 array, plus string metadata.

    Tensors are copied on construction, made read-only and kept in
    lexicographic name order.
    """

    tensors: Mapping[str, np.ndarray] = field(default_factory=dict)
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        for name in sorted(self.tensors):
            if not isinstance(name, str) or not name:
                raise ValueError("tensor names must be non-empty strings")
            if name == METADATA_KEY:
                raise ValueError(f"{METADATA_KEY!r} is reserved")
            clean[name] = _as_tensor(name, self.tensors[name])
        meta = {}
        for k, v in self.metadata.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise TypeError("metadata must map str to str")
            meta[k] = v
        object.__setattr__(self, "tensors", clean)
        object.__setattr__(self, "metadata", dict(sorted(meta.items())))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __contains__(self, name: object) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {n: t.shape for n, t in self.tensors.items()}

    def with_metadata(self, **extra: str) -> "Checkpoint":
        return Checkpoint(self.tensors, {**self.metadata, **extra})

    def equals(self, other: "Checkpoint", check_metadata: bool = True) -> bool:
        """Bit-exact equality (compares raw float32 bytes, so -0.0 != 0.0)."""
        if self.names() != other.names():
            return False
        for n in self.tensors:
            a, b = self.tensors[n], other.tensors[n]
            if a.shape != b.shape or a.tobytes() != b.tobytes():
                return False
        return not check_metadata or dict(self.metadata) == dict(other.metadata)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return self.equals(other)

    __hash__ = None  # type: ignore[assignment]


# -- compatibility ---------------------------------------------------------

MISSING_IN_LEFT = "missing-in-left"
MISSING_IN_RIGHT = "missing-in-right"
SHAPE_MISMATCH = "shape-mismatch"


@dataclass(frozen=True)
class CompatibilityReport:
    mismatches: tuple[tuple[str, str], ...] = ()

    @property
    def compatible(self) -> bool:
        return not self.mismatches

    def __bool__(self) -> bool:
        return self.compatible

    def describe(self) -> str:
        if self.compatible:
            return "compatible"
        return "; ".join(f"{name}: {reason}" for name, reason in self.mismatches)


def validate_compatible(a: Checkpoint, b: Checkpoint) -> CompatibilityReport:
    found = []
    for name in sorted(set(a.tensors) | set(b.tensors)):
        if name not in a.tensors:
            found.append((name, MISSING_IN_LEFT))
        elif name not in b.tensors:
            found.append((name, MISSING_IN_RIGHT))
        elif a.tensors[name].shape != b.tensors[name].shape:
            found.append((name, SHAPE_MISMATCH))
    return CompatibilityReport(tuple(found))


class IncompatibleCheckpointsError(CheckpointError, ValueError):
    def __init__(self, report: CompatibilityReport, context: str = ""):
        prefix = f"{context}: " if context else ""
        first = report.mismatches[0][0] if report.mismatches else None
        super().__init__(prefix + "incompatible checkpoints (" + report.describe() + ")", tensor=first)
        self.report = report


def require_compatible(checkpoints: Iterable[Checkpoint], context: str = "") -> None:
    it = iter(checkpoints)
    try:
        ref = next(it)
    except StopIteration:
        return
    for other in it:
        report = validate_compatible(ref, other)
        if not report.compatible:
            raise IncompatibleCheckpointsError(report, context)


# -- serialization -----------------------------------------------------------

def to_bytes(ckpt: Checkpoint) -> bytes:
    header: dict[str, object] = {}
    if ckpt.metadata:
        header[METADATA_KEY] = dict(ckpt.metadata)
    chunks = []
    offset = 0
    for name, arr in ckpt.tensors.items():
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValueError(f"refusing to write non-finite tensor {name!r}", tensor=name)
        raw = np.ascontiguousarray(arr, dtype=_LE_F32).tobytes()
        header[name] = {"dtype": DTYPE, "shape": list(arr.shape), "data_offsets": [offset, offset + len(raw)]}
        chunks.append(raw)
        offset += len(raw)
    text = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    text += b" " * (-len(text) % 8)
    return struct.pack("<Q", len(text)) + text + b"".join(chunks)


def write_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    payload = to_bytes(ckpt)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def _reject_duplicates(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise DuplicateTensorError(f"duplicate tensor name {key!r} in header", tensor=key)
        out[key] = value
    return out


def from_bytes(blob: bytes) -> Checkpoint:
    if len(blob) < 8:
        raise MalformedHeaderError("file shorter than the 8-byte header length prefix")
    (hlen,) = struct.unpack("<Q", blob[:8])
    if hlen > len(blob) - 8:
        raise MalformedHeaderError(f"header length {hlen} exceeds file size {len(blob)}")
    try:
        header = json.loads(blob[8 : 8 + hlen].decode("utf-8"), object_pairs_hook=_reject_duplicates)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"header is not valid UTF-8 JSON: {exc}") from None
    if not isinstance(header, dict):
        raise MalformedHeaderError("header must be a JSON object")

    data = memoryview(blob)[8 + hlen :]
    metadata = header.pop(METADATA_KEY, {}) or {}
    if not isinstance(metadata, dict) or not all(isinstance(v, str) for v in metadata.values()):
        raise MalformedHeaderError("__metadata__ must map strings to strings")

    tensors = {}
    for name, entry in header.items():
        if not name:
            raise MalformedHeaderError("zero-length tensor name", tensor=name)
        if not isinstance(entry, dict):
            raise MalformedHeaderError(f"entry for {name!r} is not an object", tensor=name)
        if entry.get("dtype") != DTYPE:
            raise MalformedHeaderError(f"tensor {name!r} has unsupported dtype {entry.get('dtype')!r}", tensor=name)
        shape = entry.get("shape")
        offsets = entry.get("data_offsets")
        if not isinstance(shape, list) or not all(isinstance(d, int) and not isinstance(d, bool) and d >= 0 for d in shape):
            raise MalformedHeaderError(f"tensor {name!r} has an invalid shape {shape!r}", tensor=name)
        if (
            not isinstance(offsets, list)
            or len(offsets) != 2
            or not all(isinstance(o, int) and not isinstance(o, bool) and o >= 0 for o in offsets)
            or offsets[1] < offsets[0]
        ):
            raise MalformedHeaderError(f"tensor {name!r} has invalid data_offsets {offsets!r}", tensor=name)
        begin, end = offsets
        expected = 4 * math.prod(shape)
        if end - begin != expected:
            raise MalformedHeaderError(
                f"tensor {name!r}: shape {shape} needs {expected} bytes, offsets span {end - begin}", tensor=name
            )
        if end > len(data):
            raise TruncatedDataError(
                f"tensor {name!r}: data section has {len(data)} bytes, need up to offset {end}", tensor=name
            )
        arr = np.frombuffer(data[begin:end], dtype=_LE_F32).astype(np.float32).reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValueError(f"tensor {name!r} contains NaN or Inf", tensor=name)
        tensors[name] = arr
    return Checkpoint(tensors, metadata)


def read_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
