"""Synthetic stage sequence: one shared Gaussian-cluster problem seen through a
different random rotation and label permutation at every stage. Stage 0 is
unrotated and unpermuted and plays the role of the original ability."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..replay import Manifest, ManifestRecord


@dataclass(frozen=True)
class StageTask:
    label: str
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    rotation: np.ndarray
    permutation: np.ndarray

    @property
    def num_classes(self) -> int:
        return len(self.permutation)

    def manifest(self) -> Manifest:
        """Training split as a manifest; ids are ``<label>:<row>``."""
        recs = tuple(ManifestRecord(f"{self.label}:{k}", self.label, self.label, "text") for k in range(len(self.y_train)))
        return Manifest(recs, self.label)


def random_rotation(d: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.sign(np.diag(r))


def _balanced_labels(n: int, c: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % c)


def make_stage_tasks(
    num_stages: int,
    dims: tuple[int, int, int] = (32, 64, 10),
    seed: int = 0,
    n_train: int = 2000,
    n_test: int = 1000,
    noise: float = 1.0,
    separation: float = 3.5,
) -> list[StageTask]:
    """Build ``num_stages`` tasks (stage 0 plus ``num_stages - 1`` shifted stages).

    ``dims`` is ``(d, h, c)``; ``h`` is carried for symmetry with the model
    config and is not used here.
    """
    if num_stages < 2:
        raise ValueError("need at least two stages (the original task plus one more)")
    d, h, c = dims
    if d < 1 or h < 1 or c < 2:
        raise ValueError(f"degenerate dims {dims}")
    if n_train < c or n_test < c:
        raise ValueError("each split needs at least one example per class")
    rng = np.random.default_rng([int(seed), 0x7A5C])
    means = separation * rng.normal(size=(c, d)) / np.sqrt(d)

    tasks = []
    for k in range(num_stages):
        if k == 0:
            rot, perm = np.eye(d), np.arange(c)
        else:
            rot = random_rotation(d, rng)
            perm = rng.permutation(c)
            while np.array_equal(perm, np.arange(c)):
                perm = rng.permutation(c)

        def split(n):
            y = _balanced_labels(n, c, rng)
            z = means[y] + noise * rng.normal(size=(n, d))
            return z @ rot.T, perm[y]

        Xtr, ytr = split(n_train)
        Xte, yte = split(n_test)
        tasks.append(StageTask(f"stage{k}", Xtr, ytr, Xte, yte, rot, perm))
    return tasks
