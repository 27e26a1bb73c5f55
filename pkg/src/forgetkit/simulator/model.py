"""Two-layer tanh perceptron with hand-written backprop (float64)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..tensor_store import Checkpoint

PARAM_NAMES = ("W1", "b1", "W2", "b2")


@dataclass
class ToyModel:
    """``logits = W2 tanh(W1 x + b1) + b2``."""

    W1: np.ndarray  # [h, d]
    b1: np.ndarray  # [h]
    W2: np.ndarray  # [c, h]
    b2: np.ndarray  # [c]

    @classmethod
    def init(cls, d: int, h: int, c: int, seed: int = 0) -> "ToyModel":
        rng = np.random.default_rng([int(seed), 0x51])
        return cls(
            rng.normal(0.0, 1.0 / np.sqrt(d), (h, d)),
            np.zeros(h),
            rng.normal(0.0, 1.0 / np.sqrt(h), (c, h)),
            np.zeros(c),
        )

    @property
    def dims(self) -> tuple[int, int, int]:
        h, d = self.W1.shape
        return d, h, self.W2.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in PARAM_NAMES}

    def copy(self) -> "ToyModel":
        return ToyModel(*(getattr(self, n).copy() for n in PARAM_NAMES))

    def logits(self, X: np.ndarray) -> np.ndarray:
        return np.tanh(X @ self.W1.T + self.b1) @ self.W2.T + self.b2

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(X), axis=1)

    def to_checkpoint(self) -> Checkpoint:
        return Checkpoint(self.params())

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "ToyModel":
        return cls(*(ckpt[n].astype(np.float64) for n in PARAM_NAMES))


def loss_and_grads(model: ToyModel, X: np.ndarray, y: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    """Mean softmax cross-entropy and its gradients."""
    n = X.shape[0]
    a = X @ model.W1.T + model.b1
    hid = np.tanh(a)
    z = hid @ model.W2.T + model.b2
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), y].mean()

    dz = np.exp(logp)
    dz[np.arange(n), y] -= 1.0
    dz /= n
    gW2 = dz.T @ hid
    gb2 = dz.sum(axis=0)
    da = (dz @ model.W2) * (1.0 - hid**2)
    gW1 = da.T @ X
    gb1 = da.sum(axis=0)
    return float(loss), {"W1": gW1, "b1": gb1, "W2": gW2, "b2": gb2}


def loss_only(model: ToyModel, X: np.ndarray, y: np.ndarray) -> float:
    z = model.logits(X)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(X.shape[0]), y].mean())
