"""Sequential multi-stage training with pluggable forgetting mitigations."""
from __future__ import annotations

import csv
import math
import os
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import merge as merging
from ..lora import LoraAdapter, fold_lora
from ..replay import build_augmented_manifest, plan_replay
from ..tensor_store import Checkpoint
from .model import ToyModel, loss_and_grads
from .optim import AdamW, lr_at
from .tasks import StageTask, make_stage_tasks

DEFAULT_REPLAY_RATIO = 0.05
DEFAULT_ALPHA_BASE = 16.0
DEFAULT_SCALE_ALPHA = 14.0


class DivergenceError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite training loss {loss} at step {step}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    warmup_ratio: float = 0.1
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    hidden: int = 64

    def __post_init__(self):
        if not (0.0 <= self.warmup_ratio <= 1.0):
            raise ValueError("warmup_ratio must lie in [0, 1]")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ValueError("learning_rate must be positive")


def _as_arrays(data) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, StageTask):
        return data.X_train, data.y_train
    X, y = data
    return np.asarray(X, dtype=np.float64), np.asarray(y)


def train_stage(model: ToyModel, data, cfg: TrainConfig, stage: int = 0) -> ToyModel:
    """Train a copy of ``model`` with AdamW and linear warmup; ``stage`` salts the batch order.

    ``data`` is a :class:`StageTask` (its train split) or an ``(X, y)`` pair.
    Optimizer state starts fresh at every stage.
    """
    X, y = _as_arrays(data)
    d, _, c = model.dims
    if X.ndim != 2 or X.shape[1] != d:
        raise ValueError(f"inputs have shape {X.shape}, model expects {d} features")
    if len(y) and (y.min() < 0 or y.max() >= c):
        raise ValueError("labels out of range for the model's classes")
    out = model.copy()
    if cfg.epochs == 0 or len(y) == 0:
        return out
    n = len(y)
    per_epoch = math.ceil(n / cfg.batch_size)
    total = per_epoch * cfg.epochs
    opt = AdamW(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    rng = np.random.default_rng([int(cfg.seed), int(stage), 0xBA7C])
    params = out.params()
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for b in range(per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            loss, grads = loss_and_grads(out, X[idx], y[idx])
            step += 1
            if not math.isfinite(loss):
                raise DivergenceError(step, loss)
            opt.step(params, grads, lr_at(step, total, cfg.learning_rate, cfg.warmup_ratio))
    return out


def evaluate(model: ToyModel, task: StageTask) -> float:
    if len(task.y_test) == 0:
        raise ValueError(f"task {task.label} has an empty test split")
    return float(np.mean(model.predict(task.X_test) == task.y_test))


# -- mitigations ---------------------------------------------------------------

@dataclass(frozen=True)
class MitigationConfig:
    """Any combination of replay during training with a post-hoc merge or scale."""

    replay_ratio: float | None = None
    merge_method: str | None = None
    merge_weights: tuple[float, ...] | None = None
    merge_densities: tuple[float, ...] | None = None
    merge_seed: int = 0
    scale_alpha: float | None = None
    alpha_base: float = DEFAULT_ALPHA_BASE
    name: str = ""

    def __post_init__(self):
        if self.replay_ratio is not None and not (0.0 <= self.replay_ratio <= 1.0):
            raise ValueError("replay ratio must lie in [0, 1]")
        if self.merge_method is not None and self.merge_method not in merging.METHODS:
            raise ValueError(f"unknown merge method {self.merge_method!r}")
        if self.merge_method is not None and self.scale_alpha is not None:
            raise ValueError("merge and scale cannot be combined")
        if self.scale_alpha is not None and not (0 < self.scale_alpha and 0 < self.alpha_base):
            raise ValueError("scaling alphas must be positive")

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        parts = []
        if self.replay_ratio is not None:
            parts.append("replay")
        if self.merge_method is not None:
            parts.append(f"merge-{self.merge_method}")
        if self.scale_alpha is not None:
            parts.append("scale")
        return "+".join(parts) or "none"


_PART = re.compile(r"^(none|replay|merge(?:-(linear|ties|dare))?|scale)(?:\(([^)]*)\))?$")


def parse_strategy(text: str, replay_ratio: float = DEFAULT_REPLAY_RATIO, scale_alpha: float = DEFAULT_SCALE_ALPHA) -> MitigationConfig:
    """Parse names like ``none``, ``replay(0.05)``, ``merge-ties``, ``replay+scale(15)``.

    A bare ``merge`` means linear merging.
    """
    kw: dict = {"name": text}
    for part in text.replace(" ", "").split("+"):
        m = _PART.match(part)
        if not m:
            raise ValueError(f"cannot parse strategy component {part!r}")
        head, method, arg = m.group(1), m.group(2), m.group(3)
        try:
            if head == "none":
                continue
            if head == "replay":
                kw["replay_ratio"] = float(arg) if arg else replay_ratio
            elif head.startswith("merge"):
                if arg:
                    raise ValueError("merge takes no inline argument")
                kw["merge_method"] = method or "linear"
            elif head == "scale":
                kw["scale_alpha"] = float(arg) if arg else scale_alpha
        except ValueError as exc:
            raise ValueError(f"bad argument in strategy {text!r}: {exc}") from None
    return MitigationConfig(**kw)


DEFAULT_STRATEGIES = ("none", "replay", "merge-linear", "merge-ties", "merge-dare", "scale", "replay+merge", "replay+scale")


def default_merge_weights(n_snapshots: int, method: str) -> tuple[float, ...]:
    """Fallback weights when the four-snapshot presets do not apply.

    The newest model gets 0.9 and the remaining 0.1 is split evenly over the
    earlier ones (over the fine-tuned ones only for ties and dare, whose first
    snapshot is the base).
    """
    n = n_snapshots if method == "linear" else n_snapshots - 1
    if n < 1:
        raise ValueError("need at least two snapshots to merge")
    if n == 1:
        return (1.0,)
    return (0.1 / (n - 1),) * (n - 1) + (0.9,)


def merge_snapshots(snapshots: Sequence[ToyModel], mit: MitigationConfig) -> ToyModel:
    ckpts = [s.to_checkpoint() for s in snapshots]
    method = mit.merge_method
    if mit.merge_weights is None and len(ckpts) != 4:
        weights = default_merge_weights(len(ckpts), method)
        densities = None if method == "linear" else (0.9,) * len(weights)
        mit = replace(mit, merge_weights=weights, merge_densities=densities)
    if mit.merge_weights is None:
        spec = merging.load_preset(method)
        refs = {f"theta{k}.ckpt": c for k, c in enumerate(ckpts)}
        spec = replace(spec, seed=mit.merge_seed)
        return ToyModel.from_checkpoint(merging.apply_spec(spec, refs))
    weights = list(mit.merge_weights)
    if method == "linear":
        return ToyModel.from_checkpoint(merging.merge_linear(ckpts, weights))
    densities = list(mit.merge_densities or [1.0] * len(weights))
    fn = merging.merge_ties if method == "ties" else merging.merge_dare
    return ToyModel.from_checkpoint(fn(ckpts[0], ckpts[1:], weights, densities, seed=mit.merge_seed))


def discount_stage_delta(before: ToyModel, after: ToyModel, alpha_base: float, alpha_new: float) -> ToyModel:
    """``before + (alpha_new / alpha_base) * (after - before)`` realised as a LoRA fold.

    Each parameter delta becomes a full-rank adapter ``B = delta * r / alpha_base``,
    ``A = I`` so that folding at ``alpha_new`` reproduces the discounted weights.
    """
    base_t, adapters = {}, {}
    for name, p in before.params().items():
        w = p.reshape(p.shape[0], -1)
        delta = getattr(after, name).reshape(w.shape) - w
        r = w.shape[1]
        base_t[name] = w
        adapters[name] = LoraAdapter(np.eye(r), delta * (r / alpha_base), alpha_base, name)
    folded = fold_lora(Checkpoint(base_t), adapters, alpha_override=alpha_new)
    shapes = {n: p.shape for n, p in before.params().items()}
    return ToyModel(*(folded[n].astype(np.float64).reshape(shapes[n]) for n in ("W1", "b1", "W2", "b2")))


# -- reports --------------------------------------------------------------------

@dataclass
class ForgettingReport:
    """``acc[row, task]``: row 0 is the model after the original task, row k after stage k."""

    strategy: str
    row_labels: list[str]
    task_labels: list[str]
    acc: np.ndarray
    seeds: list[int] = field(default_factory=list)
    learning_rate: float = 0.0

    def __post_init__(self):
        self.acc = np.asarray(self.acc, dtype=np.float64)
        if self.acc.shape != (len(self.row_labels), len(self.task_labels)):
            raise ValueError("accuracy matrix shape does not match labels")
        if np.any((self.acc < 0) | (self.acc > 1)):
            raise ValueError("accuracies must lie in [0, 1]")

    @property
    def final(self) -> np.ndarray:
        return self.acc[-1]

    def write_csv(self, path: str | os.PathLike, std: np.ndarray | None = None) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            header = ["after_stage", *self.task_labels]
            if std is not None:
                header += [f"{t}_std" for t in self.task_labels]
            w.writerow(header)
            for r, label in enumerate(self.row_labels):
                row = [label, *(_fmt(v) for v in self.acc[r])]
                if std is not None:
                    row += [_fmt(v) for v in std[r]]
                w.writerow(row)


def _fmt(v: float) -> str:
    return f"{v:.6f}"


def _trajectory(tasks: Sequence[StageTask], cfg: TrainConfig, replay_ratio: float | None):
    d = tasks[0].X_train.shape[1]
    c = tasks[0].num_classes
    model = ToyModel.init(d, cfg.hidden, c, seed=cfg.seed)
    model = train_stage(model, tasks[0], cfg, stage=0)
    snapshots = [model]
    manifests = [t.manifest() for t in tasks] if replay_ratio is not None else None
    lookup = {t.label: t for t in tasks}
    plans = []
    for i in range(1, len(tasks)):
        if replay_ratio is None:
            data = tasks[i]
        else:
            sizes = [len(m) for m in manifests[: i + 1]]
            plan = plan_replay(sizes, i, replay_ratio, seed=cfg.seed * 1000 + i)
            plans.append(plan)
            aug = build_augmented_manifest(manifests[: i + 1], plan)
            data = _resolve(aug, lookup)
        model = train_stage(model, data, cfg, stage=i)
        snapshots.append(model)
    return snapshots, plans


def _resolve(manifest, lookup: dict[str, StageTask]) -> tuple[np.ndarray, np.ndarray]:
    rows_X, rows_y = [], []
    for rec in manifest.records:
        label, k = rec.id.rsplit(":", 1)
        t = lookup[label]
        rows_X.append(t.X_train[int(k)])
        rows_y.append(t.y_train[int(k)])
    return np.asarray(rows_X), np.asarray(rows_y)


def _report(tasks, snapshots, cfg, mit: MitigationConfig) -> ForgettingReport:
    models = list(snapshots)
    if mit.merge_method is not None:
        models[-1] = merge_snapshots(snapshots, mit)
    elif mit.scale_alpha is not None:
        models[-1] = discount_stage_delta(snapshots[-2], snapshots[-1], mit.alpha_base, mit.scale_alpha)
    acc = np.array([[evaluate(m, t) for t in tasks] for m in models])
    rows = [f"stage{k}" for k in range(len(tasks))]
    return ForgettingReport(mit.label, rows, [t.label for t in tasks], acc, [cfg.seed], cfg.learning_rate)


def run_pipeline(tasks: Sequence[StageTask], cfg: TrainConfig, mitigation: MitigationConfig) -> ForgettingReport:
    """Train through every stage and evaluate each snapshot on every task.

    Merge and scale act post hoc on the final snapshot only; the earlier rows
    are the plain training trajectory.
    """
    if len(tasks) < 2:
        raise ValueError("need the original task plus at least one stage")
    snapshots, _ = _trajectory(tasks, cfg, mitigation.replay_ratio)
    return _report(tasks, snapshots, cfg, mitigation)


def compare_strategies(
    tasks: Sequence[StageTask], cfg: TrainConfig, strategies: Sequence[MitigationConfig]
) -> list[ForgettingReport]:
    """One report per strategy; strategies sharing a replay setting share one training run."""
    if not strategies:
        raise ValueError("no strategies given")
    cache: dict = {}
    out = []
    for mit in strategies:
        key = mit.replay_ratio
        if key not in cache:
            cache[key] = _trajectory(tasks, cfg, key)[0]
        out.append(_report(tasks, cache[key], cfg, mit))
    return out


# -- multi-seed driver ------------------------------------------------------------

@dataclass(frozen=True)
class SimulationConfig:
    num_stages: int = 4
    dims: tuple[int, int, int] = (32, 64, 10)
    n_train: int = 2000
    n_test: int = 1000
    seed: int = 0
    seeds: int = 1
    strategies: tuple[str, ...] = DEFAULT_STRATEGIES
    replay_ratio: float = DEFAULT_REPLAY_RATIO
    scale_alpha: float = DEFAULT_SCALE_ALPHA
    train: TrainConfig = TrainConfig()

    @classmethod
    def from_dict(cls, raw: dict) -> "SimulationConfig":
        if not isinstance(raw, dict):
            raise ValueError("simulation config must be a JSON object")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config field(s): {sorted(unknown)}")
        kw = dict(raw)
        try:
            if "train" in kw:
                tk = kw["train"]
                if not isinstance(tk, dict):
                    raise ValueError("field 'train' must be an object")
                bad = set(tk) - set(TrainConfig.__dataclass_fields__)
                if bad:
                    raise ValueError(f"unknown field(s) in 'train': {sorted(bad)}")
                try:
                    kw["train"] = TrainConfig(**tk)
                except ValueError as exc:
                    raise ValueError(f"field 'train': {exc}") from None
            if "dims" in kw:
                if not (isinstance(kw["dims"], list) and len(kw["dims"]) == 3):
                    raise ValueError("field 'dims' must be a list [d, h, c]")
                kw["dims"] = tuple(int(x) for x in kw["dims"])
            if "strategies" in kw:
                if not isinstance(kw["strategies"], list) or not kw["strategies"]:
                    raise ValueError("field 'strategies' must be a non-empty list")
                kw["strategies"] = tuple(str(s) for s in kw["strategies"])
            for name, typ in (("num_stages", int), ("n_train", int), ("n_test", int), ("seed", int), ("seeds", int)):
                if name in kw and (not isinstance(kw[name], int) or isinstance(kw[name], bool)):
                    raise ValueError(f"field {name!r} must be an integer")
            for name in ("replay_ratio", "scale_alpha"):
                if name in kw and not isinstance(kw[name], (int, float)):
                    raise ValueError(f"field {name!r} must be a number")
        except TypeError as exc:
            raise ValueError(f"malformed config: {exc}") from None
        cfg = cls(**kw)
        checks = (
            ("seeds", cfg.seeds >= 1, ">= 1"),
            ("num_stages", cfg.num_stages >= 2, ">= 2"),
            ("n_train", cfg.n_train >= 1, ">= 1"),
            ("n_test", cfg.n_test >= 1, ">= 1"),
            ("dims", min(cfg.dims) >= 1 and cfg.dims[2] >= 2, "positive with at least two classes"),
            ("replay_ratio", 0.0 <= cfg.replay_ratio <= 1.0, "in [0, 1]"),
            ("scale_alpha", cfg.scale_alpha > 0, "positive"),
        )
        for name, ok, want in checks:
            if not ok:
                raise ValueError(f"field {name!r} must be {want}")
        for s in cfg.strategies:
            try:
                parse_strategy(s, cfg.replay_ratio, cfg.scale_alpha)
            except ValueError as exc:
                raise ValueError(f"field 'strategies': {exc}") from None
        return cfg

    def to_dict(self) -> dict:
        out = asdict(self)
        out["dims"] = list(self.dims)
        out["strategies"] = list(self.strategies)
        return out


@dataclass
class SimulationResult:
    strategies: list[str]
    per_seed: dict[int, list[ForgettingReport]]

    def stacked(self, strategy: str) -> np.ndarray:
        k = self.strategies.index(strategy)
        return np.stack([reps[k].acc for reps in self.per_seed.values()])

    def mean(self, strategy: str) -> np.ndarray:
        return self.stacked(strategy).mean(axis=0)

    def std(self, strategy: str) -> np.ndarray:
        return self.stacked(strategy).std(axis=0)


def simulate(config: SimulationConfig) -> SimulationResult:
    mits = [parse_strategy(s, config.replay_ratio, config.scale_alpha) for s in config.strategies]
    per_seed = {}
    for k in range(config.seeds):
        seed = config.seed + k
        tasks = make_stage_tasks(config.num_stages, config.dims, seed, config.n_train, config.n_test)
        cfg = replace(config.train, seed=seed, hidden=config.dims[1])
        per_seed[seed] = compare_strategies(tasks, cfg, mits)
    return SimulationResult(list(config.strategies), per_seed)


def write_outputs(result: SimulationResult, out_dir: str | os.PathLike) -> list[Path]:
    """Per-strategy CSVs, a comparison table of final-row accuracies, and a long-format curve file."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    first = next(iter(result.per_seed.values()))
    tasks = first[0].task_labels
    rows = first[0].row_labels
    multi = len(result.per_seed) > 1
    written = []
    for k, name in enumerate(result.strategies):
        rep = ForgettingReport(name, rows, tasks, result.mean(name), list(result.per_seed), first[k].learning_rate)
        path = out_dir / f"report_{_slug(name)}.csv"
        rep.write_csv(path, result.std(name) if multi else None)
        written.append(path)

    path = out_dir / "comparison.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = ["strategy"]
        for t in tasks:
            header += [f"{t}_mean", f"{t}_std"] if multi else [t]
        w.writerow(header)
        for name in result.strategies:
            mean, std = result.mean(name)[-1], result.std(name)[-1]
            row = [name]
            for j in range(len(tasks)):
                row += [_fmt(mean[j]), _fmt(std[j])] if multi else [_fmt(mean[j])]
            w.writerow(row)
    written.append(path)

    path = out_dir / "curves_long.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["strategy", "seed", "after_stage", "task", "accuracy"])
        for seed, reps in result.per_seed.items():
            for rep in reps:
                for r, rl in enumerate(rep.row_labels):
                    for j, tl in enumerate(rep.task_labels):
                        w.writerow([rep.strategy, seed, rl, tl, _fmt(rep.acc[r, j])])
    written.append(path)
    return written


def _slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "_", name).strip("_")
