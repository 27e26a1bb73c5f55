"""Desk-scale continual-learning simulator."""
from .model import ToyModel, loss_and_grads
from .optim import AdamW, lr_at
from .pipeline import (
    DEFAULT_STRATEGIES,
    DivergenceError,
    ForgettingReport,
    MitigationConfig,
    SimulationConfig,
    TrainConfig,
    compare_strategies,
    evaluate,
    parse_strategy,
    run_pipeline,
    simulate,
    train_stage,
    write_outputs,
)
from .tasks import StageTask, make_stage_tasks

__all__ = [
    "AdamW",
    "DEFAULT_STRATEGIES",
    "DivergenceError",
    "ForgettingReport",
    "MitigationConfig",
    "SimulationConfig",
    "StageTask",
    "ToyModel",
    "TrainConfig",
    "compare_strategies",
    "evaluate",
    "loss_and_grads",
    "lr_at",
    "make_stage_tasks",
    "parse_strategy",
    "run_pipeline",
    "simulate",
    "train_stage",
    "write_outputs",
]
