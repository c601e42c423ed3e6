"""Desk-scale experiment rig: synthetic tasks, toy attention model, training."""

from .metrics import expert_utilization, task_gate_correlation
from .model import PROJECTIONS, BaseWeights, ToyModel, frozen_model_forward
from .tasks import SyntheticTask, generate_batch, make_tasks
from .train import Adam, Experiment, TrainResult, TrainState, TrainingDiverged, build_experiment, evaluate, train

__all__ = [
    "PROJECTIONS",
    "Adam",
    "BaseWeights",
    "Experiment",
    "SyntheticTask",
    "ToyModel",
    "TrainResult",
    "TrainState",
    "TrainingDiverged",
    "build_experiment",
    "evaluate",
    "expert_utilization",
    "frozen_model_forward",
    "generate_batch",
    "make_tasks",
    "task_gate_correlation",
    "train",
]
