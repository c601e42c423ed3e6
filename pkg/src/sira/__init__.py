"""Sparse mixture of low-rank adapter experts on frozen projections.

Core pieces: top-k softmax gating with expert dropout, capacity-limited
dispatch with a load-balancing auxiliary loss, and a layer with exact
analytic gradients. ``sira.harness`` trains it on synthetic multitask data.
"""

from .dispatch import DispatchPlan, aux_loss, build_plan
from .experts import ExpertBank, FrozenProjection, LoraExpert
from .gating import GateDecision, GateNetwork, gate_forward
from .layer import MODES, SiraConfig, SiraLayer, count_trainable_params
from .numerics import RngState, ShapeError

__all__ = [
    "DispatchPlan",
    "ExpertBank",
    "FrozenProjection",
    "GateDecision",
    "GateNetwork",
    "LoraExpert",
    "MODES",
    "RngState",
    "ShapeError",
    "SiraConfig",
    "SiraLayer",
    "aux_loss",
    "build_plan",
    "count_trainable_params",
    "gate_forward",
]

__version__ = "0.1.0"
