"""Capacity-constrained token dispatch and the load-balancing auxiliary loss.

Routings are visited greedily: tokens in increasing index, and within a token
its selected experts in decreasing gate value. A routing is accepted while the
expert has fewer than ``capacity`` accepted tokens; otherwise it is dropped.
A token whose routings are all dropped falls back to the frozen projection.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .gating import GateDecision

__all__ = ["DispatchPlan", "build_plan", "build_plans", "aux_loss", "aux_loss_grad", "plan_drop_rate"]


@dataclass(frozen=True, eq=False)
class DispatchPlan:
    selected: np.ndarray  # (S, k) in visiting order
    accepted: np.ndarray  # (S, E) bool
    gate_values: np.ndarray  # (S, E)
    routed_counts: np.ndarray  # (E,) pre-capacity demand c_e
    capacity: int | None

    @property
    def group_size(self) -> int:
        return self.accepted.shape[0]

    @property
    def num_experts(self) -> int:
        return self.accepted.shape[1]

    @cached_property
    def per_expert_tokens(self) -> list[list[tuple[int, float]]]:
        return [
            [(int(s), float(self.gate_values[s, e])) for s in np.flatnonzero(self.accepted[:, e])]
            for e in range(self.num_experts)
        ]

    @cached_property
    def dropped_pairs(self) -> list[tuple[int, int]]:
        ok = np.take_along_axis(self.accepted, self.selected, axis=1)
        rows, cols = np.nonzero(~ok)
        return [(int(s), int(self.selected[s, j])) for s, j in zip(rows, cols)]

    @property
    def accepted_counts(self) -> np.ndarray:
        return self.accepted.sum(axis=0)

    @property
    def num_routed(self) -> int:
        return int(self.selected.size)

    @property
    def num_dropped(self) -> int:
        return self.num_routed - int(self.accepted.sum())


def build_plan(d: GateDecision, capacity: int | None) -> DispatchPlan:
    """Greedy capacity-limited assignment; ``capacity=None`` accepts everything."""
    if capacity is not None and capacity < 1:
        raise ValueError(f"capacity must be >= 1, got {capacity}")
    chosen = d.selection_mask()
    if capacity is None:
        accepted = chosen
    else:
        # each token picks an expert at most once, so a routing is accepted iff
        # fewer than `capacity` earlier tokens picked the same expert
        accepted = chosen & (np.cumsum(chosen, axis=0) <= capacity)
    return DispatchPlan(
        selected=d.selected,
        accepted=accepted,
        gate_values=d.gate_values,
        routed_counts=chosen.sum(axis=0),
        capacity=capacity,
    )


def build_plans(d: GateDecision, capacity: int | None, group_size: int | None = None) -> list[DispatchPlan]:
    """One plan per consecutive group of ``group_size`` tokens (whole input if None)."""
    S = d.num_tokens
    if group_size is None or group_size >= S:
        return [build_plan(d, capacity)]
    if S % group_size:
        raise ValueError(f"{S} tokens do not split into groups of {group_size}")
    plans = []
    for start in range(0, S, group_size):
        sl = slice(start, start + group_size)
        sub = GateDecision(
            d.probs_pre_dropout[sl], d.probs_post_dropout[sl], d.dropout_mask[sl],
            d.selected[sl], d.gate_values[sl], d.dropout_scale,
        )
        plans.append(build_plan(sub, capacity))
    return plans


def aux_loss(plan: DispatchPlan, m) -> float:
    """``(1/E) * sum_e (c_e / S) * m_e`` with demand counts ``c_e``."""
    m = np.asarray(m, dtype=np.float64)
    E, S = plan.num_experts, plan.group_size
    if S < 1:
        raise ValueError("aux_loss needs at least one token")
    return float(np.dot(plan.routed_counts / S, m) / E)


def aux_loss_grad(plan: DispatchPlan) -> np.ndarray:
    """Gradient of :func:`aux_loss` w.r.t. ``m`` (counts held constant)."""
    return plan.routed_counts / (plan.group_size * plan.num_experts)


def plan_drop_rate(plan: DispatchPlan) -> float:
    if plan.num_routed == 0:
        return 0.0
    return plan.num_dropped / plan.num_routed
