"""Synthetic multitask data.

Each task is a teacher: the frozen toy model with its own random low-rank
weight deltas on the value and output projections. Inputs are Gaussian token
sequences shifted by a task-specific offset, so the task is recoverable from
the token activations but never given to the model explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..numerics import RngState
from .model import BaseWeights, frozen_model_forward

TEACHER_PROJECTIONS = ("v", "o")


@dataclass
class SyntheticTask:
    task_id: int
    offset: np.ndarray  # (d,)
    deltas: dict[str, np.ndarray]
    base: BaseWeights = field(repr=False)
    seq_len: int = 16

    @property
    def d(self) -> int:
        return self.offset.shape[0]

    def sample_inputs(self, n: int, g: np.random.Generator) -> np.ndarray:
        return g.standard_normal((n, self.d, self.seq_len)) + self.offset[None, :, None]

    def targets(self, x: np.ndarray) -> np.ndarray:
        return frozen_model_forward(self.base, x, self.deltas)


def make_tasks(base: BaseWeights, num_tasks: int, seq_len: int, rng: RngState,
               signal: float = 3.0, teacher_rank: int = 4, teacher_scale: float = 1.0) -> list[SyntheticTask]:
    d = base.emb.shape[0]
    tasks = []
    for t in range(num_tasks):
        g = rng.generator()
        offset = g.standard_normal(d)
        offset *= signal / np.linalg.norm(offset)
        deltas = {}
        for name in TEACHER_PROJECTIONS:
            u = g.standard_normal((d, teacher_rank)) / np.sqrt(d)
            w = g.standard_normal((teacher_rank, d)) / np.sqrt(d)
            deltas[name] = teacher_scale * (u @ w)
        tasks.append(SyntheticTask(t, offset, deltas, base, seq_len))
    return tasks


def generate_batch(tasks: list[SyntheticTask], batch_size: int, rng: RngState):
    """Draw ``batch_size`` sequences with tasks chosen uniformly.

    Returns ``(inputs, targets, task_ids)`` with inputs/targets ``(B, d, S)``.
    """
    if not tasks:
        raise ValueError("generate_batch needs at least one task")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    g = rng.generator()
    task_ids = g.integers(len(tasks), size=batch_size)
    ref = tasks[0]
    x = np.empty((batch_size, ref.d, ref.seq_len))
    y = np.empty_like(x)
    for t, task in enumerate(tasks):
        idx = np.flatnonzero(task_ids == t)
        if idx.size == 0:
            continue
        x[idx] = task.sample_inputs(idx.size, g)
        y[idx] = task.targets(x[idx])
    return x, y, np.array([tasks[t].task_id for t in task_ids])
