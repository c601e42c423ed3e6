"""Gate analysis metrics: task/gate correlation and expert utilization."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from ..dispatch import DispatchPlan


def task_gate_correlation(task_ids, gate_means) -> tuple[float, int]:
    """Mean ``|r|`` between one-hot task indicators and per-example gate probabilities.

    ``gate_means[n, e]`` is example ``n``'s mean pre-top-k probability for expert
    ``e``. Pairs where either side has zero variance are skipped; returns
    ``(mean_abs_r, excluded_pairs)``.
    """
    task_ids = np.asarray(task_ids)
    gates = np.asarray(gate_means, dtype=np.float64)
    if gates.ndim != 2 or gates.shape[0] != task_ids.shape[0]:
        raise ValueError("gate_means must be (examples, experts) aligned with task_ids")
    tasks = np.unique(task_ids)
    if tasks.size < 2 or task_ids.size < 2:
        raise ValueError("task_gate_correlation needs >= 2 distinct tasks and >= 2 examples")
    onehot = (task_ids[:, None] == tasks[None, :]).astype(np.float64)
    oc = onehot - onehot.mean(axis=0)
    gc = gates - gates.mean(axis=0)
    cov = oc.T @ gc
    denom = np.sqrt((oc**2).sum(axis=0))[:, None] * np.sqrt((gc**2).sum(axis=0))[None, :]
    # a constant column can leave round-off residue after centering
    gate_ok = gc.std(axis=0) > 1e-12 * np.maximum(1.0, np.abs(gates).max(axis=0))
    valid = (oc.std(axis=0) > 0)[:, None] & gate_ok[None, :]
    excluded = int(valid.size - valid.sum())
    if not valid.any():
        raise ValueError("task_gate_correlation: every (task, expert) pair has zero variance")
    r = np.abs(cov[valid] / denom[valid])
    return float(r.mean()), excluded


def expert_utilization(plans: Iterable[DispatchPlan]) -> tuple[np.ndarray, float]:
    """Accepted-token share per expert and its coefficient of variation."""
    plans = list(plans)
    if not plans:
        raise ValueError("expert_utilization needs at least one plan")
    counts = np.sum([p.accepted_counts for p in plans], axis=0).astype(np.float64)
    total = counts.sum()
    if total == 0:
        return counts, 0.0
    shares = counts / total
    return shares, float(shares.std() / shares.mean())
