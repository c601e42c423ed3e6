"""Gating network: softmax scores, expert dropout, then top-k selection.

Per token ``s`` with activation ``x_s``::

    p_s = softmax(theta_g^T x_s)
    q_s = dropout(p_s)            # inverted, training only
    G_s = q_s restricted to the k largest entries of q_s

Gate values are not renormalized after dropout or selection.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .numerics import RngState, ShapeError, as_matrix, dropout, softmax, softmax_backward

log = logging.getLogger(__name__)

__all__ = [
    "GateNetwork",
    "GateDecision",
    "init_gate",
    "select_top_k",
    "gate_forward",
    "gate_backward",
    "mean_gate_per_expert",
    "gate_entropy",
]


@dataclass
class GateNetwork:
    theta_g: np.ndarray  # (d_in, E)

    @property
    def num_experts(self) -> int:
        return self.theta_g.shape[1]

    @property
    def d_in(self) -> int:
        return self.theta_g.shape[0]


def init_gate(d_in: int, num_experts: int, rng: RngState, init_std: float = 0.02) -> GateNetwork:
    return GateNetwork(init_std * rng.generator().standard_normal((d_in, num_experts)))


@dataclass
class GateDecision:
    """Routing record for ``S`` tokens and ``E`` experts.

    All per-token arrays are indexed ``[s, e]``; ``selected`` is ``(S, k)`` and
    lists each token's experts in decreasing score order.
    """

    probs_pre_dropout: np.ndarray
    probs_post_dropout: np.ndarray
    dropout_mask: np.ndarray
    selected: np.ndarray
    gate_values: np.ndarray
    dropout_scale: float = 1.0

    @property
    def num_tokens(self) -> int:
        return self.gate_values.shape[0]

    @property
    def num_experts(self) -> int:
        return self.gate_values.shape[1]

    @property
    def k(self) -> int:
        return self.selected.shape[1]

    def selection_mask(self) -> np.ndarray:
        mask = np.zeros(self.gate_values.shape, dtype=bool)
        np.put_along_axis(mask, self.selected, True, axis=1)
        return mask

    @classmethod
    def from_scores(cls, scores, k: int, probs=None) -> "GateDecision":
        """Decision from already-dropped-out scores ``(S, E)``; no dropout applied."""
        q = np.atleast_2d(np.asarray(scores, dtype=np.float64))
        p = q if probs is None else np.atleast_2d(np.asarray(probs, dtype=np.float64))
        k = _clamp_k(k, q.shape[1])
        selected = select_top_k(q, k)
        values = np.zeros_like(q)
        np.put_along_axis(values, selected, np.take_along_axis(q, selected, axis=1), axis=1)
        return cls(p, q, np.ones_like(q), selected, values)


def _clamp_k(k: int, num_experts: int) -> int:
    if k < 1:
        raise ValueError(f"top-k needs k >= 1, got {k}")
    if k > num_experts:
        log.warning("top_k=%d exceeds num_experts=%d; clamping", k, num_experts)
        return num_experts
    return k


def select_top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries per row, ties to the lowest index."""
    # stable sort on the negated scores keeps equal entries in index order
    order = np.argsort(-scores, axis=1, kind="stable")
    return order[:, :k]


def gate_forward(g: GateNetwork, x, k: int, rate: float, rng: RngState | None, training: bool) -> GateDecision:
    x = as_matrix(x, "gate_forward")
    if x.shape[0] != g.d_in:
        raise ShapeError("gate_forward", g.theta_g.shape, x.shape)
    if not np.all(np.isfinite(x)):
        raise ValueError("gate_forward: non-finite activations")
    k = _clamp_k(k, g.num_experts)
    probs = softmax(x.T @ g.theta_g, axis=1)
    post, mask = dropout(probs, rate, rng, training)
    selected = select_top_k(post, k)
    values = np.zeros_like(post)
    np.put_along_axis(values, selected, np.take_along_axis(post, selected, axis=1), axis=1)
    scale = 1.0 / (1.0 - rate) if training and rate > 0 else 1.0
    return GateDecision(probs, post, mask, selected, values, scale)


def gate_backward(g: GateNetwork, d: GateDecision, x, upstream_gate, upstream_probs=None):
    """Backpropagate through top-k, the fixed dropout mask and the softmax.

    ``upstream_gate`` is the gradient w.r.t. ``gate_values``; it only flows
    through selected entries. ``upstream_probs`` (optional) is a gradient
    w.r.t. the full post-dropout probabilities, e.g. from the aux loss.
    Returns ``(grad_theta_g, grad_x)``.
    """
    x = as_matrix(x, "gate_backward")
    shape = (x.shape[1], g.num_experts)
    if d.gate_values.shape != shape or d.dropout_mask.shape != shape:
        raise ValueError(f"gate_backward: decision shape {d.gate_values.shape} does not match forward {shape}")
    upstream_gate = np.asarray(upstream_gate, dtype=np.float64)
    if upstream_gate.shape != shape:
        raise ShapeError("gate_backward", upstream_gate.shape, shape)
    d_post = np.where(d.selection_mask(), upstream_gate, 0.0)
    if upstream_probs is not None:
        d_post = d_post + upstream_probs
    d_probs = d_post * d.dropout_mask * d.dropout_scale
    d_logits = softmax_backward(d.probs_pre_dropout, d_probs, axis=1)
    return x @ d_logits, g.theta_g @ d_logits.T


def mean_gate_per_expert(d: GateDecision) -> np.ndarray:
    if d.num_tokens < 1:
        raise ValueError("mean_gate_per_expert needs at least one token")
    return d.probs_post_dropout.mean(axis=0)


def gate_entropy(d: GateDecision) -> float:
    """Mean per-token entropy (nats) of the pre-dropout, pre-top-k probabilities."""
    p = d.probs_pre_dropout
    if p.shape[0] < 1:
        raise ValueError("gate_entropy needs at least one token")
    plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return float(0.0 - plogp.sum(axis=1).mean())
