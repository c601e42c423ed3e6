"""The adapter layer: frozen projection plus a routed mixture of LoRA experts.

For token ``s`` the output is ``W0 x_s + sum_e G[s, e] * W_e(x_s)`` where the
sum runs over the routings accepted by dispatch. Modes other than ``sira``
swap the routing rule to give the comparison baselines:

``dense_lora``      one expert, gate value 1, no dispatch
``full_moe``        every expert, learned soft weights, no dropout or capacity
``random_expert``   one random expert per training call; uniform average at inference
``static_routing``  fixed hash of token position picks ``K`` experts, weight ``1/K``
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .dispatch import DispatchPlan, aux_loss, aux_loss_grad, build_plans
from .experts import ExpertBank, FrozenProjection, init_bank
from .gating import GateDecision, GateNetwork, gate_backward, gate_forward, init_gate
from .numerics import RngState, ShapeError, as_matrix

__all__ = [
    "MODES",
    "GATED_MODES",
    "SiraConfig",
    "SiraLayer",
    "LayerOutput",
    "LayerGrads",
    "count_trainable_params",
    "static_route",
]

MODES = ("sira", "dense_lora", "full_moe", "random_expert", "static_routing")
GATED_MODES = ("sira", "full_moe")
GROUPS = ("sequence", "batch")


@dataclass
class SiraConfig:
    d_in: int
    d_out: int
    rank: int = 4
    num_experts: int = 16
    top_k: int = 4
    capacity: int = 4
    expert_dropout_rate: float = 0.5
    aux_weight: float = 0.01
    mode: str = "sira"
    capacity_at_inference: bool = True
    group: str = "sequence"
    init_std: float = 0.02
    scale: float = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.group not in GROUPS:
            raise ValueError(f"unknown group {self.group!r}; expected one of {GROUPS}")
        if min(self.d_in, self.d_out, self.rank, self.num_experts) < 1:
            raise ValueError("d_in, d_out, rank and num_experts must be >= 1")
        if not 1 <= self.top_k <= self.num_experts:
            raise ValueError(f"top_k must lie in [1, num_experts={self.num_experts}], got {self.top_k}")
        if self.capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {self.capacity}")
        if not 0.0 <= self.expert_dropout_rate < 1.0:
            raise ValueError("expert_dropout_rate must lie in [0, 1)")
        if self.aux_weight < 0:
            raise ValueError("aux_weight must be >= 0")

    @property
    def bank_size(self) -> int:
        return 1 if self.mode == "dense_lora" else self.num_experts

    def to_dict(self) -> dict:
        return asdict(self)


def count_trainable_params(cfg: SiraConfig) -> int:
    per_expert = cfg.rank * (cfg.d_in + cfg.d_out)
    if cfg.mode == "dense_lora":
        return per_expert
    total = cfg.num_experts * per_expert
    if cfg.mode in GATED_MODES:
        total += cfg.d_in * cfg.num_experts
    return total


def static_route(num_tokens: int, num_experts: int, k: int, group_size: int | None = None) -> np.ndarray:
    """Fixed ``(S, k)`` expert choice from a multiplicative hash of token position."""
    pos = np.arange(num_tokens, dtype=np.uint64)
    if group_size:
        pos = pos % np.uint64(group_size)
    h = (pos * np.uint64(2654435761)) & np.uint64(0xFFFFFFFF)
    first = (h % np.uint64(num_experts)).astype(np.int64)
    return (first[:, None] + np.arange(k)[None, :]) % num_experts


@dataclass
class LayerOutput:
    y: np.ndarray
    aux: float
    aux_raw: float
    decision: GateDecision | None
    plans: list[DispatchPlan]
    _cache: dict = field(default_factory=dict, repr=False)


@dataclass
class LayerGrads:
    a: np.ndarray
    b: np.ndarray
    theta_g: np.ndarray | None
    x: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        out = {"a": self.a, "b": self.b}
        if self.theta_g is not None:
            out["theta_g"] = self.theta_g
        return out


class SiraLayer:
    def __init__(self, cfg: SiraConfig, frozen: FrozenProjection, bank: ExpertBank, gate: GateNetwork | None = None):
        if (frozen.d_in, frozen.d_out) != (cfg.d_in, cfg.d_out):
            raise ShapeError("SiraLayer", frozen.w0.shape, (cfg.d_out, cfg.d_in))
        if (bank.d_in, bank.d_out, bank.rank, len(bank)) != (cfg.d_in, cfg.d_out, cfg.rank, cfg.bank_size):
            raise ValueError("expert bank shape does not match config")
        if cfg.mode in GATED_MODES:
            if gate is None or gate.theta_g.shape != (cfg.d_in, cfg.num_experts):
                raise ValueError(f"mode {cfg.mode!r} needs a ({cfg.d_in}, {cfg.num_experts}) gate")
        self.cfg = cfg
        self.frozen = frozen
        self.bank = bank
        self.gate = gate if cfg.mode in GATED_MODES else None

    @classmethod
    def init(cls, cfg: SiraConfig, frozen: FrozenProjection, rng: RngState) -> "SiraLayer":
        bank = init_bank(cfg.bank_size, cfg.d_in, cfg.d_out, cfg.rank, rng, cfg.init_std, cfg.scale)
        gate = init_gate(cfg.d_in, cfg.num_experts, rng, cfg.init_std) if cfg.mode in GATED_MODES else None
        return cls(cfg, frozen, bank, gate)

    def parameters(self) -> dict[str, np.ndarray]:
        params = {"a": self.bank.a, "b": self.bank.b}
        if self.gate is not None:
            params["theta_g"] = self.gate.theta_g
        return params

    def num_trainable(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def _route(self, x, rng, training, group_size):
        cfg, S, E = self.cfg, x.shape[1], len(self.bank)
        groups = group_size if cfg.group == "sequence" else None
        capacity = cfg.capacity if (training or cfg.capacity_at_inference) else None
        if cfg.mode == "dense_lora":
            return None, [], np.ones((S, 1), dtype=bool), np.ones((S, 1))
        if cfg.mode in GATED_MODES:
            sparse = cfg.mode == "sira"
            decision = gate_forward(
                self.gate, x,
                k=cfg.top_k if sparse else E,
                rate=cfg.expert_dropout_rate if sparse else 0.0,
                rng=rng, training=training,
            )
            plans = build_plans(decision, capacity if sparse else None, groups)
        elif cfg.mode == "random_expert":
            if training:
                if rng is None:
                    raise ValueError("random_expert training needs an RngState")
                scores = np.zeros((S, E))
                scores[:, int(rng.generator().integers(E))] = 1.0
                decision = GateDecision.from_scores(scores, 1)
            else:
                decision = GateDecision.from_scores(np.full((S, E), 1.0 / E), E)
            plans = build_plans(decision, None, groups)
        else:
            k = cfg.top_k
            chosen = static_route(S, E, k, groups)
            scores = np.zeros((S, E))
            np.put_along_axis(scores, chosen, 1.0 / k, axis=1)
            decision = GateDecision.from_scores(scores, k)
            plans = build_plans(decision, capacity, groups)
        active = np.vstack([p.accepted for p in plans])
        return decision, plans, active, np.where(active, decision.gate_values, 0.0)

    def forward(self, x, rng: RngState | None = None, training: bool = False,
                group_size: int | None = None) -> LayerOutput:
        """Layer output for token columns ``x`` of shape ``(d_in, S)``.

        ``group_size`` is the sequence length when ``x`` holds several
        sequences back to back; capacity is then enforced per sequence.
        """
        x = as_matrix(x, "layer_forward")
        if x.shape[0] != self.cfg.d_in:
            raise ShapeError("layer_forward", (self.cfg.d_in,), x.shape)
        decision, plans, active, weights = self._route(x, rng, training, group_size)

        y = self.frozen.w0 @ x
        terms = []
        scale = self.bank.scale
        for e in range(active.shape[1]):
            idx = np.flatnonzero(active[:, e])
            if idx.size == 0:
                continue
            xe = x[:, idx]
            ax = self.bank.a[e] @ xe
            out = scale * (self.bank.b[e] @ ax)
            y[:, idx] += weights[idx, e] * out
            terms.append((e, idx, ax, out))

        aux_raw = 0.0
        aux_grad = None
        if self.cfg.mode == "sira":
            bounds = np.cumsum([0] + [p.group_size for p in plans])
            aux_grad = np.zeros_like(weights)
            for p, lo, hi in zip(plans, bounds[:-1], bounds[1:]):
                sub = decision.probs_post_dropout[lo:hi]
                aux_raw += aux_loss(p, sub.mean(axis=0))
                aux_grad[lo:hi] = aux_loss_grad(p) / (p.group_size * len(plans))
            aux_raw /= len(plans)
            aux_grad *= self.cfg.aux_weight
        cache = {"owner": self, "x": x, "weights": weights, "terms": terms, "aux_grad": aux_grad}
        return LayerOutput(y, self.cfg.aux_weight * aux_raw, aux_raw, decision, plans, cache)

    def backward(self, out: LayerOutput, upstream) -> LayerGrads:
        """Exact gradients of ``sum(upstream * y) + aux`` with routing held fixed."""
        cache = out._cache
        if cache.get("owner") is not self:
            raise ValueError("layer_backward: forward cache belongs to a different layer")
        x, weights = cache["x"], cache["weights"]
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != out.y.shape:
            raise ShapeError("layer_backward", upstream.shape, out.y.shape)

        grad_x = self.frozen.w0.T @ upstream
        grad_a = np.zeros_like(self.bank.a)
        grad_b = np.zeros_like(self.bank.b)
        d_gate = np.zeros_like(weights)
        scale = self.bank.scale
        for e, idx, ax, term in cache["terms"]:
            u = upstream[:, idx]
            d_gate[idx, e] = (u * term).sum(axis=0)
            uw = u * weights[idx, e]
            grad_b[e] = scale * (uw @ ax.T)
            bu = scale * (self.bank.b[e].T @ uw)
            grad_a[e] = bu @ x[:, idx].T
            grad_x[:, idx] += self.bank.a[e].T @ bu

        grad_theta = None
        if self.gate is not None:
            grad_theta, gx = gate_backward(self.gate, out.decision, x, d_gate, cache["aux_grad"])
            grad_x += gx
        return LayerGrads(grad_a, grad_b, grad_theta, grad_x)

