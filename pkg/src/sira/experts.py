"""Frozen base projection and the bank of low-rank adapter experts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import RngState, ShapeError, as_matrix

__all__ = [
    "FrozenProjection",
    "LoraExpert",
    "ExpertBank",
    "init_expert",
    "init_bank",
    "expert_forward",
    "expert_backward",
    "frozen_forward",
]


@dataclass
class FrozenProjection:
    w0: np.ndarray  # (d_out, d_in)

    def __post_init__(self):
        self.w0 = as_matrix(self.w0, "w0").copy()
        self.w0.flags.writeable = False

    @property
    def d_in(self) -> int:
        return self.w0.shape[1]

    @property
    def d_out(self) -> int:
        return self.w0.shape[0]


@dataclass
class LoraExpert:
    a: np.ndarray  # (r, d_in)
    b: np.ndarray  # (d_out, r)
    scale: float = 1.0

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    def delta(self) -> np.ndarray:
        return self.scale * (self.b @ self.a)

    def num_params(self) -> int:
        return self.a.size + self.b.size


class ExpertBank:
    """``E`` experts sharing one shape, stored as stacked arrays.

    ``a`` has shape ``(E, r, d_in)`` and ``b`` has shape ``(E, d_out, r)``.
    Indexing returns a :class:`LoraExpert` whose arrays are views into the
    stack, so optimizer updates on the stack are visible per expert.
    """

    def __init__(self, a: np.ndarray, b: np.ndarray, scale: float = 1.0):
        a = np.ascontiguousarray(a, dtype=np.float64)
        b = np.ascontiguousarray(b, dtype=np.float64)
        if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[1] != b.shape[2]:
            raise ShapeError("ExpertBank", a.shape, b.shape)
        self.a = a
        self.b = b
        self.scale = float(scale)

    @classmethod
    def from_experts(cls, experts: list[LoraExpert]) -> "ExpertBank":
        if not experts:
            raise ValueError("an expert bank needs at least one expert")
        shapes = {(e.a.shape, e.b.shape, e.scale) for e in experts}
        if len(shapes) != 1:
            raise ValueError("all experts in a bank must share (d_in, d_out, r, scale)")
        return cls(np.stack([e.a for e in experts]), np.stack([e.b for e in experts]), experts[0].scale)

    def __len__(self) -> int:
        return self.a.shape[0]

    def __getitem__(self, e: int) -> LoraExpert:
        return LoraExpert(self.a[e], self.b[e], self.scale)

    @property
    def experts(self) -> list[LoraExpert]:
        return [self[e] for e in range(len(self))]

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    @property
    def d_in(self) -> int:
        return self.a.shape[2]

    @property
    def d_out(self) -> int:
        return self.b.shape[1]


def init_expert(d_in: int, d_out: int, r: int, rng: RngState, init_std: float = 0.02, scale: float = 1.0) -> LoraExpert:
    if min(d_in, d_out, r) < 1:
        raise ValueError(f"expert dims must be positive, got d_in={d_in} d_out={d_out} r={r}")
    if init_std < 0:
        raise ValueError("init_std must be non-negative")
    a = init_std * rng.generator().standard_normal((r, d_in))
    return LoraExpert(a=a, b=np.zeros((d_out, r)), scale=scale)


def init_bank(num_experts: int, d_in: int, d_out: int, r: int, rng: RngState,
              init_std: float = 0.02, scale: float = 1.0) -> ExpertBank:
    if num_experts < 1:
        raise ValueError("num_experts must be >= 1")
    return ExpertBank.from_experts(
        [init_expert(d_in, d_out, r, rng, init_std, scale) for _ in range(num_experts)]
    )


def _check_input(x: np.ndarray, d_in: int, op: str) -> np.ndarray:
    x = as_matrix(x, op)
    if x.shape[0] != d_in:
        raise ShapeError(op, (d_in,), x.shape)
    return x


def expert_forward(e: LoraExpert, x) -> np.ndarray:
    """``scale * b @ (a @ x)`` for one column or a block of token columns."""
    x = _check_input(x, e.a.shape[1], "expert_forward")
    return e.scale * (e.b @ (e.a @ x))


def frozen_forward(p: FrozenProjection, x) -> np.ndarray:
    x = _check_input(x, p.d_in, "frozen_forward")
    return p.w0 @ x


def expert_backward(e: LoraExpert, x, upstream):
    """Gradients of ``sum(upstream * expert_forward(e, x))``.

    Returns ``(grad_a, grad_b, grad_x)``.
    """
    x = _check_input(x, e.a.shape[1], "expert_backward")
    upstream = as_matrix(upstream, "upstream")
    if upstream.shape != (e.b.shape[0], x.shape[1]):
        raise ShapeError("expert_backward", upstream.shape, (e.b.shape[0], x.shape[1]))
    ax = e.a @ x
    bt_up = e.scale * (e.b.T @ upstream)
    grad_b = e.scale * (upstream @ ax.T)
    grad_a = bt_up @ x.T
    grad_x = e.a.T @ bt_up
    return grad_a, grad_b, grad_x
