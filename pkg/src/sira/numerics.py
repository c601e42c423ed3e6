"""Dense double-precision kernel shared by every other module.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. Token
activations are stored column-wise: a batch of ``S`` tokens of width ``d`` is a
``(d, S)`` array.

Randomness goes through :class:`RngState`, a ``(seed, position)`` pair backed
by the Philox-4x64 counter-based generator. Every call to
:meth:`RngState.generator` hands out an independent stream keyed by the seed
and addressed by the current position, then advances the position by one, so
the same pair always yields the same draws regardless of platform or of what
other streams were consumed in between.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "RngState",
    "as_matrix",
    "matmul",
    "softmax",
    "softmax_backward",
    "dropout",
    "grad_check",
]

_U64 = (1 << 64) - 1


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        joined = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


@dataclass
class RngState:
    seed: int = 0
    position: int = 0

    def __post_init__(self):
        if not (0 <= self.seed <= _U64 and 0 <= self.position <= _U64):
            raise ValueError("seed and position must be unsigned 64-bit integers")

    def generator(self) -> np.random.Generator:
        """Return the stream at the current position and advance by one."""
        # position sits in the high 128 bits of the counter; draws only touch the low words
        bitgen = np.random.Philox(key=self.seed, counter=self.position << 128)
        self.position += 1
        return np.random.Generator(bitgen)

    def copy(self) -> "RngState":
        return RngState(self.seed, self.position)


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise ShapeError(name, arr.shape)
    return arr


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return a @ b


def softmax(v, axis: int = 0) -> np.ndarray:
    """Numerically stable softmax along ``axis`` (columns by default)."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("softmax of an empty vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("softmax input contains non-finite values")
    z = np.exp(v - v.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def softmax_backward(p: np.ndarray, upstream: np.ndarray, axis: int = 0) -> np.ndarray:
    """Vector-Jacobian product of softmax given its output ``p``."""
    return p * (upstream - (p * upstream).sum(axis=axis, keepdims=True))


def dropout(v, rate: float, rng: RngState | None, training: bool = True):
    """Inverted dropout. Returns ``(output, mask)`` with a 0/1 float mask."""
    v = np.asarray(v, dtype=np.float64)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return v.copy(), np.ones_like(v)
    if rng is None:
        raise ValueError("training-mode dropout needs an RngState")
    keep = rng.generator().random(v.shape) >= rate
    mask = keep.astype(np.float64)
    return v * mask / (1.0 - rate), mask


def grad_check(
    f: Callable[[Sequence[np.ndarray]], tuple[float, Sequence[np.ndarray]]],
    params: Sequence[np.ndarray],
    eps: float = 1e-5,
) -> float:
    """Compare analytic gradients against central differences.

    ``f(params)`` must return ``(loss, grads)`` with one gradient array per
    parameter. Parameters are perturbed in place and restored afterwards.
    Returns ``max |analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    loss, grads = f(params)
    if not np.isfinite(loss):
        raise FloatingPointError("objective is not finite at the base point")
    grads = [np.array(g, dtype=np.float64, copy=True) for g in grads]
    worst = 0.0
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError("grad_check", p.shape, g.shape)
        flat = p.reshape(-1)
        if not np.shares_memory(flat, p):
            raise ValueError("grad_check needs contiguous parameter arrays")
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up, _ = f(params)
            flat[i] = orig - eps
            down, _ = f(params)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError("objective is not finite near the base point")
            numeric = (up - down) / (2.0 * eps)
            analytic = g.reshape(-1)[i]
            err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
            worst = max(worst, err)
    return worst
