"""One-block single-head attention model with an adapter on each of Q, K, V, O.

Everything except the adapters is frozen: the token embedding, the four base
projections and the output head. Sequences are ``(d, S)`` column blocks; a
batch ``(B, d, S)`` is flattened to ``(d, B*S)`` with each sequence contiguous
so that dispatch groups line up with sequences.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from ..experts import FrozenProjection
from ..layer import LayerOutput, SiraConfig, SiraLayer
from ..numerics import RngState, dropout, softmax, softmax_backward

PROJECTIONS = ("q", "k", "v", "o")


@dataclass
class BaseWeights:
    emb: np.ndarray
    q: FrozenProjection
    k: FrozenProjection
    v: FrozenProjection
    o: FrozenProjection
    head: np.ndarray

    @classmethod
    def init(cls, d: int, rng: RngState) -> "BaseWeights":
        g = rng.generator()
        mats = [g.standard_normal((d, d)) / np.sqrt(d) for _ in range(6)]
        emb, head = mats[0], mats[5]
        emb.flags.writeable = False
        head.flags.writeable = False
        return cls(emb, *(FrozenProjection(m) for m in mats[1:5]), head)

    def named(self) -> dict[str, np.ndarray]:
        out = {"frozen.emb": self.emb}
        for name in PROJECTIONS:
            out[f"frozen.{name}.w0"] = getattr(self, name).w0
        out["frozen.head"] = self.head
        return out

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.named().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()


def flatten(x: np.ndarray) -> np.ndarray:
    """``(B, d, S)`` -> ``(d, B*S)``."""
    B, d, S = x.shape
    return x.transpose(1, 0, 2).reshape(d, B * S)


def unflatten(x: np.ndarray, B: int) -> np.ndarray:
    d, n = x.shape
    return x.reshape(d, B, n // B).transpose(1, 0, 2)


def attend(q, k, v):
    """Per-sequence softmax attention on ``(B, d, S)`` blocks; returns ``(a, P)``."""
    d = q.shape[1]
    scores = np.einsum("bdi,bdj->bij", q, k) / np.sqrt(d)
    P = softmax(scores, axis=2)
    return np.einsum("bdj,bij->bdi", v, P), P


def frozen_model_forward(base: BaseWeights, x: np.ndarray, deltas: dict[str, np.ndarray] | None = None) -> np.ndarray:
    """Base model output ``(B, d, S)`` with optional additive weight deltas per projection."""
    deltas = deltas or {}
    B = x.shape[0]
    h = base.emb @ flatten(x)

    def proj(name, inp):
        w = getattr(base, name).w0
        if name in deltas:
            w = w + deltas[name]
        return w @ inp

    q, k, v = (unflatten(proj(n, h), B) for n in "qkv")
    a, _ = attend(q, k, v)
    z = h + proj("o", flatten(a))
    return unflatten(base.head @ z, B)


class ToyModel:
    def __init__(self, base: BaseWeights, layers: dict[str, SiraLayer], attn_dropout: float = 0.05):
        self.base = base
        self.layers = layers
        self.attn_dropout = attn_dropout

    @classmethod
    def init(cls, base: BaseWeights, cfg: SiraConfig, rng: RngState, attn_dropout: float = 0.05) -> "ToyModel":
        layers = {name: SiraLayer.init(cfg, getattr(base, name), rng) for name in PROJECTIONS}
        return cls(base, layers, attn_dropout)

    @property
    def d(self) -> int:
        return self.base.emb.shape[0]

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{name}.{k}": v for name, layer in self.layers.items() for k, v in layer.parameters().items()}

    def forward(self, x: np.ndarray, rng: RngState | None = None, training: bool = False):
        """Returns ``(output (B, d, S), cache)``."""
        B, _, S = x.shape
        h = self.base.emb @ flatten(x)
        outs: dict[str, LayerOutput] = {}
        for name in "qkv":
            outs[name] = self.layers[name].forward(h, rng, training, group_size=S)
        q, k, v = (unflatten(outs[n].y, B) for n in "qkv")
        a, P = attend(q, k, v)
        outs["o"] = self.layers["o"].forward(flatten(a), rng, training, group_size=S)
        o, mask = dropout(outs["o"].y, self.attn_dropout, rng, training)
        z = h + o
        y = self.base.head @ z
        cache = {"outs": outs, "P": P, "q": q, "k": k, "v": v, "mask": mask,
                 "keep_scale": 1.0 / (1.0 - self.attn_dropout) if training and self.attn_dropout > 0 else 1.0}
        return unflatten(y, B), cache

    def aux(self, cache) -> float:
        return float(sum(out.aux for out in cache["outs"].values()))

    def backward(self, cache, upstream: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of ``sum(upstream * output) + aux`` for every adapter parameter."""
        B = upstream.shape[0]
        outs = cache["outs"]
        dz = self.base.head.T @ flatten(upstream)
        do = dz * cache["mask"] * cache["keep_scale"]
        grads = {}
        g = self.layers["o"].backward(outs["o"], do)
        grads["o"] = g
        da = unflatten(g.x, B)
        P, q, k, v = cache["P"], cache["q"], cache["k"], cache["v"]
        dv = np.einsum("bdi,bij->bdj", da, P)
        dP = np.einsum("bdi,bdj->bij", da, v)
        ds = softmax_backward(P, dP, axis=2) / np.sqrt(q.shape[1])
        dq = np.einsum("bij,bdj->bdi", ds, k)
        dk = np.einsum("bij,bdi->bdj", ds, q)
        for name, dd in zip("qkv", (dq, dk, dv)):
            grads[name] = self.layers[name].backward(outs[name], flatten(dd))
        return {f"{name}.{k}": v for name in PROJECTIONS for k, v in grads[name].as_dict().items()}
