"""Bit-exact binary checkpoints (``.sira``).

Layout, all integers little-endian::

    b"SIRA"  u32 version
    32B sha256(config_json)  u32 len  config_json (utf-8, canonical)
    u64 step  u64 rng_seed  u64 rng_position
    u64 adam_t  i64 best_step  f64 best_eval
    32B probe digest
    u32 n_tensors
    n_tensors x { u16 len  name  u8 ndim  u32 dims[ndim]  u32 crc32  f64 payload[prod(dims)] }

Tensor order is preserved, so save -> load -> save reproduces the file byte
for byte. The probe digest is the sha256 of a fixed inference forward pass of
the stored model and lets :func:`checkpoint_roundtrip` confirm that a loaded
checkpoint reproduces the model that wrote it.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .harness.model import ToyModel
from .harness.train import Adam, TrainResult, TrainState, build_experiment
from .numerics import RngState

MAGIC = b"SIRA"
VERSION = 1
PROBE_SEED = 0x51_5A_A0
PROBE_BATCH = 2

_HEAD = struct.Struct("<4sI")
_STATE = struct.Struct("<QQQQqd")


class CheckpointError(ValueError):
    pass


class UnsupportedVersion(CheckpointError):
    pass


class CorruptCheckpoint(CheckpointError):
    def __init__(self, message: str, tensor: str | None = None):
        self.tensor = tensor
        super().__init__(message)


class ConfigMismatch(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config_json: str
    step: int
    rng: RngState
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    adam_t: int = 0
    best_eval: float = float("inf")
    best_step: int = -1
    probe_digest: bytes = bytes(32)
    bad_tensors: list[str] = field(default_factory=list, repr=False)

    @property
    def config_digest(self) -> bytes:
        return hashlib.sha256(self.config_json.encode()).digest()

    @property
    def config(self) -> ExperimentConfig:
        return ExperimentConfig.from_dict(json.loads(self.config_json))

    def to_bytes(self) -> bytes:
        cfg = self.config_json.encode()
        parts = [_HEAD.pack(MAGIC, VERSION), self.config_digest, struct.pack("<I", len(cfg)), cfg,
                 _STATE.pack(self.step, self.rng.seed, self.rng.position, self.adam_t, self.best_step, self.best_eval),
                 self.probe_digest, struct.pack("<I", len(self.tensors))]
        for name, arr in self.tensors.items():
            raw = name.encode()
            payload = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(struct.pack("<I", zlib.crc32(payload)))
            parts.append(payload)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes, strict: bool = True) -> "Checkpoint":
        """Parse a checkpoint. With ``strict=False`` payload checksum failures
        are collected in ``bad_tensors`` instead of raising."""
        view = memoryview(data)
        pos = 0

        def take(n: int) -> bytes:
            nonlocal pos
            if pos + n > len(view):
                raise CorruptCheckpoint("truncated checkpoint")
            out = bytes(view[pos:pos + n])
            pos += n
            return out

        magic, version = _HEAD.unpack(take(_HEAD.size))
        if magic != MAGIC:
            raise CorruptCheckpoint(f"bad magic {magic!r}")
        if version != VERSION:
            raise UnsupportedVersion(f"unsupported checkpoint version {version} (expected {VERSION})")
        digest = take(32)
        (n,) = struct.unpack("<I", take(4))
        config_json = take(n).decode()
        if hashlib.sha256(config_json.encode()).digest() != digest:
            raise CorruptCheckpoint("config block does not match its digest")
        step, seed, position, adam_t, best_step, best_eval = _STATE.unpack(take(_STATE.size))
        probe = take(32)
        (count,) = struct.unpack("<I", take(4))
        tensors, bad = {}, []
        for _ in range(count):
            (ln,) = struct.unpack("<H", take(2))
            name = take(ln).decode()
            (ndim,) = struct.unpack("<B", take(1))
            dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
            (crc,) = struct.unpack("<I", take(4))
            payload = take(8 * int(np.prod(dims, dtype=np.int64)))
            if zlib.crc32(payload) != crc:
                if strict:
                    raise CorruptCheckpoint(f"tensor {name!r} fails its checksum", name)
                bad.append(name)
            tensors[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
        if pos != len(view):
            raise CorruptCheckpoint("trailing bytes after tensor table")
        return cls(config_json, step, RngState(seed, position), tensors, adam_t, best_eval, best_step, probe, bad)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path, expected: ExperimentConfig | None = None) -> "Checkpoint":
        ckpt = cls.from_bytes(Path(path).read_bytes())
        if expected is not None and ckpt.config_digest != expected.digest():
            raise ConfigMismatch(f"{path}: checkpoint was written for a different config")
        return ckpt


def probe_digest(model: ToyModel, cfg: ExperimentConfig) -> bytes:
    g = RngState(PROBE_SEED).generator()
    x = g.standard_normal((PROBE_BATCH, cfg.d_model, cfg.seq_len))
    out, _ = model.forward(x, training=False)
    return hashlib.sha256(np.ascontiguousarray(out, dtype="<f8").tobytes()).digest()


def _adapter_tensors(params: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in params.items()}


def from_training(result: TrainResult, best: bool = False) -> Checkpoint:
    """Snapshot a training run: the final resumable state, or the best-eval weights."""
    exp, state = result.experiment, result.state
    cfg = exp.cfg.for_seed(exp.seed)
    model = exp.model
    tensors = dict(exp.base.named())
    if best:
        live = model.parameters()
        saved = {k: v.copy() for k, v in live.items()}
        for k, v in state.best_params.items():
            live[k][...] = v
        try:
            tensors.update(_adapter_tensors(state.best_params, "adapter"))
            digest = probe_digest(model, cfg)
        finally:
            for k, v in saved.items():
                live[k][...] = v
        return Checkpoint(cfg.canonical_json(), state.best_step, state.rng.copy(), tensors,
                          best_eval=state.best_eval, best_step=state.best_step, probe_digest=digest)
    tensors.update(_adapter_tensors(model.parameters(), "adapter"))
    for name in model.parameters():
        if name in state.adam.m:
            tensors[f"adam.m.{name}"] = state.adam.m[name]
            tensors[f"adam.v.{name}"] = state.adam.v[name]
    tensors.update(_adapter_tensors(state.best_params, "best"))
    return Checkpoint(cfg.canonical_json(), state.step, state.rng.copy(), tensors, state.adam.t,
                      state.best_eval, state.best_step, probe_digest(model, cfg))


def _strip(tensors: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    n = len(prefix) + 1
    return {k[n:]: v.copy() for k, v in tensors.items() if k.startswith(prefix + ".")}


def restore(ckpt: Checkpoint):
    """Rebuild ``(config, seed, model experiment, train state)`` from a checkpoint."""
    cfg = ckpt.config
    seed = cfg.seeds[0]
    exp = build_experiment(cfg, seed)
    for name, arr in exp.base.named().items():
        stored = ckpt.tensors.get(name)
        if stored is None or not np.array_equal(stored, arr):
            raise ConfigMismatch(f"frozen tensor {name!r} does not match the rebuilt base model")
    params = _strip(ckpt.tensors, "adapter")
    live = exp.model.parameters()
    if set(params) != set(live):
        raise CorruptCheckpoint("adapter tensor set does not match the config")
    for name, arr in params.items():
        live[name][...] = arr
    adam = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps,
                _strip(ckpt.tensors, "adam.m"), _strip(ckpt.tensors, "adam.v"), ckpt.adam_t)
    state = TrainState(ckpt.step, adam, ckpt.rng.copy(), ckpt.best_eval, ckpt.best_step,
                       _strip(ckpt.tensors, "best"))
    return cfg, seed, exp, state


def checkpoint_roundtrip(path: str | Path) -> dict:
    """Load, replay the probe forward pass and re-serialize; report the first divergence."""
    data = Path(path).read_bytes()
    ckpt = Checkpoint.from_bytes(data, strict=False)
    report = {"path": str(path), "step": ckpt.step, "ok": False, "first_divergent_tensor": None,
              "probe_match": False, "reserialized_identical": False}
    if ckpt.bad_tensors:
        report["first_divergent_tensor"] = ckpt.bad_tensors[0]
        return report
    try:
        cfg, _, exp, _ = restore(ckpt)
    except CheckpointError as exc:
        report["error"] = str(exc)
        return report
    report["probe_match"] = probe_digest(exp.model, cfg) == ckpt.probe_digest
    report["reserialized_identical"] = ckpt.to_bytes() == data
    report["ok"] = report["probe_match"] and report["reserialized_identical"]
    return report
