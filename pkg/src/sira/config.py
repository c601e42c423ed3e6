"""Experiment configuration: strict JSON with documented defaults.

Only ``mode`` and ``steps`` are required. Unknown keys are rejected. Every
field except ``out_dir`` feeds the echoed config written into each artifact.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .layer import SiraConfig

REQUIRED = ("mode", "steps")
# fields that never influence results and so stay out of the echo/digest
NOT_ECHOED = ("out_dir",)


class ConfigError(ValueError):
    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        self.message = message
        self.field = field
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


@dataclass
class ExperimentConfig:
    mode: str
    steps: int
    seeds: list[int] = field(default_factory=lambda: [0])
    # model / data
    d_model: int = 32
    seq_len: int = 16
    num_tasks: int = 4
    batch_size: int = 16
    task_signal: float = 3.0
    teacher_rank: int = 4
    teacher_scale: float = 1.0
    # adapter
    rank: int = 4
    num_experts: int = 16
    top_k: int = 4
    capacity: int = 4
    expert_dropout_rate: float = 0.5
    aux_weight: float = 0.01
    capacity_at_inference: bool = True
    group: str = "sequence"
    init_std: float = 0.02
    lora_scale: float = 1.0
    # optimisation
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    attn_dropout: float = 0.05
    # evaluation
    eval_every: int = 100
    eval_size: int = 128
    out_dir: str = "runs"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        types = {f.name: f.type for f in dataclasses.fields(self)}
        for name, value in dataclasses.asdict(self).items():
            kind = types[name]
            if kind == "int" and (isinstance(value, bool) or not isinstance(value, int)):
                raise ConfigError(f"expected an integer, got {value!r}", name)
            if kind == "float":
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise ConfigError(f"expected a number, got {value!r}", name)
                setattr(self, name, float(value))
            if kind == "bool" and not isinstance(value, bool):
                raise ConfigError(f"expected true/false, got {value!r}", name)
            if kind == "str" and not isinstance(value, str):
                raise ConfigError(f"expected a string, got {value!r}", name)
        if not self.seeds or not all(isinstance(s, int) and s >= 0 for s in self.seeds):
            raise ConfigError("expected a non-empty list of non-negative integers", "seeds")
        for name in ("steps",):
            if getattr(self, name) < 0:
                raise ConfigError("must be >= 0", name)
        for name in ("d_model", "seq_len", "num_tasks", "batch_size", "eval_every", "eval_size", "teacher_rank"):
            if getattr(self, name) < 1:
                raise ConfigError("must be >= 1", name)
        if not 0.0 <= self.attn_dropout < 1.0:
            raise ConfigError("must lie in [0, 1)", "attn_dropout")
        if self.lr <= 0:
            raise ConfigError("must be > 0", "lr")
        try:
            self.layer_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def layer_config(self) -> SiraConfig:
        return SiraConfig(
            d_in=self.d_model, d_out=self.d_model, rank=self.rank, num_experts=self.num_experts,
            top_k=self.top_k, capacity=self.capacity, expert_dropout_rate=self.expert_dropout_rate,
            aux_weight=self.aux_weight, mode=self.mode, capacity_at_inference=self.capacity_at_inference,
            group=self.group, init_std=self.init_std, scale=self.lora_scale,
        )

    def for_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, seeds=[seed])

    def echo(self) -> dict:
        d = dataclasses.asdict(self)
        for name in NOT_ECHOED:
            d.pop(name)
        return d

    def canonical_json(self) -> str:
        return json.dumps(self.echo(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> bytes:
        return hashlib.sha256(self.canonical_json().encode()).digest()

    @classmethod
    def from_dict(cls, data: dict, lines: dict[str, int] | None = None) -> "ExperimentConfig":
        lines = lines or {}
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError("unknown key", key, lines.get(key))
        for key in REQUIRED:
            if key not in data:
                raise ConfigError("missing required field", key)
        try:
            return cls(**data)
        except ConfigError as exc:
            if exc.field is not None and exc.line is None and exc.field in lines:
                raise ConfigError(exc.message, exc.field, lines[exc.field]) from None
            raise

    @classmethod
    def load(cls, path: str | Path, overrides: list[str] | None = None) -> "ExperimentConfig":
        text = Path(path).read_text()
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc.msg} (column {exc.colno})", line=exc.lineno) from None
        data = apply_overrides(data, overrides or [])
        return cls.from_dict(data, _key_lines(text))


def _key_lines(text: str) -> dict[str, int]:
    lines = {}
    for n, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if stripped.startswith('"'):
            key = stripped[1:].split('"', 1)[0]
            lines.setdefault(key, n)
    return lines


def parse_override(item: str) -> tuple[str, object]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not KEY=VALUE")
    key, raw = item.split("=", 1)
    key = key.strip()
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    data = dict(data)
    for item in overrides:
        key, value = parse_override(item)
        data[key] = value
    return data
