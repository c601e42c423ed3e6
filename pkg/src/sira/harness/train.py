"""Training loop, evaluation pass and the optimizer."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..config import ExperimentConfig
from ..gating import gate_entropy
from ..layer import GATED_MODES
from ..numerics import RngState
from .metrics import expert_utilization, task_gate_correlation
from .model import PROJECTIONS, BaseWeights, ToyModel
from .tasks import SyntheticTask, generate_batch, make_tasks

log = logging.getLogger(__name__)

# stream offsets so setup, validation data and training never share RNG positions
SETUP_STREAM = 0
VALID_STREAM = 1 << 32
TRAIN_STREAM = 1 << 48
EVAL_CHUNK = 32


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, records: list[dict]):
        self.step = step
        self.records = records
        super().__init__(f"non-finite values at step {step}")


@dataclass
class Adam:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class Experiment:
    cfg: ExperimentConfig
    seed: int
    base: BaseWeights
    tasks: list[SyntheticTask]
    model: ToyModel
    valid: tuple[np.ndarray, np.ndarray, np.ndarray]


def build_experiment(cfg: ExperimentConfig, seed: int) -> Experiment:
    """Frozen base, tasks, fresh adapters and the validation set, all from ``seed``."""
    setup = RngState(seed, SETUP_STREAM)
    base = BaseWeights.init(cfg.d_model, setup)
    tasks = make_tasks(base, cfg.num_tasks, cfg.seq_len, setup,
                       signal=cfg.task_signal, teacher_rank=cfg.teacher_rank, teacher_scale=cfg.teacher_scale)
    model = ToyModel.init(base, cfg.layer_config(), setup, attn_dropout=cfg.attn_dropout)
    valid = generate_batch(tasks, cfg.eval_size, RngState(seed, VALID_STREAM))
    return Experiment(cfg, seed, base, tasks, model, valid)


@dataclass
class TrainState:
    step: int
    adam: Adam
    rng: RngState
    best_eval: float = float("inf")
    best_step: int = -1
    best_params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def fresh(cls, cfg: ExperimentConfig, seed: int) -> "TrainState":
        adam = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        return cls(0, adam, RngState(seed, TRAIN_STREAM))


def _eval_chunk(model: ToyModel, x, y):
    out, cache = model.forward(x, training=False)
    B, _, S = x.shape
    stats = {"sq_err": float(((out - y) ** 2).sum()), "aux": model.aux(cache) * B, "layers": {}}
    for name, lo in cache["outs"].items():
        entry = {"plans": lo.plans}
        if lo.decision is not None and model.layers[name].cfg.mode in GATED_MODES:
            p = lo.decision.probs_pre_dropout
            entry["entropy"] = gate_entropy(lo.decision) * p.shape[0]
            entry["gate_means"] = p.reshape(B, S, -1).mean(axis=1)
        stats["layers"][name] = entry
    return stats


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("SIRA_THREADS", "1")))
    except ValueError:
        return 1


def evaluate(model: ToyModel, valid) -> dict:
    """Inference-mode metrics over the validation set.

    Chunking is fixed and reductions run in chunk order, so results do not
    depend on ``SIRA_THREADS``.
    """
    x, y, task_ids = valid
    chunks = [slice(i, i + EVAL_CHUNK) for i in range(0, x.shape[0], EVAL_CHUNK)]
    workers = min(_threads(), len(chunks))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda sl: _eval_chunk(model, x[sl], y[sl]), chunks))
    else:
        parts = [_eval_chunk(model, x[sl], y[sl]) for sl in chunks]

    n_examples = x.shape[0]
    record = {
        "eval_loss": sum(p["sq_err"] for p in parts) / y.size,
        "eval_aux": sum(p["aux"] for p in parts) / n_examples,
        "gate_entropy": {},
        "utilization": {},
    }
    cvs, corrs, excluded = [], [], 0
    routed = dropped = 0
    n_tokens = x.shape[0] * x.shape[2]
    for name in PROJECTIONS:
        plans = [pl for p in parts for pl in p["layers"][name]["plans"]]
        if plans:
            shares, cv = expert_utilization(plans)
            record["utilization"][name] = shares.tolist()
            cvs.append(cv)
            routed += sum(pl.num_routed for pl in plans)
            dropped += sum(pl.num_dropped for pl in plans)
        if "entropy" in parts[0]["layers"][name]:
            record["gate_entropy"][name] = sum(p["layers"][name]["entropy"] for p in parts) / n_tokens
            means = np.concatenate([p["layers"][name]["gate_means"] for p in parts])
            if np.unique(task_ids).size >= 2:
                try:
                    r, ex = task_gate_correlation(task_ids, means)
                except ValueError:
                    r, ex = None, means.shape[1] * np.unique(task_ids).size
                if r is not None:
                    corrs.append(r)
                excluded += ex
    ent = list(record["gate_entropy"].values())
    record["gate_entropy_mean"] = float(np.mean(ent)) if ent else None
    record["drop_rate"] = dropped / routed if routed else None
    record["utilization_cv"] = float(np.mean(cvs)) if cvs else None
    record["task_gate_corr"] = float(np.mean(corrs)) if corrs else None
    record["corr_excluded_pairs"] = excluded
    return record


@dataclass
class TrainResult:
    experiment: Experiment
    state: TrainState
    records: list[dict]

    @property
    def final(self) -> dict:
        return self.records[-1]


def train(cfg: ExperimentConfig, seed: int, steps: int | None = None, state: TrainState | None = None,
          params: dict[str, np.ndarray] | None = None, on_record=None) -> TrainResult:
    """Run (or resume) training up to ``steps`` total optimizer steps.

    Evaluates at step 0, every ``eval_every`` steps and at the last step.
    ``on_record`` is called with each metrics record as it is produced.
    """
    steps = cfg.steps if steps is None else steps
    if steps < 0:
        raise ValueError("steps must be >= 0")
    exp = build_experiment(cfg, seed)
    model = exp.model
    live = model.parameters()
    if params is not None:
        for name, arr in params.items():
            live[name][...] = arr
    state = state or TrainState.fresh(cfg, seed)
    records: list[dict] = []
    window: list[tuple[float, float]] = []

    def emit(step: int):
        rec = {"step": step}
        rec["train_loss"] = float(np.mean([w[0] for w in window])) if window else None
        rec["train_aux"] = float(np.mean([w[1] for w in window])) if window else None
        rec.update(evaluate(model, exp.valid))
        window.clear()
        if rec["eval_loss"] < state.best_eval:
            state.best_eval = rec["eval_loss"]
            state.best_step = step
            state.best_params = {k: v.copy() for k, v in live.items()}
        records.append(rec)
        if on_record is not None:
            on_record(rec)

    if state.step == 0:
        emit(0)
    while state.step < steps:
        x, y, _ = generate_batch(exp.tasks, cfg.batch_size, state.rng)
        try:
            # overflow anywhere in the step counts as divergence
            with np.errstate(over="raise", invalid="raise"):
                out, cache = model.forward(x, state.rng, training=True)
                diff = out - y
                task_loss = float(np.mean(diff * diff))
                aux = model.aux(cache)
                if not np.isfinite(task_loss + aux):
                    raise FloatingPointError("non-finite loss")
                grads = model.backward(cache, 2.0 * diff / diff.size)
                state.adam.step(live, grads)
        except FloatingPointError:
            raise TrainingDiverged(state.step + 1, records) from None
        state.step += 1
        window.append((task_loss, aux))
        if state.step % cfg.eval_every == 0 or state.step == steps:
            emit(state.step)
    return TrainResult(exp, state, records)
