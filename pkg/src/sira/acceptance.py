"""Property and acceptance checks, shared by ``sira verify`` and the test suite.

Each ``check_*`` function returns a :class:`CheckResult`. Checks 8-10 train
the toy benchmark (about two minutes on one core); the rest run in seconds.
"""

from __future__ import annotations

import dataclasses
import functools
import itertools
import json
import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from statistics import median

import numpy as np

from .config import ExperimentConfig
from .dispatch import aux_loss, build_plan
from .experts import ExpertBank, FrozenProjection
from .gating import GateDecision, GateNetwork, gate_entropy
from .harness.model import BaseWeights, ToyModel, frozen_model_forward
from .harness.train import train
from .layer import SiraConfig, SiraLayer
from .numerics import RngState, grad_check

BENCH_SEEDS = (0, 1, 2)
# E=4, K=1, r=4; capacity equals the sequence length so routing alone decides
BENCHMARK = dict(mode="sira", steps=2000, eval_every=500, num_experts=4, top_k=1, rank=4, capacity=16, lr=2e-3)
SIZE_GRID = [2, 4, 6, 8, 10, 12]
GATING_VARIANTS = ["sira", "no_aux_loss", "no_expert_dropout", "smoe_dropout"]


@dataclass
class CheckResult:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"[{tag}] {self.number:2d} {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _timed(number: int, name: str):
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs) -> CheckResult:
            t0 = time.perf_counter()
            passed, detail = fn(*args, **kwargs)
            return CheckResult(number, name, bool(passed), detail, time.perf_counter() - t0)
        return run
    return wrap


def greedy_dispatch_oracle(selected_rows, gate_rows, capacity):
    """Straight-line greedy simulation used as the independent dispatch reference.

    ``selected_rows[s]`` lists token ``s``'s experts in visiting order.
    Returns ``(per_expert, dropped, routed_counts)``.
    """
    num_experts = len(gate_rows[0])
    per_expert = [[] for _ in range(num_experts)]
    dropped = []
    routed = [0] * num_experts
    for s, experts in enumerate(selected_rows):
        for e in experts:
            routed[e] += 1
            if len(per_expert[e]) < capacity:
                per_expert[e].append((s, gate_rows[s][e]))
            else:
                dropped.append((s, e))
    return per_expert, dropped, routed


def _random_layer(g: np.random.Generator, **overrides) -> SiraLayer:
    d_in = int(g.integers(2, 9))
    d_out = int(g.integers(2, 9))
    cfg = SiraConfig(**{**dict(d_in=d_in, d_out=d_out, rank=int(g.integers(1, 3)),
                               num_experts=int(g.integers(1, 5)), top_k=1, capacity=1,
                               expert_dropout_rate=0.0), **overrides})
    E, r = cfg.bank_size, cfg.rank
    bank = ExpertBank(g.standard_normal((E, r, cfg.d_in)), g.standard_normal((E, cfg.d_out, r)))
    gate = GateNetwork(g.standard_normal((cfg.d_in, cfg.num_experts)))
    return SiraLayer(cfg, FrozenProjection(g.standard_normal((cfg.d_out, cfg.d_in))), bank, gate)


@_timed(1, "zero-init identity")
def check_zero_init(n_inputs: int = 100):
    cfg = ExperimentConfig(mode="sira", steps=0)
    setup = RngState(7)
    base = BaseWeights.init(cfg.d_model, setup)
    model = ToyModel.init(base, cfg.layer_config(), setup, cfg.attn_dropout)
    g = RngState(8).generator()
    mismatches = 0
    for _ in range(n_inputs):
        x = g.standard_normal((1, cfg.d_model, cfg.seq_len)) * g.uniform(0.1, 10.0)
        out, _ = model.forward(x, training=False)
        if not np.array_equal(out, frozen_model_forward(base, x)):
            mismatches += 1
    return mismatches == 0, f"{mismatches}/{n_inputs} inputs differ bitwise"


@_timed(2, "mode equivalences")
def check_mode_equivalence(n_instances: int = 50, tol: float = 1e-12):
    g = np.random.default_rng(2)
    worst_dense = worst_moe = 0.0
    for _ in range(n_instances):
        S = int(g.integers(1, 12))
        x = g.standard_normal((int(g.integers(2, 9)), S))
        d_in = x.shape[0]
        single = _random_layer(g, d_in=d_in, num_experts=1, top_k=1, capacity=S)
        dense = SiraLayer(dataclasses.replace(single.cfg, mode="dense_lora"), single.frozen, single.bank)
        a = single.forward(x, RngState(1), training=True).y
        b = dense.forward(x, RngState(1), training=True).y
        worst_dense = max(worst_dense, float(np.abs(a - b).max()))

        E = int(g.integers(1, 5))
        sparse = _random_layer(g, d_in=d_in, num_experts=E, top_k=E, capacity=S)
        full = SiraLayer(dataclasses.replace(sparse.cfg, mode="full_moe"), sparse.frozen, sparse.bank, sparse.gate)
        a = sparse.forward(x, RngState(1), training=True).y
        b = full.forward(x, RngState(1), training=True).y
        worst_moe = max(worst_moe, float(np.abs(a - b).max()))
    ok = worst_dense < tol and worst_moe < tol
    return ok, f"max |diff| sira~dense_lora {worst_dense:.1e}, sira~full_moe {worst_moe:.1e} over {n_instances}"


def _tie_margin(layer: SiraLayer, x: np.ndarray) -> float:
    probs = (x.T @ layer.gate.theta_g)
    E, k = probs.shape[1], layer.cfg.top_k
    if k >= E:
        return math.inf
    p = np.exp(probs - probs.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    srt = -np.sort(-p, axis=1)
    return float((srt[:, k - 1] - srt[:, k]).min())


@_timed(3, "gradient correctness")
def check_gradients(n_layers: int = 20, tol: float = 1e-5, eps: float = 1e-5):
    g = np.random.default_rng(3)
    worst, built, rejected = 0.0, 0, 0
    while built < n_layers:
        E = int(g.integers(1, 5))
        k = int(g.integers(1, min(2, E) + 1))
        S = int(g.integers(2, 9))
        layer = _random_layer(g, num_experts=E, top_k=k, capacity=int(g.integers(1, S + 1)),
                              aux_weight=float(g.uniform(0.05, 1.0)))
        x = g.standard_normal((layer.cfg.d_in, S))
        if _tie_margin(layer, x) <= 1e-4:
            rejected += 1
            continue
        built += 1
        up = g.standard_normal((layer.cfg.d_out, S))

        def objective(_):
            out = layer.forward(x, None, training=True)
            grads = layer.backward(out, up)
            return float((out.y * up).sum() + out.aux), [grads.a, grads.b, grads.theta_g]

        worst = max(worst, grad_check(objective, [layer.bank.a, layer.bank.b, layer.gate.theta_g], eps))
    return worst < tol, f"max relative error {worst:.2e} over {n_layers} layers ({rejected} rejected for ties)"


def _decision_from_orderings(orderings, k: int) -> GateDecision:
    S, E = len(orderings), len(orderings[0])
    scores = np.zeros((S, E))
    for s, perm in enumerate(orderings):
        for rank, e in enumerate(perm):
            scores[s, e] = (E - rank) / (E * (E + 1) / 2)
    return GateDecision.from_scores(scores, k)


@_timed(4, "dispatch oracle (exhaustive)")
def check_dispatch_oracle(max_s: int = 6, max_e: int = 3, max_k: int = 2, max_c: int = 3):
    cases = mismatches = 0
    for E in range(1, max_e + 1):
        perms = list(itertools.permutations(range(E)))
        for S in range(1, max_s + 1):
            for orderings in itertools.product(perms, repeat=S):
                for k in range(1, min(max_k, E) + 1):
                    d = _decision_from_orderings(orderings, k)
                    sel = d.selected.tolist()
                    gates = d.gate_values.tolist()
                    for C in range(1, max_c + 1):
                        cases += 1
                        plan = build_plan(d, C)
                        per_expert, dropped, routed = greedy_dispatch_oracle(sel, gates, C)
                        if (plan.per_expert_tokens != per_expert or plan.dropped_pairs != dropped
                                or plan.routed_counts.tolist() != routed):
                            mismatches += 1
    return mismatches == 0, f"{mismatches} mismatches over {cases} instances"


@_timed(5, "capacity fuzz")
def check_capacity_fuzz(n_configs: int = 1000):
    g = np.random.default_rng(5)
    over = broken = 0
    for _ in range(n_configs):
        S = int(g.integers(1, 65))
        E = int(g.integers(1, 17))
        k = int(g.integers(1, E + 1))
        C = int(g.integers(1, S + 3))
        scores = g.random((S, E))
        if g.random() < 0.3:
            scores = np.round(scores, 1)  # force ties
        plan = build_plan(GateDecision.from_scores(scores, k), C)
        if any(len(t) > C for t in plan.per_expert_tokens):
            over += 1
        if sum(len(t) for t in plan.per_expert_tokens) + len(plan.dropped_pairs) != S * min(k, E):
            broken += 1
    return over == 0 and broken == 0, f"{over} capacity violations, {broken} conservation failures in {n_configs}"


def _uniform_plan(E: int, k: int, tokens_per_expert: int = 3):
    S = E * tokens_per_expert
    scores = np.zeros((S, E))
    for s in range(S):
        for j in range(k):
            scores[s, (s + j) % E] = 1.0 - 0.1 * j
    return build_plan(GateDecision.from_scores(scores, k), S)


@_timed(6, "aux-loss closed forms")
def check_aux_closed_forms(tol: float = 1e-12):
    errors = []
    for E, k in [(16, 1), (4, 1), (4, 2), (16, 4)]:
        got = aux_loss(_uniform_plan(E, k), np.full(E, 1.0 / E))
        errors.append(abs(got - k / E**2))
    for E in (4, 16):
        S = 5
        scores = np.zeros((S, E))
        scores[:, 0] = 1.0
        plan = build_plan(GateDecision.from_scores(scores, 1), S)
        m = np.zeros(E)
        m[0] = 1.0
        errors.append(abs(aux_loss(plan, m) - 1.0 / E))
    worst = max(errors)
    uniform_16 = aux_loss(_uniform_plan(16, 1), np.full(16, 1 / 16))
    return worst < tol, f"E=16,K=1 uniform -> {uniform_16!r}; max error {worst:.1e}"


@_timed(7, "entropy closed forms")
def check_entropy_closed_forms(tol: float = 1e-9):
    uniform = GateDecision.from_scores(np.full((3, 16), 1 / 16), 1)
    onehot = np.zeros((2, 16))
    onehot[:, 5] = 1.0
    h_u = gate_entropy(uniform)
    h_1 = gate_entropy(GateDecision.from_scores(onehot, 1))
    ok = abs(h_u - math.log(16)) <= tol and h_1 == 0.0
    return ok, f"uniform-16 {h_u:.9f} (ln 16 = {math.log(16):.9f}), one-hot {h_1!r}"


@functools.lru_cache(maxsize=None)
def benchmark_runs(seeds: tuple[int, ...] = BENCH_SEEDS) -> dict[str, list[dict]]:
    """Final-eval summaries for the desk-scale benchmark, cached per process."""
    runs = {}
    variants = {
        "sira": dict(BENCHMARK),
        "dense_lora": {**BENCHMARK, "mode": "dense_lora"},
        "sira_no_aux": {**BENCHMARK, "aux_weight": 0.0},
    }
    for name, kw in variants.items():
        out = []
        for seed in seeds:
            result = train(ExperimentConfig(**kw), seed)
            out.append({"first": result.records[0], "final": result.final})
        runs[name] = out
    return runs


@_timed(8, "sparse beats dense at equal rank")
def check_sparse_beats_dense():
    runs = benchmark_runs()
    sira = median(r["final"]["eval_loss"] for r in runs["sira"])
    dense = median(r["final"]["eval_loss"] for r in runs["dense_lora"])
    return sira < dense, f"median final eval loss sira {sira:.5f} vs dense_lora {dense:.5f}"


@_timed(9, "gate entropy decays")
def check_entropy_decay():
    runs = benchmark_runs()["sira"]
    first = median(r["first"]["gate_entropy_mean"] for r in runs)
    last = median(r["final"]["gate_entropy_mean"] for r in runs)
    return last < first, f"median gate entropy {first:.4f} -> {last:.4f} nats"


@_timed(10, "aux loss balances experts")
def check_aux_balancing():
    runs = benchmark_runs()
    with_aux = median(r["final"]["utilization_cv"] for r in runs["sira"])
    without = median(r["final"]["utilization_cv"] for r in runs["sira_no_aux"])
    return with_aux <= without, f"median utilization CV lambda=0.01 {with_aux:.4f} vs lambda=0 {without:.4f}"


SMALL_RUN = dict(mode="sira", steps=60, eval_every=20, d_model=8, seq_len=8, batch_size=4, eval_size=16,
                 num_experts=4, top_k=2, capacity=4, lr=1e-2)


@_timed(11, "determinism and persistence")
def check_determinism():
    from .checkpoint import Checkpoint, checkpoint_roundtrip
    from .cli import run_train

    cfg = ExperimentConfig(**SMALL_RUN)
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        a = run_train(cfg, tmp / "a")[0]
        b = run_train(cfg, tmp / "b")[0]
        same_metrics = all((a / f).read_bytes() == (b / f).read_bytes() for f in ("metrics.jsonl", "summary.csv"))
        part = run_train(dataclasses.replace(cfg, steps=40), tmp / "part")[0]
        resumed = run_train(cfg, tmp / "resumed", resume=part / "final.sira")[0]
        same_ckpt = (resumed / "final.sira").read_bytes() == (a / "final.sira").read_bytes()
        same_best = (resumed / "best.sira").read_bytes() == (a / "best.sira").read_bytes()
        tail = [line for line in (a / "metrics.jsonl").read_text().splitlines()[1:]
                if int(json.loads(line)["step"]) > 40]
        resumed_lines = (resumed / "metrics.jsonl").read_text().splitlines()[1:]
        same_tail = tail == resumed_lines
        rt = checkpoint_roundtrip(a / "final.sira")["ok"]
        Checkpoint.load(a / "final.sira", expected=cfg.for_seed(0))
    ok = same_metrics and same_ckpt and same_best and same_tail and rt
    return ok, (f"metrics identical {same_metrics}, resume final/best identical {same_ckpt}/{same_best}, "
                f"resumed log tail identical {same_tail}, roundtrip {rt}")


TINY_ABLATION = dict(mode="sira", steps=1, eval_every=1, d_model=8, seq_len=4, batch_size=2, eval_size=8,
                     seeds=[0, 1])


@_timed(12, "ablation grid structure")
def check_ablation_structure():
    from .cli import run_ablation

    cfg = ExperimentConfig(**TINY_ABLATION)
    problems = []
    with tempfile.TemporaryDirectory() as tmp:
        for axis, values in (("top_k", SIZE_GRID), ("capacity", SIZE_GRID), ("mode", GATING_VARIANTS)):
            path = Path(tmp) / f"{axis}.csv"
            rows = run_ablation(cfg, axis, values, path)
            lines = path.read_text().splitlines()
            expected = [(v, s) for v in values for s in cfg.seeds]
            if [(r["value"], r["seed"]) for r in rows] != expected or len(lines) != len(expected) + 1:
                problems.append(axis)
            if axis == "top_k" and any(r["capacity"] != r["top_k"] for r in rows):
                problems.append("top_k capacity coupling")
            if axis == "capacity" and any(r["top_k"] != cfg.top_k for r in rows):
                problems.append("capacity sweep changed K")
    n = 2 * len(SIZE_GRID) + len(GATING_VARIANTS)
    return not problems, f"{n} cells x {len(cfg.seeds)} seeds" + (f"; problems: {problems}" if problems else "")


FAST_CHECKS = [check_zero_init, check_mode_equivalence, check_gradients, check_dispatch_oracle,
               check_capacity_fuzz, check_aux_closed_forms, check_entropy_closed_forms]
SLOW_CHECKS = [check_sparse_beats_dense, check_entropy_decay, check_aux_balancing]
PERSISTENCE_CHECKS = [check_determinism, check_ablation_structure]


def run_suite(full: bool = False, echo=print) -> bool:
    checks = FAST_CHECKS + (SLOW_CHECKS if full else []) + PERSISTENCE_CHECKS
    results = [c() for c in checks]
    for r in sorted(results, key=lambda r: r.number):
        echo(r.line())
    if not full:
        echo("(checks 8-10 skipped; pass --full to train the benchmark)")
    return all(r.passed for r in results)
