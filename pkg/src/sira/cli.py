"""Command-line experiment runner.

    sira train     --config cfg.json [--override KEY=VALUE ...] [--seed N] [--out DIR] [--resume CKPT]
    sira eval      --checkpoint run/seed-0/best.sira
    sira ablate    --config cfg.json --axis top_k [--values 2,4,6] [--out DIR]
    sira verify    [--full]
    sira roundtrip run/seed-0/final.sira

Exit codes: 0 success, 1 failed verification, 2 invalid config or
checkpoint, 3 training diverged.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .checkpoint import Checkpoint, CheckpointError, checkpoint_roundtrip, from_training, restore
from .config import ConfigError, ExperimentConfig
from .harness.train import TrainingDiverged, evaluate, train
from .layer import MODES, count_trainable_params

log = logging.getLogger("sira")

SUMMARY_FIELDS = ["step", "train_loss", "train_aux", "eval_loss", "eval_aux", "gate_entropy_mean",
                  "drop_rate", "utilization_cv", "task_gate_corr"]

# gating ablations as config patches on the base config
VARIANTS = {
    "sira": {},
    "no_aux_loss": {"aux_weight": 0.0},
    "no_expert_dropout": {"expert_dropout_rate": 0.0},
    "smoe_dropout": {"mode": "static_routing"},
}
VARIANTS.update({m: {"mode": m} for m in MODES if m != "sira"})

AXES = ("top_k", "capacity", "aux_weight", "expert_dropout_rate", "mode")
DEFAULT_VALUES = {
    "top_k": [2, 4, 6, 8, 10, 12],
    "capacity": [2, 4, 6, 8, 10, 12],
    "aux_weight": [0.0, 0.001, 0.01, 0.1],
    "expert_dropout_rate": [0.0, 0.25, 0.5],
    "mode": ["sira", "no_aux_loss", "no_expert_dropout", "smoe_dropout"],
}


def _fmt(v):
    return "" if v is None else v


def run_train(cfg: ExperimentConfig, out_dir: str | Path, resume: str | Path | None = None) -> list[Path]:
    """Train every seed in ``cfg.seeds``; returns the per-seed output directories.

    Each directory gets ``metrics.jsonl`` (config echo line, then one record
    per evaluation), ``summary.csv``, ``best.sira`` and ``final.sira``.
    """
    out_dir = Path(out_dir)
    dirs = []
    for seed in cfg.seeds:
        run_cfg = cfg.for_seed(seed)
        run_dir = out_dir / f"seed-{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        state = params = None
        if resume is not None:
            ckpt = Checkpoint.load(resume)
            stored = ckpt.config
            if dataclasses.replace(stored, steps=run_cfg.steps).digest() != run_cfg.digest():
                raise CheckpointError(f"{resume}: checkpoint config differs from the run config beyond 'steps'")
            _, _, exp, state = restore(ckpt)
            params = exp.model.parameters()
        echo = run_cfg.echo()
        with open(run_dir / "metrics.jsonl", "w") as jf, open(run_dir / "summary.csv", "w", newline="") as cf:
            jf.write(json.dumps({"config": echo, "seed": seed}, sort_keys=True) + "\n")
            writer = csv.writer(cf, lineterminator="\n")
            writer.writerow(SUMMARY_FIELDS + ["config"])
            config_json = run_cfg.canonical_json()

            def sink(rec):
                jf.write(json.dumps(rec, sort_keys=True) + "\n")
                jf.flush()
                writer.writerow([_fmt(rec[k]) for k in SUMMARY_FIELDS] + [config_json])
                cf.flush()

            result = train(run_cfg, seed, state=state, params=params, on_record=sink)
        from_training(result).save(run_dir / "final.sira")
        from_training(result, best=True).save(run_dir / "best.sira")
        log.info("seed %d: final eval loss %.6g (best %.6g at step %d)", seed,
                 result.final["eval_loss"], result.state.best_eval, result.state.best_step)
        dirs.append(run_dir)
    return dirs


def ablation_configs(cfg: ExperimentConfig, axis: str, values) -> list[tuple[object, ExperimentConfig]]:
    if axis not in AXES:
        raise ConfigError(f"unknown ablation axis; expected one of {AXES}", axis)
    values = list(values)
    if not values:
        raise ConfigError("empty value list", axis)
    cells = []
    for value in values:
        if axis == "mode":
            if value not in VARIANTS:
                raise ConfigError(f"unknown variant {value!r}; expected one of {sorted(VARIANTS)}", axis)
            patch = dict(VARIANTS[value])
        elif axis == "top_k":
            # the K sweep keeps capacity equal to K
            patch = {"top_k": int(value), "capacity": int(value)}
        elif axis == "capacity":
            patch = {"capacity": int(value)}
        else:
            patch = {axis: float(value)}
        try:
            cells.append((value, dataclasses.replace(cfg, **patch)))
        except ConfigError as exc:
            raise ConfigError(f"value {value!r}: {exc}", axis) from None
    return cells


ABLATION_FIELDS = ["axis", "value", "seed", "mode", "top_k", "capacity", "aux_weight", "expert_dropout_rate",
                   "trainable_params", "final_train_loss", "final_eval_loss", "best_eval_loss", "eval_aux",
                   "gate_entropy", "drop_rate", "utilization_cv", "task_gate_corr"]


def run_ablation(cfg: ExperimentConfig, axis: str, values, out_path: str | Path) -> list[dict]:
    """One row per (value, seed); written to ``out_path`` as CSV."""
    rows = []
    for value, cell in ablation_configs(cfg, axis, values):
        for seed in cell.seeds:
            result = train(cell.for_seed(seed), seed)
            f = result.final
            rows.append({
                "axis": axis, "value": value, "seed": seed, "mode": cell.mode, "top_k": cell.top_k,
                "capacity": cell.capacity, "aux_weight": cell.aux_weight,
                "expert_dropout_rate": cell.expert_dropout_rate,
                "trainable_params": 4 * count_trainable_params(cell.layer_config()),
                "final_train_loss": f["train_loss"], "final_eval_loss": f["eval_loss"],
                "best_eval_loss": result.state.best_eval, "eval_aux": f["eval_aux"],
                "gate_entropy": f["gate_entropy_mean"], "drop_rate": f["drop_rate"],
                "utilization_cv": f["utilization_cv"], "task_gate_corr": f["task_gate_corr"],
            })
            log.info("%s=%s seed %d: eval loss %.6g", axis, value, seed, f["eval_loss"])
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, ABLATION_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})
    return rows


def _parse_values(raw: str | None, axis: str):
    if raw is None:
        return DEFAULT_VALUES[axis]
    items = [v.strip() for v in raw.split(",") if v.strip()]
    if axis == "mode":
        return items
    return [json.loads(v) for v in items]


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config, args.override)
    if args.seed is not None:
        cfg = cfg.for_seed(args.seed)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sira", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_args(p):
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--seed", type=int, default=None, help="run only this seed")
        p.add_argument("--out", default=None, help="output directory (default: config out_dir)")

    p = sub.add_parser("train", help="train and write metrics + checkpoints")
    config_args(p)
    p.add_argument("--resume", default=None, help="continue from a final.sira checkpoint")

    p = sub.add_parser("eval", help="evaluate a checkpoint on its validation set")
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("ablate", help="sweep one config axis")
    config_args(p)
    p.add_argument("--axis", required=True, choices=AXES)
    p.add_argument("--values", default=None, help="comma-separated values (default: the standard grid)")

    p = sub.add_parser("verify", help="run the property/acceptance suite")
    p.add_argument("--full", action="store_true", help="include the training-based checks (minutes)")

    p = sub.add_parser("roundtrip", help="verify a checkpoint reproduces its model exactly")
    p.add_argument("path")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            cfg = _load_config(args)
            for d in run_train(cfg, args.out or cfg.out_dir, args.resume):
                print(d)
        elif args.command == "eval":
            ckpt = Checkpoint.load(args.checkpoint)
            _, seed, exp, _ = restore(ckpt)
            print(json.dumps({"step": ckpt.step, "seed": seed, **evaluate(exp.model, exp.valid)}, sort_keys=True))
        elif args.command == "ablate":
            cfg = _load_config(args)
            out = Path(args.out or cfg.out_dir) / f"ablation_{args.axis}.csv"
            run_ablation(cfg, args.axis, _parse_values(args.values, args.axis), out)
            print(out)
        elif args.command == "verify":
            from .acceptance import run_suite

            return 0 if run_suite(full=args.full) else 1
        elif args.command == "roundtrip":
            report = checkpoint_roundtrip(args.path)
            print(json.dumps(report, sort_keys=True))
            return 0 if report["ok"] else 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
