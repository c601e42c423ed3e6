import csv
import json

import pytest

from sira.cli import DEFAULT_VALUES, ablation_configs, main
from sira.config import ConfigError, ExperimentConfig

SMALL = dict(mode="sira", steps=4, eval_every=2, d_model=6, seq_len=4, batch_size=2, eval_size=8,
             num_experts=3, top_k=2, capacity=2)


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(SMALL, indent=2))
    return path


def test_train_writes_artifacts(config_file, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(config_file), "--out", str(out)]) == 0
    run = out / "seed-0"
    assert sorted(p.name for p in run.iterdir()) == ["best.sira", "final.sira", "metrics.jsonl", "summary.csv"]
    lines = [json.loads(line) for line in (run / "metrics.jsonl").read_text().splitlines()]
    assert lines[0]["config"]["top_k"] == 2 and "out_dir" not in lines[0]["config"]
    assert [r["step"] for r in lines[1:]] == [0, 2, 4]
    rows = list(csv.DictReader((run / "summary.csv").open()))
    assert [r["step"] for r in rows] == ["0", "2", "4"]
    assert json.loads(rows[0]["config"])["mode"] == "sira"


def test_train_is_byte_reproducible(config_file, tmp_path):
    for name in ("a", "b"):
        assert main(["train", "--config", str(config_file), "--out", str(tmp_path / name)]) == 0
    for f in ("metrics.jsonl", "summary.csv", "final.sira", "best.sira"):
        assert (tmp_path / "a/seed-0" / f).read_bytes() == (tmp_path / "b/seed-0" / f).read_bytes()


def test_resume_matches_uninterrupted(config_file, tmp_path):
    main(["train", "--config", str(config_file), "--out", str(tmp_path / "full")])
    main(["train", "--config", str(config_file), "--override", "steps=2", "--out", str(tmp_path / "part")])
    code = main(["train", "--config", str(config_file), "--out", str(tmp_path / "resumed"),
                 "--resume", str(tmp_path / "part/seed-0/final.sira")])
    assert code == 0
    for f in ("final.sira", "best.sira"):
        assert (tmp_path / "full/seed-0" / f).read_bytes() == (tmp_path / "resumed/seed-0" / f).read_bytes()


def test_resume_rejects_other_config(config_file, tmp_path, capsys):
    main(["train", "--config", str(config_file), "--out", str(tmp_path / "part")])
    code = main(["train", "--config", str(config_file), "--override", "top_k=1", "--out", str(tmp_path / "x"),
                 "--resume", str(tmp_path / "part/seed-0/final.sira")])
    assert code == 2


def test_eval_and_roundtrip(config_file, tmp_path, capsys):
    main(["train", "--config", str(config_file), "--out", str(tmp_path)])
    capsys.readouterr()
    ckpt = tmp_path / "seed-0/final.sira"
    assert main(["eval", "--checkpoint", str(ckpt)]) == 0
    record = json.loads(capsys.readouterr().out)
    assert record["step"] == 4 and record["eval_loss"] > 0
    assert main(["roundtrip", str(ckpt)]) == 0
    assert json.loads(capsys.readouterr().out)["ok"] is True

    data = bytearray(ckpt.read_bytes())
    data[-1] ^= 0xFF
    ckpt.write_bytes(bytes(data))
    assert main(["roundtrip", str(ckpt)]) == 1
    assert main(["eval", "--checkpoint", str(ckpt)]) == 2


def test_config_errors_exit_2(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{"steps": 1}')
    assert main(["train", "--config", str(path)]) == 2
    assert "mode" in capsys.readouterr().err
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 2


def test_divergence_exits_3(config_file, tmp_path, capsys):
    code = main(["train", "--config", str(config_file), "--out", str(tmp_path),
                 "--override", "lr=1e300", "--override", "init_std=1.0", "--override", "lora_scale=1e200"])
    assert code == 3
    assert "diverged" in capsys.readouterr().err
    # the metrics written before the failure survive
    assert (tmp_path / "seed-0/metrics.jsonl").read_text().count("\n") >= 2


def test_ablate_writes_one_row_per_cell_and_seed(config_file, tmp_path, capsys):
    code = main(["ablate", "--config", str(config_file), "--axis", "mode", "--override", "seeds=[0,1]",
                 "--out", str(tmp_path), "--override", "steps=1"])
    assert code == 0
    rows = list(csv.DictReader((tmp_path / "ablation_mode.csv").open()))
    assert [(r["value"], r["seed"]) for r in rows] == [(v, s) for v in DEFAULT_VALUES["mode"] for s in "01"]
    modes = {r["value"]: r["mode"] for r in rows}
    assert modes["smoe_dropout"] == "static_routing"
    aux = {r["value"]: r["aux_weight"] for r in rows}
    assert float(aux["no_aux_loss"]) == 0.0


def test_ablation_grids():
    assert DEFAULT_VALUES["top_k"] == DEFAULT_VALUES["capacity"] == [2, 4, 6, 8, 10, 12]
    cfg = ExperimentConfig(mode="sira", steps=1)
    cells = ablation_configs(cfg, "top_k", [2, 12])
    assert [(c.top_k, c.capacity) for _, c in cells] == [(2, 2), (12, 12)]
    with pytest.raises(ConfigError):
        ablation_configs(cfg, "top_k", [])
    with pytest.raises(ConfigError):
        ablation_configs(cfg, "mode", ["bogus"])
    with pytest.raises(ConfigError):
        ablation_configs(cfg, "rank", [2])
