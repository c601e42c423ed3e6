import struct

import numpy as np
import pytest

from sira.checkpoint import (
    Checkpoint,
    ConfigMismatch,
    CorruptCheckpoint,
    UnsupportedVersion,
    checkpoint_roundtrip,
    from_training,
    probe_digest,
    restore,
)
from sira.config import ExperimentConfig
from sira.harness.train import train

SMALL = dict(mode="sira", steps=6, eval_every=3, d_model=6, seq_len=4, batch_size=3, eval_size=8,
             num_experts=3, top_k=2, capacity=2, lr=1e-2)


@pytest.fixture(scope="module")
def saved(tmp_path_factory):
    cfg = ExperimentConfig(**SMALL)
    result = train(cfg, 0)
    path = tmp_path_factory.mktemp("ckpt") / "final.sira"
    from_training(result).save(path)
    return cfg, result, path


def test_layout_header(saved):
    _, _, path = saved
    data = path.read_bytes()
    assert data[:4] == b"SIRA"
    assert struct.unpack("<I", data[4:8]) == (1,)


def test_save_load_save_is_identical(saved, tmp_path):
    _, _, path = saved
    again = tmp_path / "again.sira"
    Checkpoint.load(path).save(again)
    assert again.read_bytes() == path.read_bytes()


def test_restore_reproduces_model(saved):
    cfg, result, path = saved
    ckpt = Checkpoint.load(path, expected=cfg.for_seed(0))
    _, seed, exp, state = restore(ckpt)
    assert seed == 0 and state.step == 6 and state.adam.t == 6
    for name, arr in result.experiment.model.parameters().items():
        np.testing.assert_array_equal(exp.model.parameters()[name], arr)
    assert probe_digest(exp.model, cfg.for_seed(0)) == ckpt.probe_digest
    assert state.rng == result.state.rng


def test_roundtrip_report(saved):
    report = checkpoint_roundtrip(saved[2])
    assert report["ok"] and report["probe_match"] and report["reserialized_identical"]
    assert report["first_divergent_tensor"] is None


def test_flipped_payload_byte_is_detected(saved, tmp_path):
    data = bytearray(saved[2].read_bytes())
    data[-3] ^= 0x01
    bad = tmp_path / "bad.sira"
    bad.write_bytes(bytes(data))
    with pytest.raises(CorruptCheckpoint) as info:
        Checkpoint.load(bad)
    report = checkpoint_roundtrip(bad)
    assert not report["ok"]
    assert report["first_divergent_tensor"] == info.value.tensor is not None


def test_newer_version_is_rejected(saved, tmp_path):
    data = bytearray(saved[2].read_bytes())
    data[4:8] = struct.pack("<I", 2)
    path = tmp_path / "v2.sira"
    path.write_bytes(bytes(data))
    with pytest.raises(UnsupportedVersion):
        Checkpoint.load(path)


def test_bad_magic_and_truncation(saved):
    data = saved[2].read_bytes()
    with pytest.raises(CorruptCheckpoint):
        Checkpoint.from_bytes(b"NOPE" + data[4:])
    with pytest.raises(CorruptCheckpoint):
        Checkpoint.from_bytes(data[:-1])
    with pytest.raises(CorruptCheckpoint):
        Checkpoint.from_bytes(data + b"\0")


def test_config_mismatch(saved):
    cfg, _, path = saved
    with pytest.raises(ConfigMismatch):
        Checkpoint.load(path, expected=ExperimentConfig(**{**SMALL, "top_k": 1}).for_seed(0))


def test_best_checkpoint_holds_best_weights(saved, tmp_path):
    _, result, _ = saved
    ckpt = from_training(result, best=True)
    assert ckpt.step == result.state.best_step
    for name, arr in result.state.best_params.items():
        np.testing.assert_array_equal(ckpt.tensors[f"adapter.{name}"], arr)
    path = tmp_path / "best.sira"
    ckpt.save(path)
    assert checkpoint_roundtrip(path)["ok"]
