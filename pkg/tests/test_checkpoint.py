from __future__ import annotations

import struct

import numpy as np
import pytest

from prefixmt.checkpoint import (MAGIC, Checkpoint, CheckpointError, OracleMismatchError,
                                 checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint)
from prefixmt.oracle import build_oracle


@pytest.fixture
def ckpt(tiny_model, small_oracle):
    return Checkpoint(
        model_config=tiny_model.cfg.to_dict(), train_config={"epochs": 1}, provenance={"stage": "stage1"},
        params=tiny_model.state_arrays(), oracle=small_oracle,
        optimizer={"m/x": np.ones(3, np.float32), "t/x": np.array([4], np.int64)},
        rng_state={"dropout": tiny_model.drop_rng.bit_generator.state},
        oracle_text={"a": np.asarray(small_oracle.text_tables["a"]) * 2},
    )


def test_round_trip(ckpt, tmp_path):
    path = tmp_path / "deep" / "m.ckpt"
    save_checkpoint(ckpt, path)
    back = load_checkpoint(path)
    assert back.model_config == ckpt.model_config
    assert back.rng_state == ckpt.rng_state
    for name, arr in ckpt.params.items():
        assert back.params[name].tobytes() == arr.tobytes() and back.params[name].dtype == arr.dtype
    assert back.optimizer["t/x"].dtype == np.int64
    assert back.oracle_hash == ckpt.oracle_hash
    assert checkpoint_bytes(back) == checkpoint_bytes(ckpt)


def test_effective_oracle_uses_finetuned_text(ckpt):
    eff = ckpt.effective_oracle()
    assert eff.image_hash() == ckpt.oracle.image_hash()
    assert eff.text_hash() != ckpt.oracle.text_hash()


def test_bytes_start_with_magic_and_version(ckpt):
    data = checkpoint_bytes(ckpt)
    assert data.startswith(MAGIC)
    assert struct.unpack_from("<H", data, len(MAGIC))[0] == 1


def test_bad_magic(ckpt):
    with pytest.raises(CheckpointError, match="magic"):
        parse_checkpoint(b"XXXXXXX" + checkpoint_bytes(ckpt)[7:])


def test_wrong_version(ckpt):
    data = bytearray(checkpoint_bytes(ckpt))
    struct.pack_into("<H", data, len(MAGIC), 9)
    with pytest.raises(CheckpointError, match="version 9"):
        parse_checkpoint(bytes(data))


def test_truncated(ckpt):
    data = checkpoint_bytes(ckpt)
    with pytest.raises(CheckpointError):
        parse_checkpoint(data[: len(data) // 2])


def test_corrupted_payload(ckpt):
    data = bytearray(checkpoint_bytes(ckpt))
    data[len(data) // 2] ^= 0xFF
    with pytest.raises(CheckpointError):
        parse_checkpoint(bytes(data))


def test_oracle_mismatch(ckpt, small_corpus):
    other = build_oracle(small_corpus.world, seed=5)
    with pytest.raises(OracleMismatchError):
        parse_checkpoint(checkpoint_bytes(ckpt), other)
    parse_checkpoint(checkpoint_bytes(ckpt), ckpt.oracle)
