from __future__ import annotations

import hashlib
import json
from pathlib import Path

import pytest

from prefixmt.checkpoint import load_checkpoint
from prefixmt.cli import load_run_config, main
from prefixmt.report import EvalReport

TINY = """\
[world]
n_train = 48
n_valid = 12
n_test = 12

[model]
d_b = 16
k = 3
n_layers = 1
n_heads = 2
d_ff = 32
max_seq_len = 40
dropout = 0.0

[train]
epochs = 2
batch_size = 16
lr0 = 0.001

[decode]
beam_size = 2

[experiment]
p_grid = 0.3
k_grid = 1 3
"""


def _digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@pytest.fixture
def ws(tmp_path):
    cfg = tmp_path / "tiny.ini"
    cfg.write_text(TINY)
    data = tmp_path / "data" / "corpus.jsonl"
    assert main(["gen-data", "--config", str(cfg), "--out", str(data)]) == 0
    return tmp_path, cfg, data


def _train(ws, out, *extra):
    root, cfg, data = ws
    return main(["train", "--config", str(cfg), "--data", str(data), "--out", str(root / out), *extra])


class TestConfig:
    def test_defaults_and_overrides(self, tmp_path):
        p = tmp_path / "c.ini"
        p.write_text(TINY)
        cfg = load_run_config(str(p), ["train.lr0=0.5", "decode.beam_size=3"], env={})
        assert cfg.world.n_train == 48 and cfg.model["k"] == 3
        assert cfg.train.lr0 == 0.5 and cfg.decode.beam_size == 3
        assert cfg.experiment["k_grid"] == [1, 3]

    def test_env_seed_overrides(self, tmp_path):
        cfg = load_run_config(None, ["train.seed=4"], env={"PREFIXMT_SEED": "9"})
        assert cfg.seed == 9

    def test_unknown_key_is_usage_error(self, tmp_path):
        assert main(["gen-data", "--set", "world.bogus=1", "--out", str(tmp_path / "x")]) == 1

    def test_malformed_override(self, tmp_path):
        assert main(["gen-data", "--set", "nodot=1", "--out", str(tmp_path / "x")]) == 1

    def test_unknown_subcommand(self):
        assert main(["frobnicate"]) == 1


class TestGenData:
    def test_summary_and_rerun_identical(self, ws, capsys):
        root, cfg, data = ws
        again = root / "again" / "corpus.jsonl"
        assert main(["gen-data", "--config", str(cfg), "--out", str(again)]) == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["records"] == {"train": 48, "valid": 12, "test": 12}
        assert set(summary["alignment_score"]) == {"a", "b"}
        assert _digest(again) == _digest(data)


class TestTrainEval:
    def test_two_stage_pipeline_eval_and_inspect(self, ws, capsys):
        root, cfg, data = ws
        before = _digest(data)
        assert _train(ws, "s1.ckpt", "--stage", "1") == 0
        assert _train(ws, "s2.ckpt", "--stage", "2", "--resume", str(root / "s1.ckpt")) == 0
        log = (root / "s2.ckpt.log").read_text().splitlines()
        assert [json.loads(l)["epoch"] for l in log] == [1, 2]
        assert {"loss", "valid_bleu"} <= set(json.loads(log[0]))
        capsys.readouterr()
        rep = root / "reports" / "eval.txt"
        assert main(["eval", "--config", str(cfg), "--data", str(data), "--checkpoint",
                     str(root / "s2.ckpt"), "--out", str(rep)]) == 0
        report = EvalReport.from_text(rep.read_text())
        assert report.rows[0]["mode"] == "hallucinate"
        assert report.config["run"]["world"]["n_train"] == 48
        assert 0.0 <= report.summary["bleu"] <= 100.0
        assert main(["eval", "--config", str(cfg), "--data", str(data), "--checkpoint",
                     str(root / "s2.ckpt"), "--mode", "image"]) == 0
        capsys.readouterr()
        assert main(["inspect-checkpoint", str(root / "s2.ckpt")]) == 0
        info = json.loads(capsys.readouterr().out)
        assert info["provenance"]["stage"] == "stage2" and not info["optimizer_state"]
        assert _digest(data) == before  # inputs never mutated

    def test_training_is_reproducible(self, ws):
        root = ws[0]
        assert _train(ws, "a.ckpt", "--stage", "2") == 0
        assert _train(ws, "b.ckpt", "--stage", "2") == 0
        assert _digest(root / "a.ckpt") == _digest(root / "b.ckpt")

    def test_resume_matches_uninterrupted(self, ws):
        root = ws[0]
        assert _train(ws, "full.ckpt", "--stage", "2") == 0
        assert _train(ws, "part.ckpt", "--stage", "2", "--stop-after-epoch", "1") == 0
        part = load_checkpoint(root / "part.ckpt")
        assert not part.provenance["complete"]
        assert _train(ws, "resumed.ckpt", "--stage", "2", "--resume", str(root / "part.ckpt")) == 0
        assert _digest(root / "resumed.ckpt") == _digest(root / "full.ckpt")

    def test_env_seed_changes_result(self, ws, monkeypatch):
        root = ws[0]
        assert _train(ws, "s0.ckpt", "--stage", "2") == 0
        monkeypatch.setenv("PREFIXMT_SEED", "5")
        assert _train(ws, "s5.ckpt", "--stage", "2") == 0
        assert load_checkpoint(root / "s5.ckpt").train_config["seed"] == 5
        assert _digest(root / "s0.ckpt") != _digest(root / "s5.ckpt")

    def test_text_only_and_ft_modes(self, ws):
        root, cfg, data = ws
        assert _train(ws, "t.ckpt", "--stage", "2", "--mode", "text-only") == 0
        assert load_checkpoint(root / "t.ckpt").model_config["k"] == 0
        assert main(["eval", "--config", str(cfg), "--data", str(data), "--checkpoint",
                     str(root / "t.ckpt")]) == 0
        assert _train(ws, "ft.ckpt", "--stage", "2", "--mode", "ft") == 0
        assert load_checkpoint(root / "ft.ckpt").oracle_text

    def test_invalid_mode_stage_pair(self, ws):
        assert _train(ws, "x.ckpt", "--stage", "1", "--mode", "reg") == 1

    def test_missing_corpus(self, ws):
        root, cfg, _ = ws
        assert main(["train", "--config", str(cfg), "--data", str(root / "nope.jsonl"),
                     "--out", str(root / "x.ckpt")]) == 2

    def test_corrupt_checkpoint(self, ws):
        root, cfg, data = ws
        bad = root / "bad.ckpt"
        bad.write_bytes(b"not a checkpoint")
        assert main(["eval", "--config", str(cfg), "--data", str(data), "--checkpoint", str(bad)]) == 2

    def test_oracle_mismatch_exit_3(self, ws):
        root, cfg, data = ws
        assert _train(ws, "m.ckpt", "--stage", "2") == 0
        code = main(["eval", "--config", str(cfg), "--data", str(data), "--set", "oracle.seed=7",
                     "--checkpoint", str(root / "m.ckpt")])
        assert code == 3


def test_sweep_writes_report(ws):
    root, cfg, data = ws
    out = root / "r" / "noise.txt"
    assert main(["sweep", "--config", str(cfg), "--data", str(data), "--experiment", "noise",
                 "--seeds", "1", "--set", "train.epochs=1", "--out", str(out)]) == 0
    report = EvalReport.from_text(out.read_text())
    systems = {r["system"] for r in report.rows}
    assert systems == {"image", "text_only"}
    assert report.seeds == [0]
