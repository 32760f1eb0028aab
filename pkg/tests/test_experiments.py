from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import tiny_model_config
from prefixmt.checkpoint import checkpoint_bytes
from prefixmt.corpus import MASK_ID, source_ids
from prefixmt.decoding import DecodeConfig
from prefixmt.experiments import (SYSTEMS, PipelineConfig, RunCache, evaluate_system, mask_grounded,
                                  recovery_accuracy, run_masked_recovery, run_noising_experiment,
                                  run_prefix_sweep, train_system)
from prefixmt.report import EvalReport, aggregate
from prefixmt.training import TrainConfig


@pytest.fixture(scope="module")
def pcfg(small_corpus):
    return PipelineConfig(tiny_model_config(len(small_corpus.vocab)),
                          TrainConfig(epochs=1, batch_size=16, lr0=1e-3), DecodeConfig(beam_size=2))


class TestReport:
    def test_aggregate(self):
        assert aggregate([3, 1, 2]) == {"median": 2.0, "min": 1.0, "max": 3.0, "n": 3}
        assert aggregate([1, 2])["median"] == 1.5
        with pytest.raises(ValueError):
            aggregate([])

    def test_round_trip_and_timing_excluded(self):
        r = EvalReport("x", {"a": {"b": [1, 2]}}, [0, 1], [{"bleu": 50.0}], {"m": 1}, {"t": 3.2})
        back = EvalReport.from_text(r.to_text())
        assert back == r
        assert "[timing]" not in r.deterministic_text()
        assert r.to_text().startswith(r.deterministic_text())

    def test_bad_line(self):
        with pytest.raises(ValueError):
            EvalReport.from_text("report=x\nnonsense\n")


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=9))
def test_aggregate_bounds(vals):
    a = aggregate(vals)
    assert a["min"] <= a["median"] <= a["max"] and a["n"] == len(vals)


class TestMaskGrounded:
    def test_positions_are_grounded_and_masked(self, small_corpus):
        items = mask_grounded(small_corpus, 0)
        assert len(items) == len(small_corpus.split("test"))
        for rec, pos, ids, masked in items:
            assert pos in rec.grounded
            assert masked[pos] == MASK_ID and ids == source_ids(small_corpus, rec, "a")
            assert [t for i, t in enumerate(masked) if i != pos] == [t for i, t in enumerate(ids) if i != pos]

    def test_seeded(self, small_corpus):
        pick = lambda s: [p for _, p, _, _ in mask_grounded(small_corpus, s)]
        assert pick(1) == pick(1)


class TestPipelines:
    def test_every_system_trains_and_evaluates(self, small_corpus, small_oracle, pcfg):
        for name in SYSTEMS:
            ts = train_system(small_corpus, small_oracle, name, 0, pcfg)
            res = evaluate_system(ts, small_corpus, "valid", pcfg.decode)
            assert 0.0 <= res.bleu <= 100.0, name
            assert (ts.stage1 is None) == (SYSTEMS[name].stage1 is None)

    def test_cache_hit_is_identical(self, small_corpus, small_oracle, pcfg, tmp_path):
        cache = RunCache(tmp_path)
        a = train_system(small_corpus, small_oracle, "standard", 0, pcfg, cache=cache)
        assert len(list(tmp_path.glob("*.ckpt"))) == 2
        b = train_system(small_corpus, small_oracle, "standard", 0, pcfg, cache=cache)
        assert checkpoint_bytes(a.checkpoint) == checkpoint_bytes(b.checkpoint)
        fresh = train_system(small_corpus, small_oracle, "standard", 0, pcfg)
        assert checkpoint_bytes(fresh.checkpoint) == checkpoint_bytes(a.checkpoint)

    def test_recovery_accuracy_fields(self, small_corpus, small_oracle, pcfg):
        ts = train_system(small_corpus, small_oracle, "image", 0, pcfg)
        res = recovery_accuracy(ts, small_corpus, 0, pcfg.decode)
        assert 0.0 <= res["accuracy"] <= 1.0
        assert set(res["per_attribute"]) == {"color", "object", "action", "scene"}


class TestDrivers:
    def test_noising(self, small_corpus, small_oracle, pcfg, tmp_path):
        cache = RunCache(tmp_path)
        rep = run_noising_experiment(small_corpus, small_oracle, [0.0, 0.3], pcfg, [0], cache)
        assert len(rep.rows) == 4
        assert set(rep.summary) == {"p=0.0", "p=0.3"}
        again = run_noising_experiment(small_corpus, small_oracle, [0.0, 0.3], pcfg, [0], cache)
        assert again.deterministic_text() == rep.deterministic_text()
        with pytest.raises(ValueError):
            run_noising_experiment(small_corpus, small_oracle, [1.5], pcfg)

    def test_prefix_sweep(self, small_corpus, small_oracle, pcfg):
        rep = run_prefix_sweep(small_corpus, small_oracle, [1, 2], pcfg, [0])
        assert [r["k"] for r in rep.rows] == [1, 2]
        with pytest.raises(ValueError):
            run_prefix_sweep(small_corpus, small_oracle, [0], pcfg)

    def test_masked_recovery(self, small_corpus, small_oracle, pcfg):
        rep = run_masked_recovery(small_corpus, small_oracle, pcfg, [0])
        assert {r["system"] for r in rep.rows} == {"image", "text_only"}
        assert set(rep.summary) == {"masked", "unmasked"}
