from __future__ import annotations

import numpy as np
import pytest

from conftest import tiny_model_config
from prefixmt.checkpoint import OracleMismatchError, checkpoint_bytes
from prefixmt.model import Seq2Seq
from prefixmt.oracle import build_oracle
from prefixmt.tensor import Tensor
from prefixmt.training import (ConfigError, Mode, Stage, TrainConfig, adamw_step, clip_grad_norm,
                               poly_decay_lr, resolve_caption_langs, run_single_stage, run_stage1,
                               run_stage2)


def _cfg(**kw):
    base = dict(epochs=2, batch_size=16, lr0=1e-3)
    base.update(kw)
    return TrainConfig(**base)


def _model(corpus, **kw):
    return Seq2Seq(tiny_model_config(len(corpus.vocab), **kw), seed=0)


class TestSchedule:
    def test_endpoints(self):
        assert poly_decay_lr(0, 10, 3e-4) == 3e-4
        assert poly_decay_lr(10, 10, 3e-4) == 0.0
        assert poly_decay_lr(5, 10, 1.0, power=2.0) == 0.25

    def test_monotone(self):
        lrs = [poly_decay_lr(s, 20, 1.0) for s in range(21)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    @pytest.mark.parametrize("step,total", [(-1, 10), (11, 10), (0, 0)])
    def test_invalid(self, step, total):
        with pytest.raises(ValueError):
            poly_decay_lr(step, total, 1.0)


def _reference_adamw(p, grads, lr, b1, b2, eps, wd):
    """Independent float64 AdamW with decoupled decay applied before the Adam step."""
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, 1):
        p = p * (1 - lr * wd)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return p


class TestAdamW:
    def test_matches_reference(self, rng):
        p0 = rng.standard_normal(5)
        grads = [rng.standard_normal(5) for _ in range(4)]
        p = Tensor(p0, requires_grad=True)
        state = {}
        for g in grads:
            p.grad = g.astype(np.float32)
            adamw_step({"w": p}, state, 0.01, 0.9, 0.999, 1e-8, 0.1)
        np.testing.assert_allclose(p.data, _reference_adamw(p0, grads, 0.01, 0.9, 0.999, 1e-8, 0.1),
                                   rtol=1e-5, atol=1e-6)
        assert state["w"]["t"] == 4

    def test_zero_grad_still_decays(self):
        p = Tensor(np.ones(3), requires_grad=True)
        p.grad = np.zeros(3, np.float32)
        adamw_step({"w": p}, {}, 0.1, weight_decay=0.5)
        np.testing.assert_allclose(p.data, 0.95)

    def test_missing_grad(self):
        with pytest.raises(ValueError, match="no gradient"):
            adamw_step({"w": Tensor(np.ones(2), requires_grad=True)}, {}, 0.1)


class TestClip:
    def test_scales_to_max_norm(self):
        a, b = Tensor(np.zeros(2)), Tensor(np.zeros(2))
        a.grad = np.array([3.0, 0.0], np.float32)
        b.grad = np.array([0.0, 4.0], np.float32)
        norm = clip_grad_norm({"a": a, "b": b}, 1.0)
        assert norm == pytest.approx(5.0)
        total = np.sqrt((a.grad ** 2).sum() + (b.grad ** 2).sum())
        assert total == pytest.approx(1.0, abs=1e-5)

    def test_small_norm_untouched(self):
        a = Tensor(np.zeros(2))
        a.grad = np.array([0.1, 0.1], np.float32)
        clip_grad_norm({"a": a}, 1.0)
        np.testing.assert_array_equal(a.grad, np.float32([0.1, 0.1]))


class TestConfig:
    @pytest.mark.parametrize("stage,mode", [(Stage.STAGE1, Mode.REG), (Stage.STAGE1, Mode.TEXT_ONLY),
                                            (Stage.STAGE2, Mode.MULTILINGUAL_CAPTION)])
    def test_invalid_pairs(self, stage, mode):
        with pytest.raises(ConfigError):
            TrainConfig(stage=stage, mode=mode).validate_for(stage)

    def test_bad_caption_lang(self):
        with pytest.raises(ConfigError):
            TrainConfig(caption_lang="c")

    def test_text_only_needs_k0(self, small_corpus, small_oracle):
        with pytest.raises(ConfigError):
            run_stage2(small_corpus, _model(small_corpus), small_oracle,
                       _cfg(stage="stage2", mode="text_only"))

    def test_caption_language_selection(self, small_corpus, small_oracle):
        assert resolve_caption_langs(_cfg(), small_oracle, small_corpus) == ["a"]
        assert resolve_caption_langs(_cfg(caption_lang="b"), small_oracle, small_corpus) == ["b"]
        assert resolve_caption_langs(_cfg(mode="multilingual_caption"), small_oracle, small_corpus) == ["a", "b"]


class TestFreezing:
    def test_stage1_trains_mapping_and_decoder_only(self, small_corpus, small_oracle):
        m = _model(small_corpus)
        before = {g: m.group_hash(g) for g in ("mapping", "encoder", "decoder")}
        ohash = small_oracle.hash()
        ck = run_stage1(small_corpus, m, small_oracle, _cfg(epochs=1))
        assert m.group_hash("encoder") == before["encoder"]
        assert m.group_hash("mapping") != before["mapping"]
        assert m.group_hash("decoder") != before["decoder"]
        assert small_oracle.hash() == ohash == ck.oracle_hash
        assert ck.provenance["complete"] and ck.provenance["caption_langs"] == ["a"]

    def test_stage2_trains_everything(self, small_corpus, small_oracle):
        m = _model(small_corpus)
        before = {g: m.group_hash(g) for g in ("mapping", "encoder", "decoder")}
        run_stage2(small_corpus, m, small_oracle, _cfg(epochs=1, stage="stage2"))
        assert all(m.group_hash(g) != h for g, h in before.items())

    def test_text_only_baseline(self, small_corpus, small_oracle):
        m = _model(small_corpus, k=0)
        ck = run_stage2(small_corpus, m, small_oracle, _cfg(epochs=1, stage="stage2", mode="text_only"))
        assert not any(n.startswith("mapping") for n in ck.params)

    def test_ft_changes_text_side_not_image_map(self, small_corpus, small_oracle):
        m = _model(small_corpus)
        ck = run_stage2(small_corpus, m, small_oracle, _cfg(epochs=1, stage="stage2", mode="finetune_oracle_text"))
        eff = ck.effective_oracle()
        assert eff.image_hash() == small_oracle.image_hash()
        assert eff.text_hash() != small_oracle.text_hash()
        assert ck.oracle_hash == small_oracle.hash()

    def test_single_stage_runs(self, small_corpus, small_oracle):
        m = _model(small_corpus)
        ck = run_single_stage(small_corpus, m, small_oracle, _cfg(epochs=1, mode="single_stage"))
        assert ck.provenance["step"] == 2 * 3  # two substeps per batch

    def test_single_stage_requires_mode(self, small_corpus, small_oracle):
        with pytest.raises(ConfigError):
            run_single_stage(small_corpus, _model(small_corpus), small_oracle, _cfg())


class TestDeterminismAndResume:
    def test_same_seed_same_bytes(self, small_corpus, small_oracle):
        a = run_stage2(small_corpus, _model(small_corpus), small_oracle, _cfg(stage="stage2"))
        b = run_stage2(small_corpus, _model(small_corpus), small_oracle, _cfg(stage="stage2"))
        assert checkpoint_bytes(a) == checkpoint_bytes(b)

    def test_resume_equals_uninterrupted(self, small_corpus, small_oracle):
        cfg = _cfg(stage="stage2", epochs=3)
        full = run_stage2(small_corpus, _model(small_corpus), small_oracle, cfg)
        part = run_stage2(small_corpus, _model(small_corpus), small_oracle, cfg, stop_after_epoch=1)
        assert not part.provenance["complete"] and part.optimizer
        resumed = run_stage2(small_corpus, _model(small_corpus), small_oracle, cfg, resume=part)
        assert checkpoint_bytes(resumed) == checkpoint_bytes(full)

    def test_resume_rejects_other_config(self, small_corpus, small_oracle):
        part = run_stage2(small_corpus, _model(small_corpus), small_oracle, _cfg(stage="stage2"),
                          stop_after_epoch=1)
        with pytest.raises(ConfigError):
            run_stage2(small_corpus, _model(small_corpus), small_oracle, _cfg(stage="stage2", lr0=0.1),
                       resume=part)

    def test_resume_rejects_other_oracle(self, small_corpus, small_oracle):
        part = run_stage2(small_corpus, _model(small_corpus), small_oracle, _cfg(stage="stage2"),
                          stop_after_epoch=1)
        other = build_oracle(small_corpus.world, seed=3)
        with pytest.raises(OracleMismatchError):
            run_stage2(small_corpus, _model(small_corpus), other, _cfg(stage="stage2"), resume=part)

    def test_history_and_best_selection(self, small_corpus, small_oracle):
        m = _model(small_corpus)
        ck = run_stage2(small_corpus, m, small_oracle, _cfg(stage="stage2", epochs=3))
        hist = ck.provenance["history"]
        assert [h["epoch"] for h in hist] == [1, 2, 3]
        best = max(h["valid_bleu"] for h in hist)
        assert ck.provenance["best_score"] == best
        for n, p in m.parameters().items():
            assert p.data.tobytes() == ck.params[n].tobytes()
