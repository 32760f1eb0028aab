"""Named training pipelines and the experiment drivers built on them."""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .corpus import ATTRIBUTES, MASK_ID, Corpus, NoiseMode, NoiseSpec, source_ids
from .decoding import DecodeConfig, DecodeMode, decode_batch, evaluate
from .model import MappingVariant, ModelConfig, PrefixPosition, Seq2Seq
from .oracle import Oracle
from .report import EvalReport, aggregate
from .training import (Mode, Stage, TrainConfig, run_single_stage,
                       run_stage1, run_stage2)


@dataclass(frozen=True)
class System:
    """A training recipe plus the inference mode it is scored with."""

    name: str
    stage1: Optional[Mode]  # None skips the captioning stage
    stage2: Mode
    decode: DecodeMode
    model: tuple = ()  # ModelConfig overrides as (field, value) pairs


SYSTEMS = {s.name: s for s in [
    System("standard", Mode.STANDARD, Mode.STANDARD, DecodeMode.HALLUCINATE),
    System("stage2_only", None, Mode.STANDARD, DecodeMode.HALLUCINATE),
    System("image", Mode.STANDARD, Mode.REG, DecodeMode.IMAGE),
    System("text_only", None, Mode.TEXT_ONLY, DecodeMode.HALLUCINATE, (("k", 0),)),
    System("multilingual", Mode.MULTILINGUAL_CAPTION, Mode.STANDARD, DecodeMode.HALLUCINATE),
    System("reg", Mode.STANDARD, Mode.REG, DecodeMode.HALLUCINATE),
    System("m", Mode.STANDARD, Mode.STANDARD, DecodeMode.IMAGE),
    System("single_stage", None, Mode.SINGLE_STAGE, DecodeMode.HALLUCINATE),
    System("ft", Mode.STANDARD, Mode.FINETUNE_ORACLE_TEXT, DecodeMode.HALLUCINATE),
    System("mlp", Mode.STANDARD, Mode.STANDARD, DecodeMode.HALLUCINATE,
           (("mn_variant", MappingVariant.MLP),)),
    System("enc", Mode.STANDARD, Mode.STANDARD, DecodeMode.HALLUCINATE,
           (("mn_variant", MappingVariant.ENC),)),
    System("before_start", Mode.STANDARD, Mode.STANDARD, DecodeMode.HALLUCINATE,
           (("prefix_position", PrefixPosition.BEFORE_START),)),
]}


@dataclass
class PipelineConfig:
    model: ModelConfig
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    stage1_epochs: Optional[int] = None

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "train": self.train.to_dict(),
                "decode": self.decode.to_dict(), "stage1_epochs": self.stage1_epochs}


def corpus_fingerprint(corpus: Corpus) -> str:
    h = hashlib.sha256(corpus.world.hash().encode())
    for r in corpus.records:
        h.update(f"{r.id}|{r.split}|{' '.join(r.caption_a)}|{' '.join(r.caption_b)}".encode())
        h.update(np.ascontiguousarray(r.latent, dtype="<f4").tobytes())
    return h.hexdigest()


class RunCache:
    """Completed checkpoints on disk, keyed by everything that determines them.

    Training is deterministic, so a hit is byte-identical to rerunning.
    """

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(parts: dict) -> str:
        return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()[:24]

    def get(self, key: str, oracle: Oracle) -> Optional[Checkpoint]:
        path = self.root / f"{key}.ckpt"
        return load_checkpoint(path, oracle) if path.exists() else None

    def put(self, key: str, ckpt: Checkpoint) -> None:
        tmp = self.root / f"{key}.tmp"
        save_checkpoint(ckpt, tmp)
        tmp.replace(self.root / f"{key}.ckpt")


@dataclass
class TrainedSystem:
    system: System
    seed: int
    model: Seq2Seq
    checkpoint: Checkpoint
    oracle: Oracle  # what inference should use (finetuned text side for FT)
    stage1: Optional[Checkpoint]
    seconds: float


def _model_config(base: ModelConfig, system: System, vocab_size: int) -> ModelConfig:
    return replace(base, vocab_size=vocab_size, **dict(system.model))


def train_system(corpus: Corpus, oracle: Oracle, system: System | str, seed: int,
                 pcfg: PipelineConfig, noise: Optional[NoiseSpec] = None,
                 cache: Optional[RunCache] = None) -> TrainedSystem:
    """Train ``system`` from scratch under ``seed``; noise applies to translation sources."""
    system = SYSTEMS[system] if isinstance(system, str) else system
    mcfg = _model_config(pcfg.model, system, len(corpus.vocab))
    base = {"corpus": corpus_fingerprint(corpus), "oracle": oracle.hash(),
            "model": mcfg.to_dict(), "seed": seed}
    start = time.perf_counter()

    def cached(parts: dict, fn):
        if cache is None:
            return fn()
        key = RunCache.key(parts)
        hit = cache.get(key, oracle)
        if hit is None:
            hit = fn()
            cache.put(key, hit)
        return hit

    model = Seq2Seq(mcfg, seed)
    s1 = None
    parts = dict(base)
    if system.stage1 is not None:
        tcfg1 = replace(pcfg.train, stage=Stage.STAGE1, mode=system.stage1, seed=seed,
                        epochs=pcfg.stage1_epochs or pcfg.train.epochs)
        parts = {**base, "stage1": tcfg1.to_dict()}
        s1 = cached(parts, lambda: run_stage1(corpus, model, oracle, tcfg1))
        model.load_arrays(s1.params)
    tcfg2 = replace(pcfg.train, stage=Stage.STAGE2, mode=system.stage2, seed=seed)
    parts = {**parts, "stage2": tcfg2.to_dict(), "noise": noise.to_dict() if noise else None}
    runner = run_single_stage if system.stage2 is Mode.SINGLE_STAGE else run_stage2
    s2 = cached(parts, lambda: runner(corpus, model, oracle, tcfg2, noise=noise))
    model.load_arrays(s2.params)
    model.set_trainable(set())
    return TrainedSystem(system, seed, model, s2, s2.effective_oracle(), s1,
                         time.perf_counter() - start)


def evaluate_system(ts: TrainedSystem, corpus: Corpus, split: str, dcfg: DecodeConfig,
                    noise: Optional[NoiseSpec] = None, src_lang: str = "a", tgt_lang: str = "b"):
    dcfg = replace(dcfg, mode=ts.system.decode)
    oracle = None if ts.model.cfg.k == 0 else ts.oracle
    return evaluate(ts.model, oracle, corpus, split, dcfg, src_lang=src_lang,
                    tgt_lang=tgt_lang, noise=noise)


# ---------------------------------------------------------------- drivers


def run_noising_experiment(corpus: Corpus, oracle: Oracle, p_grid: Sequence[float],
                           pcfg: PipelineConfig, seeds: Sequence[int] = (0,),
                           cache: Optional[RunCache] = None) -> EvalReport:
    """Image-conditioned system vs the text-only baseline under source token dropping."""
    if any(not 0 <= p <= 1 for p in p_grid):
        raise ValueError("noise probabilities must lie in [0, 1]")
    report = EvalReport("noise", {"pipeline": pcfg.to_dict(), "p_grid": list(p_grid)}, list(seeds))
    for p in p_grid:
        per = {"image": [], "text_only": []}
        for seed in seeds:
            noise = NoiseSpec(p, seed, NoiseMode.DROP)
            for name in per:
                ts = train_system(corpus, oracle, name, seed, pcfg, noise, cache)
                bleu = evaluate_system(ts, corpus, "test", pcfg.decode, noise).bleu
                per[name].append(bleu)
                report.rows.append({"p": p, "seed": seed, "system": name, "bleu": bleu})
                report.timing[f"p={p}/seed={seed}/{name}"] = ts.seconds
        report.summary[f"p={p}"] = {n: aggregate(v) for n, v in per.items()}
    return report


def run_prefix_sweep(corpus: Corpus, oracle: Oracle, k_grid: Sequence[int] = (1, 5, 10, 20, 50),
                     pcfg: Optional[PipelineConfig] = None, seeds: Sequence[int] = (0,),
                     cache: Optional[RunCache] = None) -> EvalReport:
    """Full two-stage pipeline for each prefix length."""
    if any(int(k) != k or k < 1 for k in k_grid):
        raise ValueError("prefix lengths must be positive integers")
    pcfg = pcfg or PipelineConfig(ModelConfig(vocab_size=len(corpus.vocab)))
    report = EvalReport("prefix", {"pipeline": pcfg.to_dict(), "k_grid": list(k_grid)}, list(seeds))
    for k in k_grid:
        kcfg = replace(pcfg, model=replace(pcfg.model, k=int(k)))
        scores = []
        for seed in seeds:
            ts = train_system(corpus, oracle, "standard", seed, kcfg, None, cache)
            bleu = evaluate_system(ts, corpus, "test", kcfg.decode).bleu
            scores.append(bleu)
            report.rows.append({"k": int(k), "seed": seed, "bleu": bleu})
            report.timing[f"k={k}/seed={seed}"] = ts.seconds
        report.summary[f"k={k}"] = aggregate(scores)
    return report


def mask_grounded(corpus: Corpus, seed: int, split: str = "test", lang: str = "a"):
    """For each record pick one grounded position (seeded) and mask it in the source."""
    out = []
    for rec in corpus.split(split):
        if not rec.grounded:
            raise ValueError(f"record {rec.id} has no grounded token annotations")
        rng = np.random.default_rng([seed, rec.id, 11])
        pos = int(rec.grounded[rng.integers(len(rec.grounded))])
        ids = source_ids(corpus, rec, lang)
        masked = list(ids)
        masked[pos] = MASK_ID
        out.append((rec, pos, ids, masked))
    return out


def recovery_accuracy(ts: TrainedSystem, corpus: Corpus, seed: int, dcfg: DecodeConfig,
                      masked: bool = True, src_lang: str = "a", tgt_lang: str = "b") -> dict:
    """Fraction of chosen grounded attributes whose target-side word appears in the output."""
    items = mask_grounded(corpus, seed, "test", src_lang)
    attr_of = corpus.world.token_attribute()
    dcfg = replace(dcfg, mode=ts.system.decode)
    oracle = None if ts.model.cfg.k == 0 else ts.oracle
    hits = {a: [] for a in ATTRIBUTES}
    for start in range(0, len(items), 100):
        chunk = items[start:start + 100]
        toks = [m if masked else ids for _, _, ids, m in chunk]
        lat = np.stack([rec.latent for rec, *_ in chunk])
        hyps = decode_batch(ts.model, oracle, toks, dcfg, latents=lat,
                            src_lang=src_lang, tgt_lang=tgt_lang)
        for (rec, pos, ids, _), hyp in zip(chunk, hyps):
            # captions are word-for-word, so the target word sits at the same position
            word = rec.caption(tgt_lang)[pos]
            hits[attr_of[word][0]].append(corpus.vocab.index[word] in hyp.tokens)
    total = [h for v in hits.values() for h in v]
    return {"accuracy": float(np.mean(total)),
            "per_attribute": {a: float(np.mean(v)) if v else None for a, v in hits.items()}}


def run_masked_recovery(corpus: Corpus, oracle: Oracle, pcfg: PipelineConfig,
                        seeds: Sequence[int] = (0,), cache: Optional[RunCache] = None,
                        train_noise_p: float = 0.3, systems: Optional[dict] = None) -> EvalReport:
    """Masked grounded-token recovery: image-conditioned system vs text-only baseline.

    Both systems are trained with mask-mode source noise so the mask token is
    familiar. ``systems`` may supply already trained ``{(name, seed): TrainedSystem}``.
    """
    if not any(r.grounded for r in corpus.split("test")):
        raise ValueError("corpus lacks grounded token annotations")
    report = EvalReport("recovery", {"pipeline": pcfg.to_dict(), "train_noise_p": train_noise_p},
                        list(seeds))
    acc = {"image": [], "text_only": []}
    control = {"image": [], "text_only": []}
    for seed in seeds:
        noise = NoiseSpec(train_noise_p, seed, NoiseMode.MASK)
        for name in acc:
            ts = (systems or {}).get((name, seed))
            if ts is None:
                ts = train_system(corpus, oracle, name, seed, pcfg, noise, cache)
                report.timing[f"seed={seed}/{name}"] = ts.seconds
            res = recovery_accuracy(ts, corpus, seed, pcfg.decode, masked=True)
            ctl = recovery_accuracy(ts, corpus, seed, pcfg.decode, masked=False)
            acc[name].append(res["accuracy"])
            control[name].append(ctl["accuracy"])
            report.rows.append({"seed": seed, "system": name, "accuracy": res["accuracy"],
                                "per_attribute": res["per_attribute"],
                                "control_accuracy": ctl["accuracy"]})
    report.summary = {"masked": {n: aggregate(v) for n, v in acc.items()},
                      "unmasked": {n: aggregate(v) for n, v in control.items()}}
    return report
