"""Two-stage training (captioning warm-up, then translation) and its ablations."""
from __future__ import annotations

import enum
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, OracleMismatchError
from .corpus import Batch, Corpus, NoiseSpec, Task, build_batch, make_batches
from .decoding import DecodeConfig, DecodeMode, evaluate
from .model import ModelConfig, Seq2Seq, sequence_loss
from .oracle import Oracle, TrainableText, select_caption_language

log = logging.getLogger(__name__)


class Stage(str, enum.Enum):
    STAGE1 = "stage1"
    STAGE2 = "stage2"


class Mode(str, enum.Enum):
    STANDARD = "standard"
    SINGLE_STAGE = "single_stage"
    FINETUNE_ORACLE_TEXT = "finetune_oracle_text"
    REG = "reg"
    MULTILINGUAL_CAPTION = "multilingual_caption"
    TEXT_ONLY = "text_only"


STAGE1_MODES = {Mode.STANDARD, Mode.MULTILINGUAL_CAPTION}
STAGE2_MODES = {Mode.STANDARD, Mode.FINETUNE_ORACLE_TEXT, Mode.REG, Mode.TEXT_ONLY}


class ConfigError(ValueError):
    pass


class InvariantError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    stage: Stage = Stage.STAGE1
    mode: Mode = Mode.STANDARD
    epochs: int = 15
    batch_size: int = 32
    lr0: float = 3e-4
    power: float = 1.0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    seed: int = 0
    caption_lang: str = "auto"  # auto | a | b | both
    src_lang: str = "a"
    tgt_lang: str = "b"
    valid_beam_size: int = 1
    valid_max_len: int = 16
    select_best: bool = True

    def __post_init__(self):
        self.stage = Stage(self.stage)
        self.mode = Mode(self.mode)
        if self.caption_lang not in ("auto", "a", "b", "both"):
            raise ConfigError(f"caption_lang must be auto, a, b or both, not {self.caption_lang!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if {self.src_lang, self.tgt_lang} != {"a", "b"}:
            raise ConfigError("src_lang and tgt_lang must be the two world languages")

    def validate_for(self, stage: Stage) -> None:
        if self.mode is Mode.SINGLE_STAGE:
            return
        allowed = STAGE1_MODES if stage is Stage.STAGE1 else STAGE2_MODES
        if self.mode not in allowed:
            raise ConfigError(f"mode {self.mode.value} is not valid for {stage.value}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage"], d["mode"] = self.stage.value, self.mode.value
        return d


# ---------------------------------------------------------------- optimizer pieces


def poly_decay_lr(step: int, total_steps: int, lr0: float, power: float = 1.0) -> float:
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * (1.0 - step / total_steps) ** power


def adamw_step(params: dict[str, T.Tensor], state: dict[str, dict], lr: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.0) -> None:
    """In-place AdamW update with decoupled weight decay and bias correction."""
    for name in sorted(params):
        p = params[name]
        if p.grad is None:
            raise ValueError(f"trainable parameter {name} has no gradient")
        dt = p.data.dtype
        st = state.get(name)
        if st is None:
            st = state[name] = {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0}
        if st["m"].shape != p.shape:
            raise ValueError(f"optimizer state shape mismatch for {name}")
        g = p.grad
        st["t"] += 1
        t = st["t"]
        st["m"] = (beta1 * st["m"] + (1 - beta1) * g).astype(dt)
        st["v"] = (beta2 * st["v"] + (1 - beta2) * g * g).astype(dt)
        m_hat = st["m"] / (1 - beta1 ** t)
        v_hat = st["v"] / (1 - beta2 ** t)
        if weight_decay:
            p.data = (p.data * (1 - lr * weight_decay)).astype(dt)
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(dt)


def clip_grad_norm(params: dict[str, T.Tensor], max_norm: float) -> float:
    total = 0.0
    for name in sorted(params):
        g = params[name].grad
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = total ** 0.5
    if max_norm > 0 and norm > max_norm:
        scale = np.float32(max_norm / (norm + 1e-6))
        for p in params.values():
            p.grad = (p.grad * scale).astype(p.grad.dtype)
    return norm


def _opt_to_arrays(state: dict[str, dict]) -> dict[str, np.ndarray]:
    out = {}
    for name, st in state.items():
        out[f"m/{name}"] = st["m"]
        out[f"v/{name}"] = st["v"]
        out[f"t/{name}"] = np.array([st["t"]], dtype=np.int64)
    return out


def _opt_from_arrays(arrays: dict[str, np.ndarray]) -> dict[str, dict]:
    state = {}
    for key, arr in arrays.items():
        kind, name = key.split("/", 1)
        st = state.setdefault(name, {})
        st[kind] = int(arr[0]) if kind == "t" else np.array(arr, dtype=np.float32)
    return state


# ---------------------------------------------------------------- the run loop


def _substeps(stage: Stage, cfg: TrainConfig) -> list[tuple[str, set[str]]]:
    """(prefix source, trainable groups) for each optimizer step within one batch."""
    if cfg.mode is Mode.SINGLE_STAGE:
        return [("caption", {"mapping", "decoder"}), ("text", {"mapping", "encoder", "decoder"})]
    if stage is Stage.STAGE1:
        return [("caption", {"mapping", "decoder"})]
    if cfg.mode is Mode.TEXT_ONLY:
        return [("none", {"encoder", "decoder"})]
    if cfg.mode is Mode.REG:
        return [("image", {"mapping", "encoder", "decoder"})]
    return [("text", {"mapping", "encoder", "decoder"})]


def resolve_caption_langs(cfg: TrainConfig, oracle: Oracle, corpus: Corpus) -> list[str]:
    if cfg.mode is Mode.MULTILINGUAL_CAPTION or cfg.caption_lang == "both":
        return ["a", "b"]
    if cfg.caption_lang == "auto":
        return [select_caption_language(oracle, corpus, cfg.src_lang, cfg.tgt_lang)]
    return [cfg.caption_lang]


class _Run:
    def __init__(self, stage: Stage, corpus: Corpus, model: Seq2Seq, oracle: Oracle,
                 cfg: TrainConfig, noise: Optional[NoiseSpec], resume: Optional[Checkpoint],
                 on_epoch: Optional[Callable] = None):
        cfg.validate_for(stage)
        if cfg.mode is Mode.TEXT_ONLY and model.cfg.k != 0:
            raise ConfigError("text-only baseline needs a model built with k=0")
        if cfg.mode is not Mode.TEXT_ONLY and model.cfg.k == 0:
            raise ConfigError(f"mode {cfg.mode.value} needs a prefix (k > 0)")
        self.stage, self.corpus, self.model, self.oracle, self.cfg = stage, corpus, model, oracle, cfg
        self.noise = noise
        self.on_epoch = on_epoch
        self.plan = _substeps(stage, cfg)
        self.caption_langs = (resolve_caption_langs(cfg, oracle, corpus)
                              if stage is Stage.STAGE1 or cfg.mode is Mode.SINGLE_STAGE else [])
        self.text = TrainableText(oracle, [cfg.src_lang]) if cfg.mode is Mode.FINETUNE_ORACLE_TEXT else None
        self.by_id = {r.id: r for r in corpus.records}
        n_langs = len(self.caption_langs) if stage is Stage.STAGE1 and cfg.mode is not Mode.SINGLE_STAGE else 1
        n_train = len(corpus.split("train")) * n_langs
        self.batches_per_epoch = -(-n_train // cfg.batch_size)
        self.total_steps = cfg.epochs * self.batches_per_epoch * len(self.plan)
        self.opt: dict[str, dict] = {}
        self.step = 0
        self.epoch = 0
        self.history: list[dict] = []
        self.best_score = -1.0
        self.best_epoch = -1
        self.best: dict[str, np.ndarray] = {}
        model.drop_rng = np.random.default_rng([cfg.seed, 100 + list(Stage).index(stage)])
        if resume is not None:
            self._resume(resume)

    # -- bookkeeping

    def _all_params(self) -> dict[str, T.Tensor]:
        params = self.model.parameters()
        if self.text is not None:
            params.update(self.text.parameters())
        return params

    def _snapshot(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self._all_params().items()}

    def _resume(self, ckpt: Checkpoint) -> None:
        prov = ckpt.provenance
        if ckpt.oracle.hash() != self.oracle.hash():
            raise OracleMismatchError("resume checkpoint was trained against a different oracle")
        if prov.get("complete", True):
            raise ConfigError("checkpoint is complete; load its parameters instead of resuming")
        if prov.get("stage") != self.stage.value or prov.get("mode") != self.cfg.mode.value:
            raise ConfigError("resume checkpoint belongs to a different stage/mode")
        if ckpt.train_config != self.cfg.to_dict():
            raise ConfigError("resume checkpoint was produced with a different training config")
        self.model.load_arrays(ckpt.params)
        if self.text is not None:
            for l, t in self.text.tables.items():
                t.data = np.array(ckpt.oracle_text[l], dtype=np.float32)
        self.opt = _opt_from_arrays(ckpt.optimizer)
        self.model.drop_rng.bit_generator.state = ckpt.rng_state["dropout"]
        self.step, self.epoch = prov["step"], prov["epoch"]
        self.history = list(prov["history"])
        self.best_score, self.best_epoch = prov["best_score"], prov["best_epoch"]
        self.best = dict(ckpt.best_params)

    def checkpoint(self, complete: bool) -> Checkpoint:
        params = self.model.state_arrays()
        text = {l: t.data.copy() for l, t in self.text.tables.items()} if self.text else {}
        if complete and self.cfg.select_best and self.best:
            params = {n: a for n, a in self.best.items() if not n.startswith("oracle_text.")}
            text = {n.split(".", 1)[1]: a for n, a in self.best.items() if n.startswith("oracle_text.")}
        prov = {
            "stage": self.stage.value, "mode": self.cfg.mode.value,
            "caption_langs": self.caption_langs, "src_lang": self.cfg.src_lang,
            "tgt_lang": self.cfg.tgt_lang, "epoch": self.epoch, "epochs": self.cfg.epochs,
            "step": self.step, "total_steps": self.total_steps, "complete": complete,
            "history": self.history, "best_score": self.best_score, "best_epoch": self.best_epoch,
            "noise": self.noise.to_dict() if self.noise else None,
        }
        return Checkpoint(
            model_config=self.model.cfg.to_dict(), train_config=self.cfg.to_dict(),
            provenance=prov, params=params, oracle=self.oracle,
            optimizer={} if complete else _opt_to_arrays(self.opt),
            rng_state={"dropout": self.model.drop_rng.bit_generator.state},
            best_params={} if complete else self.best, oracle_text=text,
        )

    # -- one optimizer step

    def _prefix_embeddings(self, source: str, batch: Batch):
        if source in ("caption", "image"):
            return self.oracle.encode_images(batch.latents)
        if source == "text":
            if self.text is not None:
                return self.text.encode_texts(batch.oracle_tokens, self.cfg.src_lang)
            return self.oracle.encode_texts(batch.oracle_tokens, self.cfg.src_lang)
        return None

    def _loss(self, source: str, batch: Batch) -> T.Tensor:
        model = self.model
        h = self._prefix_embeddings(source, batch)
        z = model.map_prefix(h) if h is not None else None
        memory = model.encode_source(batch.src)
        logits = model.forward_logits(z, batch.dec_in, memory, batch.src)
        return sequence_loss(logits, batch.targets, model.cfg.k, model.cfg.pad_id)

    def _step(self, source: str, groups: set[str], batch: Batch) -> float:
        model, cfg = self.model, self.cfg
        model.set_trainable(groups)
        params = model.trainable()
        if self.text is not None:
            for t in self.text.tables.values():
                t.grad = None
            if source == "text":
                params.update(self.text.parameters())
        T.reset_tape()
        loss = self._loss(source, batch)
        T.backward(loss)
        clip_grad_norm(params, cfg.clip_norm)
        lr = poly_decay_lr(self.step, self.total_steps, cfg.lr0, cfg.power)
        adamw_step(params, self.opt, lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
        self.step += 1
        return loss.item()

    def _caption_batch(self, batch: Batch) -> Batch:
        items = [(self.by_id[i], self.caption_langs[0]) for i in batch.ids]
        return build_batch(self.corpus, items, Task.CAPTION, self.cfg.src_lang)

    # -- validation

    def validate(self) -> float:
        model, cfg = self.model, self.cfg
        dcfg = DecodeConfig(beam_size=cfg.valid_beam_size, max_len=cfg.valid_max_len)
        if self.stage is Stage.STAGE1 and cfg.mode is not Mode.SINGLE_STAGE:
            dcfg.mode = DecodeMode.PREFIX_ONLY
            scores = [evaluate(model, self.oracle, self.corpus, "valid", dcfg, caption_lang=l).bleu
                      for l in self.caption_langs]
            return float(np.mean(scores))
        dcfg.mode = DecodeMode.IMAGE if cfg.mode is Mode.REG else DecodeMode.HALLUCINATE
        return evaluate(model, self.oracle, self.corpus, "valid", dcfg, src_lang=cfg.src_lang,
                        tgt_lang=cfg.tgt_lang, noise=self.noise, text=self.text).bleu

    # -- main loop

    def run(self, stop_after_epoch: Optional[int] = None) -> Checkpoint:
        cfg, model = self.cfg, self.model
        single = cfg.mode is Mode.SINGLE_STAGE
        while self.epoch < cfg.epochs:
            if stop_after_epoch is not None and self.epoch >= stop_after_epoch:
                return self.checkpoint(complete=False)
            model.train()
            if self.stage is Stage.STAGE1 and not single:
                batches = make_batches(self.corpus, cfg.batch_size, cfg.seed, Task.CAPTION,
                                       lang=self.caption_langs, epoch=self.epoch)
            else:
                batches = make_batches(self.corpus, cfg.batch_size, cfg.seed, Task.TRANSLATE,
                                       lang=cfg.tgt_lang, src_lang=cfg.src_lang,
                                       epoch=self.epoch, noise=self.noise)
            losses = []
            for batch in batches:
                for source, groups in self.plan:
                    b = self._caption_batch(batch) if single and source == "caption" else batch
                    losses.append(self._step(source, groups, b))
            self.epoch += 1
            score = self.validate()
            self.history.append({"epoch": self.epoch, "loss": float(np.mean(losses)),
                                 "valid_bleu": score})
            log.info("%s/%s epoch %d loss %.4f valid_bleu %.2f", self.stage.value,
                     cfg.mode.value, self.epoch, np.mean(losses), score)
            if score > self.best_score:
                self.best_score, self.best_epoch = score, self.epoch
                self.best = self._snapshot()
            if self.on_epoch is not None:
                self.on_epoch(self)
        T.reset_tape()
        model.set_trainable(set())
        ckpt = self.checkpoint(complete=True)
        if cfg.select_best and self.best:
            model.load_arrays(ckpt.params)
        return ckpt


def _frozen_hashes(model: Seq2Seq, oracle: Oracle, groups) -> dict[str, str]:
    out = {g: model.group_hash(g) for g in groups}
    out["oracle"] = oracle.hash()
    return out


def _check_unchanged(before: dict[str, str], after: dict[str, str], what: str) -> None:
    changed = [k for k in before if before[k] != after[k]]
    if changed:
        raise InvariantError(f"{what}: frozen parameters changed: {changed}")


def run_stage1(corpus: Corpus, model: Seq2Seq, oracle: Oracle, cfg: TrainConfig, *,
               noise: Optional[NoiseSpec] = None, resume: Optional[Checkpoint] = None,
               stop_after_epoch: Optional[int] = None, on_epoch=None) -> Checkpoint:
    """Captioning warm-up: image prefix, trivial source; trains mapping + decoder."""
    before = _frozen_hashes(model, oracle, ["encoder"])
    run = _Run(Stage.STAGE1, corpus, model, oracle, cfg, noise, resume, on_epoch)
    ckpt = run.run(stop_after_epoch)
    _check_unchanged(before, _frozen_hashes(model, oracle, ["encoder"]), "stage1")
    return ckpt


def run_stage2(corpus: Corpus, model: Seq2Seq, oracle: Oracle, cfg: TrainConfig, *,
               noise: Optional[NoiseSpec] = None, resume: Optional[Checkpoint] = None,
               stop_after_epoch: Optional[int] = None, on_epoch=None) -> Checkpoint:
    """Translation stage: text prefix (image prefix in reg mode), real source."""
    before = _frozen_hashes(model, oracle, [])
    run = _Run(Stage.STAGE2, corpus, model, oracle, cfg, noise, resume, on_epoch)
    ckpt = run.run(stop_after_epoch)
    _check_unchanged(before, _frozen_hashes(model, oracle, []), "stage2")
    if cfg.mode is Mode.FINETUNE_ORACLE_TEXT and ckpt.effective_oracle().image_hash() != oracle.image_hash():
        raise InvariantError("finetuning the text encoder must leave the image map untouched")
    return ckpt


def run_single_stage(corpus: Corpus, model: Seq2Seq, oracle: Oracle, cfg: TrainConfig, *,
                     noise: Optional[NoiseSpec] = None, resume: Optional[Checkpoint] = None,
                     stop_after_epoch: Optional[int] = None, on_epoch=None) -> Checkpoint:
    """Caption step and translation step on every batch."""
    if cfg.mode is not Mode.SINGLE_STAGE:
        raise ConfigError("run_single_stage needs mode single_stage")
    before = _frozen_hashes(model, oracle, [])
    run = _Run(Stage.STAGE2, corpus, model, oracle, cfg, noise, resume, on_epoch)
    ckpt = run.run(stop_after_epoch)
    _check_unchanged(before, _frozen_hashes(model, oracle, []), "single stage")
    return ckpt


def model_from_checkpoint(ckpt: Checkpoint) -> Seq2Seq:
    model = Seq2Seq(ModelConfig.from_dict(ckpt.model_config))
    model.load_arrays(ckpt.params)
    model.set_trainable(set())
    return model
