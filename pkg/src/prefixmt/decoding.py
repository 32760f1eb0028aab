"""Inference: prefix construction, greedy and beam decoding, corpus evaluation."""
from __future__ import annotations

import enum
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .bleu import corpus_bleu
from .corpus import END_ID, LANG_TAG, START_ID, Corpus, NoiseSpec, _pad, source_ids
from .model import Seq2Seq
from .oracle import Oracle, TrainableText
from .tensor import Tensor


class DecodeMode(str, enum.Enum):
    HALLUCINATE = "hallucinate"  # h from the source text, no image needed
    IMAGE = "image"  # h from the ground-truth image latent
    PREFIX_ONLY = "prefix_only"  # trivial source; output depends on the prefix alone


@dataclass
class DecodeConfig:
    beam_size: int = 5
    max_len: int = 16
    length_penalty: float = 1.0
    mode: DecodeMode = DecodeMode.HALLUCINATE

    def __post_init__(self):
        self.mode = DecodeMode(self.mode)
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d


@dataclass
class Hypothesis:
    tokens: list[int]  # generated tokens, END excluded
    logprob: float  # sum over generated tokens, END included when finished
    finished: bool

    @property
    def length(self) -> int:
        return len(self.tokens) + (1 if self.finished else 0)

    def normalized(self, length_penalty: float = 1.0) -> float:
        return self.logprob / max(self.length, 1) ** length_penalty


@contextmanager
def evaluating(model: Seq2Seq):
    prev = model.training
    model.eval()
    try:
        with T.no_grad():
            yield
    finally:
        model.train(prev)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.float64)
    x = x - x.max(axis=-1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))


def oracle_embeddings(oracle: Oracle, mode: DecodeMode, token_lists, latents, src_lang: str,
                      text: Optional[TrainableText] = None) -> np.ndarray:
    if DecodeMode(mode) is DecodeMode.IMAGE:
        if latents is None:
            raise ValueError("image mode needs ground-truth image latents")
        return oracle.encode_images(latents)
    if text is not None:
        return text.encode_texts(token_lists, src_lang).data
    return oracle.encode_texts(token_lists, src_lang)


def source_array(token_lists: Sequence[Sequence[int]], src_lang: Optional[str]) -> np.ndarray:
    """Encoder inputs; ``src_lang=None`` gives the trivial (START, END) source."""
    if src_lang is None:
        return _pad([[START_ID, END_ID] for _ in token_lists])
    return _pad([[LANG_TAG[src_lang]] + list(t) + [END_ID] for t in token_lists])


def greedy_decode(model: Seq2Seq, z: Optional[Tensor], memory: Tensor, src: np.ndarray,
                  tgt_lang: str, max_len: int) -> list[Hypothesis]:
    B = memory.shape[0]
    dec = np.full((B, 1), LANG_TAG[tgt_lang], dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    logprob = np.zeros(B)
    with evaluating(model):
        for _ in range(max_len):
            logits = model.forward_logits(z, dec, memory, src)
            lp = _log_softmax(logits.data[:, -1])
            tok = lp.argmax(axis=-1)
            logprob += np.where(done, 0.0, lp[np.arange(B), tok])
            dec = np.concatenate([dec, tok[:, None]], axis=1)
            done |= tok == END_ID
            if done.all():
                break
    hyps = []
    for i in range(B):
        gen = dec[i, 1:].tolist()
        if END_ID in gen:
            hyps.append(Hypothesis(gen[: gen.index(END_ID)], float(logprob[i]), True))
        else:
            hyps.append(Hypothesis(gen, float(logprob[i]), False))
    return hyps


def _rows(t: Optional[Tensor], i: int, n: int) -> Optional[Tensor]:
    if t is None:
        return None
    return Tensor(np.repeat(t.data[i:i + 1], n, axis=0))


def beam_search(model: Seq2Seq, z: Optional[Tensor], memory: Tensor, src: np.ndarray,
                tgt_lang: str, cfg: DecodeConfig) -> Hypothesis:
    """Length-normalized beam search for one sentence.

    Candidates are ranked by cumulative log-prob, ties going to the lower token
    id. An END candidate only finishes when it ranks inside the top ``beam_size``,
    so ``beam_size=1`` reproduces greedy decoding. If no hypothesis finishes
    within ``max_len`` the best unfinished one is returned (``finished=False``).
    """
    if memory.shape[0] != 1:
        raise ValueError("beam_search decodes one sentence at a time")
    src = np.asarray(src).reshape(1, -1)
    beam = cfg.beam_size
    tag = LANG_TAG[tgt_lang]
    live: list[tuple[list[int], float]] = [([tag], 0.0)]
    finished: list[tuple[Hypothesis, int]] = []
    with evaluating(model):
        for step in range(cfg.max_len):
            n = len(live)
            dec = np.array([toks for toks, _ in live], dtype=np.int64)
            logits = model.forward_logits(_rows(z, 0, n), dec, _rows(memory, 0, n),
                                          np.repeat(src, n, axis=0))
            lp = _log_softmax(logits.data[:, -1])
            scores = np.array([s for _, s in live])[:, None] + lp
            V = lp.shape[1]
            beam_idx = np.repeat(np.arange(n), V)
            tok_idx = np.tile(np.arange(V), n)
            flat = scores.reshape(-1)
            order = np.lexsort((beam_idx, tok_idx, -flat))[: 2 * beam]
            nxt = []
            for rank, c in enumerate(order):
                b, w, s = int(beam_idx[c]), int(tok_idx[c]), float(flat[c])
                if w == END_ID:
                    if rank < beam:
                        finished.append((Hypothesis(live[b][0][1:], s, True), step))
                elif len(nxt) < beam:
                    nxt.append((live[b][0] + [w], s))
            live = nxt
            if len(finished) >= beam or not live:
                break
    lpn = cfg.length_penalty
    if finished:
        best = min(finished, key=lambda hs: (-hs[0].normalized(lpn), hs[0].tokens, hs[1]))
        return best[0]
    cands = [Hypothesis(toks[1:], s, False) for toks, s in live]
    return min(cands, key=lambda h: (-h.normalized(lpn), h.tokens))


def score_hypothesis(model: Seq2Seq, z: Optional[Tensor], memory: Tensor, src: np.ndarray,
                     tgt_lang: str, hyp: Hypothesis) -> float:
    """Teacher-forced log-prob of ``hyp`` for one sentence, END included when finished.

    Decoders accumulate scores over differently shaped forward passes, so their
    running totals can disagree in the last float32 bits for the same tokens.
    This rescoring gives identical outputs identical scores.
    """
    if memory.shape[0] != 1:
        raise ValueError("score_hypothesis scores one sentence at a time")
    targets = list(hyp.tokens) + ([END_ID] if hyp.finished else [])
    if not targets:
        return 0.0
    dec = np.array([[LANG_TAG[tgt_lang]] + list(hyp.tokens)[: len(targets) - 1]], dtype=np.int64)
    with evaluating(model):
        logits = model.forward_logits(z, dec, memory, np.asarray(src).reshape(1, -1))
    lp = _log_softmax(logits.data[0, -len(targets):])
    return float(lp[np.arange(len(targets)), targets].sum())


def decode_batch(model: Seq2Seq, oracle: Optional[Oracle], token_lists, cfg: DecodeConfig, *,
                 latents=None, src_lang: str = "a", tgt_lang: str = "b",
                 text: Optional[TrainableText] = None) -> list[Hypothesis]:
    """Decode a batch of sources under ``cfg.mode``."""
    token_lists = [list(t) for t in token_lists]
    mode = DecodeMode(cfg.mode)
    prefix_only = mode is DecodeMode.PREFIX_ONLY
    src = source_array(token_lists, None if prefix_only else src_lang)
    with evaluating(model):
        z = None
        if model.cfg.k > 0:
            if prefix_only:
                emb_mode = DecodeMode.IMAGE if latents is not None else DecodeMode.HALLUCINATE
            else:
                emb_mode = mode
            h = oracle_embeddings(oracle, emb_mode, token_lists, latents, src_lang, text)
            z = model.map_prefix(h)
        memory = model.encode_source(src)
        if cfg.beam_size == 1:
            return greedy_decode(model, z, memory, src, tgt_lang, cfg.max_len)
        out = []
        for i in range(len(token_lists)):
            zi = None if z is None else Tensor(z.data[i:i + 1])
            out.append(beam_search(model, zi, Tensor(memory.data[i:i + 1]), src[i:i + 1],
                                   tgt_lang, cfg))
        return out


def translate(model: Seq2Seq, oracle: Optional[Oracle], x: Sequence[int], cfg: DecodeConfig, *,
              latent=None, src_lang: str = "a", tgt_lang: str = "b",
              text: Optional[TrainableText] = None) -> list[int]:
    mode = DecodeMode(cfg.mode)
    if mode is DecodeMode.IMAGE and latent is None:
        raise ValueError("ground-truth image mode needs an image latent")
    lat = None if latent is None or mode is not DecodeMode.IMAGE else np.asarray(latent)[None]
    return decode_batch(model, oracle, [x], cfg, latents=lat, src_lang=src_lang,
                        tgt_lang=tgt_lang, text=text)[0].tokens


def decode_prefix_only(model: Seq2Seq, oracle: Oracle, source, cfg: DecodeConfig,
                       tgt_lang: str) -> Hypothesis:
    """Decode from the prefix alone; ``source`` is ("image", v) or ("text", tokens, lang)."""
    pcfg = DecodeConfig(cfg.beam_size, cfg.max_len, cfg.length_penalty, DecodeMode.PREFIX_ONLY)
    if source[0] == "image":
        return decode_batch(model, oracle, [[]], pcfg, latents=np.asarray(source[1])[None],
                            tgt_lang=tgt_lang)[0]
    if source[0] == "text":
        _, tokens, lang = source
        return decode_batch(model, oracle, [tokens], pcfg, src_lang=lang, tgt_lang=tgt_lang)[0]
    raise ValueError(f"unknown prefix source {source[0]!r}")


@dataclass
class EvalResult:
    bleu: float
    hypotheses: list[list[int]]
    references: list[list[int]]
    ids: list[int]
    n_unfinished: int


def evaluate(model: Seq2Seq, oracle: Optional[Oracle], corpus: Corpus, split: str,
             cfg: DecodeConfig, *, src_lang: str = "a", tgt_lang: str = "b",
             noise: Optional[NoiseSpec] = None, text: Optional[TrainableText] = None,
             caption_lang: Optional[str] = None, batch_size: int = 100) -> EvalResult:
    """BLEU of decoded outputs on ``split``.

    With ``cfg.mode == PREFIX_ONLY`` this scores image captioning into
    ``caption_lang`` (defaults to ``tgt_lang``); otherwise translation.
    """
    recs = corpus.split(split)
    vocab = corpus.vocab
    mode = DecodeMode(cfg.mode)
    out_lang = (caption_lang or tgt_lang) if mode is DecodeMode.PREFIX_ONLY else tgt_lang
    hyps, refs = [], []
    for start in range(0, len(recs), batch_size):
        chunk = recs[start:start + batch_size]
        lat = np.stack([r.latent for r in chunk])
        if mode is DecodeMode.PREFIX_ONLY:
            toks = [[] for _ in chunk]
        else:
            toks = [source_ids(corpus, r, src_lang, noise) for r in chunk]
            if mode is DecodeMode.HALLUCINATE:
                lat = None
        hyps.extend(decode_batch(model, oracle, toks, cfg, latents=lat, src_lang=src_lang,
                                 tgt_lang=out_lang, text=text))
        refs.extend(vocab.encode(r.caption(out_lang)) for r in chunk)
    bleu = corpus_bleu([h.tokens for h in hyps], refs)
    return EvalResult(bleu, [h.tokens for h in hyps], refs, [r.id for r in recs],
                      sum(not h.finished for h in hyps))
