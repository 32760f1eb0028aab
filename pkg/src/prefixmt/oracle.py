"""Frozen, pre-aligned image/text encoder pair over the synthetic world.

Images: ``normalize(A @ v)`` where ``A`` is a random orthogonal map on the
concept coordinates and zero on nuisance coordinates. Text: the same map applied
to the concept rebuilt from content tokens plus deterministic pseudo-noise of
scale ``sigma[lang]``. With sigma = 0 a caption and its image embed identically.
"""
from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .corpus import ATTRIBUTES, LANGS, Corpus, World
from .tensor import Tensor


class OracleError(ValueError):
    pass


@dataclass
class Oracle:
    d_c: int
    image_map: np.ndarray  # (d_c, latent_dim)
    text_tables: dict[str, np.ndarray]  # lang -> (vocab, d_c) concept contribution per token
    sigma: dict[str, float]
    seed: int
    token_lang: np.ndarray  # per token id: "" for specials, else its language
    calls: Counter = field(default_factory=Counter, compare=False, repr=False)

    def __post_init__(self):
        self.image_map.setflags(write=False)
        for t in self.text_tables.values():
            t.setflags(write=False)

    @property
    def concept_map(self) -> np.ndarray:
        return self.image_map[:, : self.d_c]

    # -- encoders

    def encode_image(self, v) -> np.ndarray:
        return self.encode_images(np.asarray(v, dtype=np.float32)[None])[0]

    def encode_images(self, latents) -> np.ndarray:
        latents = np.asarray(latents, dtype=np.float32)
        if latents.ndim != 2 or latents.shape[1] != self.image_map.shape[1]:
            raise OracleError(f"image latents must have {self.image_map.shape[1]} values")
        self.calls["image"] += len(latents)
        h = latents.astype(np.float64) @ self.image_map.T
        return _normalize(h)

    def _check_tokens(self, tokens: Sequence[int], lang: str) -> np.ndarray:
        if lang not in self.text_tables:
            raise OracleError(f"unknown language {lang!r}")
        ids = np.asarray(tokens, dtype=np.int64)
        V = len(self.token_lang)
        if ids.size and (ids.min() < 0 or ids.max() >= V):
            raise OracleError("token id outside the vocabulary")
        owners = self.token_lang[ids] if ids.size else np.array([])
        bad = [int(i) for i, o in zip(ids, owners) if o not in ("", lang)]
        if bad:
            raise OracleError(f"tokens {bad} are not words of language {lang!r}")
        return ids

    def pseudo_noise(self, ids: np.ndarray, lang: str) -> np.ndarray:
        key = hashlib.sha256(f"{self.seed}|{lang}|{','.join(map(str, ids.tolist()))}".encode())
        words = np.frombuffer(key.digest(), dtype="<u4")
        return np.random.default_rng(words).standard_normal(self.d_c) / np.sqrt(self.d_c)

    def _text_concept(self, ids: np.ndarray, lang: str, table: Optional[np.ndarray] = None):
        table = self.text_tables[lang] if table is None else table
        concept = table[ids].sum(axis=0) if ids.size else np.zeros(self.d_c)
        eps = self.pseudo_noise(ids, lang)
        if not np.any(concept):
            # nothing recognisable left; fall back to the pseudo-noise direction
            return eps
        return concept + self.sigma[lang] * eps

    def encode_text(self, tokens: Sequence[int], lang: str) -> np.ndarray:
        return self.encode_texts([tokens], lang)[0]

    def encode_texts(self, token_lists: Sequence[Sequence[int]], lang: str) -> np.ndarray:
        self.calls["text"] += len(token_lists)
        rows = [self._text_concept(self._check_tokens(t, lang), lang) for t in token_lists]
        return _normalize(np.asarray(rows, dtype=np.float64) @ self.concept_map.T)

    # -- hashing

    def image_hash(self) -> str:
        h = hashlib.sha256(b"image")
        h.update(np.ascontiguousarray(self.image_map, dtype="<f4").tobytes())
        return h.hexdigest()

    def text_hash(self) -> str:
        h = hashlib.sha256(b"text")
        h.update(json.dumps({k: float(v) for k, v in sorted(self.sigma.items())}).encode())
        for lang in sorted(self.text_tables):
            h.update(lang.encode())
            h.update(np.ascontiguousarray(self.text_tables[lang], dtype="<f4").tobytes())
        return h.hexdigest()

    def hash(self) -> str:
        h = hashlib.sha256(f"{self.d_c}|{self.seed}".encode())
        h.update(self.image_hash().encode())
        h.update(self.text_hash().encode())
        h.update("|".join(self.token_lang.tolist()).encode())
        return h.hexdigest()

    def with_text_tables(self, tables: dict[str, np.ndarray]) -> "Oracle":
        """Copy sharing the image map but using replacement text tables."""
        return Oracle(self.d_c, self.image_map, {k: np.array(v, dtype=np.float32) for k, v in tables.items()},
                      dict(self.sigma), self.seed, self.token_lang)


def _normalize(h: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(h, axis=-1, keepdims=True)
    return (h / np.maximum(norm, 1e-12)).astype(np.float32)


def build_oracle(world: World, seed: int = 0, sigma: Optional[dict[str, float]] = None,
                 d_c: Optional[int] = None) -> Oracle:
    """Construct the oracle for ``world``; deterministic in ``seed``."""
    cfg = world.cfg
    d_c = cfg.d_concept if d_c is None else d_c
    if d_c != cfg.d_concept:
        raise OracleError(f"d_c={d_c} must equal the world's concept dimension {cfg.d_concept}")
    sigma = {"a": 0.1, "b": 0.3} if sigma is None else dict(sigma)
    if set(sigma) != set(LANGS) or min(sigma.values()) < 0:
        raise OracleError("need a non-negative sigma for each language")
    rng = np.random.default_rng([seed, 7])
    q, r = np.linalg.qr(rng.standard_normal((d_c, d_c)))
    q *= np.sign(np.diag(r))
    image_map = np.zeros((d_c, cfg.latent_dim), dtype=np.float32)
    image_map[:, :d_c] = q
    V = len(world.vocab)
    scale = 1.0 / np.sqrt(len(ATTRIBUTES))
    tables = {}
    for lang in LANGS:
        table = np.zeros((V, d_c), dtype=np.float32)
        for attr in ATTRIBUTES:
            for value, word in enumerate(world.attribute_words[lang][attr]):
                table[world.vocab.index[word]] = world.concept_vectors[attr][value] * scale
        tables[lang] = table
    token_lang = np.array(world.vocab.lang_of.tolist(), dtype=object)
    return Oracle(d_c, image_map, tables, {k: float(v) for k, v in sigma.items()}, seed, token_lang)


# ---------------------------------------------------------------- alignment


def alignment_score(oracle: Oracle, corpus: Corpus, lang: str, split: str = "train") -> float:
    """Mean cosine between each record's image and its caption in ``lang``."""
    recs = corpus.split(split)
    if not recs:
        raise OracleError(f"split {split!r} is empty")
    img = oracle.encode_images(np.stack([r.latent for r in recs]))
    txt = oracle.encode_texts([corpus.vocab.encode(r.caption(lang)) for r in recs], lang)
    cos = (img.astype(np.float64) * txt).sum(axis=1)
    return float(np.mean(cos))


def select_caption_language(oracle: Oracle, corpus: Corpus, src_lang: str, tgt_lang: str,
                            tol: float = 1e-6) -> str:
    s_src = alignment_score(oracle, corpus, src_lang)
    s_tgt = alignment_score(oracle, corpus, tgt_lang)
    return tgt_lang if s_tgt - s_src >= tol else src_lang


# ---------------------------------------------------------------- trainable text side


class TrainableText:
    """Text tables lifted to tensors so the text encoder can be finetuned."""

    def __init__(self, oracle: Oracle, langs: Sequence[str]):
        self.oracle = oracle
        self.tables = {l: Tensor(oracle.text_tables[l], requires_grad=True, name=f"oracle_text.{l}")
                       for l in langs}

    def parameters(self) -> dict[str, Tensor]:
        return {f"oracle_text.{l}": t for l, t in self.tables.items()}

    def encode_texts(self, token_lists: Sequence[Sequence[int]], lang: str) -> Tensor:
        o = self.oracle
        o.calls["text"] += len(token_lists)
        table = self.tables[lang]
        width = max(1, max(len(t) for t in token_lists))
        ids = np.zeros((len(token_lists), width), dtype=np.int64)
        keep = np.zeros((len(token_lists), width, o.d_c), dtype=table.data.dtype)
        extra = np.zeros((len(token_lists), o.d_c))
        for i, toks in enumerate(token_lists):
            toks = o._check_tokens(toks, lang)
            ids[i, :len(toks)] = toks
            keep[i, :len(toks)] = 1
            eps = o.pseudo_noise(toks, lang)
            if not np.any(table.data[toks].sum(axis=0) if toks.size else 0):
                extra[i] = eps
            else:
                extra[i] = o.sigma[lang] * eps
        rows = T.mul(T.take_rows(table, ids), Tensor(keep))
        concept = T.add_constant(T.sum(rows, axis=1), extra)
        return T.l2_normalize(T.matmul(concept, Tensor(np.ascontiguousarray(o.concept_map.T))))

    def frozen(self) -> Oracle:
        return self.oracle.with_text_tables({**self.oracle.text_tables,
                                             **{l: t.data for l, t in self.tables.items()}})
