"""Synthetic bilingual image-caption world and its data plumbing.

Each record samples one value per attribute (color, object, action, scene). The
attributes fix a concept vector; the image latent is that concept plus nuisance
coordinates the oracle's image map ignores. Captions come from a fixed template
in language A and a word-for-word bijective lexicon into language B.
"""
from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

PAD, START, END, MASK, LANG_A, LANG_B = "<pad>", "<s>", "</s>", "<mask>", "<a>", "<b>"
SPECIALS = (PAD, START, END, MASK, LANG_A, LANG_B)
PAD_ID, START_ID, END_ID, MASK_ID, LANG_A_ID, LANG_B_ID = range(6)
LANGS = ("a", "b")
LANG_TAG = {"a": LANG_A_ID, "b": LANG_B_ID}

ATTRIBUTES = ("color", "object", "action", "scene")
# Template slots: function-word index (int) or attribute name.
TEMPLATE = (0, "color", "object", 1, "action", 2, 3, "scene")
N_FUNCTION_WORDS = 4
GROUNDED_POSITIONS = tuple(i for i, s in enumerate(TEMPLATE) if isinstance(s, str))

_SYLLABLE_CONSONANTS = {"a": "bdfglmnprst", "b": "hjkqvwxyz"}
_VOWELS = "aeiou"


class CorpusFormatError(ValueError):
    pass


class NoiseMode(str, enum.Enum):
    DROP = "drop"
    MASK = "mask"


@dataclass
class WorldConfig:
    n_colors: int = 12
    n_objects: int = 20
    n_actions: int = 16
    n_concept_clusters: int = 12  # scene values; each scene is a cluster of co-occurring concepts
    vocab_size_a: int = 64
    vocab_size_b: int = 64
    n_train: int = 2000
    n_valid: int = 200
    n_test: int = 200
    d_concept: int = 64
    nuisance_dim: int = 16
    nuisance_scale: float = 0.5
    seed: int = 0

    def __post_init__(self):
        sizes = (self.n_colors, self.n_objects, self.n_actions, self.n_concept_clusters,
                 self.n_train, self.n_valid, self.n_test, self.d_concept)
        if min(sizes) < 1 or self.nuisance_dim < 0:
            raise ValueError("world sizes must be positive")
        if self.d_concept < 2 * len(ATTRIBUTES):
            raise ValueError(f"d_concept must be at least {2 * len(ATTRIBUTES)}")

    @property
    def inventory(self) -> dict[str, int]:
        return {"color": self.n_colors, "object": self.n_objects,
                "action": self.n_actions, "scene": self.n_concept_clusters}

    @property
    def latent_dim(self) -> int:
        return self.d_concept + self.nuisance_dim


class Vocabulary:
    """Joint token<->id bijection; specials first, then language A, then language B."""

    def __init__(self, words_a: Sequence[str], words_b: Sequence[str]):
        self.tokens = list(SPECIALS) + list(words_a) + list(words_b)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        n_sp, n_a = len(SPECIALS), len(words_a)
        self.lang_of = np.full(len(self.tokens), "", dtype=object)
        self.lang_of[n_sp:n_sp + n_a] = "a"
        self.lang_of[n_sp + n_a:] = "b"

    def __len__(self):
        return len(self.tokens)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        try:
            return [self.index[t] for t in tokens]
        except KeyError as e:
            raise KeyError(f"unknown token {e.args[0]!r}") from None

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def tokenize(self, text: str) -> list[int]:
        return self.encode(text.split())

    def detokenize(self, ids: Sequence[int]) -> str:
        return " ".join(self.decode(ids))

    def is_special(self, i: int) -> bool:
        return i < len(SPECIALS)


@dataclass
class Triplet:
    id: int
    split: str
    latent: np.ndarray
    caption_a: tuple[str, ...]
    caption_b: tuple[str, ...]
    grounded: tuple[int, ...]

    def caption(self, lang: str) -> tuple[str, ...]:
        return self.caption_a if lang == "a" else self.caption_b


@dataclass
class World:
    """Everything deterministic about the world apart from the sampled records."""

    cfg: WorldConfig
    vocab: Vocabulary
    function_words: dict[str, list[str]]
    attribute_words: dict[str, dict[str, list[str]]]  # lang -> attribute -> words by value
    concept_vectors: dict[str, np.ndarray]  # attribute -> (n_values, d_concept)
    lexicon: dict[str, str] = field(default_factory=dict)  # a-word -> b-word

    def concept(self, values: dict[str, int]) -> np.ndarray:
        c = np.zeros(self.cfg.d_concept)
        for attr in ATTRIBUTES:
            c += self.concept_vectors[attr][values[attr]]
        return (c / np.sqrt(len(ATTRIBUTES))).astype(np.float32)

    def render(self, values: dict[str, int], lang: str) -> tuple[str, ...]:
        out = []
        for slot in TEMPLATE:
            if isinstance(slot, int):
                out.append(self.function_words[lang][slot])
            else:
                out.append(self.attribute_words[lang][slot][values[slot]])
        return tuple(out)

    def translate(self, tokens: Sequence[str]) -> tuple[str, ...]:
        return tuple(self.lexicon[t] for t in tokens)

    def token_attribute(self) -> dict[str, tuple[str, int]]:
        """word -> (attribute, value) for every content word in both languages."""
        out = {}
        for lang in LANGS:
            for attr, words in self.attribute_words[lang].items():
                for v, w in enumerate(words):
                    out[w] = (attr, v)
        return out

    def decode_attributes(self, latent: np.ndarray) -> dict[str, int]:
        """Recover attribute values from an image latent by nearest concept vector per block."""
        c = np.asarray(latent[: self.cfg.d_concept], dtype=np.float64) * np.sqrt(len(ATTRIBUTES))
        out = {}
        for attr in ATTRIBUTES:
            vecs = self.concept_vectors[attr]
            out[attr] = int(np.argmin(((vecs - c) ** 2)[:, _block(self.cfg, attr)].sum(axis=1)))
        return out

    def hash(self) -> str:
        h = hashlib.sha256(json.dumps(asdict(self.cfg), sort_keys=True).encode())
        h.update("\n".join(self.vocab.tokens).encode())
        for attr in ATTRIBUTES:
            h.update(np.ascontiguousarray(self.concept_vectors[attr], dtype="<f8").tobytes())
        return h.hexdigest()


def _block(cfg: WorldConfig, attr: str) -> slice:
    size = cfg.d_concept // len(ATTRIBUTES)
    i = ATTRIBUTES.index(attr)
    return slice(i * size, (i + 1) * size)


def _make_words(lang: str, n: int, rng: np.random.Generator) -> list[str]:
    syllables = [c + v for c in _SYLLABLE_CONSONANTS[lang] for v in _VOWELS]
    pool = [a + b for a in syllables for b in syllables]
    if n > len(pool):
        raise ValueError(f"cannot generate {n} distinct words for language {lang}")
    idx = rng.choice(len(pool), size=n, replace=False)
    return [pool[i] for i in idx]


def build_world(cfg: WorldConfig) -> World:
    needed = sum(cfg.inventory.values()) + N_FUNCTION_WORDS
    for lang, size in (("a", cfg.vocab_size_a), ("b", cfg.vocab_size_b)):
        if size < needed:
            raise ValueError(f"vocab_size_{lang}={size} is too small for the attribute "
                             f"inventory plus template ({needed} words needed)")
    if cfg.vocab_size_a != cfg.vocab_size_b:
        raise ValueError("a bijective lexicon needs equal vocabulary sizes")
    rng = np.random.default_rng([cfg.seed, 0])
    words = {lang: _make_words(lang, cfg.vocab_size_a, rng) for lang in LANGS}
    vocab = Vocabulary(words["a"], words["b"])
    lexicon = dict(zip(words["a"], words["b"]))

    function_words, attribute_words = {}, {}
    for lang in LANGS:
        ws = iter(words[lang])
        function_words[lang] = [next(ws) for _ in range(N_FUNCTION_WORDS)]
        attribute_words[lang] = {a: [next(ws) for _ in range(n)] for a, n in cfg.inventory.items()}

    crng = np.random.default_rng([cfg.seed, 1])
    concept_vectors = {}
    for attr, n in cfg.inventory.items():
        blk = _block(cfg, attr)
        size = blk.stop - blk.start
        v = crng.standard_normal((n, size))
        v -= v.mean(axis=0, keepdims=True)
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        full = np.zeros((n, cfg.d_concept))
        full[:, blk] = v
        concept_vectors[attr] = full
    return World(cfg, vocab, function_words, attribute_words, concept_vectors, lexicon)


@dataclass
class Corpus:
    world: World
    records: list[Triplet]

    def split(self, name: str) -> list[Triplet]:
        return [r for r in self.records if r.split == name]

    @property
    def vocab(self) -> Vocabulary:
        return self.world.vocab


def generate_world(cfg: WorldConfig) -> Corpus:
    world = build_world(cfg)
    rng = np.random.default_rng([cfg.seed, 2])
    records = []
    n_total = cfg.n_train + cfg.n_valid + cfg.n_test
    splits = ["train"] * cfg.n_train + ["valid"] * cfg.n_valid + ["test"] * cfg.n_test
    for i in range(n_total):
        values = {a: int(rng.integers(n)) for a, n in cfg.inventory.items()}
        concept = world.concept(values)
        nuisance = rng.standard_normal(cfg.nuisance_dim) * cfg.nuisance_scale
        latent = np.concatenate([concept, nuisance]).astype(np.float32)
        cap_a = world.render(values, "a")
        records.append(Triplet(i, splits[i], latent, cap_a, world.translate(cap_a),
                               GROUNDED_POSITIONS))
    return Corpus(world, records)


# ---------------------------------------------------------------- noising


def noise_tokens(seq: Sequence[int], p: float, seed, mode: NoiseMode = NoiseMode.DROP,
                 n_special: int = len(SPECIALS)) -> list[int]:
    """Drop or mask each non-special token independently with probability p."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    mode = NoiseMode(mode)
    rng = np.random.default_rng(seed)
    hits = rng.random(len(seq)) < p
    out = []
    for tok, hit in zip(seq, hits):
        if tok < n_special or not hit:
            out.append(tok)
        elif mode is NoiseMode.MASK:
            out.append(MASK_ID)
    return out


@dataclass(frozen=True)
class NoiseSpec:
    """Source-side corruption applied identically every time a record is served."""

    p: float
    seed: int = 0
    mode: NoiseMode = NoiseMode.DROP

    def apply(self, ids: Sequence[int], record_id: int) -> list[int]:
        if self.p == 0:
            return list(ids)
        return noise_tokens(ids, self.p, [self.seed, record_id], self.mode)

    def to_dict(self) -> dict:
        return {"p": self.p, "seed": self.seed, "mode": NoiseMode(self.mode).value}


def source_ids(corpus: Corpus, rec: Triplet, lang: str, noise: Optional[NoiseSpec] = None) -> list[int]:
    ids = corpus.vocab.encode(rec.caption(lang))
    return noise.apply(ids, rec.id) if noise is not None else ids


# ---------------------------------------------------------------- batching


class Task(str, enum.Enum):
    CAPTION = "caption"
    TRANSLATE = "translate"


@dataclass
class Batch:
    ids: list[int]
    src: np.ndarray  # (B, Ls), PAD-padded encoder input
    dec_in: np.ndarray  # (B, n) shifted decoder text input, starts with the language tag
    targets: np.ndarray  # (B, n), PAD where excluded
    latents: np.ndarray  # (B, latent_dim)
    oracle_tokens: list[list[int]]  # source tokens for the text oracle
    tgt_langs: list[str]

    def __len__(self):
        return len(self.ids)


def _pad(rows: list[list[int]]) -> np.ndarray:
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), PAD_ID, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
    return out


def build_batch(corpus: Corpus, items: Sequence[tuple[Triplet, str]], task: Task,
                src_lang: str = "a", noise: Optional[NoiseSpec] = None) -> Batch:
    """``items`` pairs each record with the language of its target text."""
    vocab = corpus.vocab
    srcs, dec, tgt, oracle_tokens = [], [], [], []
    for rec, lang in items:
        y = vocab.encode(rec.caption(lang))
        if Task(task) is Task.CAPTION:
            srcs.append([START_ID, END_ID])
            oracle_tokens.append([])
        else:
            x = source_ids(corpus, rec, src_lang, noise)
            srcs.append([LANG_TAG[src_lang]] + x + [END_ID])
            oracle_tokens.append(x)
        dec.append([LANG_TAG[lang]] + y)
        tgt.append(y + [END_ID])
    return Batch(
        ids=[r.id for r, _ in items],
        src=_pad(srcs),
        dec_in=_pad(dec),
        targets=_pad(tgt),
        latents=np.stack([r.latent for r, _ in items]).astype(np.float32),
        oracle_tokens=oracle_tokens,
        tgt_langs=[lang for _, lang in items],
    )


def make_batches(corpus: Corpus, batch_size: int, seed: int, task: Task, *,
                 lang: str | Sequence[str] = "b", src_lang: str = "a", epoch: int = 0,
                 split: str = "train", noise: Optional[NoiseSpec] = None,
                 shuffle: bool = True) -> Iterator[Batch]:
    """Yield one epoch of batches.

    Caption batches take target captions in ``lang`` (a sequence of languages
    serves every record once per language); translate batches map ``src_lang``
    captions to ``lang`` captions. The order depends only on (seed, epoch).
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    records = corpus.split(split)
    if not records:
        raise ValueError(f"split {split!r} is empty")
    langs = [lang] if isinstance(lang, str) else list(lang)
    items = [(r, l) for l in langs for r in records]
    order = np.arange(len(items))
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(len(items))
    for start in range(0, len(items), batch_size):
        chunk = [items[i] for i in order[start:start + batch_size]]
        yield build_batch(corpus, chunk, task, src_lang, noise)


def n_batches(corpus: Corpus, batch_size: int, split: str = "train", n_langs: int = 1) -> int:
    n = len(corpus.split(split)) * n_langs
    return -(-n // batch_size)


# ---------------------------------------------------------------- file format

FIELDS = ("id", "split", "latent", "caption_a", "caption_b", "grounded")


def _record_line(r: Triplet) -> str:
    obj = {
        "id": r.id,
        "split": r.split,
        "latent": [float(x) for x in np.asarray(r.latent, dtype=np.float32)],
        "caption_a": " ".join(r.caption_a),
        "caption_b": " ".join(r.caption_b),
        "grounded": list(r.grounded),
    }
    return json.dumps(obj, ensure_ascii=False, separators=(", ", ": "))


def _world_path(path: Path) -> Path:
    return path.with_name(path.name + ".world.json")


def write_corpus(corpus: Corpus, path) -> None:
    """Write records as JSON lines plus a ``<path>.world.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for r in corpus.records:
            f.write(_record_line(r) + "\n")
    with open(_world_path(path), "w", encoding="utf-8", newline="\n") as f:
        json.dump({"world_config": asdict(corpus.world.cfg), "world_hash": corpus.world.hash()},
                  f, sort_keys=True, indent=1)
        f.write("\n")


def _parse_line(line: str, lineno: int, vocab: Vocabulary, latent_dim: int) -> Triplet:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as e:
        raise CorpusFormatError(f"line {lineno}: malformed JSON ({e.msg})") from None
    if not isinstance(obj, dict) or tuple(obj) != FIELDS:
        raise CorpusFormatError(f"line {lineno}: expected fields {list(FIELDS)}")
    try:
        latent = np.asarray(obj["latent"], dtype=np.float32)
        cap_a, cap_b = tuple(obj["caption_a"].split()), tuple(obj["caption_b"].split())
        vocab.encode(cap_a)
        vocab.encode(cap_b)
        rec = Triplet(int(obj["id"]), str(obj["split"]), latent, cap_a, cap_b,
                      tuple(int(g) for g in obj["grounded"]))
    except (TypeError, ValueError, KeyError, AttributeError) as e:
        raise CorpusFormatError(f"line {lineno}: bad field value ({e})") from None
    if latent.shape != (latent_dim,):
        raise CorpusFormatError(f"line {lineno}: latent has {latent.size} values, expected {latent_dim}")
    if rec.split not in ("train", "valid", "test"):
        raise CorpusFormatError(f"line {lineno}: unknown split {rec.split!r}")
    return rec


def read_corpus(path) -> Corpus:
    path = Path(path)
    wpath = _world_path(path)
    if not wpath.exists():
        raise CorpusFormatError(f"missing world sidecar {wpath}")
    try:
        meta = json.loads(wpath.read_text(encoding="utf-8"))
        world = build_world(WorldConfig(**meta["world_config"]))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise CorpusFormatError(f"{wpath}: invalid world sidecar ({e})") from None
    if meta.get("world_hash") != world.hash():
        raise CorpusFormatError(f"{wpath}: world hash does not match its configuration")
    records = []
    seen = set()
    with open(path, encoding="utf-8", newline="") as f:
        for lineno, line in enumerate(f, 1):
            if not line.endswith("\n"):
                raise CorpusFormatError(f"line {lineno}: truncated record (no trailing newline)")
            rec = _parse_line(line[:-1], lineno, world.vocab, world.cfg.latent_dim)
            if rec.id in seen:
                raise CorpusFormatError(f"line {lineno}: duplicate record id {rec.id}")
            seen.add(rec.id)
            records.append(rec)
    return Corpus(world, records)


def corpus_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
