"""Transformer encoder-decoder whose decoder input can be prefixed with mapped
oracle embeddings.

Decoder layout (``AfterStart``): ``[START, z_1..z_k, y_0..y_{n-1}]``. The prefix
block attends bidirectionally; every other row is causal. ``BeforeStart`` puts the
prefix ahead of the start token.
"""
from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import asdict, dataclass
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


class MappingVariant(str, enum.Enum):
    LINEAR = "linear"
    MLP = "mlp"
    ENC = "enc"


class PrefixPosition(str, enum.Enum):
    AFTER_START = "after_start"
    BEFORE_START = "before_start"


GROUPS = ("mapping", "encoder", "decoder")


@dataclass
class ModelConfig:
    vocab_size: int
    d_b: int = 128
    d_c: int = 64
    k: int = 10
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    max_seq_len: int = 64
    mn_variant: MappingVariant = MappingVariant.LINEAR
    prefix_position: PrefixPosition = PrefixPosition.AFTER_START
    dropout: float = 0.1
    prefix_pos_emb: bool = True
    start_id: int = 1
    pad_id: int = 0

    def __post_init__(self):
        self.mn_variant = MappingVariant(self.mn_variant)
        self.prefix_position = PrefixPosition(self.prefix_position)
        if self.d_b % self.n_heads:
            raise ValueError("d_b must be divisible by n_heads")
        if self.k < 0:
            raise ValueError("prefix length k must be >= 0")
        if self.vocab_size < 1 or self.d_c < 1 or self.n_layers < 1:
            raise ValueError("vocab_size, d_c and n_layers must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mn_variant"] = self.mn_variant.value
        d["prefix_position"] = self.prefix_position.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# ---------------------------------------------------------------- building blocks


class Module:
    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, val in vars(self).items():
            if isinstance(val, Tensor):
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(prefix + name + ".")
            elif isinstance(val, list):
                for i, m in enumerate(val):
                    if isinstance(m, Module):
                        yield from m.named_parameters(f"{prefix}{name}.{i}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, list):
                for m in val:
                    if isinstance(m, Module):
                        yield from m.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)


def _uniform(rng, shape, fan_in) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = _uniform(rng, (d_in, d_out), d_in)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return T.add(y, self.bias) if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = Tensor(np.ones(d), requires_grad=True)
        self.bias = Tensor(np.zeros(d), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class MultiHeadAttention(Module):
    def __init__(self, d: int, n_heads: int, rng, dropout: float, drop_rng):
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)
        self.n_heads = n_heads
        self.p = dropout
        self._drop_rng = drop_rng

    def _split(self, x: Tensor) -> Tensor:
        B, L, d = x.shape
        h = self.n_heads
        return T.transpose(T.reshape(x, (B, L, h, d // h)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, kv: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        B, Lq, d = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(kv)), self._split(self.v(kv))
        scores = T.mul(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(d // self.n_heads))
        if mask is not None:
            scores = T.add_constant(scores, mask)
        attn = T.dropout(T.softmax(scores, axis=-1), self.p, self._drop_rng[0], self.training)
        ctx = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (B, Lq, d))
        return self.o(ctx)


class FeedForward(Module):
    def __init__(self, d: int, d_ff: int, rng, dropout: float, drop_rng):
        self.fc1 = Linear(d, d_ff, rng)
        self.fc2 = Linear(d_ff, d, rng)
        self.p = dropout
        self._drop_rng = drop_rng

    def __call__(self, x: Tensor) -> Tensor:
        h = T.dropout(T.relu(self.fc1(x)), self.p, self._drop_rng[0], self.training)
        return self.fc2(h)


class EncoderLayer(Module):
    """Pre-norm self-attention block."""

    def __init__(self, d, n_heads, d_ff, rng, dropout, drop_rng):
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, n_heads, rng, dropout, drop_rng)
        self.ln2 = LayerNorm(d)
        self.ff = FeedForward(d, d_ff, rng, dropout, drop_rng)
        self.p = dropout
        self._drop_rng = drop_rng

    def _drop(self, x):
        return T.dropout(x, self.p, self._drop_rng[0], self.training)

    def __call__(self, x: Tensor, mask=None) -> Tensor:
        h = self.ln1(x)
        x = T.add(x, self._drop(self.attn(h, h, mask)))
        return T.add(x, self._drop(self.ff(self.ln2(x))))


class DecoderLayer(EncoderLayer):
    def __init__(self, d, n_heads, d_ff, rng, dropout, drop_rng):
        super().__init__(d, n_heads, d_ff, rng, dropout, drop_rng)
        self.ln_cross = LayerNorm(d)
        self.cross = MultiHeadAttention(d, n_heads, rng, dropout, drop_rng)

    def __call__(self, x: Tensor, memory: Tensor, self_mask=None, memory_mask=None) -> Tensor:
        h = self.ln1(x)
        x = T.add(x, self._drop(self.attn(h, h, self_mask)))
        x = T.add(x, self._drop(self.cross(self.ln_cross(x), memory, memory_mask)))
        return T.add(x, self._drop(self.ff(self.ln2(x))))


class MappingNetwork(Module):
    """Maps an oracle embedding (d_c) to k decoder-sized prefix vectors."""

    def __init__(self, cfg: ModelConfig, rng, drop_rng):
        self.variant = cfg.mn_variant
        self.k, self.d_b = cfg.k, cfg.d_b
        out = cfg.k * cfg.d_b
        if self.variant is MappingVariant.LINEAR:
            self.proj = Linear(cfg.d_c, out, rng)
        elif self.variant is MappingVariant.MLP:
            hidden = max(out // 2, cfg.d_c)
            self.hidden = Linear(cfg.d_c, hidden, rng)
            self.proj = Linear(hidden, out, rng)
        else:
            self.proj = Linear(cfg.d_c, out, rng)
            self.layer = EncoderLayer(cfg.d_b, 2, cfg.d_ff, rng, cfg.dropout, drop_rng)
        if self.variant is not MappingVariant.ENC:
            self.slope = Tensor(np.full(1, 0.25), requires_grad=True)

    def __call__(self, h: Tensor) -> Tensor:
        squeeze = h.ndim == 1
        if squeeze:
            h = T.reshape(h, (1, h.shape[0]))
        B = h.shape[0]
        if self.variant is MappingVariant.LINEAR:
            y = T.prelu(self.proj(h), self.slope)
        elif self.variant is MappingVariant.MLP:
            y = T.prelu(self.proj(T.relu(self.hidden(h))), self.slope)
        else:
            y = self.proj(h)
        z = T.reshape(y, (B, self.k, self.d_b))
        if self.variant is MappingVariant.ENC:
            z = self.layer(z)
        return T.reshape(z, (self.k, self.d_b)) if squeeze else z


# ---------------------------------------------------------------- masks


def decoder_allowed(k: int, n_text: int,
                    position: PrefixPosition = PrefixPosition.AFTER_START) -> np.ndarray:
    """Boolean (L, L) matrix: row i may attend column j."""
    if k < 0 or n_text < 1:
        raise ValueError("need k >= 0 and n_text >= 1")
    L = 1 + k + n_text
    allowed = np.tril(np.ones((L, L), dtype=bool))
    if k:
        lo = 1 if PrefixPosition(position) is PrefixPosition.AFTER_START else 0
        allowed[lo:lo + k, lo:lo + k] = True
    return allowed


def build_decoder_mask(k: int, n_text: int,
                       position: PrefixPosition = PrefixPosition.AFTER_START) -> np.ndarray:
    """Additive self-attention mask: 0 where allowed, the most negative float32 elsewhere."""
    allowed = decoder_allowed(k, n_text, position)
    return np.where(allowed, 0.0, T.MASK_VALUE).astype(np.float32)


def padding_mask(tokens: np.ndarray, pad_id: int) -> np.ndarray:
    """(B, 1, 1, Ls) additive mask hiding PAD keys."""
    return np.where(tokens == pad_id, T.MASK_VALUE, 0.0).astype(np.float32)[:, None, None, :]


# ---------------------------------------------------------------- the model


class Seq2Seq(Module):
    """Encoder-decoder backbone plus mapping network.

    Parameter groups: ``mapping`` (the mapping network), ``encoder`` (encoder
    layers and the token embedding table shared by encoder input, decoder input
    and output projection) and ``decoder``.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        # Held in a one-element list so the generator can be swapped on resume.
        self._drop_rng = [np.random.default_rng([seed, 1])]
        d = cfg.d_b
        self.mapping = MappingNetwork(cfg, rng, self._drop_rng) if cfg.k > 0 else None
        self.encoder = _Encoder(cfg, rng, self._drop_rng)
        self.decoder = _Decoder(cfg, rng, self._drop_rng)
        self.encoder.embed_tokens = Tensor(rng.normal(0, d ** -0.5, (cfg.vocab_size, d)),
                                           requires_grad=True)

    @property
    def drop_rng(self) -> np.random.Generator:
        return self._drop_rng[0]

    @drop_rng.setter
    def drop_rng(self, rng: np.random.Generator) -> None:
        self._drop_rng[0] = rng

    # -- parameter bookkeeping

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def group_of(self, name: str) -> str:
        return name.split(".", 1)[0]

    def group(self, group: str) -> dict[str, Tensor]:
        return {n: p for n, p in self.named_parameters() if self.group_of(n) == group}

    def set_trainable(self, groups) -> None:
        groups = set(groups)
        for name, p in self.named_parameters():
            p.requires_grad = self.group_of(name) in groups
            p.grad = None

    def trainable(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.named_parameters() if p.requires_grad}

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def group_hash(self, group: str) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.group(group).items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) ^ set(arrays)
        if missing:
            raise KeyError(f"parameter sets differ: {sorted(missing)}")
        for n, p in params.items():
            if arrays[n].shape != p.shape:
                raise ValueError(f"shape mismatch for {n}: {arrays[n].shape} vs {p.shape}")
            p.data = np.array(arrays[n], dtype=p.data.dtype)

    def astype(self, dtype) -> "Seq2Seq":
        for p in self.parameters().values():
            p.data = p.data.astype(dtype)
        return self

    # -- forward pieces

    def map_prefix(self, h) -> Tensor:
        if self.mapping is None:
            raise ValueError("model was built with k=0 and has no mapping network")
        h = h if isinstance(h, Tensor) else Tensor(h)
        if h.shape[-1] != self.cfg.d_c:
            raise ValueError(f"oracle embedding must have length {self.cfg.d_c}, got {h.shape[-1]}")
        return self.mapping(h)

    def encode_source(self, src) -> Tensor:
        src = np.asarray(src, dtype=np.int64)
        if src.ndim == 1:
            src = src[None]
        return self.encoder(src, self.encoder.embed_tokens)

    def forward_logits(self, z: Optional[Tensor], dec_tokens, memory: Tensor, src=None,
                       return_hidden: bool = False):
        """Logits for every decoder row, shape (B, 1 + k + n_text, V).

        ``dec_tokens`` are the shifted target tokens (B, n_text); ``src`` is only
        used to mask PAD positions of ``memory``.
        """
        dec_tokens = np.asarray(dec_tokens, dtype=np.int64)
        if dec_tokens.ndim == 1:
            dec_tokens = dec_tokens[None]
        mem_mask = None
        if src is not None:
            src = np.asarray(src, dtype=np.int64)
            mem_mask = padding_mask(src if src.ndim == 2 else src[None], self.cfg.pad_id)
        return self.decoder(z, dec_tokens, memory, self.encoder.embed_tokens, mem_mask,
                            return_hidden)

    def __call__(self, h, src, dec_tokens, return_hidden: bool = False):
        z = self.map_prefix(h) if self.cfg.k > 0 else None
        memory = self.encode_source(src)
        return self.forward_logits(z, dec_tokens, memory, src, return_hidden)


class _Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng, drop_rng):
        self.cfg = cfg
        self.pos = Tensor(rng.normal(0, 0.02, (cfg.max_seq_len, cfg.d_b)), requires_grad=True)
        self.layers = [EncoderLayer(cfg.d_b, cfg.n_heads, cfg.d_ff, rng, cfg.dropout, drop_rng)
                       for _ in range(cfg.n_layers)]
        self.ln_f = LayerNorm(cfg.d_b)
        self._drop_rng = drop_rng

    def __call__(self, src: np.ndarray, embed: Tensor) -> Tensor:
        B, L = src.shape
        if L > self.cfg.max_seq_len:
            raise ValueError(f"source length {L} exceeds max_seq_len={self.cfg.max_seq_len}")
        x = T.add(T.take_rows(embed, src), T.take_rows(self.pos, np.arange(L)))
        x = T.dropout(x, self.cfg.dropout, self._drop_rng[0], self.training)
        mask = padding_mask(src, self.cfg.pad_id)
        for layer in self.layers:
            x = layer(x, mask)
        return self.ln_f(x)


class _Decoder(Module):
    def __init__(self, cfg: ModelConfig, rng, drop_rng):
        self.cfg = cfg
        self.pos = Tensor(rng.normal(0, 0.02, (cfg.max_seq_len, cfg.d_b)), requires_grad=True)
        self.layers = [DecoderLayer(cfg.d_b, cfg.n_heads, cfg.d_ff, rng, cfg.dropout, drop_rng)
                       for _ in range(cfg.n_layers)]
        self.ln_f = LayerNorm(cfg.d_b)
        self._drop_rng = drop_rng

    def __call__(self, z, dec_tokens, memory, embed, mem_mask, return_hidden=False):
        cfg = self.cfg
        B, n = dec_tokens.shape
        k = 0 if z is None else z.shape[1]
        if z is not None and (z.shape[0] != B or z.shape[2] != cfg.d_b):
            raise ValueError(f"prefix shape {z.shape} does not fit batch {B} / d_b {cfg.d_b}")
        if memory.shape[0] != B:
            raise ValueError("memory batch size differs from decoder batch size")
        L = 1 + k + n
        if L > cfg.max_seq_len:
            raise ValueError(f"decoder length {L} exceeds max_seq_len={cfg.max_seq_len}")
        start = T.take_rows(embed, np.full((B, 1), cfg.start_id))
        text = T.take_rows(embed, dec_tokens)
        if z is None:
            x = T.concat([start, text], axis=1)
        elif cfg.prefix_position is PrefixPosition.AFTER_START:
            x = T.concat([start, z, text], axis=1)
        else:
            x = T.concat([z, start, text], axis=1)
        pos = T.take_rows(self.pos, np.arange(L))
        if z is not None and not cfg.prefix_pos_emb:
            keep = np.ones((L, 1), dtype=pos.data.dtype)
            lo = 1 if cfg.prefix_position is PrefixPosition.AFTER_START else 0
            keep[lo:lo + k] = 0
            pos = T.mul(pos, Tensor(np.broadcast_to(keep, pos.shape)))
        x = T.dropout(T.add(x, pos), cfg.dropout, self._drop_rng[0], self.training)
        self_mask = build_decoder_mask(k, n, cfg.prefix_position)
        for layer in self.layers:
            x = layer(x, memory, self_mask, mem_mask)
        hidden = self.ln_f(x)
        logits = T.matmul(hidden, T.transpose(embed))
        return (logits, hidden) if return_hidden else logits


def sequence_loss(logits: Tensor, targets, k: int, pad_id: int = 0) -> Tensor:
    """Cross-entropy over text rows only.

    ``targets`` (B, n_text) are aligned with the text rows, which are the last
    ``n_text`` rows of ``logits`` for both prefix placements. The start row, the
    k prefix rows and PAD targets are excluded.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if targets.ndim == 1:
        targets = targets[None]
    B, n = targets.shape
    if n < 1:
        raise ValueError("empty text span")
    L = logits.shape[1]
    if L != 1 + k + n:
        raise ValueError(f"logits have {L} rows, expected 1 + {k} + {n}")
    full = np.zeros((B, L), dtype=np.int64)
    full[:, 1 + k:] = targets
    ignore = np.ones((B, L), dtype=bool)
    ignore[:, 1 + k:] = targets == pad_id
    return T.cross_entropy(logits, full, ignore)
