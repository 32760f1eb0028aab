"""Versioned little-endian checkpoint files.

Layout: magic ``PFXMT01``, a u16 format version, then tagged sections
(CONF, ORCL, PARM, BEST, OPTM, RNGS, OTXT). Each section is
``tag[4] | u64 length | payload | u32 crc32(payload)``. Arrays inside a section
are stored in sorted name order so identical state always gives identical bytes.
"""
from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .oracle import Oracle

MAGIC = b"PFXMT01"
VERSION = 1
SECTIONS = (b"CONF", b"ORCL", b"PARM", b"BEST", b"OPTM", b"RNGS", b"OTXT")
_DTYPES = {0: "<f4", 1: "<f8", 2: "<i8"}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


class OracleMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model_config: dict
    train_config: dict
    provenance: dict
    params: dict[str, np.ndarray]
    oracle: Oracle
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)
    best_params: dict[str, np.ndarray] = field(default_factory=dict)
    oracle_text: dict[str, np.ndarray] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def oracle_hash(self) -> str:
        return self.oracle.hash()

    def effective_oracle(self) -> Oracle:
        """The oracle inference should use (finetuned text tables applied if present)."""
        if not self.oracle_text:
            return self.oracle
        return self.oracle.with_text_tables({**self.oracle.text_tables, **self.oracle_text})


# ---------------------------------------------------------------- encoding helpers


def _pack_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        dt = np.dtype(arr.dtype).newbyteorder("<")
        if dt not in _CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(struct.pack("<BB", _CODES[dt], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return buf.getvalue()


def _unpack_arrays(payload: bytes) -> dict[str, np.ndarray]:
    view = memoryview(payload)
    (count,) = struct.unpack_from("<I", view, 0)
    off = 4
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", view, off)
        off += 2
        name = bytes(view[off:off + n]).decode("utf-8")
        off += n
        code, ndim = struct.unpack_from("<BB", view, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", view, off)
        off += 4 * ndim
        dt = np.dtype(_DTYPES[code])
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        out[name] = np.frombuffer(view[off:off + size], dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        off += size
    if off != len(payload):
        raise CheckpointError("trailing bytes in array section")
    return out


def _json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _oracle_payload(o: Oracle) -> bytes:
    header = _json({"d_c": o.d_c, "seed": o.seed, "sigma": o.sigma,
                    "token_lang": list(o.token_lang), "hash": o.hash()})
    arrays = {"image_map": o.image_map, **{f"text.{k}": v for k, v in o.text_tables.items()}}
    return struct.pack("<I", len(header)) + header + _pack_arrays(arrays)


def _oracle_from_payload(payload: bytes) -> Oracle:
    (n,) = struct.unpack_from("<I", payload, 0)
    header = json.loads(payload[4:4 + n])
    arrays = _unpack_arrays(payload[4 + n:])
    tables = {k[5:]: v for k, v in arrays.items() if k.startswith("text.")}
    o = Oracle(header["d_c"], arrays["image_map"], tables, header["sigma"], header["seed"],
               np.array(header["token_lang"], dtype=object))
    if o.hash() != header["hash"]:
        raise OracleMismatchError("frozen oracle section does not match its recorded hash")
    return o


# ---------------------------------------------------------------- public API


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    payloads = {
        b"CONF": _json({"model_config": ckpt.model_config, "train_config": ckpt.train_config,
                        "provenance": ckpt.provenance, "extra": ckpt.extra}),
        b"ORCL": _oracle_payload(ckpt.oracle),
        b"PARM": _pack_arrays(ckpt.params),
        b"BEST": _pack_arrays(ckpt.best_params),
        b"OPTM": _pack_arrays(ckpt.optimizer),
        b"RNGS": _json(ckpt.rng_state),
        b"OTXT": _pack_arrays(ckpt.oracle_text),
    }
    out = io.BytesIO()
    out.write(MAGIC + struct.pack("<H", VERSION))
    for tag in SECTIONS:
        p = payloads[tag]
        out.write(tag + struct.pack("<Q", len(p)) + p + struct.pack("<I", zlib.crc32(p)))
    return out.getvalue()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(ckpt))


def parse_checkpoint(data: bytes, oracle: Optional[Oracle] = None) -> Checkpoint:
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic bytes")
    if len(data) < len(MAGIC) + 2:
        raise CheckpointError("truncated checkpoint header")
    (version,) = struct.unpack_from("<H", data, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    off = len(MAGIC) + 2
    sections = {}
    for tag in SECTIONS:
        if data[off:off + 4] != tag:
            raise CheckpointError(f"checkpoint version {version}: expected section {tag.decode()} "
                                  f"at byte {off}")
        (n,) = struct.unpack_from("<Q", data, off + 4)
        start = off + 12
        payload = data[start:start + n]
        if len(payload) != n or len(data) < start + n + 4:
            raise CheckpointError(f"section {tag.decode()} is truncated")
        (crc,) = struct.unpack_from("<I", data, start + n)
        if zlib.crc32(payload) != crc:
            raise CheckpointError(f"section {tag.decode()} failed its checksum")
        sections[tag] = payload
        off = start + n + 4
    if off != len(data):
        raise CheckpointError("trailing bytes after last section")
    conf = json.loads(sections[b"CONF"])
    frozen = _oracle_from_payload(sections[b"ORCL"])
    if oracle is not None and oracle.hash() != frozen.hash():
        raise OracleMismatchError(
            f"checkpoint was trained against oracle {frozen.hash()[:12]}, "
            f"but the live oracle is {oracle.hash()[:12]}")
    return Checkpoint(
        model_config=conf["model_config"],
        train_config=conf["train_config"],
        provenance=conf["provenance"],
        params=_unpack_arrays(sections[b"PARM"]),
        oracle=frozen,
        optimizer=_unpack_arrays(sections[b"OPTM"]),
        rng_state=json.loads(sections[b"RNGS"]),
        best_params=_unpack_arrays(sections[b"BEST"]),
        oracle_text=_unpack_arrays(sections[b"OTXT"]),
        extra=conf["extra"],
    )


def load_checkpoint(path, oracle: Optional[Oracle] = None) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes(), oracle)
