"""Binary checkpoint format.

Layout (little-endian)::

    b"CSMB" | u32 version=1 | u64 doc_len | doc (UTF-8 JSON model config)
    | u64 count | count x ( u64 name_len | name | u8 dtype | u8 rank | rank x u64 dim | data )

dtype 0 is float32, 1 is float64.  Tensors are written sorted by name.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelState, build_model
from .params import iter_named

MAGIC = b"CSMB"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class NameCollisionError(CheckpointError):
    pass


def to_bytes(state: ModelState) -> bytes:
    named = list(iter_named(state))
    names = [n for n, _ in named]
    if len(set(names)) != len(names):
        raise NameCollisionError("duplicate tensor names in model state")
    doc = state.config.to_json().encode("utf-8")
    out = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(doc)), doc,
           struct.pack("<Q", len(named))]
    for name, t in sorted(named, key=lambda item: item[0]):
        raw = name.encode("utf-8")
        out += [struct.pack("<Q", len(raw)), raw,
                struct.pack("<BB", _CODES[t.data.dtype], t.ndim),
                struct.pack(f"<{t.ndim}Q", *t.shape),
                np.ascontiguousarray(t.data, dtype=t.data.dtype.newbyteorder("<")).tobytes()]
    return b"".join(out)


def checkpoint_save(state: ModelState, cfg: ModelConfig, path) -> None:
    if cfg != state.config:
        raise CheckpointError("config does not match the model state")
    Path(path).write_bytes(to_bytes(state))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"truncated {what}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def from_bytes(buf: bytes) -> tuple[ModelState, ModelConfig]:
    r = _Reader(buf)
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError("bad magic: not a checkpoint file")
    r.pos = 4
    (version,) = r.unpack("<I", "header")
    if version != VERSION:
        raise VersionMismatchError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (doc_len,) = r.unpack("<Q", "header")
    cfg = ModelConfig.from_dict(json.loads(r.take(doc_len, "config document").decode("utf-8")))
    (count,) = r.unpack("<Q", "header")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<Q", "tensor table")
        name = r.take(name_len, "tensor table").decode("utf-8")
        code, rank = r.unpack("<BB", "tensor table")
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name}")
        dims = r.unpack(f"<{rank}Q", "tensor table")
        dtype = _DTYPES[code]
        size = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(r.take(size * dtype.itemsize, "tensor table"), dtype=dtype)
        if name in tensors:
            raise NameCollisionError(f"tensor name {name!r} appears twice")
        tensors[name] = data.reshape(dims).astype(dtype.newbyteorder("="))
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after tensor table")
    dtypes = {a.dtype for a in tensors.values()}
    state = build_model(cfg, seed=0, dtype=dtypes.pop() if len(dtypes) == 1 else np.float32)
    named = dict(iter_named(state))
    if set(named) != set(tensors):
        missing = sorted(set(named) - set(tensors))
        extra = sorted(set(tensors) - set(named))
        raise CheckpointError(f"tensor table does not match config (missing {missing[:3]}, extra {extra[:3]})")
    for name, t in named.items():
        if t.shape != tensors[name].shape:
            raise CheckpointError(f"{name}: shape {tensors[name].shape} != expected {t.shape}")
        t.data = tensors[name]
    return state, cfg


def checkpoint_load(path) -> tuple[ModelState, ModelConfig]:
    return from_bytes(Path(path).read_bytes())
