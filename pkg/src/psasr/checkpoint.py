"""Binary checkpoint format for a ParameterStore.

Layout (little-endian)::

    magic      8 bytes  b"PSASRCK\\0"
    version    u32
    config     u32 length + UTF-8 JSON (model config echo)
    count      u32
    records    count x [u16 name length, name bytes, u8 dtype tag,
                        4 x u32 extents, u64 payload offset]
    payload    float32 data, records in order, offsets relative to payload start
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, ParameterStore, config_from_dict, config_to_dict

MAGIC = b"PSASRCK\0"
VERSION = 1
DTYPE_F32 = 0

__all__ = ["CheckpointFormatError", "IncompatibleCheckpoint", "save_checkpoint", "load_checkpoint",
           "MAGIC", "VERSION"]


class CheckpointFormatError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte {offset})")
        self.offset = offset


class IncompatibleCheckpoint(ValueError):
    pass


def save_checkpoint(store: ParameterStore, path: str | os.PathLike, cfg: ModelConfig | None = None):
    cfg_bytes = json.dumps(config_to_dict(cfg) if cfg is not None else {}, sort_keys=True).encode()
    header = bytearray()
    header += MAGIC
    header += struct.pack("<I", VERSION)
    header += struct.pack("<I", len(cfg_bytes)) + cfg_bytes
    header += struct.pack("<I", len(store))
    payload = []
    offset = 0
    for name, t in store.items():
        nb = name.encode()
        data = np.ascontiguousarray(t.data, dtype="<f4")
        header += struct.pack("<H", len(nb)) + nb
        header += struct.pack("<B4IQ", DTYPE_F32, *data.shape, offset)
        payload.append(data.tobytes())
        offset += data.nbytes
    tmp = Path(f"{path}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        for chunk in payload:
            fh.write(chunk)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError(f"truncated while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path: str | os.PathLike, expect: ModelConfig | None = None
                    ) -> tuple[ParameterStore, ModelConfig | None]:
    """Read a checkpoint; raises before returning anything if the file is malformed."""
    rd = _Reader(Path(path).read_bytes())
    if rd.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointFormatError("bad magic bytes", 0)
    (version,) = rd.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported version {version}, expected {VERSION}", len(MAGIC))
    (clen,) = rd.unpack("<I", "config length")
    at = rd.pos
    try:
        cfg_dict = json.loads(rd.take(clen, "config").decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointFormatError("config echo is not valid JSON", at) from None
    cfg = config_from_dict(cfg_dict) if cfg_dict else None
    if expect is not None and cfg is not None and cfg != expect:
        raise IncompatibleCheckpoint(f"checkpoint was saved for {cfg}, requested {expect}")
    (count,) = rd.unpack("<I", "tensor count")
    records = []
    for _ in range(count):
        at = rd.pos
        (nlen,) = rd.unpack("<H", "name length")
        try:
            name = rd.take(nlen, "name").decode()
        except UnicodeDecodeError:
            raise CheckpointFormatError("tensor name is not UTF-8", at) from None
        tag, *shape, off = rd.unpack("<B4IQ", f"record {name}")
        if tag != DTYPE_F32:
            raise CheckpointFormatError(f"unknown dtype tag {tag} for {name}", at)
        records.append((name, tuple(shape), off, at))
    base = rd.pos
    store = ParameterStore()
    expected_off = 0
    for name, shape, off, at in records:
        if off != expected_off:
            raise CheckpointFormatError(f"offset {off} for {name} out of order", at)
        nbytes = 4 * int(np.prod(shape))
        start = base + off
        if start + nbytes > len(rd.buf):
            raise CheckpointFormatError(f"payload for {name} truncated", min(start, len(rd.buf)))
        if name in store:
            raise CheckpointFormatError(f"duplicate tensor name {name}", at)
        data = np.frombuffer(rd.buf, dtype="<f4", count=nbytes // 4, offset=start).reshape(shape)
        store.add(name, data.astype(np.float32))
        expected_off += nbytes
    if base + expected_off != len(rd.buf):
        raise CheckpointFormatError("trailing bytes after payload", base + expected_off)
    if expect is not None and cfg is None:
        raise IncompatibleCheckpoint("checkpoint carries no model config to check against")
    return store, cfg
