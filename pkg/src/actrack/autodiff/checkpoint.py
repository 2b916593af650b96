"""ACTK checkpoint files.

Layout (all integers little-endian)::

    b"ACTK" | u32 version | u32 count
    per parameter:
        u32 name_len | name (UTF-8) | u8 dtype | u32 rank | u32 dims[rank]
        | u8 frozen | raw little-endian data
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from ..errors import FormatError
from .tensor import Parameter

MAGIC = b"ACTK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


@dataclass
class Entry:
    name: str
    data: np.ndarray
    frozen: bool

    def checksum(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.data.astype(self.data.dtype.newbyteorder("<"))).tobytes()).hexdigest()[:16]


def encode(entries: Iterable[Entry]) -> bytes:
    entries = list(entries)
    names = [e.name for e in entries]
    if len(set(names)) != len(names):
        raise FormatError("duplicate parameter names in checkpoint")
    out = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for e in entries:
        raw = e.name.encode("utf-8")
        code = _CODES.get(np.dtype(e.data.dtype))
        if code is None:
            raise FormatError(f"unsupported dtype {e.data.dtype} for {e.name}")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<BI", code, e.data.ndim))
        out.append(struct.pack(f"<{e.data.ndim}I", *e.data.shape))
        out.append(struct.pack("<B", 1 if e.frozen else 0))
        out.append(np.ascontiguousarray(e.data, dtype=_DTYPES[code]).tobytes())
    return b"".join(out)


def decode(blob: bytes, source: str = "<bytes>") -> list[Entry]:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"{source}: truncated checkpoint at byte {pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise FormatError(f"{source}: bad magic (expected ACTK)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version}")
    entries = []
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        code, rank = struct.unpack("<BI", take(5))
        if code not in _DTYPES:
            raise FormatError(f"{source}: unknown dtype code {code} for {name}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        (frozen,) = struct.unpack("<B", take(1))
        dt = _DTYPES[code]
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(bytes(take(n * dt.itemsize)), dtype=dt).reshape(dims)
        entries.append(Entry(name, data.astype(dt.newbyteorder("="), copy=True), bool(frozen)))
    if pos != len(view):
        raise FormatError(f"{source}: {len(view) - pos} trailing bytes")
    return entries


def save(path, params: Iterable[Parameter]) -> bytes:
    blob = encode(Entry(p.name, p.data, p.frozen) for p in params)
    Path(path).write_bytes(blob)
    return blob


def load(path) -> list[Entry]:
    path = Path(path)
    return decode(path.read_bytes(), str(path))


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def assign(params: Iterable[Parameter], entries: Iterable[Entry], strict: bool = True,
           keep_frozen_flag: bool = True) -> list[str]:
    """Copy checkpoint values into matching parameters; returns names that were loaded."""
    table = {p.name: p for p in params}
    loaded = []
    for e in entries:
        p = table.get(e.name)
        if p is None:
            if strict:
                raise FormatError(f"checkpoint parameter {e.name!r} has no counterpart in the model")
            continue
        if p.shape != e.data.shape:
            raise FormatError(f"shape mismatch for {e.name}: model {p.shape}, checkpoint {e.data.shape}")
        p.data = e.data.astype(p.data.dtype, copy=True)
        if keep_frozen_flag and e.frozen:
            p.freeze()
        loaded.append(e.name)
    return loaded
