"""Binary checkpoint format.

Layout (little endian)::

    b"VIPTCKPT" | version:u16 | count:u32
    count x [ name_len:u16 | name:utf8 | rank:u8 | dims:u32*rank | trainable:u8 | offset:u64 ]
    payload: float32 values, one block per entry at ``offset`` bytes from payload start
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .params import ParamSpec, ParamStore

MAGIC = b"VIPTCKPT"
VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointHeaderError(CheckpointError):
    """Bad magic string or unsupported version."""


class CheckpointTruncatedError(CheckpointError):
    """File ends before the manifest or payload is complete, or has trailing bytes."""


class CheckpointShapeError(CheckpointError):
    """Stored entries disagree with the expected model layout."""


def encode_checkpoint(store: ParamStore) -> bytes:
    manifest = [MAGIC, struct.pack("<HI", VERSION, len(store))]
    payload = []
    offset = 0
    for name, entry in store.items():
        if entry.value is None:
            raise CheckpointError(f"parameter {name!r} has no value to save")
        raw = name.encode("utf-8")
        shape = entry.shape
        manifest.append(struct.pack("<H", len(raw)) + raw)
        manifest.append(struct.pack(f"<B{len(shape)}I", len(shape), *shape))
        manifest.append(struct.pack("<BQ", int(entry.trainable), offset))
        block = np.ascontiguousarray(entry.value.data, dtype="<f4").tobytes()
        payload.append(block)
        offset += len(block)
    return b"".join(manifest + payload)


def save_checkpoint(store: ParamStore, path: str | Path) -> None:
    Path(path).write_bytes(encode_checkpoint(store))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise CheckpointTruncatedError(f"manifest truncated at byte {self.pos}")
        out = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return out

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(f"manifest truncated at byte {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out


def decode_checkpoint(buf: bytes) -> list[tuple[str, tuple[int, ...], bool, np.ndarray]]:
    if len(buf) < len(MAGIC) or buf[: len(MAGIC)] != MAGIC:
        raise CheckpointHeaderError("bad magic string")
    r = _Reader(buf)
    r.pos = len(MAGIC)
    version, count = r.take("<HI")
    if version != VERSION:
        raise CheckpointHeaderError(f"unsupported checkpoint version {version}")
    manifest = []
    for _ in range(count):
        (name_len,) = r.take("<H")
        try:
            name = r.raw(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointHeaderError("entry name is not valid utf-8") from exc
        (rank,) = r.take("<B")
        dims = r.take(f"<{rank}I")
        trainable, offset = r.take("<BQ")
        manifest.append((name, tuple(dims), bool(trainable), offset))
    start = r.pos
    out = []
    end = start
    for name, shape, trainable, offset in manifest:
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        lo = start + offset
        if lo + nbytes > len(buf):
            raise CheckpointTruncatedError(f"payload for {name!r} truncated")
        values = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=lo).astype(np.float64)
        out.append((name, shape, trainable, values.reshape(shape)))
        end = max(end, lo + nbytes)
    if end != len(buf):
        raise CheckpointTruncatedError(f"{len(buf) - end} unexpected trailing bytes")
    return out


def load_checkpoint(path: str | Path, expected: ParamStore | None = None) -> ParamStore:
    """Read a checkpoint.

    With ``expected`` the stored entries must match its names and shapes
    exactly; values and trainable flags are written into that store.
    """
    entries = decode_checkpoint(Path(path).read_bytes())
    if expected is None:
        store = ParamStore()
        for name, shape, trainable, values in entries:
            group = "prompt" if name.startswith("prompt.") else "foundation"
            store.entries[name] = store.entries.get(name) or _blank(shape, group)
            store.set_trainable(name, trainable)
            store.assign(name, values)
        return store
    names = [e[0] for e in entries]
    if names != list(expected.entries):
        missing = set(expected.entries) - set(names)
        extra = set(names) - set(expected.entries)
        raise CheckpointShapeError(f"entry names differ (missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]})")
    for name, shape, trainable, values in entries:
        if shape != expected.entry(name).shape:
            raise CheckpointShapeError(f"{name}: stored {shape}, model expects {expected.entry(name).shape}")
        expected.set_trainable(name, trainable)
        expected.assign(name, values)
    return expected


def _blank(shape, group):
    from .params import ParamEntry

    return ParamEntry(spec=ParamSpec(tuple(shape), group))
