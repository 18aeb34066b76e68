"""Binary checkpoint container.

Layout (all integers little-endian u32 unless noted)::

    b"TTRP" | version | len | descriptor utf-8
    tensor count | per tensor: len | name utf-8 | rank | extents... | float32 LE payload
    record count | per record: 4-byte tag | len | payload
    CRC-32 of everything above

Records: ``KEY_`` holds a taboo key, ``THRS`` a float32 threshold vector.
A standalone key file uses magic ``b"TTKY"`` with the same version, an empty
descriptor, zero tensors and a single ``KEY_`` record.
"""

from __future__ import annotations

import io
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import Model
from .taboo import IntervalKey, MaxPercentileKey

VERSION = 1
MODEL_MAGIC = b"TTRP"
KEY_MAGIC = b"TTKY"


class CheckpointError(ValueError):
    pass


class VersionMismatch(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


@dataclass
class Container:
    descriptor: str
    tensors: dict[str, np.ndarray]
    records: dict[bytes, bytes]


def _u32(v: int) -> bytes:
    return struct.pack("<I", v)


def _blob(b: bytes) -> bytes:
    return _u32(len(b)) + b


def encode_container(magic: bytes, c: Container) -> bytes:
    out = io.BytesIO()
    out.write(magic)
    out.write(_u32(VERSION))
    out.write(_blob(c.descriptor.encode()))
    out.write(_u32(len(c.tensors)))
    for name, arr in c.tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        out.write(_blob(name.encode()))
        out.write(_u32(arr.ndim))
        for extent in arr.shape:
            out.write(_u32(extent))
        out.write(np.ascontiguousarray(arr).tobytes())
    out.write(_u32(len(c.records)))
    for tag, payload in c.records.items():
        if len(tag) != 4:
            raise ValueError(f"record tag must be 4 bytes, got {tag!r}")
        out.write(tag)
        out.write(_blob(payload))
    body = out.getvalue()
    return body + _u32(zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"file truncated at byte {self.pos} (needed {n} more)")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def blob(self) -> bytes:
        return self.take(self.u32())


def decode_container(magic: bytes, data: bytes) -> Container:
    if len(data) < 12:
        raise TruncatedError(f"file too short ({len(data)} bytes)")
    if data[:4] != magic:
        raise CheckpointError(f"bad magic {data[:4]!r}, expected {magic!r}")
    (version,) = struct.unpack("<I", data[4:8])
    if version != VERSION:
        raise VersionMismatch(f"format version {version}, this build reads {VERSION}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    r = _Reader(body)
    r.take(8)
    try:
        descriptor = r.blob().decode()
        tensors = {}
        for _ in range(r.u32()):
            name = r.blob().decode()
            shape = tuple(r.u32() for _ in range(r.u32()))
            count = int(np.prod(shape, dtype=np.int64))
            payload = r.take(4 * count)
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
        records = {}
        for _ in range(r.u32()):
            tag = r.take(4)
            records[tag] = r.blob()
    except TruncatedError:
        if zlib.crc32(body) != crc:
            raise TruncatedError("file truncated or corrupted (structure and checksum invalid)")
        raise
    if zlib.crc32(body) != crc:
        raise ChecksumError(f"CRC-32 mismatch: stored {crc:08x}, computed {zlib.crc32(body):08x}")
    if r.pos != len(body):
        raise CheckpointError(f"{len(body) - r.pos} trailing bytes before checksum")
    return Container(descriptor, tensors, records)


# ---------------------------------------------------------------------------
# key records

_PERCENTILE, _INTERVALS = 1, 2


def encode_key(key) -> bytes:
    out = io.BytesIO()
    if isinstance(key, MaxPercentileKey):
        out.write(struct.pack("<B", _PERCENTILE))
        out.write(_u32(len(key.layers)))
        for layer in key.layers:
            out.write(_u32(layer))
        out.write(struct.pack("<d", key.percentile))
        out.write(struct.pack("<B", key.bound))
        if key.bound:
            out.write(struct.pack(f"<{len(key.thresholds)}d", *key.thresholds))
    elif isinstance(key, IntervalKey):
        out.write(struct.pack("<B", _INTERVALS))
        out.write(_u32(len(key.layers)))
        for layer, ivs in zip(key.layers, key.intervals):
            out.write(_u32(layer))
            out.write(_u32(len(ivs)))
            for lo, hi in ivs:
                out.write(struct.pack("<dd", lo, hi))
    else:
        raise TypeError(f"not a taboo key: {key!r}")
    return out.getvalue()


def decode_key(payload: bytes):
    r = _Reader(payload)
    (variant,) = struct.unpack("<B", r.take(1))
    if variant == _PERCENTILE:
        layers = tuple(r.u32() for _ in range(r.u32()))
        (percentile,) = struct.unpack("<d", r.take(8))
        (bound,) = struct.unpack("<B", r.take(1))
        thresholds = None
        if bound:
            thresholds = struct.unpack(f"<{len(layers)}d", r.take(8 * len(layers)))
        return MaxPercentileKey(percentile, layers, thresholds)
    if variant == _INTERVALS:
        layers, intervals = [], []
        for _ in range(r.u32()):
            layers.append(r.u32())
            intervals.append(tuple(struct.unpack("<dd", r.take(16)) for _ in range(r.u32())))
        return IntervalKey(tuple(layers), tuple(intervals))
    raise CheckpointError(f"unknown key variant {variant}")


def _write_atomic(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# public API


@dataclass
class LoadedCheckpoint:
    model: Model
    key: object | None
    thresholds: np.ndarray | None

    @property
    def has_key(self) -> bool:
        return self.key is not None


def checkpoint_bytes(model: Model, key=None, thresholds=None) -> bytes:
    records = {}
    if key is not None:
        records[b"KEY_"] = encode_key(key)
    if thresholds is not None:
        th = np.asarray(thresholds, dtype="<f4")
        records[b"THRS"] = _u32(th.size) + th.tobytes()
    return encode_container(MODEL_MAGIC, Container(model.descriptor, dict(model.params), records))


def save_checkpoint(model: Model, path, key=None, thresholds=None) -> None:
    _write_atomic(path, checkpoint_bytes(model, key, thresholds))


def load_checkpoint(path) -> LoadedCheckpoint:
    c = decode_container(MODEL_MAGIC, Path(path).read_bytes())
    model = Model.from_descriptor(c.descriptor, c.tensors)
    key = decode_key(c.records[b"KEY_"]) if b"KEY_" in c.records else None
    thresholds = None
    if b"THRS" in c.records:
        r = _Reader(c.records[b"THRS"])
        n = r.u32()
        thresholds = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float32)
    return LoadedCheckpoint(model, key, thresholds)


def save_key(key, path) -> None:
    _write_atomic(path, encode_container(KEY_MAGIC, Container("", {}, {b"KEY_": encode_key(key)})))


def load_key(path):
    c = decode_container(KEY_MAGIC, Path(path).read_bytes())
    if b"KEY_" not in c.records:
        raise CheckpointError("key file has no key record")
    return decode_key(c.records[b"KEY_"])


def save_tensors(tensors: dict[str, np.ndarray], path, descriptor: str) -> None:
    """Store loose named tensors (profiles, adversarial batches) in the same container."""
    _write_atomic(path, encode_container(MODEL_MAGIC, Container(descriptor, tensors, {})))


def load_tensors(path) -> tuple[str, dict[str, np.ndarray]]:
    c = decode_container(MODEL_MAGIC, Path(path).read_bytes())
    return c.descriptor, c.tensors
