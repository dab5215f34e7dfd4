"""Binary weight container.

Layout (all little-endian)::

    magic        8 bytes   b"ISACWT\\x00\\x01"
    version      uint32
    count        uint32
    index_len    uint64    bytes of the index that follows
    payload_len  uint64    bytes of the payload after the index
    index        count x (name_len uint16, name utf-8, ndim uint8,
                          shape uint64[ndim], offset uint64)
    payload      float64 arrays, C order, back to back

Offsets are relative to the payload start and must be contiguous.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .autodiff import Param

__all__ = ["WEIGHTS_MAGIC", "WEIGHTS_VERSION", "WeightFormatError", "encode_weights", "decode_weights", "save_weights", "load_weights", "assign_weights"]

WEIGHTS_MAGIC = b"ISACWT\x00\x01"
WEIGHTS_VERSION = 1
_HEAD = struct.Struct("<8sIIQQ")


class WeightFormatError(ValueError):
    """Corrupt, truncated or incompatible weight file."""


def _as_mapping(params) -> list[tuple[str, np.ndarray]]:
    if isinstance(params, Mapping):
        items = list(params.items())
    else:
        items = [(p.name, p.value) for p in params]
    names = [n for n, _ in items]
    dup = sorted({n for n in names if names.count(n) > 1})
    if dup:
        raise WeightFormatError(f"duplicate parameter names: {dup}")
    return [(n, np.asarray(v, dtype=float)) for n, v in items]


def encode_weights(params) -> bytes:
    items = _as_mapping(params)
    index = bytearray()
    payload = bytearray()
    for name, arr in items:
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise WeightFormatError(f"parameter name too long: {name[:40]}...")
        index += struct.pack("<H", len(nb)) + nb
        index += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
        index += struct.pack("<Q", len(payload))
        payload += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    head = _HEAD.pack(WEIGHTS_MAGIC, WEIGHTS_VERSION, len(items), len(index), len(payload))
    return head + bytes(index) + bytes(payload)


def decode_weights(raw: bytes) -> dict[str, np.ndarray]:
    if len(raw) < _HEAD.size:
        raise WeightFormatError("file too short for a weight header")
    magic, version, count, index_len, payload_len = _HEAD.unpack_from(raw, 0)
    if magic != WEIGHTS_MAGIC:
        raise WeightFormatError("not a weight container (bad magic)")
    if version != WEIGHTS_VERSION:
        raise WeightFormatError(f"unsupported weight format version {version} (expected {WEIGHTS_VERSION})")
    start = _HEAD.size + index_len
    if len(raw) < start + payload_len:
        raise WeightFormatError("truncated weight file")
    if len(raw) > start + payload_len:
        raise WeightFormatError("trailing bytes after payload")
    payload = raw[start:]
    out: dict[str, np.ndarray] = {}
    pos, expect = _HEAD.size, 0
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            if pos + nlen > start:
                raise WeightFormatError("corrupt index: name runs past the index")
            name = raw[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", raw, pos)
            pos += 8 * ndim
            (offset,) = struct.unpack_from("<Q", raw, pos)
            pos += 8
            if pos > start:
                raise WeightFormatError("corrupt index: entry runs past the index")
            if name in out:
                raise WeightFormatError(f"duplicate parameter name {name!r}")
            if offset != expect:
                raise WeightFormatError(f"corrupt index: {name!r} at offset {offset}, expected {expect}")
            n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            if offset + 8 * n > payload_len:
                raise WeightFormatError(f"truncated payload for {name!r}")
            out[name] = np.frombuffer(payload, dtype="<f8", count=n, offset=offset).reshape(shape).astype(float)
            expect = offset + 8 * n
    except (struct.error, UnicodeDecodeError) as exc:
        raise WeightFormatError(f"corrupt index: {exc}") from exc
    if pos != start or expect != payload_len:
        raise WeightFormatError("index and payload sizes disagree")
    return out


def save_weights(path, params) -> None:
    Path(path).write_bytes(encode_weights(params))


def load_weights(path) -> dict[str, np.ndarray]:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"weight file not found: {p}")
    return decode_weights(p.read_bytes())


def assign_weights(params: Iterable[Param], weights: Mapping[str, np.ndarray], strict: bool = True) -> None:
    """Copy stored arrays into ``params``; shapes must match exactly.

    With ``strict`` every parameter must be present in ``weights``; names in
    ``weights`` without a matching parameter are always an error.
    """
    params = list(params)
    by_name = {p.name: p for p in params}
    extra = sorted(set(weights) - set(by_name))
    if extra:
        raise WeightFormatError(f"weights for unknown parameters: {extra[:5]}")
    missing = sorted(set(by_name) - set(weights))
    if strict and missing:
        raise WeightFormatError(f"weights missing for parameters: {missing[:5]}")
    for name, arr in weights.items():
        p = by_name[name]
        if p.value.shape != arr.shape:
            raise WeightFormatError(f"shape mismatch for {name}: file {arr.shape}, model {p.value.shape}")
    for name, arr in weights.items():
        by_name[name].value[...] = arr
