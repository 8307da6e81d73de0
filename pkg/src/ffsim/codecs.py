"""Byte-level compression codecs used for record payloads.

RLE output is a sequence of (count, byte) pairs with count in 1..255.
XOR_DELTA replaces every byte with its xor against the previous input byte
(the first byte is kept as is) and then applies RLE.
"""
from __future__ import annotations

from enum import IntEnum

import numpy as np


class Codec(IntEnum):
    NONE = 0
    RLE = 1
    XOR_DELTA = 2


def _runs(arr: np.ndarray):
    n = arr.size
    change = np.flatnonzero(arr[1:] != arr[:-1]) + 1
    starts = np.concatenate(([0], change))
    lengths = np.diff(np.concatenate((starts, [n])))
    return arr[starts], lengths


def _delta(arr: np.ndarray) -> np.ndarray:
    out = arr.copy()
    out[1:] ^= arr[:-1]
    return out


def _undelta(arr: np.ndarray) -> np.ndarray:
    # prefix xor
    return np.bitwise_xor.accumulate(arr) if arr.size else arr


def rle_size(data: bytes, at_least: int | None = None) -> int:
    """Length in bytes of the RLE encoding of ``data``, without building it.

    With ``at_least``, a cheap lower bound is returned as soon as it reaches
    that value, which is all a caller deciding "does it shrink?" needs.
    """
    if not data:
        return 0
    arr = np.frombuffer(data, dtype=np.uint8)
    if at_least is not None:
        bound = 2 * (int(np.count_nonzero(arr[1:] != arr[:-1])) + 1)
        if bound >= at_least:
            return bound
    _, lengths = _runs(arr)
    return 2 * int(((lengths + 254) // 255).sum())


def _rle_arr(arr: np.ndarray) -> bytes:
    if arr.size == 0:
        return b""
    values, lengths = _runs(arr)
    reps = (lengths + 254) // 255
    total = int(reps.sum())
    counts = np.full(total, 255, dtype=np.uint8)
    last = np.cumsum(reps) - 1
    counts[last] = (lengths - 255 * (reps - 1)).astype(np.uint8)
    out = np.empty(2 * total, dtype=np.uint8)
    out[0::2] = counts
    out[1::2] = np.repeat(values, reps)
    return out.tobytes()


def _unrle(blob: bytes, raw_len: int) -> np.ndarray:
    if len(blob) % 2:
        raise ValueError("odd-length RLE stream")
    arr = np.frombuffer(blob, dtype=np.uint8)
    counts = arr[0::2]
    if counts.size and counts.min() == 0:
        raise ValueError("zero run length in RLE stream")
    out = np.repeat(arr[1::2], counts)
    if out.size != raw_len:
        raise ValueError(f"RLE stream expands to {out.size}, expected {raw_len}")
    return out


def encode(codec: Codec, data: bytes) -> bytes:
    """Raw encoder without the no-expansion fallback."""
    if codec == Codec.NONE:
        return bytes(data)
    arr = np.frombuffer(bytes(data), dtype=np.uint8)
    if codec == Codec.RLE:
        return _rle_arr(arr)
    if codec == Codec.XOR_DELTA:
        return _rle_arr(_delta(arr))
    raise ValueError(f"unknown codec {codec!r}")


def compress(codec: Codec, data: bytes) -> tuple[Codec, bytes]:
    """Encode ``data``; store it raw with NONE when encoding does not shrink it."""
    codec = Codec(codec)
    if codec == Codec.NONE:
        return Codec.NONE, bytes(data)
    if codec == Codec.RLE and rle_size(data, at_least=len(data)) >= len(data):
        return Codec.NONE, bytes(data)
    out = encode(codec, data)
    if len(out) >= len(data):
        return Codec.NONE, bytes(data)
    return codec, out


def decompress(codec: Codec, blob: bytes, raw_len: int) -> bytes:
    codec = Codec(codec)
    if codec == Codec.NONE:
        if len(blob) != raw_len:
            raise ValueError("stored length differs from raw length")
        return bytes(blob)
    if codec == Codec.RLE:
        return _unrle(blob, raw_len).tobytes()
    if codec == Codec.XOR_DELTA:
        return _undelta(_unrle(blob, raw_len)).tobytes()
    raise ValueError(f"unknown codec {codec!r}")
