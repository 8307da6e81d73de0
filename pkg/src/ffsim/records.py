"""On-flash record layout shared by all filesystem variants.

Every record fills exactly one page: a 32-byte little-endian header followed
by the (possibly compressed) payload. The OOB area mirrors kind, seq and
object id so scans can classify a page cheaply; OOB byte 0 is left alone
because it carries the bad-block marker.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from enum import IntEnum

from .codecs import Codec

MAGIC = b"\xf5\x0f"
HEADER = struct.Struct("<2sIIBBIHHQI")
HEADER_SIZE = HEADER.size  # 32
_CRC_AT = HEADER_SIZE - 4
OOB = struct.Struct("<BQIB")  # kind, seq, object id, flags at offset 1
OOB_AT = 1

# OOB flag bits
FLAG_TXN_END = 0x01

MAX_U16 = 0xFFFF
MAX_U32 = 0xFFFFFFFF


class Kind(IntEnum):
    FILE_DATA = 1
    FILE_META = 2
    DIR_META = 3
    DELETION = 4
    CHECKPOINT = 5
    INDEX_NODE = 6
    # bookkeeping kinds beyond the six user-visible ones
    ANCHOR = 7
    COMMIT = 8
    LOGREF = 9


@dataclass(slots=True)
class ChunkRecord:
    kind: int
    object_id: int
    parent_id: int
    codec: int
    file_offset: int
    length_raw: int
    seq: int
    payload: bytes
    checksum: int = 0
    flags: int = 0

    @property
    def length_stored(self) -> int:
        return len(self.payload)


def payload_capacity(page_size: int) -> int:
    return page_size - HEADER_SIZE


def pack(rec: ChunkRecord) -> tuple[bytes, bytes]:
    """Serialize to (page data, oob) and fill in ``rec.checksum``."""
    hdr = HEADER.pack(MAGIC, rec.object_id, rec.parent_id, rec.kind, rec.codec,
                      rec.file_offset, rec.length_raw, len(rec.payload), rec.seq, 0)
    crc = zlib.crc32(rec.payload, zlib.crc32(hdr))
    rec.checksum = crc
    data = hdr[:_CRC_AT] + crc.to_bytes(4, "little") + rec.payload
    oob = b"\xff" + OOB.pack(rec.kind, rec.seq, rec.object_id, rec.flags)
    return data, oob


def record(kind, object_id, parent_id, seq, payload=b"", *, codec=Codec.NONE,
           file_offset=0, length_raw=None, flags=0) -> ChunkRecord:
    if length_raw is None:
        length_raw = len(payload)
    return ChunkRecord(int(kind), object_id, parent_id, int(codec), file_offset,
                       length_raw, seq, bytes(payload), 0, flags)


def unpack(data: bytes, oob: bytes | None = None) -> ChunkRecord | None:
    """Parse a page; None if it holds no record or the checksum fails."""
    if data[:2] != MAGIC:
        return None
    (_, obj, parent, kind, codec, off, lraw, lstored, seq, crc) = HEADER.unpack_from(data)
    end = HEADER_SIZE + lstored
    if end > len(data):
        return None
    payload = data[HEADER_SIZE:end]
    calc = zlib.crc32(payload, zlib.crc32(data[:_CRC_AT] + b"\0\0\0\0"))
    if calc != crc:
        return None
    flags = 0
    if oob is not None and len(oob) >= OOB_AT + OOB.size:
        flags = oob[OOB_AT + OOB.size - 1]
        if flags == 0xFF:
            flags = 0
    return ChunkRecord(kind, obj, parent, codec, off, lraw, seq, payload, crc, flags)


def looks_programmed(data: bytes) -> bool:
    """True when the page carries a record magic (valid or not)."""
    return data[:2] == MAGIC


def is_erased(data: bytes, oob: bytes) -> bool:
    return data[:2] == b"\xff\xff" and data.count(0xFF) == len(data)
