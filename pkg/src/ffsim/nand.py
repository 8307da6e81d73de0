"""Deterministic raw NAND flash model with access tracing."""
from __future__ import annotations

import random
import struct
from dataclasses import dataclass, field, asdict
from enum import IntEnum

from .errors import (
    BadBlockAccess, FlashError, InvalidGeometry, OutOfRange, Oversize,
    PowerLoss, RewriteWithoutErase,
)

IMAGE_MAGIC = b"FLSHSIM1"
_GEOM = struct.Struct("<IIIIQIIId")
_COUNTERS = struct.Struct("<QQQ")
BAD_MARKER_OFFSET = 0


class PageState(IntEnum):
    FREE = 0
    PROGRAMMED = 1
    CORRUPT = 2


class BadKind(IntEnum):
    NONE = 0
    FACTORY = 1
    WORN = 2


@dataclass(frozen=True)
class FlashGeometry:
    num_blocks: int = 1024
    pages_per_block: int = 64
    page_size: int = 2048
    oob_size: int = 64
    endurance_limit: int = 10_000
    t_read: int = 25
    t_prog: int = 200
    t_erase: int = 1500
    bit_error_rate: float = 0.0

    def validate(self) -> None:
        def bad(msg):
            raise InvalidGeometry(msg)

        if self.num_blocks < 2:
            bad("num_blocks must be >= 2")
        if not 1 <= self.pages_per_block <= 1024:
            bad("pages_per_block must be in 1..1024")
        ps = self.page_size
        if ps < 512 or ps & (ps - 1):
            bad("page_size must be a power of two >= 512")
        if self.oob_size < 16:
            bad("oob_size must be >= 16")
        if self.endurance_limit < 1:
            bad("endurance_limit must be >= 1")
        if min(self.t_read, self.t_prog, self.t_erase) < 0:
            bad("latencies must be non-negative")
        if not 0.0 <= self.bit_error_rate <= 1.0:
            bad("bit_error_rate must be a probability")

    @property
    def total_pages(self) -> int:
        return self.num_blocks * self.pages_per_block

    @property
    def capacity_bytes(self) -> int:
        return self.total_pages * self.page_size


@dataclass
class TraceCounters:
    page_reads: int = 0
    page_writes: int = 0
    block_erases: int = 0
    simulated_time: int = 0

    def minus(self, other: "TraceCounters") -> "TraceCounters":
        return TraceCounters(
            self.page_reads - other.page_reads,
            self.page_writes - other.page_writes,
            self.block_erases - other.block_erases,
            self.simulated_time - other.simulated_time,
        )

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class CrashPlan:
    trigger_op_index: int
    armed: bool = True


@dataclass
class BlockMeta:
    erase_count: int = 0
    bad: BadKind = BadKind.NONE
    pages: list = field(default_factory=list)


class FlashDevice:
    """A single-plane NAND array.

    Programmed page contents are kept unpadded in memory and padded with
    0xFF on read, which keeps large sparse devices cheap.
    """

    def __init__(self, geometry: FlashGeometry, seed: int = 0):
        geometry.validate()
        self.geometry = geometry
        self.seed = seed
        self._rng = random.Random(seed)
        g = geometry
        self._ppb = g.pages_per_block
        self._ps = g.page_size
        self._os = g.oob_size
        self._ff_page = b"\xff" * g.page_size
        self._ff_oob = b"\xff" * g.oob_size
        self.erase_counts = [0] * g.num_blocks
        self.bad = [BadKind.NONE] * g.num_blocks
        self.state = [bytearray(g.pages_per_block) for _ in range(g.num_blocks)]
        self.data = [[None] * g.pages_per_block for _ in range(g.num_blocks)]
        self.oob = [[None] * g.pages_per_block for _ in range(g.num_blocks)]
        self.page_reads = 0
        self.page_writes = 0
        self.block_erases = 0
        self._crash_left = None
        self._crash_used = False
        self._trace = None

    # -- crash plumbing ---------------------------------------------------

    def arm_crash(self, plan: CrashPlan) -> None:
        if self._crash_used:
            raise FlashError("crash already fired on this device")
        if plan.trigger_op_index < 0:
            raise ValueError("trigger_op_index must be >= 0")
        self._crash_left = plan.trigger_op_index if plan.armed else None

    def disarm_crash(self) -> None:
        self._crash_left = None

    @property
    def crash_armed(self) -> bool:
        return self._crash_left is not None

    def _tick(self) -> bool:
        """Count one flash operation; True when it is the crashing one."""
        left = self._crash_left
        if left is None:
            return False
        if left == 0:
            self._crash_left = None
            self._crash_used = True
            return True
        self._crash_left = left - 1
        return False

    # -- tracing ----------------------------------------------------------

    def enable_trace(self) -> None:
        self._trace = []

    def trace_lines(self) -> list[str]:
        return [f"{op},{b},{p},{t}" for op, b, p, t in (self._trace or [])]

    def _log(self, op, block, page):
        if self._trace is not None:
            self._trace.append((op, block, page, self.simulated_time))

    # -- checks -----------------------------------------------------------

    def _check(self, block, page=None):
        if not 0 <= block < self.geometry.num_blocks:
            raise OutOfRange(f"block {block}")
        if page is not None and not 0 <= page < self._ppb:
            raise OutOfRange(f"page {page}")
        if self.bad[block]:
            raise BadBlockAccess(f"block {block} is bad")

    # -- operations -------------------------------------------------------

    def program_page(self, block: int, page: int, data: bytes, oob: bytes = b"") -> None:
        self._check(block, page)
        if len(data) > self._ps or len(oob) > self._os:
            raise Oversize(f"{len(data)}/{len(oob)} bytes")
        st = self.state[block]
        if st[page] != PageState.FREE:
            raise RewriteWithoutErase(f"block {block} page {page}")
        crash = self._tick()
        data = bytes(data)
        self.oob[block][page] = bytes(oob) + self._ff_oob[len(oob):]
        self.page_writes += 1
        self._log("W", block, page)
        if crash:
            img = bytearray(data if data else self._ff_page)
            bit = self._rng.randrange(len(img) * 8)
            img[bit >> 3] ^= 1 << (bit & 7)
            self.data[block][page] = bytes(img)
            st[page] = PageState.CORRUPT
            raise PowerLoss(f"power lost programming {block}:{page}")
        self.data[block][page] = data
        st[page] = PageState.PROGRAMMED

    def read_page(self, block: int, page: int) -> tuple[bytes, bytes]:
        self._check(block, page)
        if self._tick():
            raise PowerLoss(f"power lost reading {block}:{page}")
        self.page_reads += 1
        self._log("R", block, page)
        s = self.state[block][page]
        if s == PageState.FREE:
            return self._ff_page, self._ff_oob
        d = self.data[block][page]
        out = d + self._ff_page[len(d):]
        if s == PageState.PROGRAMMED:
            ber = self.geometry.bit_error_rate
            if ber > 0.0 and self._rng.random() < ber:
                bit = self._rng.randrange(self._ps * 8)
                img = bytearray(out)
                img[bit >> 3] ^= 1 << (bit & 7)
                out = bytes(img)
        return out, self.oob[block][page]

    def erase_block(self, block: int) -> None:
        self._check(block)
        crash = self._tick()
        self.erase_counts[block] += 1
        st = self.state[block]
        for i in range(self._ppb):
            st[i] = PageState.FREE
        self.data[block] = [None] * self._ppb
        self.oob[block] = [None] * self._ppb
        self.block_erases += 1
        self._log("E", block, 0)
        if self.erase_counts[block] >= self.geometry.endurance_limit:
            self.bad[block] = BadKind.WORN
        if crash:
            raise PowerLoss(f"power lost erasing {block}")

    def mark_bad(self, block: int) -> None:
        if not 0 <= block < self.geometry.num_blocks:
            raise OutOfRange(f"block {block}")
        if self.bad[block]:
            return
        oob = bytearray(self.oob[block][0] or self._ff_oob)
        oob[BAD_MARKER_OFFSET] = 0x00
        self.oob[block][0] = bytes(oob)
        self.bad[block] = BadKind.WORN

    def is_bad(self, block: int) -> bool:
        if not 0 <= block < self.geometry.num_blocks:
            raise OutOfRange(f"block {block}")
        return self.bad[block] != BadKind.NONE

    def page_state(self, block: int, page: int) -> PageState:
        return PageState(self.state[block][page])

    def block_meta(self, block: int) -> BlockMeta:
        return BlockMeta(self.erase_counts[block], BadKind(self.bad[block]),
                         [PageState(s) for s in self.state[block]])

    def good_blocks(self) -> list[int]:
        return [b for b, k in enumerate(self.bad) if not k]

    # -- observation ------------------------------------------------------

    @property
    def simulated_time(self) -> int:
        g = self.geometry
        return (self.page_reads * g.t_read + self.page_writes * g.t_prog
                + self.block_erases * g.t_erase)

    def counters(self) -> TraceCounters:
        return TraceCounters(self.page_reads, self.page_writes,
                             self.block_erases, self.simulated_time)

    def erase_histogram(self) -> list[tuple[int, int]]:
        return list(enumerate(self.erase_counts))

    def wear_spread(self) -> int:
        counts = [c for c, k in zip(self.erase_counts, self.bad) if not k]
        if not counts:
            raise FlashError("no good blocks")
        return max(counts) - min(counts)

    # -- image dump/load ----------------------------------------------------

    def dump(self) -> bytes:
        g = self.geometry
        out = bytearray(IMAGE_MAGIC)
        out += _GEOM.pack(g.num_blocks, g.pages_per_block, g.page_size, g.oob_size,
                          g.endurance_limit, g.t_read, g.t_prog, g.t_erase,
                          g.bit_error_rate)
        for b in range(g.num_blocks):
            out += struct.pack("<QB", self.erase_counts[b], int(self.bad[b]))
            st = self.state[b]
            for p in range(self._ppb):
                out.append(st[p])
                d = self.data[b][p]
                out += self._ff_page if d is None else d + self._ff_page[len(d):]
                o = self.oob[b][p]
                out += self._ff_oob if o is None else o
        out += _COUNTERS.pack(self.page_reads, self.page_writes, self.block_erases)
        return bytes(out)

    @classmethod
    def load(cls, blob: bytes, seed: int = 0) -> "FlashDevice":
        if blob[:8] != IMAGE_MAGIC:
            raise FlashError("not a flash image")
        fields = _GEOM.unpack_from(blob, 8)
        g = FlashGeometry(*fields)
        dev = cls(g, seed)
        pos = 8 + _GEOM.size
        ps, os_ = g.page_size, g.oob_size
        for b in range(g.num_blocks):
            ec, bad = struct.unpack_from("<QB", blob, pos)
            pos += 9
            dev.erase_counts[b] = ec
            dev.bad[b] = BadKind(bad)
            for p in range(g.pages_per_block):
                s = blob[pos]
                pos += 1
                d = blob[pos:pos + ps]
                pos += ps
                o = blob[pos:pos + os_]
                pos += os_
                dev.state[b][p] = s
                if s != PageState.FREE or o != dev._ff_oob:
                    dev.data[b][p] = d if s != PageState.FREE else None
                    dev.oob[b][p] = o
        if len(blob) >= pos + _COUNTERS.size:
            dev.page_reads, dev.page_writes, dev.block_erases = _COUNTERS.unpack_from(blob, pos)
        return dev

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.dump())

    @classmethod
    def open(cls, path, seed: int = 0) -> "FlashDevice":
        with open(path, "rb") as fh:
            return cls.load(fh.read(), seed)


def create_device(geometry: FlashGeometry, seed: int = 0,
                  factory_bad_fraction: float = 0.0) -> FlashDevice:
    geometry.validate()
    if not 0.0 <= factory_bad_fraction <= 0.1:
        raise InvalidGeometry("factory_bad_fraction must be in [0, 0.1]")
    dev = FlashDevice(geometry, seed)
    # small epsilon so that e.g. 0.07 * 100 floors to 7, not 6
    n_bad = int(factory_bad_fraction * geometry.num_blocks + 1e-9)
    if n_bad:
        for b in dev._rng.sample(range(1, geometry.num_blocks), n_bad):
            dev.bad[b] = BadKind.FACTORY
            dev.oob[b][0] = b"\x00" + dev._ff_oob[1:]
    return dev
