"""Variant-independent filesystem machinery: paths, anchors, block
allocation, garbage collection and wear leveling."""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field, asdict
from typing import Optional

from .. import records as R
from ..codecs import Codec, compress, rle_size
from ..errors import (
    ChecksumMismatch, CorruptAnchor, DeviceTooSmall, InvalidPath, NoSpace,
    NotFormatted, StaleHandle, VariantMismatch,
)
from ..nand import FlashDevice
from ..records import Kind

ROOT_ID = 1
FILE = "file"
DIR = "dir"
MAX_FILE_SIZE = 0x7FFFFFFE
# a compressed record may cover this many payload-sized units of raw data
MAX_UNITS_PER_RECORD = 32


@dataclass
class FsOptions:
    gc_watermark: int = 4
    wl_threshold: int = 16
    wl_enabled: bool = True
    codec: Optional[int] = None  # None: the variant's default
    fanout: int = 16
    cache_capacity: int = 64
    journal_cap: int = 64

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MountStats:
    pages_read: int
    simulated_time: int
    full_scan: bool


@dataclass
class GcStats:
    migrated_pages: int = 0
    erased_block: Optional[int] = None


@dataclass
class Stat:
    kind: str
    size: int
    object_id: int


@dataclass
class Policy:
    compression: bool
    metadata_in_ram: bool
    atomic_ops: bool = False  # a crash never leaves an operation half applied


@dataclass
class Layout:
    anchors: list
    reserved: list = field(default_factory=list)  # variant-owned region

    def to_dict(self) -> dict:
        return {"anchors": self.anchors, "reserved": self.reserved}


def split_path(path: str) -> list[str]:
    if not isinstance(path, str) or not path.startswith("/"):
        raise InvalidPath(f"not absolute: {path!r}")
    if path == "/":
        return []
    parts = path[1:].split("/")
    for p in parts:
        if p in ("", ".", ".."):
            raise InvalidPath(f"bad component in {path!r}")
        n = len(p.encode("utf-8"))
        if n > 255:
            raise InvalidPath(f"component longer than 255 bytes in {path!r}")
    return parts


def pack_anchor(variant: str, generation: int, options: FsOptions, layout: Layout) -> bytes:
    body = {"variant": variant, "generation": generation,
            "options": options.to_dict(), "layout": layout.to_dict()}
    return json.dumps(body, sort_keys=True, separators=(",", ":")).encode()


def read_anchor(dev: FlashDevice, anchors: Optional[list] = None, cache: Optional[dict] = None):
    """Return the newest valid anchor body, or raise NotFormatted/CorruptAnchor.

    Pages read are stored in ``cache`` when given so a later scan does not
    read them twice.
    """
    if anchors is None:
        anchors = anchor_blocks(dev)
    best = None
    saw_magic = False
    for b in anchors:
        data, oob = dev.read_page(b, 0)
        if cache is not None:
            cache[(b, 0)] = (data, oob)
        if R.looks_programmed(data):
            saw_magic = True
        rec = R.unpack(data, oob)
        if rec is None or rec.kind != Kind.ANCHOR:
            continue
        try:
            body = json.loads(rec.payload)
        except ValueError:
            continue
        if best is None or body["generation"] > best["generation"]:
            best = body
    if best is None:
        if saw_magic:
            raise CorruptAnchor("no valid anchor copy")
        raise NotFormatted("no anchor found")
    return best


def anchor_blocks(dev: FlashDevice) -> list[int]:
    good = [b for b in range(dev.geometry.num_blocks) if not dev.is_bad(b)]
    return good[:2]


class FileSystem:
    """Shared state of a mounted filesystem.

    Subclasses provide the index and the user operations; this class owns
    the page allocator, per-block valid accounting, GC and WL.
    """

    variant = "base"
    default_codec = Codec.NONE
    policy = Policy(compression=False, metadata_in_ram=True)

    def __init__(self, dev: FlashDevice, anchor: dict):
        self.dev = dev
        g = dev.geometry
        self.g = g
        self.ppb = g.pages_per_block
        self.P = R.payload_capacity(g.page_size)
        self.opts = FsOptions(**anchor["options"])
        self.generation = anchor["generation"]
        lay = anchor["layout"]
        self.layout = Layout(list(lay["anchors"]), list(lay["reserved"]))
        self.codec = Codec(self.opts.codec if self.opts.codec is not None else self.default_codec)
        n = g.num_blocks
        self.valid = [0] * n
        self.n_live = 0  # sum of valid over the allocation area
        self.used = [0] * n
        self.live = [bytearray(self.ppb) for _ in range(n)]
        reserved = set(self.layout.anchors) | set(self.layout.reserved)
        self.alloc_set = [b for b in range(n) if b not in reserved and not dev.is_bad(b)]
        self.free: deque = deque()
        self.in_free: set = set()
        self.needs_erase: set = set()
        self.head: Optional[int] = None
        self.head_page = 0
        self.seq = 1
        self.mounted = True
        self.gc_erases = 0
        self.gc_hold: set = set()  # evacuated victims waiting to be erased
        self.wl_erases = 0

    # -- lifecycle -----------------------------------------------------------

    def _check_mounted(self):
        if not self.mounted:
            raise StaleHandle("filesystem is unmounted")

    def unmount(self, clean: bool = True) -> None:
        self._check_mounted()
        if clean:
            self._clean_unmount()
        self.mounted = False

    def _clean_unmount(self):
        pass

    # -- allocation ------------------------------------------------------------

    def next_seq(self) -> int:
        s = self.seq
        self.seq += 1
        return s

    def usable_pages(self) -> int:
        return len(self.alloc_set) * self.ppb

    def live_pages(self) -> int:
        return self.n_live

    def free_pages(self) -> int:
        n = len(self.free) * self.ppb
        if self.head is not None:
            n += self.ppb - self.head_page
        return n

    def _reserve_pages(self) -> int:
        return (self.opts.gc_watermark + 2) * self.ppb

    def check_space(self, need_pages: int) -> None:
        """Refuse up front when the live data would crowd out GC headroom."""
        if self.live_pages() + need_pages > self.usable_pages() - self._reserve_pages():
            raise NoSpace(f"need {need_pages} pages")

    def _erase(self, b: int) -> None:
        self.dev.erase_block(b)
        self._after_erase(b)

    def _forget_block(self, b: int) -> None:
        """Hook: block ``b`` was just erased."""

    def _after_erase(self, b: int) -> None:
        self._forget_block(b)
        self.used[b] = 0
        self._clear_valid(b)
        self.needs_erase.discard(b)
        if self.dev.is_bad(b):
            self.dev.mark_bad(b)
            if b in self.alloc_set:
                self.alloc_set.remove(b)
        elif b not in self.in_free and b in self.alloc_set:
            self.free.append(b)
            self.in_free.add(b)

    def _open_block(self) -> int:
        while True:
            if not self.free:
                raise NoSpace("no free blocks")
            b = self.free.popleft()
            self.in_free.discard(b)
            if b in self.needs_erase:
                self.needs_erase.discard(b)
                self.dev.erase_block(b)
                self._forget_block(b)
                self._clear_valid(b)
                if self.dev.is_bad(b):
                    self.dev.mark_bad(b)
                    self.alloc_set.remove(b)
                    continue
            self.head = b
            self.head_page = 0
            self.used[b] = 0
            return b

    def write_record(self, rec: R.ChunkRecord) -> tuple[int, int]:
        b = self.head
        if b is None or self.head_page >= self.ppb:
            b = self._open_block()
        p = self.head_page
        data, oob = R.pack(rec)
        self.head_page = p + 1
        self.used[b] = p + 1
        self.dev.program_page(b, p, data, oob)
        self.live[b][p] = 1
        self.valid[b] += 1
        self.n_live += 1
        return (b, p)

    def kill(self, loc) -> None:
        b, p = loc
        if self.live[b][p]:
            self.live[b][p] = 0
            self.valid[b] -= 1
            self.n_live -= 1

    def mark_live(self, loc) -> None:
        b, p = loc
        if not self.live[b][p]:
            self.live[b][p] = 1
            self.valid[b] += 1
            self.n_live += 1

    def _clear_valid(self, b: int) -> None:
        self.n_live -= self.valid[b]
        self.valid[b] = 0
        self.live[b] = bytearray(self.ppb)

    def read_record(self, loc) -> R.ChunkRecord:
        data, oob = self.dev.read_page(*loc)
        rec = R.unpack(data, oob)
        if rec is None:
            raise ChecksumMismatch(f"record at {loc[0]}:{loc[1]} failed verification")
        return rec

    # -- compression -----------------------------------------------------------

    def chunk_data(self, offset: int, data: bytes) -> list[tuple[int, int, int, bytes]]:
        """Split a write into (file_offset, raw_len, codec, stored) records."""
        P = self.P
        out = []
        pos = 0
        n = len(data)
        codec = self.codec
        while pos < n:
            unit = data[pos:pos + P]
            if codec != Codec.NONE and self._encoded_size(unit) < len(unit):
                k = self._grow_window(data, pos)
                raw = data[pos:pos + k]
                used, stored = compress(codec, raw)
            else:
                raw = unit
                used, stored = Codec.NONE, unit
            out.append((offset + pos, len(raw), int(used), stored))
            pos += len(raw)
        return out

    def _encoded_size(self, raw: bytes) -> int:
        if self.codec == Codec.RLE:
            return rle_size(raw, at_least=len(raw))
        used, stored = compress(self.codec, raw)
        return len(stored) if used != Codec.NONE else len(raw) + 1

    def _grow_window(self, data: bytes, pos: int) -> int:
        """Largest raw length (in whole units, capped) whose encoding fits a page."""
        P = self.P
        avail = len(data) - pos
        max_units = min(MAX_UNITS_PER_RECORD, (R.MAX_U16 // P))

        def fits(units):
            raw = data[pos:pos + min(units * P, avail)]
            s = self._encoded_size(raw)
            return s <= P and s < len(raw)

        lo = 1
        hi = min(max_units, -(-avail // P))
        if fits(hi):
            return min(hi * P, avail)
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if fits(mid):
                lo = mid
            else:
                hi = mid
        return min(lo * P, avail)

    def decode_payload(self, rec: R.ChunkRecord) -> bytes:
        from ..codecs import decompress
        try:
            return decompress(rec.codec, rec.payload, rec.length_raw)
        except ValueError as exc:
            raise ChecksumMismatch(str(exc)) from exc

    # -- garbage collection ------------------------------------------------------

    def _gc_candidates(self):
        ec = self.dev.erase_counts
        best = None
        for b in self.alloc_set:
            if b in self.in_free or b == self.head or b in self.gc_hold:
                continue
            if self.used[b] - self.valid[b] <= 0:
                continue
            key = (self.valid[b], ec[b], b)
            if best is None or key < best:
                best = key
        return None if best is None else best[2]

    def _before_gc(self) -> None:
        pass

    def _mutating(self) -> None:
        """Hook run before the first flash write of any mutation."""

    def gc_step(self) -> GcStats:
        self._check_mounted()
        self._mutating()
        return self._gc_step()

    def _gc_step(self) -> GcStats:
        self._before_gc()
        victim = self._gc_candidates()
        if victim is None:
            return GcStats()
        moved = self._evacuate(victim)
        self._erase(victim)
        self.gc_erases += 1
        if self.opts.wl_enabled:
            self._wl_rebalance()
        return GcStats(moved, victim)

    def _evacuate(self, b: int) -> int:
        moved = 0
        live = self.live[b]
        for p in range(self.ppb):
            if live[p]:
                rec = self.read_record((b, p))
                self._migrate(rec, (b, p))
                moved += 1
        self._after_evacuate(b)
        if self.valid[b] != 0:
            raise RuntimeError(f"block {b} still holds live pages after evacuation")
        return moved

    def _relocate(self, b: int) -> None:
        self._evacuate(b)
        self._erase(b)

    def _after_evacuate(self, b: int) -> None:
        pass

    def _migrate(self, rec: R.ChunkRecord, loc) -> None:
        raise NotImplementedError

    def make_room(self) -> None:
        """Run GC until the free list is back at the watermark or no progress."""
        while len(self.free) < self.opts.gc_watermark:
            st = self._gc_step()
            if st.erased_block is None:
                break

    # -- wear leveling -------------------------------------------------------------

    def wl_rebalance(self) -> Optional[int]:
        self._check_mounted()
        if self.managed_spread() > self.opts.wl_threshold:
            self._mutating()
        return self._wl_rebalance()

    def _wl_rebalance(self) -> Optional[int]:
        """Relocate coldest blocks until the spread is back within the threshold.

        Returns the last block moved, or None when nothing was needed.
        """
        last = None
        for _ in range(len(self.alloc_set) + len(self.layout.anchors) + 2):
            if self.managed_spread() <= self.opts.wl_threshold:
                break
            b = self._wl_move_one()
            if b is None:
                break
            last = b
        return last

    def managed_spread(self) -> int:
        """Erase-count spread over the blocks wear leveling can relocate."""
        ec = self.dev.erase_counts
        blocks = [b for b in self.alloc_set + self._wl_extra_candidates() if not self.dev.is_bad(b)]
        if not blocks:
            return 0
        counts = [ec[b] for b in blocks]
        return max(counts) - min(counts)

    def _wl_move_one(self) -> Optional[int]:
        ec = self.dev.erase_counts
        best = None
        for b in self.alloc_set:
            key = (ec[b], b)
            if best is None or key < best:
                best = key
        for b in self._wl_extra_candidates():
            key = (ec[b], b)
            if best is None or key < best:
                best = key
        if best is None:
            return None
        b = best[1]
        if b == self.head:
            return None
        if b in self.in_free:
            # already free: hand it out next instead of relocating anything
            if self.free[0] != b:
                self.free.remove(b)
                self.free.appendleft(b)
            return None
        if b in self.alloc_set:
            self._relocate(b)
        else:
            self._wl_refresh_reserved(b)
        self.wl_erases += 1
        return b

    def _wl_extra_candidates(self) -> list[int]:
        return list(self.layout.anchors)

    def _wl_refresh_reserved(self, b: int) -> None:
        if b in self.layout.anchors:
            self._rewrite_anchor(b)

    def _rewrite_anchor(self, b: int) -> None:
        body = pack_anchor(self.variant, self.generation, self.opts, self.layout)
        self.dev.erase_block(b)
        rec = R.record(Kind.ANCHOR, 0, 0, 0, body)
        data, oob = R.pack(rec)
        self.dev.program_page(b, 0, data, oob)

    # -- accounting ----------------------------------------------------------------

    def ram_units(self) -> int:
        raise NotImplementedError


def plan_layout(dev: FlashDevice, reserved_count: int, min_alloc: int) -> Layout:
    good = [b for b in range(dev.geometry.num_blocks) if not dev.is_bad(b)]
    if len(good) < 2 + reserved_count + min_alloc:
        raise DeviceTooSmall(f"{len(good)} good blocks")
    return Layout(good[:2], good[2:2 + reserved_count])


def format_device(dev: FlashDevice, variant: str, options: FsOptions, reserved_count: int) -> dict:
    """Erase all good blocks and write the anchor pair; returns the anchor body."""
    good = [b for b in range(dev.geometry.num_blocks) if not dev.is_bad(b)]
    if len(good) < 2:
        raise DeviceTooSmall(f"{len(good)} good blocks")
    layout = plan_layout(dev, reserved_count, options.gc_watermark + 2)
    gen = 0
    try:
        gen = read_anchor(dev, layout.anchors)["generation"]
    except (NotFormatted, CorruptAnchor):
        pass
    for b in good:
        dev.erase_block(b)
        if dev.is_bad(b):
            dev.mark_bad(b)
    # re-plan in case an erase wore a block out
    layout = plan_layout(dev, reserved_count, options.gc_watermark + 2)
    body = pack_anchor(variant, gen + 1, options, layout)
    for b in layout.anchors:
        data, oob = R.pack(R.record(Kind.ANCHOR, 0, 0, 0, body))
        dev.program_page(b, 0, data, oob)
    return json.loads(body)


def check_variant(anchor: dict, variant: str) -> None:
    if anchor["variant"] != variant:
        raise VariantMismatch(f"formatted as {anchor['variant']}, not {variant}")
