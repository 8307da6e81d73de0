"""Table-indexed variants: the whole index lives in RAM.

LogTable rebuilds the index with a full media scan on every mount.
Checkpoint additionally serializes the index at clean unmount into a reserved
region and restores it from there when the checkpoint is still valid.
"""
from __future__ import annotations

import struct
import zlib
from bisect import bisect_right
from collections import defaultdict

from .. import records as R
from ..codecs import Codec, compress
from ..errors import (
    AlreadyExists, DirNotEmpty, InvalidPath, IsADirectory, NotADirectory,
    NotFound, RangeBeyondEof,
)
from ..nand import FlashDevice
from ..records import Kind
from .base import (
    DIR, FILE, MAX_FILE_SIZE, ROOT_ID, FileSystem, MountStats, Policy, Stat,
    split_path,
)


class Obj:
    __slots__ = ("id", "kind", "parent", "name", "meta_loc", "children", "starts", "frags")

    def __init__(self, oid, kind, parent, name, meta_loc):
        self.id = oid
        self.kind = kind
        self.parent = parent
        self.name = name
        self.meta_loc = meta_loc
        self.children = {} if kind == DIR else None
        # file data: fragments [start, end, loc, record_offset], sorted, contiguous
        self.starts = [] if kind == FILE else None
        self.frags = [] if kind == FILE else None

    @property
    def size(self) -> int:
        return self.frags[-1][1] if self.frags else 0


class TableFS(FileSystem):
    policy = Policy(compression=False, metadata_in_ram=True)

    def __init__(self, dev: FlashDevice, anchor: dict):
        super().__init__(dev, anchor)
        self.objs: dict[int, Obj] = {}
        self.refs: dict = {}
        self.nfrags = 0
        self.next_obj = ROOT_ID + 1
        # owner object of every programmed page, for deletion-record lifetime
        self.page_obj = [None] * self.g.num_blocks
        self.obj_npages: dict[int, int] = defaultdict(int)
        self.deleted: dict[int, tuple] = {}

    # -- bookkeeping hooks ----------------------------------------------------

    def write_record(self, rec):
        loc = super().write_record(rec)
        b, p = loc
        po = self.page_obj[b]
        if po is None:
            po = self.page_obj[b] = [0] * self.ppb
        po[p] = rec.object_id
        self.obj_npages[rec.object_id] += 1
        return loc

    def _forget_block(self, b):
        po = self.page_obj[b]
        if po is None:
            return
        self.page_obj[b] = None
        for oid in po:
            if not oid:
                continue
            n = self.obj_npages[oid] - 1
            if n <= 0:
                self.obj_npages.pop(oid, None)
            else:
                self.obj_npages[oid] = n
            if oid in self.deleted and n <= 1:
                self.kill(self.deleted.pop(oid))
                self.obj_npages.pop(oid, None)

    def _ref(self, loc, d):
        n = self.refs.get(loc, 0) + d
        if n <= 0:
            self.refs.pop(loc, None)
            self.kill(loc)
        else:
            self.refs[loc] = n

    # -- fragment map -------------------------------------------------------------

    def _insert_frag(self, obj: Obj, s: int, e: int, loc, base: int) -> None:
        frags, starts = obj.frags, obj.starts
        if not frags or s >= frags[-1][1]:
            frags.append([s, e, loc, base])
            starts.append(s)
            self.refs[loc] = self.refs.get(loc, 0) + 1
            self.nfrags += 1
            return
        i = bisect_right(starts, s) - 1
        if i < 0:
            i = 0
        if frags[i][1] <= s:
            i += 1
        j = i
        repl = []
        right = None
        delta = defaultdict(int)
        n = len(frags)
        while j < n and frags[j][0] < e:
            f = frags[j]
            delta[f[2]] -= 1
            if f[0] < s:
                repl.append([f[0], s, f[2], f[3]])
                delta[f[2]] += 1
            if f[1] > e:
                right = [e, f[1], f[2], f[3]]
                delta[f[2]] += 1
            j += 1
        repl.append([s, e, loc, base])
        delta[loc] += 1
        if right:
            repl.append(right)
        self.nfrags += len(repl) - (j - i)
        frags[i:j] = repl
        starts[i:j] = [f[0] for f in repl]
        for l, d in delta.items():
            if d:
                self._ref(l, d)

    def _drop_frags(self, obj: Obj) -> None:
        for f in obj.frags:
            self._ref(f[2], -1)
        self.nfrags -= len(obj.frags)
        obj.frags = []
        obj.starts = []

    # -- path resolution --------------------------------------------------------

    def _resolve(self, parts) -> Obj:
        o = self.objs[ROOT_ID]
        for name in parts:
            if o.kind != DIR:
                raise NotFound("/" + "/".join(parts))
            oid = o.children.get(name)
            if oid is None:
                raise NotFound("/" + "/".join(parts))
            o = self.objs[oid]
        return o

    def lookup(self, path: str) -> Obj:
        self._check_mounted()
        return self._resolve(split_path(path))

    # -- user operations ----------------------------------------------------------

    def create_file(self, path: str) -> None:
        self._create(path, FILE)

    def mkdir(self, path: str) -> None:
        self._create(path, DIR)

    def _create(self, path, kind):
        self._check_mounted()
        parts = split_path(path)
        if not parts:
            raise AlreadyExists("/")
        parent = self._resolve(parts[:-1])
        if parent.kind != DIR:
            raise NotFound(path)
        name = parts[-1]
        if name in parent.children:
            raise AlreadyExists(path)
        self.check_space(1)
        self._mutating()
        self.make_room()
        oid = self.next_obj
        self.next_obj += 1
        rk = Kind.DIR_META if kind == DIR else Kind.FILE_META
        loc = self.write_record(R.record(rk, oid, parent.id, self.next_seq(), name.encode()))
        self.objs[oid] = Obj(oid, kind, parent.id, name, loc)
        parent.children[name] = oid

    def write_file(self, path: str, offset: int, data: bytes) -> None:
        self._check_mounted()
        obj = self._resolve(split_path(path))
        if obj.kind != FILE:
            raise IsADirectory(path)
        if offset < 0 or offset > obj.size:
            raise RangeBeyondEof(f"offset {offset} beyond size {obj.size}")
        if offset + len(data) > MAX_FILE_SIZE:
            raise RangeBeyondEof("file too large")
        if not data:
            return
        chunks = self.chunk_data(offset, bytes(data))
        self.check_space(len(chunks))
        self._mutating()
        for off, raw_len, codec, stored in chunks:
            self.make_room()
            rec = R.record(Kind.FILE_DATA, obj.id, obj.parent, self.next_seq(), stored,
                           codec=codec, file_offset=off, length_raw=raw_len)
            loc = self.write_record(rec)
            self._insert_frag(obj, off, off + raw_len, loc, off)

    def read_file(self, path: str, offset: int, length: int) -> bytes:
        self._check_mounted()
        obj = self._resolve(split_path(path))
        if obj.kind != FILE:
            raise IsADirectory(path)
        if offset < 0 or length < 0 or offset + length > obj.size:
            raise RangeBeyondEof(f"[{offset}, +{length}) beyond size {obj.size}")
        if length == 0:
            return b""
        end = offset + length
        frags, starts = obj.frags, obj.starts
        i = max(bisect_right(starts, offset) - 1, 0)
        out = bytearray()
        cache = {}
        while i < len(frags) and frags[i][0] < end:
            s, e, loc, base = frags[i]
            raw = cache.get(loc)
            if raw is None:
                raw = cache[loc] = self.decode_payload(self.read_record(loc))
            lo, hi = max(s, offset), min(e, end)
            out += raw[lo - base:hi - base]
            i += 1
        return bytes(out)

    def delete(self, path: str) -> None:
        self._check_mounted()
        parts = split_path(path)
        if not parts:
            raise InvalidPath("cannot delete the root directory")
        obj = self._resolve(parts)
        if obj.kind == DIR and obj.children:
            raise DirNotEmpty(path)
        # no watermark check: a delete must stay possible on a full device
        self._mutating()
        self.make_room()
        loc = self.write_record(R.record(Kind.DELETION, obj.id, obj.parent, self.next_seq(),
                                         obj.name.encode()))
        self.kill(obj.meta_loc)
        if obj.kind == FILE:
            self._drop_frags(obj)
        del self.objs[obj.parent].children[obj.name]
        del self.objs[obj.id]
        if self.obj_npages.get(obj.id, 0) > 1:
            self.deleted[obj.id] = loc
        else:
            self.kill(loc)
            self.obj_npages.pop(obj.id, None)

    def readdir(self, path: str) -> list[tuple[str, str, int]]:
        self._check_mounted()
        obj = self._resolve(split_path(path))
        if obj.kind != DIR:
            raise NotADirectory(path)
        out = []
        for name in sorted(obj.children):
            c = self.objs[obj.children[name]]
            out.append((name, c.kind, c.size if c.kind == FILE else 0))
        return out

    def stat(self, path: str) -> Stat:
        self._check_mounted()
        obj = self._resolve(split_path(path))
        return Stat(obj.kind, obj.size if obj.kind == FILE else 0, obj.id)

    def ram_units(self) -> int:
        return len(self.objs) + self.nfrags

    # -- GC migration ---------------------------------------------------------------

    def _migrate(self, rec, loc):
        k = rec.kind
        oid = rec.object_id
        if k == Kind.FILE_DATA:
            obj = self.objs[oid]
            base = rec.file_offset
            raw = None
            frags = obj.frags
            i = max(bisect_right(obj.starts, base) - 1, 0)
            end = base + rec.length_raw
            while i < len(frags) and frags[i][0] < end:
                f = frags[i]
                if f[2] == loc:
                    if f[0] == base and f[1] == end:
                        # whole record still live: copy the stored payload as is
                        codec, stored, plen = rec.codec, rec.payload, rec.length_raw
                    else:
                        if raw is None:
                            raw = self.decode_payload(rec)
                        piece = raw[f[0] - base:f[1] - base]
                        codec, stored = compress(self.codec, piece)
                        plen = len(piece)
                    nrec = R.record(Kind.FILE_DATA, oid, rec.parent_id, self.next_seq(), stored,
                                    codec=codec, file_offset=f[0], length_raw=plen)
                    nloc = self.write_record(nrec)
                    f[2] = nloc
                    f[3] = f[0]
                    self.refs[nloc] = 1
                    self._ref(loc, -1)
                i += 1
            if self.live[loc[0]][loc[1]]:
                raise RuntimeError(f"data record at {loc} not referenced by its file")
        elif k in (Kind.FILE_META, Kind.DIR_META):
            nloc = self.write_record(R.record(k, oid, rec.parent_id, self.next_seq(), rec.payload))
            self.objs[oid].meta_loc = nloc
            self.kill(loc)
        elif k == Kind.DELETION:
            nloc = self.write_record(R.record(k, oid, rec.parent_id, self.next_seq(), rec.payload))
            self.deleted[oid] = nloc
            self.kill(loc)
        else:
            raise RuntimeError(f"unexpected record kind {k} in data area")

    # -- mount by full scan -----------------------------------------------------------

    def full_scan(self, cache: dict | None = None) -> None:
        """Rebuild the whole index from every page of every good block."""
        dev = self.dev
        ppb = self.ppb
        alloc = set(self.alloc_set)
        recs = []
        max_obj = ROOT_ID
        max_seq = 0
        cache = cache or {}
        touched_region = set()
        for b in range(self.g.num_blocks):
            if dev.is_bad(b):
                continue
            in_alloc = b in alloc
            po = None
            any_prog = False
            for p in range(ppb):
                hit = cache.get((b, p))
                data, oob = hit if hit is not None else dev.read_page(b, p)
                if oob[1] == 0xFF:
                    continue
                any_prog = True
                oid = int.from_bytes(oob[10:14], "little")
                if oid > max_obj and oob[1] in (Kind.FILE_DATA, Kind.FILE_META, Kind.DIR_META,
                                                Kind.DELETION):
                    max_obj = oid
                rec = R.unpack(data, oob)
                if rec is not None and rec.seq > max_seq:
                    max_seq = rec.seq
                if not in_alloc:
                    if rec is not None:
                        self._scan_reserved(b, p, rec)
                    continue
                if po is None:
                    po = self.page_obj[b] = [0] * ppb
                if oob[1] in (Kind.FILE_DATA, Kind.FILE_META, Kind.DIR_META, Kind.DELETION):
                    po[p] = oid
                    self.obj_npages[oid] += 1
                if rec is None:
                    continue
                if rec.kind in (Kind.FILE_META, Kind.DIR_META, Kind.DELETION):
                    recs.append((rec.seq, rec.kind, oid, rec.parent_id, 0, 0, (b, p),
                                 rec.payload))
                elif rec.kind == Kind.FILE_DATA:
                    recs.append((rec.seq, rec.kind, oid, rec.parent_id, rec.file_offset,
                                 rec.length_raw, (b, p), None))
            if not in_alloc:
                if any_prog:
                    touched_region.add(b)
                continue
            if any_prog:
                self.used[b] = ppb
            else:
                self.free.append(b)
                self.in_free.add(b)
        self._apply_scan(recs)
        self.seq = max_seq + 1
        self.next_obj = max(max_obj + 1, self.next_obj)
        self._scan_done(touched_region)
        # blocks with programmed pages but nothing live are recycled lazily
        for b in self.alloc_set:
            if self.used[b] and not self.valid[b]:
                self.needs_erase.add(b)
                self.free.append(b)
                self.in_free.add(b)

    def _scan_reserved(self, b, p, rec):
        pass

    def _scan_done(self, touched_region):
        pass

    def _apply_scan(self, recs) -> None:
        recs.sort()
        deleted = {r[2] for r in recs if r[1] == Kind.DELETION}
        metas = {}
        for r in recs:
            if r[1] in (Kind.FILE_META, Kind.DIR_META) and r[2] not in deleted:
                metas[r[2]] = r  # newest wins: recs are seq-sorted
        objs = self.objs
        for oid in sorted(metas):
            r = metas[oid]
            kind = DIR if r[1] == Kind.DIR_META else FILE
            if oid == ROOT_ID:
                objs[oid] = Obj(oid, DIR, 0, "", r[6])
                continue
            parent = objs.get(r[3])
            name = r[7].decode()
            if parent is None or parent.kind != DIR or name in parent.children:
                continue
            objs[oid] = Obj(oid, kind, r[3], name, r[6])
            parent.children[name] = oid
        for o in objs.values():
            self.mark_live(o.meta_loc)
        for r in recs:
            if r[1] == Kind.FILE_DATA:
                o = objs.get(r[2])
                if o is not None and o.kind == FILE:
                    # GC gives migrated pieces fresh seqs, so gaps may close later
                    s = r[4]
                    self.mark_live(r[6])
                    self._insert_frag(o, s, s + r[5], r[6], s)
            elif r[1] == Kind.DELETION:
                if self.obj_npages.get(r[2], 0) > 1:
                    prev = self.deleted.get(r[2])
                    if prev is not None:
                        self.kill(prev)
                    self.deleted[r[2]] = r[6]
                    self.mark_live(r[6])
        if ROOT_ID not in objs:
            raise RuntimeError("root directory record missing")
        for o in objs.values():
            if o.kind == FILE:
                self._truncate_at_hole(o)

    def _truncate_at_hole(self, obj: Obj) -> None:
        """Drop everything past the first gap (left behind by a torn write)."""
        end = 0
        for i, f in enumerate(obj.frags):
            if f[0] != end:
                for g in obj.frags[i:]:
                    self._ref(g[2], -1)
                self.nfrags -= len(obj.frags) - i
                del obj.frags[i:]
                del obj.starts[i:]
                return
            end = f[1]

    # -- format ------------------------------------------------------------------------

    @classmethod
    def initialize(cls, dev: FlashDevice, anchor: dict) -> None:
        cls(dev, anchor)._write_root()

    def _write_root(self):
        self.open_fresh()
        self.make_room()
        loc = self.write_record(R.record(Kind.DIR_META, ROOT_ID, 0, self.next_seq(), b""))
        self.objs[ROOT_ID] = Obj(ROOT_ID, DIR, 0, "", loc)

    def open_fresh(self):
        for b in self.alloc_set:
            self.free.append(b)
            self.in_free.add(b)


class LogTableFS(TableFS):
    variant = "logtable"
    default_codec = Codec.RLE
    policy = Policy(compression=True, metadata_in_ram=True)

    @classmethod
    def reserved_blocks(cls, num_blocks: int) -> int:
        return 0

    @classmethod
    def mount(cls, dev: FlashDevice, anchor: dict, cache: dict):
        fs = cls(dev, anchor)
        fs.full_scan(cache)
        return fs, True


# -- checkpoint serialization -------------------------------------------------------

CP_MAGIC = b"CKPT"
_CP_HEAD = struct.Struct("<4sIIIIQI")  # magic, blob len, blob crc, chunks, gen, seq, next_obj


class CheckpointFS(TableFS):
    variant = "checkpoint"
    default_codec = Codec.NONE
    policy = Policy(compression=False, metadata_in_ram=True)

    def __init__(self, dev, anchor):
        super().__init__(dev, anchor)
        self.region = list(self.layout.reserved)
        self.cp_valid = False
        self.cp_generation = 0
        self.region_dirty: set = set()

    @classmethod
    def reserved_blocks(cls, num_blocks: int) -> int:
        return max(2, num_blocks // 32)

    # invalidation -----------------------------------------------------------------

    def _mutating(self):
        if self.cp_valid:
            self.cp_valid = False
            good = [b for b in self.region if not self.dev.is_bad(b)]
            if good:
                self.dev.erase_block(good[0])
                self.region_dirty.discard(good[0])

    def _wl_extra_candidates(self):
        extra = list(self.layout.anchors)
        if not self.cp_valid:
            extra += [b for b in self.region if not self.dev.is_bad(b)]
        return extra

    def _wl_refresh_reserved(self, b):
        if b in self.region:
            self.dev.erase_block(b)
            self.region_dirty.discard(b)
        else:
            super()._wl_refresh_reserved(b)

    def _scan_reserved(self, b, p, rec):
        if rec.kind == Kind.CHECKPOINT:
            self.cp_generation = max(self.cp_generation, rec.object_id)

    def _scan_done(self, touched_region):
        self.region_dirty |= touched_region & set(self.region)

    # checkpoint write -----------------------------------------------------------------

    def _clean_unmount(self):
        self.checkpoint_write()

    def checkpoint_write(self) -> bool:
        """Serialize the index into the reserved region; False if it does not fit."""
        blob = self._serialize()
        P = self.P
        head_room = P - _CP_HEAD.size
        n_chunks = 1 + max(0, -(-(len(blob) - head_room) // P))
        good = [b for b in self.region if not self.dev.is_bad(b)]
        if n_chunks > len(good) * self.ppb:
            return False
        for b in good:
            if b in self.region_dirty:
                self.dev.erase_block(b)
                self.region_dirty.discard(b)
        gen = self.cp_generation + 1
        head = _CP_HEAD.pack(CP_MAGIC, len(blob), zlib.crc32(blob), n_chunks, gen,
                             self.seq, self.next_obj)
        pieces = [head + blob[:head_room]]
        pos = head_room
        while pos < len(blob):
            pieces.append(blob[pos:pos + P])
            pos += P
        for i, piece in enumerate(pieces):
            b = good[i // self.ppb]
            p = i % self.ppb
            rec = R.record(Kind.CHECKPOINT, gen, len(pieces), self.next_seq(), piece,
                           file_offset=i)
            data, oob = R.pack(rec)
            self.region_dirty.add(b)
            self.dev.program_page(b, p, data, oob)
        self.cp_generation = gen
        self.cp_valid = True
        return True

    def _serialize(self) -> bytes:
        out = bytearray()
        alloc = self.alloc_set
        out += struct.pack("<I", len(alloc))
        # block table: index, used pages, flags (1 free, 2 needs erase, 4 head)
        for b in alloc:
            flags = (1 if b in self.in_free else 0) | (2 if b in self.needs_erase else 0)
            out += struct.pack("<IHB", b, self.used[b], flags)
        out += struct.pack("<I", len(self.free))
        out += struct.pack(f"<{len(self.free)}I", *self.free)
        # page owners for blocks holding programmed pages
        owned = [b for b in alloc if self.page_obj[b] is not None]
        out += struct.pack("<I", len(owned))
        for b in owned:
            out += struct.pack("<I", b)
            out += struct.pack(f"<{self.ppb}I", *self.page_obj[b])
        # objects in id order so parents precede children
        out += struct.pack("<I", len(self.objs))
        for oid in sorted(self.objs):
            o = self.objs[oid]
            name = o.name.encode()
            out += struct.pack("<IIBIIH", oid, o.parent, 1 if o.kind == DIR else 0,
                               o.meta_loc[0], o.meta_loc[1], len(name))
            out += name
            if o.kind == FILE:
                out += struct.pack("<I", len(o.frags))
                for s, e, loc, base in o.frags:
                    out += struct.pack("<IIIHI", s, e - s, loc[0], loc[1], base)
        out += struct.pack("<I", len(self.deleted))
        for oid in sorted(self.deleted):
            b, p = self.deleted[oid]
            out += struct.pack("<III", oid, b, p)
        return bytes(out)

    def _restore(self, blob: bytes) -> None:
        pos = 0

        def take(fmt):
            nonlocal pos
            st = struct.Struct(fmt)
            v = st.unpack_from(blob, pos)
            pos += st.size
            return v

        (n,) = take("<I")
        for _ in range(n):
            b, used, flags = take("<IHB")
            self.used[b] = used
            if flags & 2:
                self.needs_erase.add(b)
        (nf,) = take("<I")
        self.free.extend(take(f"<{nf}I"))
        self.in_free = set(self.free)
        (no,) = take("<I")
        for _ in range(no):
            (b,) = take("<I")
            po = list(take(f"<{self.ppb}I"))
            self.page_obj[b] = po
            for oid in po:
                if oid:
                    self.obj_npages[oid] += 1
        (nobj,) = take("<I")
        for _ in range(nobj):
            oid, parent, is_dir, mb, mp, nlen = take("<IIBIIH")
            name = blob[pos:pos + nlen].decode()
            pos += nlen
            o = Obj(oid, DIR if is_dir else FILE, parent, name, (mb, mp))
            self.objs[oid] = o
            self.mark_live(o.meta_loc)
            if oid != ROOT_ID:
                self.objs[parent].children[name] = oid
            if not is_dir:
                (nfr,) = take("<I")
                for _ in range(nfr):
                    s, ln, b, p, base = take("<IIIHI")
                    loc = (b, p)
                    o.frags.append([s, s + ln, loc, base])
                    o.starts.append(s)
                    self.refs[loc] = self.refs.get(loc, 0) + 1
                    self.mark_live(loc)
                self.nfrags += nfr
        (nd,) = take("<I")
        for _ in range(nd):
            oid, b, p = take("<III")
            self.deleted[oid] = (b, p)
            self.mark_live((b, p))

    @classmethod
    def mount(cls, dev: FlashDevice, anchor: dict, cache: dict):
        fs = cls(dev, anchor)
        if fs._try_checkpoint(cache):
            return fs, False
        fs.full_scan(cache)
        return fs, True

    def _try_checkpoint(self, cache: dict) -> bool:
        good = [b for b in self.region if not self.dev.is_bad(b)]
        if not good:
            return False

        def page(i):
            b, p = good[i // self.ppb], i % self.ppb
            hit = cache.get((b, p))
            if hit is None:
                hit = cache[(b, p)] = self.dev.read_page(b, p)
            return R.unpack(*hit)

        first = page(0)
        if first is None or first.kind != Kind.CHECKPOINT or first.file_offset != 0:
            return False
        if len(first.payload) < _CP_HEAD.size:
            return False
        magic, blen, bcrc, n_chunks, gen, seq, next_obj = _CP_HEAD.unpack_from(first.payload)
        if magic != CP_MAGIC or n_chunks > len(good) * self.ppb or first.parent_id != n_chunks:
            return False
        parts = [first.payload[_CP_HEAD.size:]]
        for i in range(1, n_chunks):
            rec = page(i)
            if (rec is None or rec.kind != Kind.CHECKPOINT or rec.object_id != gen
                    or rec.file_offset != i):
                return False
            parts.append(rec.payload)
        blob = b"".join(parts)
        if len(blob) != blen or zlib.crc32(blob) != bcrc:
            return False
        self._restore(blob)
        self.seq = max(seq, first.seq + n_chunks)
        self.next_obj = next_obj
        self.cp_generation = gen
        self.cp_valid = True
        self.region_dirty = set(good[:(n_chunks + self.ppb - 1) // self.ppb])
        return True
