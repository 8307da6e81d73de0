"""Tree-indexed variant: a wandering B+ tree plus a journal.

Every user operation is written as a journal transaction whose last record
carries the END flag in its OOB area. The in-memory tree is updated at once;
dirty nodes are written bottom-up by ``commit``, which then appends a commit
record to a small ring of reserved blocks. Mount locates the newest commit
with a binary search over the ring, reads the root and replays complete
transactions written after that commit. Incomplete transactions are dropped,
so a remount always sees a prefix of the operations.

Locations made obsolete by an update stay reserved until the next commit,
because the last durable tree may still point at them.
"""
from __future__ import annotations

import struct
import zlib

from .. import records as R
from ..codecs import Codec
from ..errors import (
    AlreadyExists, CorruptAnchor, DirNotEmpty, InvalidPath, IsADirectory,
    NoSpace, NotADirectory, NotFound, RangeBeyondEof,
)
from ..nand import FlashDevice
from ..records import FLAG_TXN_END, Kind
from .base import DIR, FILE, MAX_FILE_SIZE, ROOT_ID, FileSystem, GcStats, Policy, Stat, split_path
from .btree import WanderingTree, decode_node, encode_node

META_OFF = 0x7FFFFFFF
DENT_BASE = 0x80000000
KEY_END = 1 << 32
NO_BLOCK = 0xFFFFFFFF
_META = struct.Struct("<II")  # directory-entry key, file size; name follows
_COMMIT = struct.Struct("<QIIBQIII")
_LOGREF = struct.Struct("<QI")
# records per journal transaction when a large write is split up
SUB_TXN_RECORDS = 16


def dent_base(name: str) -> int:
    return DENT_BASE | ((zlib.crc32(name.encode()) & 0x7FFFFF) << 8)


class Meta:
    __slots__ = ("kind", "obj", "parent", "dkey", "size", "name", "loc")

    def __init__(self, rec, loc):
        self.kind = DIR if rec.kind == Kind.DIR_META else FILE
        self.obj = rec.object_id
        self.parent = rec.parent_id
        self.dkey, self.size = _META.unpack_from(rec.payload)
        self.name = rec.payload[_META.size:].decode()
        self.loc = loc


class TreeFS(FileSystem):
    variant = "tree"
    default_codec = Codec.RLE
    policy = Policy(compression=True, metadata_in_ram=False, atomic_ops=True)

    def __init__(self, dev: FlashDevice, anchor: dict):
        super().__init__(dev, anchor)
        self.ring = list(self.layout.reserved)
        self.tree = WanderingTree(self.opts.fanout, self._load_node, self._pend_node)
        self.pending: set = set()
        self.pending_nodes: set = set()  # the subset that are index nodes
        self.replayed = None  # journal locations applied so far, during replay only
        self.commit_no = -1
        self.ring_idx = len(self.ring) - 1
        self.ring_page = self.ppb
        self.journal_txns = 0
        self.lpt_loaded = False
        self.in_commit = False
        self.next_obj = ROOT_ID + 1
        self.commits = 0
        # blocks holding journal records newer than the last commit
        self.since_commit: set = set()

    @classmethod
    def reserved_blocks(cls, num_blocks: int) -> int:
        return max(2, num_blocks // 64)

    # -- node IO -----------------------------------------------------------------------

    def _load_node(self, loc):
        rec = self.read_record(loc)
        if rec.kind != Kind.INDEX_NODE:
            raise CorruptAnchor(f"expected index node at {loc}")
        return decode_node(rec.parent_id, rec.payload, loc)

    def _write_node(self, node):
        rec = R.record(Kind.INDEX_NODE, 0, node.level, self.next_seq(),
                       encode_node(node, self.opts.fanout))
        return self.write_record(rec)

    def _pend(self, loc) -> None:
        if self.replayed is not None and loc not in self.replayed:
            # superseding a durable-tree value whose block may since have been
            # erased and reused; replay supersedes it again after any crash
            return
        self.pending.add(loc)

    def _pend_node(self, loc) -> None:
        self.pending.add(loc)
        self.pending_nodes.add(loc)

    # -- allocation hooks -----------------------------------------------------------------

    def _open_block(self) -> int:
        b = super()._open_block()
        self.since_commit.add(b)
        if not self.in_commit:
            # tell mount where the journal continues
            if self.ring_page >= self.ppb:
                raise NoSpace("commit ring block full")
            rb = self.ring[self.ring_idx]
            rec = R.record(Kind.LOGREF, 0, 0, self.next_seq(), _LOGREF.pack(self.commit_no, b))
            data, oob = R.pack(rec)
            self.ring_page += 1
            self.dev.program_page(rb, self.ring_page - 1, data, oob)
        return b

    def _ensure_lpt(self) -> None:
        """Rebuild per-block liveness by walking the tree (first mutation after mount)."""
        if self.lpt_loaded:
            return
        for b in self.alloc_set:
            self._clear_valid(b)
            self.used[b] = 0
        mark = self.mark_live
        self.tree.walk(mark, mark)
        for loc in self.pending:
            mark(loc)
        for b in self.alloc_set:
            if b == self.head:
                self.used[b] = self.head_page
            elif self.valid[b] or b in self.since_commit:
                self.used[b] = self.ppb
            else:
                self.free.append(b)
                self.in_free.add(b)
                self.needs_erase.add(b)
        self.lpt_loaded = True

    # -- commit ---------------------------------------------------------------------------

    def _needs_commit(self) -> bool:
        root = self.tree.root
        return bool(self.pending or self.journal_txns or (root is not None and root.dirty)
                    or (root is None and self.tree.root_loc is None))

    def commit(self) -> None:
        self._check_mounted()
        self._commit()

    def _commit(self, force: bool = False) -> None:
        if not force and not self._needs_commit():
            return
        self._ensure_lpt()
        self.in_commit = True
        try:
            self.tree.commit(self._write_node)
            if self.head is not None and self.head_page < self.ppb:
                bud = (self.head, self.head_page)
            else:
                bud = (NO_BLOCK, 0)
            idx = (self.ring_idx + 1) % len(self.ring)
            rb = self.ring[idx]
            self.dev.erase_block(rb)
            no = self.commit_no + 1
            root_b, root_p = self.tree.root_loc
            payload = _COMMIT.pack(no, root_b, root_p, self.tree.root_level, self.seq,
                                   self.next_obj, bud[0], bud[1])
            rec = R.record(Kind.COMMIT, 0, 0, self.next_seq(), payload)
            data, oob = R.pack(rec)
            self.ring_idx = idx
            self.ring_page = 1
            self.dev.program_page(rb, 0, data, oob)
            self.commit_no = no
        finally:
            self.in_commit = False
        for loc in self.pending:
            self.kill(loc)
        self.pending = set()
        self.pending_nodes = set()
        self.journal_txns = 0
        self.commits += 1
        self.since_commit = {self.head} if self.head is not None else set()
        held, self.gc_hold = self.gc_hold, set()
        for b in sorted(held):
            if self.valid[b] != 0:
                raise RuntimeError(f"block {b} still holds live pages after commit")
            self._erase(b)

    def drop_cache(self) -> None:
        """Commit and forget every cached node."""
        self._check_mounted()
        self._commit()
        self.tree.drop_all()

    def _clean_unmount(self):
        self._commit()

    # -- journal transactions ------------------------------------------------------------------

    def _begin(self, n_records: int, shrinking: bool = False) -> None:
        self._ensure_lpt()
        ppb = self.ppb
        margin = 2 * (self.tree.height + 2)
        if not shrinking:
            try:
                self.check_space(n_records + margin)
            except NoSpace:
                # obsolete pages are only released by a commit
                self._commit()
                self.check_space(n_records + margin)
        if self.ring_page + (n_records // ppb + 2) > ppb:
            self._commit(force=True)
        target = self.opts.gc_watermark + -(-(n_records + margin) // ppb)
        if len(self.free) < target and self.tree.dirty_count():
            # flush dirty nodes while there is room, so that a commit forced by
            # GC later only has to rewrite what the victims held
            self._commit()
        while len(self.free) < target:
            before = self.free_pages()
            if self._gc_step().erased_block is None or self.free_pages() <= before:
                break
        if self.free_pages() < n_records + margin:
            raise NoSpace(f"need {n_records} pages")

    def _jwrite(self, rec, end: bool):
        rec.flags = FLAG_TXN_END if end else 0
        loc = self.write_record(rec)
        self._apply(rec, loc)
        return loc

    def _end(self) -> None:
        self.journal_txns += 1
        cap = self.opts.cache_capacity
        if self.journal_txns >= self.opts.journal_cap or self.tree.dirty_count() > cap // 2:
            self._commit()
        self.tree.evict(cap)

    def _apply(self, rec, loc) -> None:
        """Index effect of one journal record; shared by live updates and replay."""
        t = self.tree
        k = rec.kind
        oid = rec.object_id
        if oid >= self.next_obj:
            self.next_obj = oid + 1
        if k == Kind.FILE_DATA:
            off = rec.file_offset
            for key, v in t.items((oid, off), (oid, off + rec.length_raw)):
                if key[1] != off:
                    t.delete(key)
                    self._pend(v)
            old = t.put((oid, off), loc)
            if old is not None and old != loc:
                self._pend(old)
        elif k in (Kind.FILE_META, Kind.DIR_META):
            dkey, _ = _META.unpack_from(rec.payload)
            old = t.put((oid, META_OFF), loc)
            if old is not None and old != loc:
                self._pend(old)
            if oid != ROOT_ID:
                old = t.put((rec.parent_id, dkey), loc)
                if old is not None and old != loc:
                    self._pend(old)
        elif k == Kind.DELETION:
            (dkey,) = struct.unpack_from("<I", rec.payload)
            for key, v in t.items((oid, 0), (oid, KEY_END)):
                t.delete(key)
                self._pend(v)
            old = t.delete((rec.parent_id, dkey))
            if old is not None:
                self._pend(old)
            self._pend(loc)
        else:
            raise CorruptAnchor(f"unexpected journal record kind {k}")

    # -- metadata lookups --------------------------------------------------------------------

    def _meta(self, loc) -> Meta:
        return Meta(self.read_record(loc), loc)

    def _child(self, dir_id: int, name: str):
        base = dent_base(name)
        used = []
        for key, v in self.tree.items((dir_id, base), (dir_id, base + 256)):
            m = self._meta(v)
            if m.name == name:
                return m, used
            used.append(key[1])
        return None, used

    def _resolve(self, parts) -> Meta | None:
        """Meta of the object at ``parts``; None stands for the root directory."""
        cur = None
        cur_id = ROOT_ID
        path = "/" + "/".join(parts)
        for name in parts:
            if cur is not None and cur.kind != DIR:
                raise NotFound(path)
            m, _ = self._child(cur_id, name)
            if m is None:
                raise NotFound(path)
            cur, cur_id = m, m.obj
        return cur

    def _resolve_path(self, path):
        self._check_mounted()
        return self._resolve(split_path(path))

    # -- user operations -------------------------------------------------------------------------

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
        if parent is not None and parent.kind != DIR:
            raise NotFound(path)
        pid = ROOT_ID if parent is None else parent.obj
        name = parts[-1]
        m, used = self._child(pid, name)
        if m is not None:
            raise AlreadyExists(path)
        base = dent_base(name)
        free_idx = next((i for i in range(256) if base + i not in set(used)), None)
        if free_idx is None:
            raise NoSpace("directory hash bucket full")
        self._begin(1)
        oid = self.next_obj
        rk = Kind.DIR_META if kind == DIR else Kind.FILE_META
        payload = _META.pack(base + free_idx, 0) + name.encode()
        self._jwrite(R.record(rk, oid, pid, self.next_seq(), payload), end=True)
        self._end()

    def _extents_from(self, oid: int, offset: int, end: int) -> list:
        """(key, loc) of extents overlapping [offset, end), in order."""
        out = []
        fl = self.tree.floor((oid, offset))
        lo = offset
        if fl is not None and fl[0][0] == oid and fl[0][1] < offset:
            out.append(fl)
            lo = fl[0][1] + 1
        out += self.tree.items((oid, lo), (oid, end))
        return out

    def write_file(self, path: str, offset: int, data: bytes) -> None:
        m = self._resolve_path(path)
        if m is None or m.kind != FILE:
            raise IsADirectory(path)
        if offset < 0 or offset > m.size:
            raise RangeBeyondEof(f"offset {offset} beyond size {m.size}")
        if offset + len(data) > MAX_FILE_SIZE:
            raise RangeBeyondEof("file too large")
        if not data:
            return
        oid = m.obj
        end = offset + len(data)
        lo = offset
        prefix = suffix = b""
        ext = self._extents_from(oid, offset, end)
        if ext:
            (k0, l0) = ext[0]
            if k0[1] < offset:
                rec = self.read_record(l0)
                if k0[1] + rec.length_raw > offset:
                    raw = self.decode_payload(rec)
                    prefix = raw[:offset - k0[1]]
                    lo = k0[1]
                    if k0[1] + rec.length_raw > end:
                        suffix = raw[end - k0[1]:]
            (kl, ll) = ext[-1]
            if not suffix and kl[1] >= offset:
                rec = self.read_record(ll)
                if kl[1] + rec.length_raw > end:
                    suffix = self.decode_payload(rec)[end - kl[1]:]
        chunks = self.chunk_data(lo, prefix + bytes(data) + suffix)
        new_size = max(m.size, end)
        groups = [chunks[i:i + SUB_TXN_RECORDS] for i in range(0, len(chunks), SUB_TXN_RECORDS)]
        for gi, group in enumerate(groups):
            last = gi == len(groups) - 1
            self._begin(len(group) + (1 if last else 0))
            for ci, (off, raw_len, codec, stored) in enumerate(group):
                rec = R.record(Kind.FILE_DATA, oid, m.parent, self.next_seq(), stored,
                               codec=codec, file_offset=off, length_raw=raw_len)
                self._jwrite(rec, end=(not last and ci == len(group) - 1))
            if last:
                payload = _META.pack(m.dkey, new_size) + m.name.encode()
                self._jwrite(R.record(Kind.FILE_META, oid, m.parent, self.next_seq(), payload),
                             end=True)
            self._end()

    def read_file(self, path: str, offset: int, length: int) -> bytes:
        m = self._resolve_path(path)
        if m is None or m.kind != FILE:
            raise IsADirectory(path)
        if offset < 0 or length < 0 or offset + length > m.size:
            raise RangeBeyondEof(f"[{offset}, +{length}) beyond size {m.size}")
        if length == 0:
            return b""
        end = offset + length
        out = bytearray()
        for (_, s), loc in self._extents_from(m.obj, offset, end):
            raw = self.decode_payload(self.read_record(loc))
            lo, hi = max(s, offset), min(s + len(raw), end)
            if hi > lo:
                out += raw[lo - s:hi - s]
        self.tree.evict(self.opts.cache_capacity)
        if len(out) != length:
            raise RangeBeyondEof("file data shorter than its recorded size")
        return bytes(out)

    def delete(self, path: str) -> None:
        self._check_mounted()
        parts = split_path(path)
        if not parts:
            raise InvalidPath("cannot delete the root directory")
        m = self._resolve(parts)
        if m.kind == DIR and self.tree.items((m.obj, DENT_BASE), (m.obj, KEY_END)):
            raise DirNotEmpty(path)
        self._begin(1, shrinking=True)
        rec = R.record(Kind.DELETION, m.obj, m.parent, self.next_seq(), struct.pack("<I", m.dkey))
        self._jwrite(rec, end=True)
        self._end()

    def readdir(self, path: str) -> list[tuple[str, str, int]]:
        m = self._resolve_path(path)
        if m is not None and m.kind != DIR:
            raise NotADirectory(path)
        oid = ROOT_ID if m is None else m.obj
        out = []
        for _, loc in self.tree.items((oid, DENT_BASE), (oid, KEY_END)):
            c = self._meta(loc)
            out.append((c.name, c.kind, c.size if c.kind == FILE else 0))
        self.tree.evict(self.opts.cache_capacity)
        return sorted(out)

    def stat(self, path: str) -> Stat:
        m = self._resolve_path(path)
        self.tree.evict(self.opts.cache_capacity)
        if m is None:
            return Stat(DIR, 0, ROOT_ID)
        return Stat(m.kind, m.size if m.kind == FILE else 0, m.obj)

    def ram_units(self) -> int:
        return self.tree.loaded

    # -- GC / WL ------------------------------------------------------------------------------------

    def _before_gc(self) -> None:
        self._ensure_lpt()

    def _gc_step(self) -> GcStats:
        # Victims holding durable index nodes may only be erased after the next
        # commit. Evacuating several of them per commit shares the rewrite of
        # their common ancestors, which keeps GC productive on a full device.
        self._before_gc()
        moved = 0
        last = None
        while True:
            victim = self._gc_candidates()
            if victim is None:
                break
            # each migrated page may dirty one node; the commit rewrites them
            need = 2 * (self.valid[victim] + self.tree.dirty_count() + self.tree.height + 2)
            if self.free_pages() < need:
                if self.gc_hold or not self.tree.dirty_count():
                    break
                self._commit(force=True)
                if self.free_pages() < need - 2 * self.tree.dirty_count():
                    break
                continue
            moved += self._evacuate(victim)
            last = victim
            self.gc_erases += 1
            if victim not in self.gc_hold:
                self._erase(victim)
                break
            if len(self.free) + len(self.gc_hold) >= self.opts.gc_watermark + 2:
                break
        if self.gc_hold:
            self._commit(force=True)
        if last is not None and self.opts.wl_enabled:
            self._wl_rebalance()
        return GcStats(moved, last)

    def _wl_move_one(self):
        if self.free_pages() < 2 * (self.ppb + self.tree.dirty_count() + self.tree.height + 2):
            return None  # no room to move a full block; retried after the next GC
        return super()._wl_move_one()

    def _relocate(self, b: int) -> None:
        self._evacuate(b)
        if b in self.gc_hold:
            self._commit(force=True)
        else:
            self._erase(b)

    def _evacuate(self, b: int) -> int:
        # Erasing b before a commit is safe when replay can rebuild everything b
        # held: no uncommitted journal records and no node of the durable tree.
        self._ensure_lpt()
        if b in self.since_commit:
            self._commit()
        moved = 0
        need_commit = False
        live = self.live[b]
        for p in range(self.ppb):
            if live[p]:
                rec = self.read_record((b, p))
                if rec.kind == Kind.INDEX_NODE:
                    need_commit = True
                self._migrate(rec, (b, p))
                moved += 1
        if need_commit:
            self.gc_hold.add(b)
            return moved
        else:
            for p in range(self.ppb):
                if (b, p) in self.pending:
                    self.pending.discard((b, p))
                    self.kill((b, p))
        if self.valid[b] != 0:
            raise RuntimeError(f"block {b} still holds live pages after evacuation")
        return moved

    def _migrate(self, rec, loc) -> None:
        if loc in self.pending:
            return  # obsoleted earlier in this evacuation; dies at the next commit
        k = rec.kind
        if k == Kind.INDEX_NODE:
            node = decode_node(rec.parent_id, rec.payload, loc)
            found = self.tree.find_node(node.level, node.keys[0] if node.keys else (0, 0), loc)
            if found is None:
                raise RuntimeError(f"live index node at {loc} not found in tree")
            self.tree._dirty(found)
            return
        if k not in (Kind.FILE_DATA, Kind.FILE_META, Kind.DIR_META):
            raise RuntimeError(f"unexpected live record kind {k} at {loc}")
        copy = R.record(k, rec.object_id, rec.parent_id, self.next_seq(), rec.payload,
                        codec=rec.codec, file_offset=rec.file_offset, length_raw=rec.length_raw)
        self._jwrite(copy, end=True)
        self.journal_txns += 1

    # -- format / mount ---------------------------------------------------------------------------------

    @classmethod
    def initialize(cls, dev: FlashDevice, anchor: dict) -> None:
        fs = cls(dev, anchor)
        fs.lpt_loaded = True
        for b in fs.alloc_set:
            fs.free.append(b)
            fs.in_free.add(b)
        payload = _META.pack(0, 0)
        fs.in_commit = True  # no commit exists yet, so no log references either
        fs._jwrite(R.record(Kind.DIR_META, ROOT_ID, 0, fs.next_seq(), payload), end=True)
        fs.in_commit = False
        fs._commit(force=True)

    def _ring_commit(self, i: int):
        rb = self.ring[i]
        data, oob = self.dev.read_page(rb, 0)
        rec = R.unpack(data, oob)
        if rec is None or rec.kind != Kind.COMMIT:
            return None
        return _COMMIT.unpack(rec.payload)

    @classmethod
    def mount(cls, dev: FlashDevice, anchor: dict, cache: dict):
        fs = cls(dev, anchor)
        fs._mount()
        return fs, False

    def _mount(self) -> None:
        nring = len(self.ring)
        c0 = self._ring_commit(0)
        if c0 is not None:
            lo, hi = 0, nring
            head = c0
            while hi - lo > 1:
                mid = (lo + hi) // 2
                c = self._ring_commit(mid)
                if c is not None and c[0] == c0[0] + mid:
                    lo, head = mid, c
                else:
                    hi = mid
            idx = lo
        else:
            idx = nring - 1
            head = self._ring_commit(idx)
            if head is None:
                raise CorruptAnchor("no commit record found")
        no, root_b, root_p, root_level, seq, next_obj, bud_b, bud_p = head
        self.commit_no = no
        self.ring_idx = idx
        self.seq = seq
        self.next_obj = next_obj
        self.tree.root_loc = (root_b, root_p)
        self.tree.root_level = root_level
        # log references written after the commit
        rb = self.ring[idx]
        buds = []
        page = 1
        while page < self.ppb:
            data, oob = self.dev.read_page(rb, page)
            if oob[1] == 0xFF:
                break
            rec = R.unpack(data, oob)
            if rec is not None and rec.kind == Kind.LOGREF:
                cno, blk = _LOGREF.unpack(rec.payload)
                if cno == no:
                    buds.append(blk)
                if rec.seq >= self.seq:
                    self.seq = rec.seq + 1
            page += 1
        self.ring_page = page
        self.since_commit = set(buds)
        if bud_b != NO_BLOCK:
            self.since_commit.add(bud_b)
        if self.tree.get((ROOT_ID, META_OFF)) is None:
            raise CorruptAnchor("root directory missing from index")
        self._replay([(bud_b, bud_p)] if bud_b != NO_BLOCK else [], buds)

    def _replay(self, start, buds) -> None:
        segments = list(start) + [(b, 0) for b in buds]
        txn = []
        applied = self.replayed = set()
        clean_tail = True
        self.head = None
        self.head_page = 0
        for b, p0 in segments:
            p = p0
            while p < self.ppb:
                data, oob = self.dev.read_page(b, p)
                if oob[1] == 0xFF:
                    break
                rec = R.unpack(data, oob)
                p += 1
                if rec is None:
                    clean_tail = False
                    break
                if rec.seq >= self.seq:
                    self.seq = rec.seq + 1
                txn.append(((b, p - 1), rec))
                if rec.flags & FLAG_TXN_END:
                    for loc, r in txn:
                        applied.add(loc)
                        self._apply(r, loc)
                    txn = []
            self.head = b
            self.head_page = p
            if not clean_tail:
                break
        if txn:
            clean_tail = False
        self.replayed = None
        self.journal_txns = 1 if self.tree.root is not None and self.tree.root.dirty else 0
        if self.head is not None and self.head_page >= self.ppb:
            self.head = None
        if not clean_tail:
            # abandon the torn tail so later transactions are never chained to it
            self._commit(force=True)
        self.tree.evict(self.opts.cache_capacity)
