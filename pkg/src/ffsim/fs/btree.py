"""Out-of-place B+ tree whose nodes live in flash pages.

Nodes are loaded on demand into a bounded cache. A modified node is marked
dirty together with all of its ancestors; dirty nodes stay pinned in memory
until ``commit`` writes them bottom-up to fresh locations. The flash location
a dirty node used to occupy is handed to ``on_obsolete`` so the owner can
release it once the new tree is durable.

Keys are (object_id, offset) pairs. Leaf values and internal child pointers
are (block, page) locations.
"""
from __future__ import annotations

import struct
from bisect import bisect_left, bisect_right
from collections import OrderedDict
from typing import Callable, Iterator, Optional

_KEY = struct.Struct("<II")


class ZNode:
    __slots__ = ("level", "keys", "locs", "kids", "parent", "loc", "dirty")

    def __init__(self, level: int, keys=None, locs=None, loc=None):
        self.level = level
        self.keys = keys if keys is not None else []
        self.locs = locs if locs is not None else []
        self.kids = [None] * len(self.keys) if level > 0 else None
        self.parent: Optional[ZNode] = None
        self.loc = loc
        self.dirty = False

    def has_loaded_kids(self) -> bool:
        return self.kids is not None and any(k is not None for k in self.kids)


def encode_node(node: ZNode, fanout: int) -> bytes:
    n = len(node.keys)
    out = bytearray((fanout, n))
    for k in node.keys:
        out += _KEY.pack(*k)
    for loc in node.locs:
        out += _KEY.pack(*loc)
    return bytes(out)


def decode_node(level: int, payload: bytes, loc) -> ZNode:
    n = payload[1]
    keys = [_KEY.unpack_from(payload, 2 + 8 * i) for i in range(n)]
    base = 2 + 8 * n
    locs = [_KEY.unpack_from(payload, base + 8 * i) for i in range(n)]
    return ZNode(level, keys, locs, loc)


class WanderingTree:
    def __init__(self, fanout: int, load: Callable, on_obsolete: Callable):
        self.fanout = fanout
        self._load = load  # loc -> ZNode (reads flash)
        self._obsolete = on_obsolete
        self.root: Optional[ZNode] = None
        self.root_loc = None
        self.root_level = 0
        self.cache: OrderedDict = OrderedDict()

    # -- loading ------------------------------------------------------------------

    def _attach(self, node: ZNode) -> ZNode:
        self.cache[node] = None
        return node

    def get_root(self) -> ZNode:
        if self.root is None:
            if self.root_loc is None:
                self.root = self._attach(ZNode(0))
                self.root.dirty = True
            else:
                self.root = self._attach(self._load(self.root_loc))
        else:
            self.cache.move_to_end(self.root)
        return self.root

    def _child(self, node: ZNode, i: int) -> ZNode:
        kid = node.kids[i]
        if kid is None:
            kid = self._load(node.locs[i])
            kid.parent = node
            node.kids[i] = kid
            self._attach(kid)
        else:
            self.cache.move_to_end(kid)
        return kid

    @property
    def loaded(self) -> int:
        return len(self.cache)

    @property
    def height(self) -> int:
        if self.root is not None:
            return self.root.level + 1
        return self.root_level + 1

    # -- dirtiness -------------------------------------------------------------------

    def _dirty(self, node: ZNode) -> None:
        while node is not None and not node.dirty:
            node.dirty = True
            if node.loc is not None:
                self._obsolete(node.loc)
                node.loc = None
            node = node.parent

    def dirty_count(self) -> int:
        return sum(1 for n in self.cache if n.dirty)

    # -- lookups ----------------------------------------------------------------------

    def _descend(self, key) -> ZNode:
        node = self.get_root()
        while node.level > 0:
            i = bisect_right(node.keys, key) - 1
            node = self._child(node, max(i, 0))
        return node

    def get(self, key):
        leaf = self._descend(key)
        i = bisect_left(leaf.keys, key)
        if i < len(leaf.keys) and leaf.keys[i] == key:
            return leaf.locs[i]
        return None

    def floor(self, key):
        """Greatest (key, value) with key <= ``key``, or None."""
        return self._floor(self.get_root(), key)

    def _floor(self, node, key):
        i = bisect_right(node.keys, key) - 1
        if node.level == 0:
            return (node.keys[i], node.locs[i]) if i >= 0 else None
        for j in range(i, -1, -1):
            r = self._floor(self._child(node, j), key)
            if r is not None:
                return r
        return None

    def items(self, lo, hi) -> list:
        """All (key, value) with lo <= key < hi, in key order."""
        out = []
        self._items(self.get_root(), lo, hi, out)
        return out

    def _items(self, node, lo, hi, out):
        keys = node.keys
        if node.level == 0:
            i = bisect_left(keys, lo)
            while i < len(keys) and keys[i] < hi:
                out.append((keys[i], node.locs[i]))
                i += 1
            return
        j = max(bisect_right(keys, lo) - 1, 0)
        while j < len(keys) and keys[j] < hi:
            self._items(self._child(node, j), lo, hi, out)
            j += 1

    # -- updates -------------------------------------------------------------------------

    def put(self, key, value):
        """Insert or replace; returns the previous value or None."""
        leaf = self._descend(key)
        keys = leaf.keys
        i = bisect_left(keys, key)
        if i < len(keys) and keys[i] == key:
            old = leaf.locs[i]
            if old == value:
                return old
            self._dirty(leaf)
            leaf.locs[i] = value
            return old
        self._dirty(leaf)
        keys.insert(i, key)
        leaf.locs.insert(i, value)
        if i == 0:
            self._fix_min(leaf)
        if len(keys) > self.fanout:
            self._split(leaf, i)
        return None

    def _fix_min(self, node: ZNode) -> None:
        # keep separators <= the smallest key below them
        while node.parent is not None and node.keys:
            p = node.parent
            idx = p.kids.index(node)
            if p.keys[idx] <= node.keys[0]:
                return
            p.keys[idx] = node.keys[0]
            node = p

    def _split(self, node: ZNode, at: int) -> None:
        n = len(node.keys)
        # appends land last or just before a file's trailing metadata key;
        # then cutting off only the last key keeps the left node full
        cut = n - 1 if at >= n - 2 else n // 2
        right = ZNode(node.level, node.keys[cut:], node.locs[cut:])
        del node.keys[cut:]
        del node.locs[cut:]
        if node.level > 0:
            right.kids = node.kids[cut:]
            del node.kids[cut:]
            for k in right.kids:
                if k is not None:
                    k.parent = right
        right.dirty = True
        self._attach(right)
        parent = node.parent
        if parent is None:
            root = ZNode(node.level + 1, [node.keys[0], right.keys[0]], [None, None])
            root.kids = [node, right]
            root.dirty = True
            node.parent = right.parent = root
            self.root = self._attach(root)
            return
        idx = parent.kids.index(node)
        parent.keys.insert(idx + 1, right.keys[0])
        parent.locs.insert(idx + 1, None)
        parent.kids.insert(idx + 1, right)
        right.parent = parent
        if len(parent.keys) > self.fanout:
            self._split(parent, idx + 1)

    def delete(self, key):
        """Remove ``key``; returns its value or None when absent."""
        leaf = self._descend(key)
        i = bisect_left(leaf.keys, key)
        if i >= len(leaf.keys) or leaf.keys[i] != key:
            return None
        old = leaf.locs[i]
        self._dirty(leaf)
        del leaf.keys[i]
        del leaf.locs[i]
        self._prune(leaf)
        return old

    def _prune(self, node: ZNode) -> None:
        while not node.keys and node.parent is not None:
            p = node.parent
            idx = p.kids.index(node)
            del p.keys[idx]
            del p.locs[idx]
            del p.kids[idx]
            self.cache.pop(node, None)
            node = p
        # collapse a root with a single child
        root = self.root
        while root is not None and root.level > 0 and len(root.keys) == 1:
            kid = self._child(root, 0)
            self.cache.pop(root, None)
            if root.loc is not None:
                self._obsolete(root.loc)
            kid.parent = None
            self._dirty(kid)
            self.root = root = kid

    # -- commit --------------------------------------------------------------------------

    def commit(self, write: Callable) -> None:
        """Write every dirty node, children first; ``write(node) -> loc``."""
        root = self.get_root()
        if root.dirty:
            self._write(root, write)
        self.root_loc = root.loc
        self.root_level = root.level

    def _write(self, node: ZNode, write):
        if node.level > 0:
            for i, kid in enumerate(node.kids):
                if kid is not None and kid.dirty:
                    self._write(kid, write)
                    node.locs[i] = kid.loc
        node.loc = write(node)
        node.dirty = False

    # -- cache control ----------------------------------------------------------------------

    def evict(self, capacity: int) -> None:
        if len(self.cache) <= capacity:
            return
        for node in list(self.cache):
            if len(self.cache) <= capacity:
                break
            if node.dirty or node is self.root or node.has_loaded_kids():
                continue
            self._unload(node)
        # interior nodes freed up by the first pass
        while len(self.cache) > capacity:
            progressed = False
            for node in list(self.cache):
                if len(self.cache) <= capacity:
                    break
                if node.dirty or node is self.root or node.has_loaded_kids():
                    continue
                self._unload(node)
                progressed = True
            if not progressed:
                break

    def _unload(self, node: ZNode) -> None:
        p = node.parent
        if p is not None:
            idx = p.kids.index(node)
            p.kids[idx] = None
        self.cache.pop(node, None)

    def drop_all(self) -> None:
        """Forget every clean node (the tree must be fully committed)."""
        if any(n.dirty for n in self.cache):
            raise RuntimeError("cannot drop dirty nodes")
        self.cache.clear()
        self.root = None

    # -- whole-tree walk (no caching) -----------------------------------------------------------

    def walk(self, visit_node: Callable, visit_value: Callable) -> None:
        """Visit every node location and leaf value of the current tree."""
        self._walk(self.root, self.root_loc, visit_node, visit_value)

    def _walk(self, node, loc, visit_node, visit_value):
        if node is None:
            node = self._load(loc)
        if node.loc is not None:
            visit_node(node.loc)
        if node.level == 0:
            for v in node.locs:
                visit_value(v)
            return
        for i in range(len(node.keys)):
            kid = node.kids[i]
            self._walk(kid, node.locs[i] if kid is None else None, visit_node, visit_value)

    def find_node(self, level: int, key, loc) -> Optional[ZNode]:
        """Return the live node stored at ``loc`` or None if it is obsolete."""
        node = self.get_root()
        if node.level == level:
            return node if node.loc == loc else None
        if node.level < level:
            return None
        while node.level > level + 1:
            node = self._child(node, max(bisect_right(node.keys, key) - 1, 0))
        i = max(bisect_right(node.keys, key) - 1, 0)
        kid = node.kids[i]
        if kid is not None:
            return kid if kid.loc == loc else None
        if node.locs[i] != loc:
            return None
        return self._child(node, i)
