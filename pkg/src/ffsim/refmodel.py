"""Map-based reference filesystem and random operation sequences.

The reference mirrors the error precedence of the flash variants so that a
differential run can compare results op by op.
"""
from __future__ import annotations

import random
from dataclasses import dataclass

from .errors import (
    AlreadyExists, DirNotEmpty, FsError, InvalidPath, IsADirectory,
    NotADirectory, NotFound, RangeBeyondEof,
)
from .fs.base import DIR, FILE, Stat, split_path


class RefFS:
    def __init__(self):
        self.nodes: dict[tuple, object] = {(): None}  # None marks a directory
        self.ids: dict[tuple, int] = {(): 1}

    def _get(self, parts):
        parts = tuple(parts)
        for i in range(1, len(parts)):
            if self.nodes.get(parts[:i], 0) is not None:
                raise NotFound("/" + "/".join(parts))
        if parts not in self.nodes:
            raise NotFound("/" + "/".join(parts))
        return parts, self.nodes[parts]

    def _create(self, path, kind):
        parts = tuple(split_path(path))
        if not parts:
            raise AlreadyExists(path)
        _, parent = self._get(parts[:-1])
        if parent is not None:
            raise NotFound(path)
        if parts in self.nodes:
            raise AlreadyExists(path)
        self.nodes[parts] = None if kind == DIR else bytearray()

    def mkdir(self, path):
        self._create(path, DIR)

    def create_file(self, path):
        self._create(path, FILE)

    def write_file(self, path, offset, data):
        _, node = self._get(split_path(path))
        if node is None:
            raise IsADirectory(path)
        if offset < 0 or offset > len(node):
            raise RangeBeyondEof(path)
        node[offset:offset + len(data)] = data

    def read_file(self, path, offset, length):
        _, node = self._get(split_path(path))
        if node is None:
            raise IsADirectory(path)
        if offset < 0 or length < 0 or offset + length > len(node):
            raise RangeBeyondEof(path)
        return bytes(node[offset:offset + length])

    def delete(self, path):
        parts = split_path(path)
        if not parts:
            raise InvalidPath(path)
        key, node = self._get(parts)
        if node is None and any(len(k) == len(key) + 1 and k[:-1] == key for k in self.nodes):
            raise DirNotEmpty(path)
        del self.nodes[key]

    def readdir(self, path):
        key, node = self._get(split_path(path))
        if node is not None:
            raise NotADirectory(path)
        out = []
        for k, v in self.nodes.items():
            if len(k) == len(key) + 1 and k[:-1] == key:
                out.append((k[-1], DIR if v is None else FILE, 0 if v is None else len(v)))
        return sorted(out)

    def stat(self, path):
        _, node = self._get(split_path(path))
        return Stat(DIR if node is None else FILE, 0 if node is None else len(node), 0)


def snapshot(fs) -> dict:
    """Full observable state: path -> (kind, size, content) via readdir/stat/read."""
    out = {}
    stack = ["/"]
    while stack:
        d = stack.pop()
        for name, kind, size in fs.readdir(d):
            p = (d if d != "/" else "") + "/" + name
            if kind == DIR:
                out[p] = (DIR, 0, b"")
                stack.append(p)
            else:
                out[p] = (FILE, size, fs.read_file(p, 0, size))
    return out


@dataclass
class OpGen:
    """Random VFS operations over a small name space, depth-bounded."""
    max_depth: int = 4
    max_write: int = 2000
    names: tuple = ("a", "b", "c", "d")

    def _path(self, rng, depth):
        n = rng.randint(1, depth)
        return "/" + "/".join(rng.choice(self.names) for _ in range(n))

    def op(self, rng: random.Random, ref: RefFS | None = None):
        kind = rng.choices(
            ["mkdir", "create_file", "write_file", "read_file", "delete", "readdir", "stat"],
            weights=[10, 14, 40, 14, 8, 7, 7])[0]
        path, node = self._target(rng, kind, ref)
        if kind == "write_file":
            size = len(node) if isinstance(node, bytearray) else 0
            off = rng.randint(0, size) if rng.random() < 0.95 else size + rng.randint(1, 9)
            n = rng.randint(0, self.max_write)
            style = rng.random()
            if style < 0.3:
                data = bytes([rng.randrange(256)]) * n
            elif style < 0.6:
                data = rng.randbytes(n)
            else:
                data = bytes(rng.choices(b"ab\x00", k=n))
            return (kind, path, off, data)
        if kind == "read_file":
            size = len(node) if isinstance(node, bytearray) else 0
            off = rng.randint(0, size)
            ln = rng.randint(0, size - off) if rng.random() < 0.95 else size - off + 1
            return (kind, path, off, ln)
        return (kind, path)

    def _target(self, rng, kind, ref):
        # mostly aim at paths for which the op can succeed
        if ref is None or rng.random() < 0.15:
            return self._path(rng, self.max_depth), None
        keys = [k for k in ref.nodes if k]
        if kind in ("write_file", "read_file"):
            pool = [k for k in keys if ref.nodes[k] is not None]
        elif kind in ("mkdir", "create_file"):
            dirs = [k for k in ref.nodes if ref.nodes[k] is None and len(k) < self.max_depth]
            base = rng.choice(dirs)
            return "/" + "/".join(base + (rng.choice(self.names),)), None
        elif kind == "readdir":
            pool = [k for k in ref.nodes if ref.nodes[k] is None]
        else:
            pool = keys
        if not pool:
            return self._path(rng, self.max_depth), None
        k = rng.choice(pool)
        return "/" + "/".join(k), ref.nodes[k]


def run_op(target, op):
    """Apply ``op``; returns ('ok', value) or ('err', ExceptionName)."""
    name, *args = op
    try:
        val = getattr(target, name)(*args)
    except FsError as exc:
        return ("err", type(exc).__name__)
    if isinstance(val, Stat):
        val = (val.kind, val.size)
    return ("ok", val)
