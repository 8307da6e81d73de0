"""Directory-tree generator driven by size/count distributions, plus helpers
to build, search and tear down generated trees on a mounted filesystem."""
from __future__ import annotations

import csv
import fnmatch
import io
import math
import random
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from .errors import TooLarge
from .fs.base import DIR, FILE

MAX_NODES = 10**6


@dataclass(frozen=True)
class Constant:
    k: int

    def mean(self) -> float:
        return float(self.k)


@dataclass(frozen=True)
class UniformInt:
    a: int
    b: int  # inclusive

    def mean(self) -> float:
        return (self.a + self.b) / 2


@dataclass(frozen=True)
class Geometric:
    """Truncated geometric on {0..cap} with P(k) proportional to (1-p)^k."""
    p: float
    cap: int = 1000

    def mean(self) -> float:
        q = 1.0 - self.p
        if q == 0.0:
            return 0.0
        w = [q**k for k in range(self.cap + 1)]
        return sum(k * x for k, x in enumerate(w)) / sum(w)


Distribution = Union[Constant, UniformInt, Geometric]


def check_distribution(dist: Distribution) -> None:
    if isinstance(dist, Constant):
        ok = dist.k >= 0
    elif isinstance(dist, UniformInt):
        ok = 0 <= dist.a <= dist.b
    elif isinstance(dist, Geometric):
        ok = 0.0 < dist.p <= 1.0 and dist.cap >= 0
    else:
        raise TypeError(f"not a distribution: {dist!r}")
    if not ok:
        raise ValueError(f"invalid distribution parameters: {dist!r}")


def sample(dist: Distribution, rng: random.Random) -> int:
    if isinstance(dist, Constant):
        return dist.k
    if isinstance(dist, UniformInt):
        return rng.randint(dist.a, dist.b)
    if isinstance(dist, Geometric):
        q = 1.0 - dist.p
        if q <= 0.0:
            return 0
        # inverse CDF of the truncated law
        mass = 1.0 - q ** (dist.cap + 1)
        u = rng.random() * mass
        k = int(math.floor(math.log1p(-u) / math.log(q)))
        return min(max(k, 0), dist.cap)
    raise TypeError(f"not a distribution: {dist!r}")


def dist_to_dict(dist: Distribution) -> dict:
    if isinstance(dist, Constant):
        return {"kind": "constant", "k": dist.k}
    if isinstance(dist, UniformInt):
        return {"kind": "uniform", "a": dist.a, "b": dist.b}
    return {"kind": "geometric", "p": dist.p, "cap": dist.cap}


def dist_from_dict(d: dict) -> Distribution:
    d = dict(d)
    kind = d.pop("kind", None)
    cls = {"constant": Constant, "uniform": UniformInt, "geometric": Geometric}.get(kind)
    if cls is None:
        raise ValueError(f"unknown distribution kind {kind!r}")
    dist = cls(**d)
    check_distribution(dist)
    return dist


# -- file contents ---------------------------------------------------------------

ZEROS = "zeros"
RANDOM = "random"
TEXTLIKE = "textlike"
PROFILES = (ZEROS, RANDOM, TEXTLIKE)

_TEXT_ALPHABET = np.frombuffer(b"etaoinshrdlucmfwypvbgkqjxz     ,.\n", dtype=np.uint8)


@dataclass(frozen=True)
class Content:
    profile: str = RANDOM
    period: int = 64  # repeat period of the text-like profile
    seed: int = 0

    def make(self, size: int, salt: str = "") -> bytes:
        if self.profile == ZEROS:
            return bytes(size)
        rng = np.random.default_rng([self.seed, _salt_int(salt)])
        if self.profile == RANDOM:
            return rng.integers(0, 256, size, dtype=np.uint8).tobytes()
        if self.profile == TEXTLIKE:
            if size == 0:
                return b""
            period = max(1, self.period)
            unit = _TEXT_ALPHABET[rng.integers(0, len(_TEXT_ALPHABET), period)]
            return np.resize(unit, size).tobytes()
        raise ValueError(f"unknown content profile {self.profile!r}")


def _salt_int(salt: str) -> int:
    h = 0
    for b in salt.encode():
        h = (h * 131 + b) % (1 << 61)
    return h


# -- specs and manifests --------------------------------------------------------------


@dataclass(frozen=True)
class TreeSpec:
    files_per_dir: Distribution
    dirs_per_dir: Distribution
    file_size: Distribution
    depth: int
    content: Content = field(default_factory=Content)
    seed: int = 0

    def validate(self) -> None:
        if self.depth < 0:
            raise ValueError("depth must be >= 0")
        for d in (self.files_per_dir, self.dirs_per_dir, self.file_size):
            check_distribution(d)

    def expected_nodes(self) -> float:
        md = self.dirs_per_dir.mean()
        dirs = sum(md**d for d in range(self.depth + 1))
        return dirs * (1.0 + self.files_per_dir.mean())

    def to_dict(self) -> dict:
        return {
            "files_per_dir": dist_to_dict(self.files_per_dir),
            "dirs_per_dir": dist_to_dict(self.dirs_per_dir),
            "file_size": dist_to_dict(self.file_size),
            "depth": self.depth,
            "content": {"profile": self.content.profile, "period": self.content.period,
                        "seed": self.content.seed},
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TreeSpec":
        allowed = {"files_per_dir", "dirs_per_dir", "file_size", "depth", "content", "seed"}
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown tree spec keys: {sorted(unknown)}")
        c = dict(d.get("content", {}))
        bad = set(c) - {"profile", "period", "seed"}
        if bad:
            raise ValueError(f"unknown content keys: {sorted(bad)}")
        content = Content(**c)
        if content.profile not in PROFILES:
            raise ValueError(f"unknown content profile {content.profile!r}")
        spec = cls(
            files_per_dir=dist_from_dict(d.get("files_per_dir", {"kind": "constant", "k": 0})),
            dirs_per_dir=dist_from_dict(d.get("dirs_per_dir", {"kind": "constant", "k": 0})),
            file_size=dist_from_dict(d.get("file_size", {"kind": "constant", "k": 0})),
            depth=int(d.get("depth", 0)),
            content=content,
            seed=int(d.get("seed", 0)),
        )
        spec.validate()
        return spec


@dataclass(frozen=True)
class Entry:
    path: str
    kind: str
    size: int


@dataclass
class TreeManifest:
    entries: list

    def __len__(self) -> int:
        return len(self.entries)

    def files(self) -> list:
        return [e for e in self.entries if e.kind == FILE]

    def dirs(self) -> list:
        return [e for e in self.entries if e.kind == DIR]

    def total_bytes(self) -> int:
        return sum(e.size for e in self.entries)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["path", "kind", "size"])
        for e in self.entries:
            w.writerow([e.path, e.kind, e.size])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TreeManifest":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0] != ["path", "kind", "size"]:
            raise ValueError("manifest header must be path,kind,size")
        return cls([Entry(p, k, int(s)) for p, k, s in rows[1:]])


def _join(parent: str, name: str) -> str:
    return ("" if parent == "/" else parent) + "/" + name


def generate(spec: TreeSpec) -> TreeManifest:
    """Expand ``spec`` depth-first; the root directory is the first entry."""
    spec.validate()
    if spec.expected_nodes() > MAX_NODES:
        raise TooLarge(f"expected {spec.expected_nodes():.0f} nodes exceeds {MAX_NODES}")
    rng = random.Random(spec.seed)
    entries = [Entry("/", DIR, 0)]
    counter = 0

    def expand(path: str, depth: int) -> None:
        nonlocal counter
        for _ in range(sample(spec.files_per_dir, rng)):
            size = sample(spec.file_size, rng)
            entries.append(Entry(_join(path, f"f{counter}"), FILE, size))
            counter += 1
            _guard()
        if depth >= spec.depth:
            return
        for _ in range(sample(spec.dirs_per_dir, rng)):
            sub = _join(path, f"d{counter}")
            counter += 1
            entries.append(Entry(sub, DIR, 0))
            _guard()
            expand(sub, depth + 1)

    def _guard():
        # draws can exceed the expectation; keep the hard limit too
        if len(entries) > MAX_NODES:
            raise TooLarge(f"more than {MAX_NODES} nodes generated")

    expand("/", 0)
    return TreeManifest(entries)


# -- driving a filesystem ----------------------------------------------------------------


@dataclass
class ApplyStats:
    ops: int
    pages_written: int
    pages_read: int
    block_erases: int
    simulated_time: int


def _delta(dev, before, ops) -> ApplyStats:
    d = dev.counters().minus(before)
    return ApplyStats(ops, d.page_writes, d.page_reads, d.block_erases, d.simulated_time)


def apply(fs, manifest: TreeManifest, content: Content = Content()) -> ApplyStats:
    """Create every manifest entry in order and write file contents."""
    before = fs.dev.counters()
    ops = 0
    for e in manifest.entries:
        if e.path == "/":
            continue
        if e.kind == DIR:
            fs.mkdir(e.path)
            ops += 1
        else:
            fs.create_file(e.path)
            ops += 1
            if e.size:
                fs.write_file(e.path, 0, content.make(e.size, e.path))
                ops += 1
    return _delta(fs.dev, before, ops)


def delete_tree(fs, manifest: TreeManifest) -> ApplyStats:
    """Delete every entry except the root, children before parents."""
    before = fs.dev.counters()
    ops = 0
    for e in reversed(manifest.entries):
        if e.path == "/":
            continue
        fs.delete(e.path)
        ops += 1
    return _delta(fs.dev, before, ops)


def find_walk(fs, manifest: TreeManifest | None = None,
              match: Union[str, Callable[[str], bool]] = "*") -> tuple[int, int, int]:
    """Walk the tree with readdir+stat and count names matching ``match``.

    Returns (hits, pages_read, simulated_time). File payloads are never read.
    """
    pred = match if callable(match) else (lambda name: fnmatch.fnmatchcase(name, match))
    root = manifest.entries[0].path if manifest and manifest.entries else "/"
    before = fs.dev.counters()
    hits = 0
    stack = [root]
    while stack:
        d = stack.pop()
        for name, kind, _ in fs.readdir(d):
            p = _join(d, name)
            fs.stat(p)
            if pred(name):
                hits += 1
            if kind == DIR:
                stack.append(p)
    delta = fs.dev.counters().minus(before)
    return hits, delta.page_reads, delta.simulated_time
