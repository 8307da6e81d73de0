import math
import random

from hypothesis import given, settings, strategies as st

from ffsim.bench import make_workload, run_crash_sweep
from ffsim.fs.btree import WanderingTree, decode_node, encode_node

from test_fs import fresh, remount


class Store:
    """In-memory page store standing in for flash."""

    def __init__(self, fanout=16):
        self.pages = {}
        self.reads = 0
        self.obsolete = []
        self.fanout = fanout

    def write(self, node):
        loc = (len(self.pages), 0)
        self.pages[loc] = (node.level, encode_node(node, self.fanout))
        return loc

    def load(self, loc):
        self.reads += 1
        level, payload = self.pages[loc]
        return decode_node(level, payload, loc)


def build(n, fanout=16, seed=0):
    s = Store(fanout)
    t = WanderingTree(fanout, s.load, s.obsolete.append)
    keys = list(range(n))
    random.Random(seed).shuffle(keys)
    for k in keys:
        t.put((k, 0), (k, 1))
    t.commit(s.write)
    return s, t


def test_one_leaf_update_rewrites_the_path_only():
    s, t = build(2000)
    written = len(s.pages)
    t.put((1000, 0), (9, 9))
    t.commit(s.write)
    assert len(s.pages) - written == t.height
    assert len(s.obsolete) >= t.height


def test_commit_with_nothing_dirty_writes_nothing():
    s, t = build(300)
    n = len(s.pages)
    t.commit(s.write)
    assert len(s.pages) == n


def test_cold_lookup_reads_at_most_height_nodes():
    s, t = build(5000)
    t.drop_all()
    s.reads = 0
    assert t.get((4321, 0)) == (4321, 1)
    assert s.reads <= t.height


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 400), st.booleans()), max_size=600), st.integers(2, 6))
def test_tree_matches_dict(ops, fanout_log):
    fanout = 2 ** fanout_log
    s = Store(fanout)
    t = WanderingTree(fanout, s.load, s.obsolete.append)
    ref = {}
    for i, (k, put) in enumerate(ops):
        if put:
            t.put((k, 0), (i, 0))
            ref[k] = (i, 0)
        else:
            assert t.delete((k, 0)) == ref.pop(k, None)
        if i % 50 == 49:
            t.commit(s.write)
            t.drop_all()
    t.commit(s.write)
    t.drop_all()
    assert {k[0]: v for k, v in t.items((0, 0), (10**6, 0))} == ref
    leaves = max(1, math.ceil(len(ref) / fanout))
    assert t.height - 1 <= math.ceil(math.log(leaves, 2)) + 1


def test_tree_mount_reads_stay_small_as_content_grows():
    costs = []
    for n in (10, 100, 1000):
        dev, fs = fresh("tree", blocks=256)
        for i in range(n):
            fs.create_file(f"/f{i}")
        fs, st = remount(dev, fs, "tree")
        assert not st.full_scan
        costs.append(st.pages_read)
    assert costs[-1] <= costs[0] + 4


def test_unclean_mount_replays_the_journal():
    dev, fs = fresh("tree")
    fs.create_file("/a")
    fs.commit()
    fs.write_file("/a", 0, b"journal only")
    fs, st = remount(dev, fs, "tree", clean=False)
    assert fs.read_file("/a", 0, 12) == b"journal only"


def test_tree_crash_sweep_small_workload():
    rep = run_crash_sweep("tree", make_workload(25, seed=8), setup_fill=0.6)
    assert rep.counters["failures"] == 0, rep.failures
    assert rep.counters["torn_ops"] == 0
