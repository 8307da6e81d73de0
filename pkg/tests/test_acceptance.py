"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line verdict that is printed in the terminal summary.
Runtime limits are wall-clock on the machine running the suite.
"""
import random
import time

import pytest

from ffsim import bench as B
from ffsim import fs as F
from ffsim.cli import main
from ffsim.errors import RewriteWithoutErase
from ffsim.nand import FlashGeometry, create_device
from ffsim.refmodel import OpGen, RefFS, run_op, snapshot
from ffsim.treegen import RANDOM, ZEROS, Constant, TreeSpec, UniformInt

VARIANTS = ["logtable", "checkpoint", "tree"]
SIZES = [256, 512, 1024, 2048, 4096]


def test_criterion_1_erase_before_write(criterion):
    t0 = time.perf_counter()
    g = FlashGeometry(num_blocks=4, pages_per_block=4, page_size=512, oob_size=16)
    raised = silent = 0
    for seed in range(10_000):
        rng = random.Random(seed)
        dev = create_device(g, seed)
        content = {}
        for _ in range(rng.randint(1, 30)):
            b, p = rng.randrange(4), rng.randrange(4)
            r = rng.random()
            if r < 0.6:
                data = rng.randbytes(rng.randint(1, 16))
                if (b, p) in content:
                    try:
                        dev.program_page(b, p, data)
                        silent += 1
                    except RewriteWithoutErase:
                        raised += 1
                else:
                    dev.program_page(b, p, data)
                    content[(b, p)] = data
            elif r < 0.75:
                dev.erase_block(b)
                content = {k: v for k, v in content.items() if k[0] != b}
            else:
                got = dev.read_page(b, p)[0]
                want = content.get((b, p), b"")
                if got[:len(want)] != want:
                    silent += 1
    dt = time.perf_counter() - t0
    ok = silent == 0 and raised > 0 and dt < 10
    criterion(1, ok, f"{raised} rewrites rejected, {silent} silent overwrites, {dt:.1f}s (< 10s)")
    assert silent == 0 and raised > 0
    assert dt < 10


def _equivalence(variant, seed):
    rng = random.Random(seed)
    dev = create_device(FlashGeometry(num_blocks=64, pages_per_block=16, page_size=512), seed)
    F.format(dev, variant)
    fs, _ = F.mount(dev, variant)
    ref = RefFS()
    gen = OpGen(max_depth=4, max_write=rng.choice([300, 2000]))
    for i in range(rng.randint(1, 500)):
        op = gen.op(rng, ref)
        want, got = run_op(ref, op), run_op(fs, op)
        if want != got:
            return f"{variant} seed {seed} op {i} {op[:2]}: {got} != {want}"
    state = snapshot(ref)
    if snapshot(fs) != state:
        return f"{variant} seed {seed}: state differs before remount"
    fs.unmount(clean=True)
    fs, _ = F.mount(dev, variant)
    if snapshot(fs) != state:
        return f"{variant} seed {seed}: state differs after remount"
    return None


def test_criterion_2_reference_equivalence(criterion):
    t0 = time.perf_counter()
    problems = []
    for variant in VARIANTS:
        for seed in range(1000):
            msg = _equivalence(variant, seed)
            if msg:
                problems.append(msg)
    dt = time.perf_counter() - t0
    ok = not problems and dt < 120
    criterion(2, ok, f"3000 sequences, {len(problems)} divergent, {dt:.1f}s (< 120s)"
              + (f"; first: {problems[0]}" if problems else ""))
    assert not problems, problems[:5]
    assert dt < 120


def test_criterion_3_mount_scaling(criterion):
    t0 = time.perf_counter()
    lt = B.run_mount_scaling("logtable", SIZES, 0.5, seed=1)
    tr = B.run_mount_scaling("tree", SIZES, 0.5, seed=1)
    cp = B.run_mount_scaling("checkpoint", SIZES, 0.5, seed=1, unclean=True)
    dt = time.perf_counter() - t0
    lc, tc = lt.classification, tr.classification
    lt_reads = [r["pages_read"] for r in lt.series]
    cp_ratio = max(r["pages_read"] / lr for r, lr in zip(cp.series, lt_reads))
    unclean_full = all(r["unclean_pages_read"] == lr and r["unclean_full_scan"]
                       for r, lr in zip(cp.series, lt_reads))
    checks = [
        lc["label"] == B.LINEAR and lc["r2_linear"] >= 0.99,
        tc["label"] == B.LOGARITHMIC and tc["r2_log"] >= 0.95 and tc["r2_log"] > tc["r2_linear"],
        cp_ratio <= 0.05 and not any(r["full_scan"] for r in cp.series),
        unclean_full,
        dt < 60,
    ]
    criterion(3, all(checks),
              f"LogTable {lc['label']} r2_lin={lc['r2_linear']:.4f}; "
              f"Tree {tc['label']} r2_log={tc['r2_log']:.4f} r2_lin={tc['r2_linear']:.4f} "
              f"reads={[r['pages_read'] for r in tr.series]}; "
              f"Checkpoint clean/full max {cp_ratio:.2%}, unclean=full scan {unclean_full}; "
              f"{dt:.1f}s (< 60s)")
    assert all(checks), checks


def test_criterion_4_wear_leveling(criterion):
    t0 = time.perf_counter()
    g = FlashGeometry(num_blocks=512, pages_per_block=64, page_size=2048)
    kw = dict(n_ops=100_000, working_set_files=10, seed=1, static_fill=0.96)
    on = B.run_wear("logtable", g, wl_enabled=True, **kw)
    off = B.run_wear("logtable", g, wl_enabled=False, **kw)
    dt = time.perf_counter() - t0
    s_on = on.counters["final_wear_spread"]
    s_off = off.counters["final_wear_spread"]
    ok = s_on <= 17 and s_off >= 4 * s_on and dt < 60
    criterion(4, ok, f"spread with WL {s_on} (<= 17), without WL {s_off} (>= {4 * s_on}), "
                     f"{dt:.1f}s (< 60s)")
    assert s_on <= 17
    assert s_off >= 4 * s_on
    assert dt < 60


def test_criterion_5_compression(criterion):
    t0 = time.perf_counter()
    rep = B.run_compression(VARIANTS, 8 << 20, [ZEROS, RANDOM], seed=1)
    dt = time.perf_counter() - t0
    pw = {(r["variant"], r["profile"]): r["pages_written"] for r in rep.series}
    base_z, base_r = pw["checkpoint", ZEROS], pw["checkpoint", RANDOM]
    checks = []
    parts = []
    for v in ("logtable", "tree"):
        z = pw[v, ZEROS] / base_z
        r = pw[v, RANDOM] / base_r - 1
        checks += [z <= 0.25, abs(r) <= 0.10]
        parts.append(f"{v} zeros {z:.1%} random {r:+.1%}")
    checks.append(dt < 30)
    criterion(5, all(checks), f"vs checkpoint ({base_z} pages): " + "; ".join(parts)
              + f"; {dt:.1f}s (< 30s)")
    assert all(checks), pw


def test_criterion_6_metadata_search(criterion):
    spec = TreeSpec(Constant(10), Constant(10), UniformInt(0, 3000), depth=2, seed=3)
    reads = {}
    hits = {}
    for v in ("checkpoint", "tree"):
        rep = B.run_file_tree(v, spec)
        find = next(r for r in rep.series if r["phase"] == "find")
        reads[v] = find["pages_read"]
        hits[v] = rep.counters["hits"]
    ok = reads["checkpoint"] == 0 and reads["tree"] >= 1 and hits["checkpoint"] >= 1000
    criterion(6, ok, f"find over {hits['checkpoint']} files: checkpoint {reads['checkpoint']} "
                     f"page reads, tree {reads['tree']} page reads after cache flush")
    assert hits["checkpoint"] == hits["tree"] >= 1000
    assert reads["checkpoint"] == 0
    assert reads["tree"] >= 1


def test_criterion_7_ram_scaling(criterion):
    counts = [100, 200, 400, 800, 1600]
    lt = B.run_ram_scaling("logtable", counts, seed=1)
    tr = B.run_ram_scaling("tree", counts, seed=1)
    c = lt.classification
    tree_max = max(r["ram_units"] for r in tr.series)
    ok = c["label"] == B.LINEAR and c["r2_linear"] >= 0.99 and tree_max <= 64
    criterion(7, ok, f"LogTable {c['label']} r2={c['r2_linear']:.5f}; "
                     f"Tree max ram_units {tree_max} (<= 64)")
    assert c["label"] == B.LINEAR and c["r2_linear"] >= 0.99
    assert tree_max <= 64


def test_criterion_8_crash_sweep(criterion):
    t0 = time.perf_counter()
    workload = B.make_workload(100, seed=1)
    assert workload[0][0] in ("mkdir", "create_file", "write_file")
    tr = B.run_crash_sweep("tree", workload, seed=1, setup_fill=0.7)
    cp = B.run_crash_sweep("checkpoint", workload, seed=1, setup_fill=0.7)
    dt = time.perf_counter() - t0
    tc, cc = tr.counters, cp.counters
    ok = (tc["failures"] == 0 and tc["torn_ops"] == 0 and tc["crash_points"] > 0
          and cc["full_scan_mounts"] == cc["crash_points"] > 0 and dt < 120)
    criterion(8, ok, f"tree: {tc['crash_points']} crash points, {tc['failures']} failures, "
                     f"{tc['workload_gc_erases']} GC erases in workload; checkpoint: "
                     f"{cc['full_scan_mounts']}/{cc['crash_points']} remounts full scan; "
                     f"{dt:.1f}s (< 120s)")
    assert tc["failures"] == 0, tr.failures[:5]
    assert tc["torn_ops"] == 0
    assert cc["full_scan_mounts"] == cc["crash_points"] > 0
    assert dt < 120


def _experiments():
    small = FlashGeometry(num_blocks=32, pages_per_block=16, page_size=512)
    spec = TreeSpec(UniformInt(0, 4), Constant(2), UniformInt(0, 2000), depth=2, seed=2)
    return {
        "mount": lambda: B.run_mount_scaling("tree", [64, 128, 256, 512], 0.3, seed=2,
                                             page_size=512),
        "wear": lambda: B.run_wear("logtable", small, 2000, 3, seed=2, static_fill=0.5),
        "compression": lambda: B.run_compression(VARIANTS, 200_000, seed=2),
        "tree": lambda: B.run_file_tree("tree", spec),
        "ram": lambda: B.run_ram_scaling("checkpoint", [10, 20, 40, 80], seed=2),
        "crash": lambda: B.run_crash_sweep("tree", B.make_workload(15, seed=2), seed=2),
    }


def test_criterion_9_determinism(tmp_path, capsys, criterion):
    differing = []
    for name, run in _experiments().items():
        for fmt in ("json", "csv"):
            paths = [tmp_path / f"{name}-{i}.{fmt}" for i in range(2)]
            for p in paths:
                B.write_report(run(), p, fmt)
            if paths[0].read_bytes() != paths[1].read_bytes():
                differing.append(f"{name}.{fmt}")
    argv = ["bench", "compression", "--variant", "logtable,tree", "--size", "100000",
            "--seed", "5"]
    outs = []
    for i in range(2):
        assert main(argv + ["--out", str(tmp_path / f"cli-{i}.json")]) == 0
        outs.append((tmp_path / f"cli-{i}.json").read_bytes())
    capsys.readouterr()
    if outs[0] != outs[1]:
        differing.append("cli")
    criterion(9, not differing, f"{len(_experiments()) * 2 + 1} report pairs compared, "
                                f"{len(differing)} differ {differing}")
    assert not differing
