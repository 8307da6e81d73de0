"""Experiment runners, scaling classification and report writing.

Every cost is a device-counter delta (page reads, page writes, erases or
simulated time); nothing here looks at a wall clock.
"""
from __future__ import annotations

import bisect
import copy
import csv
import io
import json
import math
import random
from dataclasses import dataclass, field
from typing import Optional, Sequence

from . import __version__
from . import fs as F
from .errors import FlashError, FsError, NeedFourPoints, NoSpace, PowerLoss
from .fs.base import FsOptions
from .nand import CrashPlan, FlashDevice, FlashGeometry, create_device
from .records import HEADER_SIZE
from .refmodel import OpGen, RefFS, run_op, snapshot
from .treegen import (
    Constant, Content, RANDOM, TEXTLIKE, ZEROS, TreeSpec, apply, delete_tree, find_walk,
    generate,
)

LINEAR = "LINEAR"
LOGARITHMIC = "LOGARITHMIC"
CONSTANT = "CONSTANT"
AMBIGUOUS = "AMBIGUOUS"


# -- scaling fits ---------------------------------------------------------------------


@dataclass
class Classification:
    label: str
    r2_linear: float
    r2_log: float

    def as_dict(self) -> dict:
        return {"label": self.label, "r2_linear": self.r2_linear, "r2_log": self.r2_log}


def r_squared(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Coefficient of determination of the least-squares line through (xs, ys)."""
    n = len(xs)
    mx = sum(xs) / n
    my = sum(ys) / n
    sxx = sum((x - mx) ** 2 for x in xs)
    syy = sum((y - my) ** 2 for y in ys)
    sxy = sum((x - mx) * (y - my) for x, y in zip(xs, ys))
    if syy == 0:
        return 1.0
    if sxx == 0:
        return 0.0
    return (sxy * sxy) / (sxx * syy)


def classify_scaling(series: Sequence[tuple]) -> Classification:
    """Label a (size, cost) series as CONSTANT, LINEAR, LOGARITHMIC or AMBIGUOUS."""
    if len(series) < 4:
        raise NeedFourPoints(f"need at least 4 points, got {len(series)}")
    sizes = [float(s) for s, _ in series]
    costs = [float(c) for _, c in series]
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError("sizes must be strictly increasing")
    if sizes[0] <= 0:
        raise ValueError("sizes must be positive")
    r2_lin = r_squared(sizes, costs)
    r2_log = r_squared([math.log(s) for s in sizes], costs)
    lo, hi = min(costs), max(costs)
    if (lo > 0 and hi / lo < 1.1) or hi == lo:
        return Classification(CONSTANT, r2_lin, r2_log)
    if abs(r2_lin - r2_log) < 0.01:
        return Classification(AMBIGUOUS, r2_lin, r2_log)
    return Classification(LINEAR if r2_lin > r2_log else LOGARITHMIC, r2_lin, r2_log)


# -- reports ------------------------------------------------------------------------------


@dataclass
class BenchReport:
    experiment: dict
    variant: str
    seed: int
    counters: dict = field(default_factory=dict)
    series: list = field(default_factory=list)  # list of flat sample dicts
    classification: Optional[dict] = None

    def as_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "variant": self.variant,
            "seed": self.seed,
            "counters": self.counters,
            "series": self.series,
            "classification": self.classification,
            "version": __version__,
        }


def render_report(report: BenchReport, fmt: str) -> str:
    if fmt == "json":
        return json.dumps(report.as_dict(), indent=2) + "\n"
    if fmt == "csv":
        lead = ["experiment", "variant", "seed"]
        cols: list = []
        for row in report.series:
            for k in row:
                if k not in cols and k not in lead:
                    cols.append(k)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(lead + cols)
        kind = report.experiment.get("kind", "")
        for row in report.series:
            # a per-row variant (compression tables) wins over the report's
            w.writerow([kind, row.get("variant", report.variant), report.seed]
                       + [_cell(row.get(c, "")) for c in cols])
        return buf.getvalue()
    raise ValueError(f"unknown report format {fmt!r}")


def _cell(v):
    if isinstance(v, float) and v.is_integer():
        return int(v)
    return v


def write_report(report: BenchReport, path, fmt: str = "json") -> None:
    text = render_report(report, fmt)
    with open(path, "w", newline="") as f:
        f.write(text)


# -- helpers ---------------------------------------------------------------------------------


def _fresh(variant: str, geometry: FlashGeometry, seed: int, options: Optional[FsOptions] = None):
    dev = create_device(geometry, seed)
    F.format(dev, variant, options)
    fs, _ = F.mount(dev, variant)
    return dev, fs


def _write_big(fs, path: str, data: bytes, step: int = 1 << 20) -> None:
    for off in range(0, len(data), step):
        fs.write_file(path, off, data[off:off + step])


def _fill_spec(target_bytes: int, file_size: int, seed: int) -> TreeSpec:
    """A two-level tree of equal files holding roughly ``target_bytes``."""
    nfiles = max(1, target_bytes // file_size)
    ndirs = max(1, math.isqrt(nfiles))
    per_dir = -(-nfiles // ndirs)
    return TreeSpec(files_per_dir=Constant(per_dir), dirs_per_dir=Constant(ndirs),
                    file_size=Constant(file_size), depth=1,
                    content=Content(RANDOM, seed=seed), seed=seed)


def _fill(fs, target_bytes: int, seed: int, file_size: int = 1 << 18) -> int:
    """Create directories and files until ``target_bytes`` of payload exist."""
    spec = _fill_spec(target_bytes, file_size, seed)
    manifest = generate(spec)
    written = 0
    for e in manifest.entries:
        if e.path == "/":
            continue
        if e.kind == "dir":
            fs.mkdir(e.path)
            continue
        if written >= target_bytes:
            continue
        size = min(e.size, target_bytes - written)
        fs.create_file(e.path)
        _write_big(fs, e.path, spec.content.make(size, e.path))
        written += size
    return written


# -- mount scaling -------------------------------------------------------------------------------


def run_mount_scaling(variant: str, sizes: Sequence[int], fill_fraction: float = 0.5,
                      seed: int = 0, pages_per_block: int = 64, page_size: int = 2048,
                      unclean: bool = False) -> BenchReport:
    """Mount cost versus device size.

    Each size gets a fresh device filled to ``fill_fraction`` of its raw
    capacity. The clean mount follows a clean unmount; with ``unclean`` a
    second mount follows a small write and an unclean unmount.
    """
    if len(sizes) < 4:
        raise NeedFourPoints(f"need at least 4 sizes, got {len(sizes)}")
    if not 0.0 <= fill_fraction < 1.0:
        raise ValueError("fill_fraction must be in [0, 1)")
    rows = []
    for n in sizes:
        g = FlashGeometry(num_blocks=n, pages_per_block=pages_per_block, page_size=page_size)
        dev, fs = _fresh(variant, g, seed)
        target = int(fill_fraction * g.capacity_bytes * fs.P / page_size)
        _fill(fs, target, seed)
        fs.unmount(clean=True)
        fs, st = F.mount(dev, variant)
        row = {"blocks": n, "pages_read": st.pages_read, "simulated_time": st.simulated_time,
               "full_scan": int(st.full_scan), "ram_units": fs.ram_units()}
        if unclean:
            fs.create_file("/unclean-marker")
            fs.write_file("/unclean-marker", 0, b"x")
            fs.unmount(clean=False)
            fs, st2 = F.mount(dev, variant)
            row.update({"unclean_pages_read": st2.pages_read,
                        "unclean_simulated_time": st2.simulated_time,
                        "unclean_full_scan": int(st2.full_scan)})
        fs.unmount(clean=True)
        rows.append(row)
    cls = classify_scaling([(r["blocks"], r["pages_read"]) for r in rows])
    exp = {"kind": "MOUNT_SCALING", "sizes": list(sizes), "fill_fraction": fill_fraction,
           "pages_per_block": pages_per_block, "page_size": page_size, "unclean": unclean}
    return BenchReport(exp, variant, seed, counters={}, series=rows,
                       classification=cls.as_dict())


# -- RAM scaling ----------------------------------------------------------------------------------


def run_ram_scaling(variant: str, counts: Sequence[int], seed: int = 0,
                    geometry: Optional[FlashGeometry] = None, file_size: int = 100) -> BenchReport:
    """RAM units held by the index after creating ``n`` small files."""
    g = geometry or FlashGeometry(num_blocks=256, pages_per_block=64, page_size=2048)
    rows = []
    for n in counts:
        dev, fs = _fresh(variant, g, seed)
        content = Content(RANDOM, seed=seed)
        ndirs = max(1, math.isqrt(n))
        for d in range(ndirs):
            fs.mkdir(f"/d{d}")
        for i in range(n):
            p = f"/d{i % ndirs}/f{i}"
            fs.create_file(p)
            fs.write_file(p, 0, content.make(file_size, p))
        rows.append({"files": n, "ram_units": fs.ram_units(),
                     "peak_cache": fs.ram_units()})
    cls = classify_scaling([(r["files"], r["ram_units"]) for r in rows])
    exp = {"kind": "RAM_SCALING", "counts": list(counts), "blocks": g.num_blocks,
           "pages_per_block": g.pages_per_block, "page_size": g.page_size,
           "file_size": file_size}
    return BenchReport(exp, variant, seed, series=rows, classification=cls.as_dict())


# -- wear -----------------------------------------------------------------------------------------------


def run_wear(variant: str, geometry: FlashGeometry, n_ops: int, working_set_files: int = 10,
             wl_enabled: bool = True, seed: int = 0, static_fill: float = 0.0,
             file_pages: int = 1) -> BenchReport:
    """Random payload-sized overwrites over a small working set of files.

    ``static_fill`` of the usable pages is first filled with data that is never
    touched again; it is what wear leveling has to move. The wear spread is
    sampled 101 times, at the start and after every n_ops/100 overwrites.
    """
    if working_set_files < 1:
        raise ValueError("working_set_files must be >= 1")
    if not 0.0 <= static_fill < 1.0:
        raise ValueError("static_fill must be in [0, 1)")
    dev, fs = _fresh(variant, geometry, seed, FsOptions(wl_enabled=wl_enabled))
    rng = random.Random(seed)
    P = fs.P
    static_pages = int(static_fill * fs.usable_pages())
    if static_pages:
        fs.create_file("/static")
        _write_big(fs, "/static", Content(RANDOM, seed=seed).make(static_pages * P, "/static"))
    names = [f"/w{i}" for i in range(working_set_files)]
    for p in names:
        fs.create_file(p)
        fs.write_file(p, 0, Content(RANDOM, seed=seed).make(file_pages * P, p))
    pool = Content(RANDOM, seed=seed + 1).make(4 * P, "pool")
    before = dev.counters()
    samples = [dev.wear_spread()]
    step = n_ops / 100 if n_ops else 0
    next_mark = 1
    for k in range(1, n_ops + 1):
        p = names[rng.randrange(working_set_files)]
        page = rng.randrange(file_pages)
        o = rng.randrange(3 * P)
        fs.write_file(p, page * P, pool[o:o + P])
        while next_mark <= 100 and k >= next_mark * step:
            samples.append(dev.wear_spread())
            next_mark += 1
    while len(samples) < 101:
        samples.append(dev.wear_spread())
    delta = dev.counters().minus(before)
    rows = [{"sample": i, "ops": round(i * step) if n_ops else 0, "wear_spread": s}
            for i, s in enumerate(samples)]
    exp = {"kind": "WEAR", "blocks": geometry.num_blocks,
           "pages_per_block": geometry.pages_per_block, "page_size": geometry.page_size,
           "n_ops": n_ops, "working_set_files": working_set_files, "wl_enabled": wl_enabled,
           "static_fill": static_fill, "file_pages": file_pages}
    counters = delta.as_dict()
    counters.update({"final_wear_spread": samples[-1], "gc_erases": fs.gc_erases,
                     "wl_erases": fs.wl_erases, "max_erase_count": max(dev.erase_counts)})
    return BenchReport(exp, variant, seed, counters=counters, series=rows)


# -- compression --------------------------------------------------------------------------------------


def run_compression(variants: Sequence[str], size_bytes: int,
                    profiles: Sequence[str] = (ZEROS, RANDOM, TEXTLIKE), seed: int = 0,
                    geometry: Optional[FlashGeometry] = None) -> BenchReport:
    """Pages written to store one ``size_bytes`` file per profile and variant."""
    if geometry is None:
        # room for the file twice over plus GC headroom
        blocks = max(64, -(-4 * size_bytes // (64 * 2048)))
        geometry = FlashGeometry(num_blocks=blocks)
    rows = []
    for v in variants:
        for prof in profiles:
            dev, fs = _fresh(v, geometry, seed)
            data = Content(prof, seed=seed).make(size_bytes, "/data")
            fs.create_file("/data")
            before = dev.counters()
            _write_big(fs, "/data", data)
            fs.unmount(clean=True)
            d = dev.counters().minus(before)
            rows.append({"variant": v, "profile": prof, "size_bytes": size_bytes,
                         "pages_written": d.page_writes, "block_erases": d.block_erases,
                         "simulated_time": d.simulated_time})
    exp = {"kind": "COMPRESSION", "variants": list(variants), "size_bytes": size_bytes,
           "profiles": list(profiles), "blocks": geometry.num_blocks,
           "pages_per_block": geometry.pages_per_block, "page_size": geometry.page_size}
    return BenchReport(exp, ",".join(variants), seed, series=rows)


# -- file trees ------------------------------------------------------------------------------------------


def run_file_tree(variant: str, spec: TreeSpec, geometry: Optional[FlashGeometry] = None,
                  match: str = "f*", flush_cache: bool = True) -> BenchReport:
    """Create one generated tree, remount, search it, then delete it; costs per phase."""
    manifest = generate(spec)
    if geometry is None:
        # one metadata page per entry plus the data pages, with 3x headroom
        payload = 2048 - HEADER_SIZE
        pages = sum(1 + -(-e.size // payload) for e in manifest.entries)
        geometry = FlashGeometry(num_blocks=max(64, -(-3 * pages // 64)))
    g = geometry
    dev, fs = _fresh(variant, g, spec.seed)
    created = apply(fs, manifest, spec.content)
    fs.unmount(clean=True)
    fs, _ = F.mount(dev, variant)
    if flush_cache and hasattr(fs, "drop_cache"):
        fs.drop_cache()
    hits, find_reads, find_time = find_walk(fs, manifest, match)
    deleted = delete_tree(fs, manifest)
    rows = [
        {"phase": "create", "ops": created.ops, "pages_read": created.pages_read,
         "pages_written": created.pages_written, "block_erases": created.block_erases,
         "simulated_time": created.simulated_time},
        {"phase": "find", "ops": hits, "pages_read": find_reads, "pages_written": 0,
         "block_erases": 0, "simulated_time": find_time},
        {"phase": "delete", "ops": deleted.ops, "pages_read": deleted.pages_read,
         "pages_written": deleted.pages_written, "block_erases": deleted.block_erases,
         "simulated_time": deleted.simulated_time},
    ]
    exp = {"kind": "FILE_TREE", "spec": spec.to_dict(), "entries": len(manifest),
           "blocks": g.num_blocks, "pages_per_block": g.pages_per_block,
           "page_size": g.page_size, "match": match}
    return BenchReport(exp, variant, spec.seed, counters={"hits": hits}, series=rows)


# -- crash sweep ---------------------------------------------------------------------------------------------


def make_workload(n_ops: int, seed: int, max_write: int = 1500, max_depth: int = 4) -> list:
    """A reproducible list of VFS ops, generated against the reference model."""
    rng = random.Random(seed)
    ref = RefFS()
    gen = OpGen(max_depth=max_depth, max_write=max_write)
    ops = []
    for _ in range(n_ops):
        op = gen.op(rng, ref)
        run_op(ref, op)
        ops.append(op)
    return ops


def _flash_ops(dev: FlashDevice) -> int:
    c = dev.counters()
    return c.page_reads + c.page_writes + c.block_erases


def run_crash_sweep(variant: str, workload: Sequence[tuple], every_op: bool = True,
                    geometry: Optional[FlashGeometry] = None, seed: int = 0,
                    setup_fill: float = 0.4, stride: int = 7) -> BenchReport:
    """Crash at each flash-op index of ``workload`` and check recovery.

    The device is prepared (formatted, pre-filled to ``setup_fill`` and cleanly
    remounted) before the workload starts. For every crash index the workload
    runs until the injected power loss, the device is remounted and the
    observable state must equal the reference state after some prefix of the
    workload that includes every operation completed before the crash. The
    remounted filesystem must also accept a new write and survive a clean
    remount. ``every_op`` False samples every ``stride``-th index instead.
    """
    g = geometry or FlashGeometry(num_blocks=48, pages_per_block=16, page_size=512)
    dev, fs = _fresh(variant, g, seed)
    ref = RefFS()
    if setup_fill > 0:
        fs.mkdir("/pre")
        ref.mkdir("/pre")
        target = int(setup_fill * fs.usable_pages())
        n = 0
        data = Content(TEXTLIKE, period=97, seed=seed).make(4 * fs.P, "pre")
        while fs.live_pages() < target:
            p = f"/pre/f{n}"
            fs.create_file(p)
            ref.create_file(p)
            fs.write_file(p, 0, data)
            ref.write_file(p, 0, data)
            n += 1
    fs.unmount(clean=True)
    fs, _ = F.mount(dev, variant)

    gc0 = fs.gc_erases
    # golden run: remember the state before every op
    states = [snapshot(ref)]
    flash = []
    checkpoints = []
    results = []
    for op in workload:
        flash.append(_flash_ops(dev))
        checkpoints.append(copy.deepcopy((dev, fs)))
        r = run_op(fs, op)
        rr = run_op(ref, op)
        if r == ("err", "NoSpace"):
            raise ValueError("workload does not fit the device; lower setup_fill")
        if r != rr:
            raise AssertionError(f"golden run diverged at {op[:2]}: {r} vs {rr}")
        results.append(r)
        states.append(snapshot(ref))
    golden_gc = fs.gc_erases - gc0
    base = flash[0] if flash else _flash_ops(dev)
    total = _flash_ops(dev) - base

    indices = list(range(total)) if every_op else list(range(0, total, max(1, stride)))
    atomic = F.variant_class(variant).policy.atomic_ops
    failures = []
    full_scans = 0
    torn = 0
    rows = []
    for t in indices:
        # op that contains flash op number t
        i = bisect.bisect_right(flash, base + t) - 1
        d0, f0 = copy.deepcopy(checkpoints[i])
        d0.arm_crash(CrashPlan(base + t - flash[i]))
        crashed_in = None
        for j in range(i, len(workload)):
            try:
                run_op(f0, workload[j])
            except PowerLoss:
                crashed_in = j
                break
        d0.disarm_crash()
        j = crashed_in if crashed_in is not None else len(workload) - 1
        ok, why, full = _check_recovery(variant, d0, states, j, workload[j], atomic)
        full_scans += int(full)
        torn += int(why == TORN)
        if not ok:
            failures.append({"index": t, "op": crashed_in, "reason": why})
        rows.append({"index": t, "op": -1 if crashed_in is None else crashed_in,
                     "ok": int(ok), "torn": int(why == TORN), "full_scan": int(full)})
    exp = {"kind": "CRASH_SWEEP", "ops": len(workload), "every_op": every_op,
           "stride": stride if not every_op else 1, "blocks": g.num_blocks,
           "pages_per_block": g.pages_per_block, "page_size": g.page_size,
           "setup_fill": setup_fill}
    counters = {"crash_points": len(indices), "failures": len(failures), "torn_ops": torn,
                "full_scan_mounts": full_scans, "workload_flash_ops": total,
                "workload_gc_erases": golden_gc}
    rep = BenchReport(exp, variant, seed, counters=counters, series=rows)
    rep.failures = failures
    return rep


TORN = "operation partially applied"


def _torn_match(got: dict, before: dict, after: dict, op) -> bool:
    """``got`` is ``before`` with write ``op`` partly done: every other path is
    untouched and each byte of the target is either its old or its new value."""
    if op[0] != "write_file":
        return False
    path = op[1]
    if set(got) != set(after) or any(got[k] != after[k] for k in got if k != path):
        return False
    kind, size, data = got[path]
    old = before[path][2]
    new = after[path][2]
    if kind != after[path][0] or not len(old) <= size <= len(new):
        return False
    return all(b == new[i] or (i < len(old) and b == old[i]) for i, b in enumerate(data))


def _check_recovery(variant, dev, states, crashed_in, op, atomic):
    """Remount after a crash during op ``crashed_in``. The state must be a prefix
    containing every completed op; variants without atomic ops may also show
    that op partly applied."""
    why = ""
    try:
        fs, st = F.mount(dev, variant)
        got = snapshot(fs)
    except (FsError, FlashError) as exc:
        return False, f"remount failed: {type(exc).__name__}: {exc}", False
    allowed = (crashed_in, crashed_in + 1)
    match = next((k for k in allowed if k < len(states) and states[k] == got), None)
    if match is None:
        if atomic or not _torn_match(got, states[crashed_in], states[crashed_in + 1], op):
            return False, "state is not a committed prefix", st.full_scan
        why = TORN
    try:
        probe = "/__probe__"
        if probe not in {n for n, _, _ in fs.readdir("/")}:
            fs.create_file(probe)
        fs.write_file(probe, 0, b"probe")
        fs.unmount(clean=True)
        fs, _ = F.mount(dev, variant)
        if fs.read_file(probe, 0, 5) != b"probe":
            return False, "probe write lost", st.full_scan
        again = snapshot(fs)
        again.pop(probe, None)
        if again != got:
            return False, "state changed across clean remount", st.full_scan
    except NoSpace:
        pass  # a full device cannot take the probe; recovery itself succeeded
    except FsError as exc:
        return False, f"filesystem unusable after recovery: {type(exc).__name__}", st.full_scan
    return True, why, st.full_scan
