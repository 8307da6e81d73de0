import csv
import io
import json
import math

import pytest
from hypothesis import given, settings, strategies as st

from ffsim import bench as B
from ffsim.errors import NeedFourPoints
from ffsim.nand import FlashGeometry
from ffsim.treegen import Constant, TreeSpec, UniformInt

SMALL = FlashGeometry(num_blocks=32, pages_per_block=16, page_size=512)


# -- classification ------------------------------------------------------------------------------


def test_exact_linear():
    c = B.classify_scaling([(n, 3 * n) for n in (256, 512, 1024, 2048)])
    assert c.label == B.LINEAR and abs(c.r2_linear - 1.0) < 1e-9


def test_exact_log():
    c = B.classify_scaling([(n, 5 * math.log(n)) for n in (256, 512, 1024, 2048, 4096)])
    assert c.label == B.LOGARITHMIC and abs(c.r2_log - 1.0) < 1e-9


def test_constant():
    assert B.classify_scaling([(n, 7) for n in (1, 2, 3, 4)]).label == B.CONSTANT


def test_ambiguous_when_fits_tie():
    # over a narrow range ln N is nearly affine in N
    c = B.classify_scaling([(n, n) for n in (100, 110, 120, 130)])
    assert c.label == B.AMBIGUOUS


def test_series_validation():
    with pytest.raises(NeedFourPoints):
        B.classify_scaling([(1, 1), (2, 2), (3, 3)])
    with pytest.raises(ValueError):
        B.classify_scaling([(1, 1), (3, 2), (2, 3), (4, 4)])
    with pytest.raises(ValueError):
        B.classify_scaling([(0, 1), (1, 2), (2, 3), (3, 4)])


@settings(max_examples=100, deadline=None)
@given(st.floats(0.1, 100), st.floats(-50, 50), st.lists(st.integers(2, 10**6), min_size=4,
                                                         max_size=8, unique=True))
def test_synthetic_curves_recover_their_class(a, b, sizes):
    sizes = sorted(sizes)
    if sizes[-1] < 8 * sizes[0]:
        sizes = [s * 8**i for i, s in enumerate(sizes)]
    lin = B.classify_scaling([(n, a * n + b + 1e6) for n in sizes])
    assert abs(lin.r2_linear - 1.0) < 1e-9
    log = B.classify_scaling([(n, a * math.log(n) + b + 1e3) for n in sizes])
    assert abs(log.r2_log - 1.0) < 1e-9


# -- experiments ------------------------------------------------------------------------------------


def test_mount_scaling_logtable_arithmetic():
    rep = B.run_mount_scaling("logtable", [256, 512, 1024, 2048], fill_fraction=0.0,
                              pages_per_block=64, page_size=512)
    assert [r["pages_read"] for r in rep.series] == [16384, 32768, 65536, 131072]
    assert rep.classification["label"] == B.LINEAR


def test_mount_scaling_needs_four_sizes():
    with pytest.raises(NeedFourPoints):
        B.run_mount_scaling("logtable", [256])


def test_wear_series_shape_and_zero_ops():
    rep = B.run_wear("logtable", SMALL, 0)
    assert len(rep.series) == 101
    assert rep.counters["final_wear_spread"] == 0
    rep = B.run_wear("logtable", SMALL, 500, working_set_files=3)
    assert len(rep.series) == 101 and rep.series[0]["wear_spread"] == 0


def test_wear_wl_never_worse_on_paired_seed():
    on = B.run_wear("logtable", SMALL, 3000, working_set_files=3, static_fill=0.5, seed=2)
    off = B.run_wear("logtable", SMALL, 3000, working_set_files=3, static_fill=0.5, seed=2,
                     wl_enabled=False)
    assert on.counters["final_wear_spread"] <= off.counters["final_wear_spread"]


def test_compression_table():
    size = 100_000
    rep = B.run_compression(["checkpoint", "logtable"], size, seed=1)
    rows = {(r["variant"], r["profile"]): r for r in rep.series}
    payload = 2048 - 32
    for prof in ("zeros", "random", "textlike"):
        assert rows["checkpoint", prof]["pages_written"] >= -(-size // payload)
    assert rows["logtable", "zeros"]["pages_written"] <= 0.25 * rows["checkpoint", "zeros"]["pages_written"]


def test_file_tree_find_costs():
    spec = TreeSpec(Constant(5), Constant(2), UniformInt(0, 3000), depth=2, seed=3)
    cp = B.run_file_tree("checkpoint", spec)
    tr = B.run_file_tree("tree", spec)
    find = {r["phase"]: r for r in cp.series}["find"], {r["phase"]: r for r in tr.series}["find"]
    assert find[0]["pages_read"] == 0
    assert find[1]["pages_read"] >= 1
    assert cp.counters["hits"] == tr.counters["hits"] == 35


def test_crash_sweep_of_empty_workload():
    rep = B.run_crash_sweep("tree", [])
    assert rep.counters["failures"] == 0 and rep.counters["crash_points"] == 0


def test_small_crash_sweep_is_clean_for_every_variant():
    wl = B.make_workload(12, seed=4)
    for v in ("logtable", "checkpoint", "tree"):
        rep = B.run_crash_sweep(v, wl, setup_fill=0.3)
        assert rep.counters["crash_points"] > 0
        assert rep.counters["failures"] == 0, rep.failures


# -- reports --------------------------------------------------------------------------------------


def _report():
    return B.run_ram_scaling("logtable", [10, 20, 40, 80], seed=3, geometry=SMALL)


def test_report_bytes_are_deterministic(tmp_path):
    for fmt in ("json", "csv"):
        a, b = tmp_path / f"a.{fmt}", tmp_path / f"b.{fmt}"
        B.write_report(_report(), a, fmt)
        B.write_report(_report(), b, fmt)
        assert a.read_bytes() == b.read_bytes()


def test_json_schema_and_csv_agree():
    rep = _report()
    doc = json.loads(B.render_report(rep, "json"))
    assert list(doc) == ["experiment", "variant", "seed", "counters", "series",
                         "classification", "version"]
    rows = list(csv.DictReader(io.StringIO(B.render_report(rep, "csv"))))
    assert len(rows) == len(doc["series"])
    for row, src in zip(rows, doc["series"]):
        assert row["variant"] == "logtable" and row["experiment"] == "RAM_SCALING"
        for k, v in src.items():
            assert int(row[k]) == v


def test_unknown_report_format():
    with pytest.raises(ValueError):
        B.render_report(_report(), "xml")
