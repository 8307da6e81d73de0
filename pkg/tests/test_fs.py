import dataclasses
import random

import pytest
from hypothesis import given, settings, strategies as st

from ffsim import fs as F
from ffsim import records as R
from ffsim.codecs import Codec
from ffsim.errors import (
    AlreadyExists, ChecksumMismatch, DeviceTooSmall, DirNotEmpty, NotFormatted, NotFound,
    RangeBeyondEof, StaleHandle, VariantMismatch,
)
from ffsim.fs.base import DIR, FILE, FsOptions
from ffsim.nand import FlashGeometry, PageState, create_device
from ffsim.records import Kind
from ffsim.refmodel import OpGen, RefFS, run_op, snapshot

VARIANTS = ["logtable", "checkpoint", "tree"]


def fresh(variant, blocks=64, ppb=16, page=512, seed=0, **opts):
    dev = create_device(FlashGeometry(num_blocks=blocks, pages_per_block=ppb, page_size=page), seed)
    F.format(dev, variant, FsOptions(**opts))
    fs, _ = F.mount(dev, variant)
    return dev, fs


def remount(dev, fs, variant, clean=True):
    fs.unmount(clean=clean)
    return F.mount(dev, variant)


def records(dev):
    """Every decodable record on the device, without touching the counters."""
    out = []
    for b in range(dev.geometry.num_blocks):
        for p in range(dev.geometry.pages_per_block):
            if dev.state[b][p] == PageState.PROGRAMMED:
                rec = R.unpack(dev.data[b][p] or b"", dev.oob[b][p])
                if rec is not None:
                    out.append(((b, p), rec))
    return out


# -- format / mount / unmount ------------------------------------------------------------------


@pytest.mark.parametrize("variant", VARIANTS)
def test_format_then_mount_is_empty(variant):
    dev, fs = fresh(variant)
    assert fs.readdir("/") == []
    assert fs.stat("/").kind == DIR


def test_format_needs_two_good_blocks():
    dev = create_device(FlashGeometry(num_blocks=2, pages_per_block=4, page_size=512))
    dev.mark_bad(1)
    with pytest.raises(DeviceTooSmall):
        F.format(dev, "logtable")


def test_mount_unformatted_device():
    dev = create_device(FlashGeometry(num_blocks=8, pages_per_block=4, page_size=512))
    with pytest.raises(NotFormatted):
        F.mount(dev, "logtable")


@pytest.mark.parametrize("variant", VARIANTS)
def test_second_format_wins(variant):
    dev, fs = fresh(variant)
    fs.create_file("/old")
    fs.unmount()
    gen = fs.generation
    F.format(dev, variant)
    fs, _ = F.mount(dev, variant)
    assert fs.generation == gen + 1
    assert fs.readdir("/") == []


def test_variant_mismatch():
    dev, fs = fresh("tree")
    fs.unmount()
    for other in ("logtable", "checkpoint"):
        with pytest.raises(VariantMismatch):
            F.mount(dev, other)


@pytest.mark.parametrize("variant", VARIANTS)
def test_roundtrip_of_k_files_across_remount(variant):
    dev, fs = fresh(variant)
    rng = random.Random(5)
    want = {f"/f{i}": rng.randbytes(rng.randrange(3000)) for i in range(20)}
    for path, data in want.items():
        fs.create_file(path)
        fs.write_file(path, 0, data)
    for clean in (True, False):
        fs, _ = remount(dev, fs, variant, clean)
        for path, data in want.items():
            assert fs.read_file(path, 0, len(data)) == data


@pytest.mark.parametrize("variant", VARIANTS)
def test_unclean_unmount_writes_nothing(variant):
    dev, fs = fresh(variant)
    fs.create_file("/a")
    fs.write_file("/a", 0, b"x" * 5000)
    before = dev.counters()
    fs.unmount(clean=False)
    delta = dev.counters().minus(before)
    assert (delta.page_writes, delta.block_erases) == (0, 0)


@pytest.mark.parametrize("variant", VARIANTS)
def test_double_unmount_is_stale(variant):
    dev, fs = fresh(variant)
    fs.unmount()
    with pytest.raises(StaleHandle):
        fs.unmount()
    with pytest.raises(StaleHandle):
        fs.readdir("/")


def test_checkpoint_clean_unmount_writes_checkpoint_records():
    dev, fs = fresh("checkpoint")
    fs.unmount()
    assert any(rec.kind == Kind.CHECKPOINT for _, rec in records(dev))


# -- namespace ------------------------------------------------------------------------------------


@pytest.mark.parametrize("variant", VARIANTS)
def test_namespace_examples(variant):
    dev, fs = fresh(variant)
    fs.mkdir("/a")
    fs.create_file("/a/f")
    assert fs.stat("/a/f").kind == FILE
    with pytest.raises(AlreadyExists):
        fs.create_file("/a/f")
    with pytest.raises(NotFound):
        fs.create_file("/missing/f")
    with pytest.raises(DirNotEmpty):
        fs.delete("/a")
    fs.delete("/a/f")
    with pytest.raises(NotFound):
        fs.stat("/a/f")
    fs.delete("/a")
    assert fs.readdir("/") == []


@pytest.mark.parametrize("variant", VARIANTS)
def test_readdir_is_lexicographic(variant):
    dev, fs = fresh(variant)
    for name in ("zeta", "alpha", "mid"):
        fs.create_file("/" + name)
    fs.write_file("/mid", 0, b"abc")
    assert fs.readdir("/") == [("alpha", FILE, 0), ("mid", FILE, 3), ("zeta", FILE, 0)]


@pytest.mark.parametrize("variant", VARIANTS)
def test_read_past_eof(variant):
    dev, fs = fresh(variant)
    fs.create_file("/f")
    fs.write_file("/f", 0, b"hello")
    assert fs.read_file("/f", 1, 4) == b"ello"
    with pytest.raises(RangeBeyondEof):
        fs.read_file("/f", 0, 6)
    with pytest.raises(RangeBeyondEof):
        fs.write_file("/f", 6, b"hole")


# -- write path -------------------------------------------------------------------------------------


def data_records(dev, obj):
    return [(loc, rec) for loc, rec in records(dev) if rec.kind == Kind.FILE_DATA and rec.object_id == obj]


def test_write_two_payloads_makes_two_records_then_overwrite_invalidates_them():
    dev, fs = fresh("checkpoint")
    P = R.payload_capacity(512)
    fs.create_file("/f")
    obj = fs.stat("/f").object_id
    data = bytes(range(256)) * (2 * P // 256) + bytes(2 * P % 256)
    fs.write_file("/f", 0, data)
    first = data_records(dev, obj)
    assert len(first) == 2 and all(rec.codec == Codec.NONE for _, rec in first)
    live_before = fs.live_pages()
    fs.write_file("/f", 0, data[::-1])
    second = [x for x in data_records(dev, obj) if x not in first]
    assert len(second) == 2
    for loc, _ in first:
        assert not fs.live[loc[0]][loc[1]]
    assert fs.live_pages() == live_before
    assert sum(fs.valid) == fs.live_pages()
    assert fs.read_file("/f", 0, len(data)) == data[::-1]


def test_checkpoint_stores_zeros_raw_and_logtable_compresses_them():
    dev, fs = fresh("checkpoint", page=2048)
    fs.create_file("/z")
    fs.write_file("/z", 0, bytes(4096))
    recs = data_records(dev, fs.stat("/z").object_id)
    assert len(recs) == 3  # 4096 bytes over 2016-byte payloads
    assert all(rec.codec == Codec.NONE for _, rec in recs)

    dev, fs = fresh("logtable", page=2048)
    fs.create_file("/z")
    fs.write_file("/z", 0, bytes(4096))
    recs = data_records(dev, fs.stat("/z").object_id)
    assert len(recs) == 1
    assert recs[0][1].codec == Codec.RLE and recs[0][1].length_stored <= 34


@pytest.mark.parametrize("variant", VARIANTS)
def test_bit_error_surfaces_as_checksum_mismatch(variant):
    dev, fs = fresh(variant)
    fs.create_file("/f")
    P = R.payload_capacity(512)
    # a full incompressible payload, so any flipped bit lands inside the record
    fs.write_file("/f", 0, random.Random(1).randbytes(P))
    fs, _ = remount(dev, fs, variant)
    if variant == "tree":
        fs.drop_cache()
    dev.geometry = dataclasses.replace(dev.geometry, bit_error_rate=1.0)
    with pytest.raises(ChecksumMismatch):
        fs.read_file("/f", 0, P)


# -- gc / wl -----------------------------------------------------------------------------------------


@pytest.mark.parametrize("variant", ["logtable", "checkpoint"])
def test_gc_of_fully_invalid_block_migrates_nothing(variant):
    dev, fs = fresh(variant, gc_watermark=1)
    fs.create_file("/f")
    P = R.payload_capacity(512)
    fs.write_file("/f", 0, random.Random(2).randbytes(P * 40))
    fs.write_file("/f", 0, random.Random(3).randbytes(P * 40))
    st = fs.gc_step()
    assert st.erased_block is not None and st.migrated_pages == 0
    assert fs.read_file("/f", 0, P * 40) == random.Random(3).randbytes(P * 40)


@pytest.mark.parametrize("variant", ["logtable", "checkpoint"])
def test_gc_on_fully_valid_fs_is_noop(variant):
    dev, fs = fresh(variant)
    # the block left open at format is closed by the remount; compact it first
    while fs.gc_step().erased_block is not None:
        pass
    for i in range(30):
        fs.create_file(f"/f{i}")
    before = dev.counters()
    st = fs.gc_step()
    assert st.erased_block is None and st.migrated_pages == 0
    assert dev.counters().minus(before).block_erases == 0


@pytest.mark.parametrize("variant", VARIANTS)
def test_fill_invalidate_fill_keeps_data(variant):
    dev, fs = fresh(variant, blocks=32)
    rng = random.Random(4)
    ref = {}
    for rnd in range(6):
        for i in range(8):
            path = f"/f{i}"
            if path not in ref:
                fs.create_file(path)
            ref[path] = rng.randbytes(rng.randrange(500, 3000))
            fs.write_file(path, 0, ref[path])
    for _ in range(10):
        fs.gc_step()
    assert len(fs.free) >= fs.opts.gc_watermark
    for path, data in ref.items():
        assert fs.read_file(path, 0, len(data)) == data


def test_wl_noop_within_threshold_and_one_erase_above():
    dev, fs = fresh("logtable", wl_threshold=16)
    fs.create_file("/f")
    P = R.payload_capacity(512)
    data = random.Random(9).randbytes(P * 20)
    fs.write_file("/f", 0, data)
    # make the first (now closed) block holding data the coldest
    data_block = data_records(dev, fs.stat("/f").object_id)[0][0][0]
    assert data_block != fs.head
    base = dev.erase_counts[data_block]
    for b in range(dev.geometry.num_blocks):
        if b != data_block:
            dev.erase_counts[b] = base + 16
    before = dev.counters()
    assert fs.wl_rebalance() is None
    assert dev.counters() == before
    for b in range(dev.geometry.num_blocks):
        if b != data_block:
            dev.erase_counts[b] = base + 17
    spread = fs.managed_spread()
    before = dev.counters()
    assert fs.wl_rebalance() == data_block
    assert dev.counters().minus(before).block_erases == 1
    assert fs.managed_spread() <= spread
    assert fs.read_file("/f", 0, len(data)) == data


def test_wl_on_beats_wl_off_on_hot_cold_workload():
    def run(wl):
        dev, fs = fresh("logtable", blocks=32, wl_enabled=wl, seed=1)
        P = R.payload_capacity(512)
        for i in range(12):
            fs.create_file(f"/cold{i}")
            fs.write_file(f"/cold{i}", 0, random.Random(i).randbytes(P * 16))
        fs.create_file("/hot")
        for i in range(10_000):
            fs.write_file("/hot", 0, bytes([i % 251]) * 10 + bytes([i % 7]))
        return dev.wear_spread()

    assert run(True) < run(False)


# -- ram units -------------------------------------------------------------------------------------


@pytest.mark.parametrize("variant", ["logtable", "checkpoint"])
def test_table_ram_units_linear_in_files(variant):
    dev, fs = fresh(variant)
    base = fs.ram_units()
    assert base <= 2
    for i in range(50):
        fs.create_file(f"/f{i}")
        fs.write_file(f"/f{i}", 0, b"x" * 10)
    assert fs.ram_units() == base + 100


def test_tree_ram_units_bounded_by_cache():
    dev, fs = fresh("tree", blocks=256, cache_capacity=64)
    for i in range(600):
        fs.create_file(f"/f{i}")
        fs.write_file(f"/f{i}", 0, b"x" * 10)
        assert fs.ram_units() <= 64
    assert fs.ram_units() <= 64


def test_policies():
    assert F.variant_policy("logtable").compression and F.variant_policy("logtable").metadata_in_ram
    assert not F.variant_policy("checkpoint").compression
    assert F.variant_policy("checkpoint").metadata_in_ram
    assert F.variant_policy("tree").compression and not F.variant_policy("tree").metadata_in_ram


def test_stat_costs_follow_metadata_policy():
    dev, fs = fresh("checkpoint")
    fs.create_file("/f")
    before = dev.counters().page_reads
    fs.stat("/f")
    assert dev.counters().page_reads == before

    dev, fs = fresh("tree")
    fs.create_file("/f")
    fs.drop_cache()
    before = dev.counters().page_reads
    fs.stat("/f")
    assert dev.counters().page_reads > before


# -- reference model equivalence ---------------------------------------------------------------------


def run_against_ref(variant, seed, n_ops, blocks=48):
    dev, fs = fresh(variant, blocks=blocks, seed=seed)
    ref = RefFS()
    rng = random.Random(seed)
    gen = OpGen()
    for i in range(n_ops):
        op = gen.op(rng, ref)
        want = run_op(ref, op)
        got = run_op(fs, op)
        assert got == want, (seed, i, op[:2])
        if i % 97 == 96:
            fs, _ = remount(dev, fs, variant)
    fs, _ = remount(dev, fs, variant)
    assert snapshot(fs) == snapshot(ref)


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("seed", range(5))
def test_reference_equivalence(variant, seed):
    run_against_ref(variant, seed, 300)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(VARIANTS))
def test_reference_equivalence_property(seed, variant):
    run_against_ref(variant, seed, 120)
