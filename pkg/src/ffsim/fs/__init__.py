"""Filesystem variants and the format/mount entry points."""
from __future__ import annotations

from typing import Optional

from ..errors import DeviceTooSmall
from ..nand import FlashDevice
from .base import FileSystem, FsOptions, GcStats, MountStats, Policy, Stat, check_variant, format_device, read_anchor
from .table import CheckpointFS, LogTableFS
from .tree import TreeFS

VARIANTS = {
    "logtable": LogTableFS,
    "checkpoint": CheckpointFS,
    "tree": TreeFS,
}


def variant_class(variant: str):
    try:
        return VARIANTS[variant]
    except KeyError:
        raise ValueError(f"unknown variant {variant!r}") from None


def variant_policy(variant: str) -> Policy:
    return variant_class(variant).policy


def format(dev: FlashDevice, variant: str, options: Optional[FsOptions] = None) -> None:
    cls = variant_class(variant)
    options = options or FsOptions()
    good = len(dev.good_blocks())
    if good < 2:
        raise DeviceTooSmall(f"{good} good blocks")
    body = format_device(dev, variant, options, cls.reserved_blocks(dev.geometry.num_blocks))
    cls.initialize(dev, body)


def mount(dev: FlashDevice, variant: str) -> tuple[FileSystem, MountStats]:
    cls = variant_class(variant)
    before = dev.counters()
    cache: dict = {}
    anchor = read_anchor(dev, cache=cache)
    check_variant(anchor, variant)
    fs, full = cls.mount(dev, anchor, cache)
    delta = dev.counters().minus(before)
    return fs, MountStats(delta.page_reads, delta.simulated_time, full)


__all__ = [
    "FileSystem", "FsOptions", "GcStats", "MountStats", "Policy", "Stat", "VARIANTS",
    "format", "mount", "variant_policy", "variant_class",
]
