"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime error. Data goes to --out
or standard output, diagnostics to standard error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from typing import Optional, Sequence

from . import __version__
from . import bench as B
from . import fs as F
from .errors import FlashError, FsError, TooLarge
from .fs.base import FsOptions, read_anchor
from .nand import FlashDevice, FlashGeometry, create_device
from .treegen import (
    PROFILES, Constant, Content, Geometric, TreeSpec, UniformInt, check_distribution,
    dist_from_dict, generate,
)

USAGE_ERROR = 1
RUNTIME_ERROR = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; usage errors are 1 here
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# -- option types ---------------------------------------------------------------------


def parse_dist(text: str):
    """'const:K', 'uniform:A:B' or 'geom:P[:CAP]'."""
    parts = text.split(":")
    try:
        if parts[0] == "const" and len(parts) == 2:
            d = Constant(int(parts[1]))
        elif parts[0] == "uniform" and len(parts) == 3:
            d = UniformInt(int(parts[1]), int(parts[2]))
        elif parts[0] == "geom" and len(parts) in (2, 3):
            d = Geometric(float(parts[1]), *(int(p) for p in parts[2:]))
        else:
            raise ValueError
        check_distribution(d)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"bad distribution {text!r}; use const:K, uniform:A:B or geom:P[:CAP]") from None
    return d


def _int_list(text: str) -> list:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _name_list(choices):
    def conv(text: str) -> list:
        items = [x for x in text.split(",") if x]
        bad = [x for x in items if x not in choices]
        if bad or not items:
            raise argparse.ArgumentTypeError(f"invalid choice(s) {bad or text!r}; pick from {list(choices)}")
        return items
    return conv


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return text == "on"


def _fraction(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 <= v < 1.0:
        raise argparse.ArgumentTypeError("expected a fraction in [0, 1)")
    return v


# -- parser ------------------------------------------------------------------------------

VARIANT_NAMES = list(F.VARIANTS)

# real defaults are applied after --config is merged, so "not given" stays visible
DEFAULTS = {
    "variant": "logtable", "blocks": None, "pages_per_block": 64, "page_size": 2048,
    "seed": 0, "wl": True, "format": "json", "fill": 0.5, "ops": None, "files": 10,
    "static_fill": 0.0, "size": 8 << 20, "profiles": list(PROFILES), "unclean": False,
    "files_per_dir": Constant(2), "dirs_per_dir": Constant(2), "file_size": Constant(1000),
    "depth": 2, "profile": "random", "match": "f*", "stride": 1, "setup_fill": 0.7,
    "max_write": 1500, "offset": 0, "length": None, "data": None, "input": None,
}

# gen-tree emits a manifest (CSV by default); fs reads the variant from the image
COMMAND_DEFAULTS = {"gen-tree": {"format": "csv"}, "fs": {"variant": None}}


def _common(p, variant_list=False):
    if variant_list:
        p.add_argument("--variant", type=_name_list(VARIANT_NAMES),
                       help="comma-separated variants")
    else:
        p.add_argument("--variant", choices=VARIANT_NAMES)
    p.add_argument("--pages-per-block", type=int)
    p.add_argument("--page-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output file (default: standard output)")
    p.add_argument("--format", choices=["csv", "json"])
    p.add_argument("--config", help="JSON file with option values")


def _tree_opts(p):
    p.add_argument("--files-per-dir", type=parse_dist)
    p.add_argument("--dirs-per-dir", type=parse_dist)
    p.add_argument("--file-size", type=parse_dist)
    p.add_argument("--depth", type=int)
    p.add_argument("--profile", choices=list(PROFILES))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ffsim", description="Flash filesystem simulator and benchmarks.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="cmd", parser_class=_Parser, required=True)

    bench = sub.add_parser("bench", help="run an experiment")
    bsub = bench.add_subparsers(dest="experiment", parser_class=_Parser, required=True)

    m = bsub.add_parser("mount-scaling", help="mount cost versus device size")
    _common(m)
    m.add_argument("--blocks", type=_int_list, help="comma-separated block counts (>= 4)")
    m.add_argument("--fill", type=_fraction, help="fill fraction (default 0.5)")
    m.add_argument("--unclean", action="store_const", const=True,
                   help="also measure a mount after an unclean unmount")

    w = bsub.add_parser("wear", help="wear spread under random overwrites")
    _common(w)
    w.add_argument("--blocks", type=int)
    w.add_argument("--ops", type=int, help="number of overwrites")
    w.add_argument("--files", type=int, help="working-set files")
    w.add_argument("--wl", type=_on_off, help="wear leveling on|off")
    w.add_argument("--static-fill", type=_fraction, help="fraction of never-rewritten data")

    c = bsub.add_parser("compression", help="pages written per content profile")
    _common(c, variant_list=True)
    c.add_argument("--blocks", type=int)
    c.add_argument("--size", type=int, help="file size in bytes")
    c.add_argument("--profiles", type=_name_list(PROFILES))

    t = bsub.add_parser("tree", help="create, find and delete a generated tree")
    _common(t)
    t.add_argument("--blocks", type=int)
    _tree_opts(t)
    t.add_argument("--match", help="glob for the find phase (default f*)")

    k = bsub.add_parser("crash", help="crash at each flash op of a workload")
    _common(k)
    k.add_argument("--blocks", type=int)
    k.add_argument("--ops", type=int, help="workload length (default 100)")
    k.add_argument("--stride", type=int, help="sweep every Nth flash op (default 1)")
    k.add_argument("--setup-fill", type=_fraction)
    k.add_argument("--max-write", type=int)

    g = sub.add_parser("gen-tree", help="emit a generated tree manifest")
    g.add_argument("--seed", type=int)
    g.add_argument("--out")
    g.add_argument("--format", choices=["csv", "json"])
    g.add_argument("--config")
    _tree_opts(g)

    f = sub.add_parser("fs", help="one-shot operations on an image file")
    f.add_argument("image")
    fsub = f.add_subparsers(dest="action", parser_class=_Parser, required=True)
    fmt = fsub.add_parser("format", help="create a formatted image")
    _common(fmt)
    fmt.add_argument("--blocks", type=int)
    fmt.add_argument("--wl", type=_on_off)
    for name in ("ls", "mkdir", "create", "stat", "rm", "read", "write"):
        a = fsub.add_parser(name)
        a.add_argument("path", nargs="?" if name == "ls" else None, default="/")
        a.add_argument("--variant", choices=VARIANT_NAMES)
        a.add_argument("--out")
        a.add_argument("--format", choices=["csv", "json"])
        if name == "read":
            a.add_argument("--offset", type=int)
            a.add_argument("--length", type=int)
        if name == "write":
            a.add_argument("--offset", type=int)
            src = a.add_mutually_exclusive_group()
            src.add_argument("--data", help="literal text to write")
            src.add_argument("--input", help="file whose bytes are written ('-' for stdin)")

    tr = sub.add_parser("trace", help="counters and erase histogram of an image")
    tr.add_argument("image")
    tr.add_argument("--out")
    tr.add_argument("--format", choices=["csv", "json"])
    return p


# -- config merge -------------------------------------------------------------------------

_DIST_KEYS = {"files_per_dir", "dirs_per_dir", "file_size"}


def _merge_config(args) -> None:
    path = getattr(args, "config", None)
    if path:
        try:
            with open(path) as fh:
                cfg = json.load(fh)
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
        except ValueError as exc:
            raise UsageError(f"config is not valid JSON: {exc}") from None
        if not isinstance(cfg, dict):
            raise UsageError("config must be a JSON object")
        for key, val in cfg.items():
            dest = key.replace("-", "_")
            if dest in ("config", "cmd", "experiment", "action") or not hasattr(args, dest):
                raise UsageError(f"unknown config key {key!r} for this command")
            if getattr(args, dest) is not None:
                continue  # explicit flags win
            setattr(args, dest, _config_value(dest, val))
    defaults = dict(DEFAULTS, **COMMAND_DEFAULTS.get(args.cmd, {}))
    for dest, val in defaults.items():
        if hasattr(args, dest) and getattr(args, dest) is None:
            setattr(args, dest, val)


def _config_value(dest, val):
    try:
        if dest in _DIST_KEYS:
            return parse_dist(val) if isinstance(val, str) else _dist_obj(val)
        if dest == "variant" and isinstance(val, list):
            return _name_list(VARIANT_NAMES)(",".join(val))
        if dest == "variant" and isinstance(val, str):
            return val
        if dest == "wl" and isinstance(val, str):
            return _on_off(val)
        if dest == "profiles" and isinstance(val, list):
            return _name_list(PROFILES)(",".join(val))
    except argparse.ArgumentTypeError as exc:
        raise UsageError(f"config key {dest}: {exc}") from None
    return val


def _dist_obj(val):
    try:
        return dist_from_dict(val)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad distribution in config: {exc}") from None


# -- output --------------------------------------------------------------------------------


def _emit(args, text) -> None:
    data = text.encode() if isinstance(text, str) else text
    out = getattr(args, "out", None)
    if out and out != "-":
        with open(out, "wb") as fh:
            fh.write(data)
    else:
        sys.stdout.buffer.write(data)
        sys.stdout.flush()


def _geometry(args, blocks: int) -> FlashGeometry:
    g = FlashGeometry(num_blocks=blocks, pages_per_block=args.pages_per_block,
                      page_size=args.page_size)
    g.validate()
    return g


def _single_variant(args) -> str:
    v = args.variant
    if isinstance(v, list):
        if len(v) != 1:
            raise UsageError("this command takes a single --variant")
        return v[0]
    if v not in F.VARIANTS:
        raise UsageError(f"unknown variant {v!r}")
    return v


def _spec(args) -> TreeSpec:
    if args.profile not in PROFILES:
        raise UsageError(f"unknown profile {args.profile!r}")
    spec = TreeSpec(files_per_dir=args.files_per_dir, dirs_per_dir=args.dirs_per_dir,
                    file_size=args.file_size, depth=args.depth,
                    content=Content(args.profile, seed=args.seed), seed=args.seed)
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return spec


# -- commands --------------------------------------------------------------------------------


def cmd_bench(args) -> None:
    exp = args.experiment
    if exp == "compression":
        variants = args.variant if isinstance(args.variant, list) else [args.variant]
        geo = _geometry(args, args.blocks) if args.blocks else None
        rep = B.run_compression(variants, args.size, args.profiles, seed=args.seed, geometry=geo)
    else:
        v = _single_variant(args)
        if exp == "mount-scaling":
            sizes = args.blocks or [256, 512, 1024, 2048]
            if isinstance(sizes, int):
                sizes = [sizes]
            rep = B.run_mount_scaling(v, sizes, args.fill, args.seed, args.pages_per_block,
                                      args.page_size, unclean=bool(args.unclean))
        elif exp == "wear":
            geo = _geometry(args, args.blocks or 512)
            ops = 10_000 if args.ops is None else args.ops
            rep = B.run_wear(v, geo, ops, args.files, args.wl, args.seed, args.static_fill)
        elif exp == "tree":
            geo = _geometry(args, args.blocks) if args.blocks else None
            rep = B.run_file_tree(v, _spec(args), geo, args.match)
        elif exp == "crash":
            geo = _geometry(args, args.blocks) if args.blocks else None  # small default device
            n = 100 if args.ops is None else args.ops
            workload = B.make_workload(n, args.seed, args.max_write)
            rep = B.run_crash_sweep(v, workload, every_op=args.stride <= 1, geometry=geo,
                                    seed=args.seed, setup_fill=args.setup_fill,
                                    stride=args.stride)
        else:
            raise UsageError(f"unknown experiment {exp!r}")
    _emit(args, B.render_report(rep, args.format))


def cmd_gen_tree(args) -> None:
    spec = _spec(args)
    manifest = generate(spec)
    if args.format == "csv":
        _emit(args, manifest.to_csv())
    else:
        body = {"spec": spec.to_dict(), "entries": [
            {"path": e.path, "kind": e.kind, "size": e.size} for e in manifest.entries]}
        _emit(args, json.dumps(body, indent=2) + "\n")


def _open_image(path) -> FlashDevice:
    try:
        return FlashDevice.open(path)
    except FileNotFoundError:
        raise FsError(f"no such image: {path}") from None


def cmd_fs(args) -> None:
    act = args.action
    if act == "format":
        v = args.variant or DEFAULTS["variant"]
        dev = create_device(_geometry(args, args.blocks or 64), args.seed)
        F.format(dev, v, FsOptions(wl_enabled=args.wl))
        dev.save(args.image)
        _emit(args, _render({"image": args.image, "variant": v,
                             "blocks": dev.geometry.num_blocks}, args.format))
        return
    dev = _open_image(args.image)
    fs, _ = F.mount(dev, args.variant or read_anchor(dev)["variant"])
    mutating = act in ("mkdir", "create", "rm", "write")
    if act == "ls":
        rows = [{"name": n, "kind": k, "size": s} for n, k, s in fs.readdir(args.path)]
        _emit(args, _render_rows(rows, args.format))
    elif act == "stat":
        st = fs.stat(args.path)
        _emit(args, _render({"path": args.path, "kind": st.kind, "size": st.size,
                             "object_id": st.object_id}, args.format))
    elif act == "read":
        size = fs.stat(args.path).size
        length = size - args.offset if args.length is None else args.length
        _emit(args, fs.read_file(args.path, args.offset, length))
    elif act == "mkdir":
        fs.mkdir(args.path)
    elif act == "create":
        fs.create_file(args.path)
    elif act == "rm":
        fs.delete(args.path)
    elif act == "write":
        if args.input == "-":
            data = sys.stdin.buffer.read()
        elif args.input:
            with open(args.input, "rb") as fh:
                data = fh.read()
        elif args.data is not None:
            data = args.data.encode()
        else:
            raise UsageError("write needs --data or --input")
        fs.write_file(args.path, args.offset, data)
    fs.unmount(clean=True)
    if mutating:
        dev.save(args.image)


def cmd_trace(args) -> None:
    dev = _open_image(args.image)
    c = dev.counters()
    hist = dev.erase_histogram()
    if args.format == "csv":
        rows = [{"block": b, "erase_count": n, "bad": int(dev.is_bad(b))} for b, n in hist]
        _emit(args, _render_rows(rows, "csv"))
        return
    g = dev.geometry
    body = {
        "geometry": {"num_blocks": g.num_blocks, "pages_per_block": g.pages_per_block,
                     "page_size": g.page_size, "oob_size": g.oob_size},
        "counters": c.as_dict(),
        "wear_spread": dev.wear_spread(),
        "bad_blocks": [b for b in range(g.num_blocks) if dev.is_bad(b)],
        "erase_histogram": [n for _, n in hist],
        "version": __version__,
    }
    _emit(args, json.dumps(body, indent=2) + "\n")


def _render(obj: dict, fmt: str) -> str:
    if fmt == "csv":
        return _render_rows([obj], "csv")
    return json.dumps(obj, indent=2) + "\n"


def _render_rows(rows: list, fmt: str) -> str:
    if fmt == "json":
        return json.dumps(rows, indent=2) + "\n"
    buf = io.StringIO()
    cols = list(rows[0]) if rows else ["name", "kind", "size"]
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


COMMANDS = {"bench": cmd_bench, "gen-tree": cmd_gen_tree, "fs": cmd_fs, "trace": cmd_trace}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _merge_config(args)
        COMMANDS[args.cmd](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return USAGE_ERROR
    except (FsError, FlashError, TooLarge, ValueError, OSError) as exc:
        print(f"ffsim: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return RUNTIME_ERROR
    return 0


if __name__ == "__main__":
    sys.exit(main())
