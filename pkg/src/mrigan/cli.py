"""``mrigan`` command line: NIfTI volumes to slice stores, datasets and a trained DCGAN.

Exit codes: 0 success, 1 usage error, 2 data error, 3 verification failure.

Stages hand data to each other through a *slice store*: a directory of 8-bit
PNGs, one float32 ``.npy`` per slice holding the raw values, and an
``index.json`` listing source file, plane, slice index and the raw min/max
used to scale each PNG.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import checkpoint as ckio
from .errors import ConfigError, DataError, MriganError, TooThin, VerificationError
from .nifti import read_volume
from .slices import (
    PLANE_AXIS,
    PLANES,
    SliceImage,
    conform,
    export_png,
    extract_slices,
    load_orientation_config,
    middle_index,
    normalize,
    pack_dataset,
    read_dataset,
    read_png,
    rotate,
    verify_sizes,
)

log = logging.getLogger("mrigan")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3
INDEX_NAME = "index.json"
SEED_ENV = "MRIT_SEED"


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: list[str] = field(default_factory=list)
    version: str = __version__
    seed: int | None = None
    argv: list[str] = field(default_factory=list)

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def _manifest(args, config: dict, inputs=(), seed=None) -> RunManifest:
    return RunManifest(args.command, config, [str(p) for p in inputs], seed=seed,
                       argv=list(getattr(args, "argv", [])))


def _plain(ns: argparse.Namespace) -> dict:
    skip = {"func", "argv"}
    out = {}
    for k, v in vars(ns).items():
        if k in skip:
            continue
        if isinstance(v, Path):
            v = str(v)
        elif isinstance(v, list):
            v = [str(x) for x in v]
        out[k] = v
    return out


def _env_seed() -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _volume_stem(path: Path) -> str:
    name = path.name
    for suffix in (".nii.gz", ".nii"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return path.stem


# --- slice store ---------------------------------------------------------------

def _store_entry(img: SliceImage, out_dir: Path, name: str) -> dict:
    raw = np.asarray(img.pixels, dtype=np.float32)
    export_png(normalize(img.with_pixels(raw)), out_dir / f"{name}.png")
    np.save(out_dir / f"{name}.npy", raw)
    return {
        "png": f"{name}.png",
        "raw": f"{name}.npy",
        "source": img.source,
        "plane": img.plane,
        "index": img.slice_index,
        "height": int(raw.shape[0]),
        "width": int(raw.shape[1]),
        "min": float(raw.min()),
        "max": float(raw.max()),
    }


def write_index(out_dir: Path, entries: list[dict]) -> None:
    doc = {"version": 1, "entries": entries}
    (out_dir / INDEX_NAME).write_text(json.dumps(doc, indent=1) + "\n")


def read_index(store: Path) -> list[dict]:
    """Entries of a slice store; a bare directory of PNGs is accepted too."""
    path = store / INDEX_NAME
    if path.exists():
        try:
            return json.loads(path.read_text())["entries"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"{path}: unreadable slice index ({exc})") from None
    return [{"png": p.name} for p in sorted(store.glob("*.png"))]


def load_entry(store: Path, entry: dict) -> SliceImage:
    """Raw values when the store kept them, else the PNG mapped back through min/max."""
    meta = dict(source=entry.get("source", entry["png"]), plane=entry.get("plane", ""),
                slice_index=entry.get("index", -1))
    raw = entry.get("raw")
    if raw and (store / raw).exists():
        return SliceImage(np.load(store / raw).astype(np.float32), **meta)
    pixels = read_png(store / entry["png"])
    if "min" in entry and "max" in entry:
        pixels = (pixels + 1.0) / 2.0 * (entry["max"] - entry["min"]) + entry["min"]
    return SliceImage(pixels.astype(np.float32), **meta)


def _orientation_for(path: Path, config: dict, dataset: str | None, plane: str) -> str:
    if not config:
        return "none"
    if dataset is not None:
        if dataset not in config:
            raise ConfigError(f"dataset {dataset!r} not in orientation config")
        return config[dataset].get(plane, "none")
    for part in path.resolve().parts:
        if part in config:
            return config[part].get(plane, "none")
    if "*" in config:
        return config["*"].get(plane, "none")
    log.warning("%s: no orientation entry matches; slices left as extracted", path)
    return "none"


# --- subcommands ---------------------------------------------------------------

def cmd_inspect(args) -> int:
    vol = read_volume(args.file)
    h = vol.header
    out = Path(args.out)
    _manifest(args, _plain(args), [args.file]).write(out / "manifest.json")
    stem = _volume_stem(Path(args.file))
    print(f"file: {args.file}")
    print(f"dims: {' x '.join(str(d) for d in vol.shape)}")
    print(f"datatype: {h.numpy_dtype.name} (code {h.datatype_code}), bitpix {h.bitpix}")
    print(f"endianness: {h.endianness}")
    print(f"scaling: slope {h.scl_slope:g}, intercept {h.scl_inter:g}")
    mids = []
    for plane in PLANES:
        m = middle_index(vol.shape[PLANE_AXIS[plane]])
        mids.append(f"{plane} {m}")
        (img,) = extract_slices(vol, plane, 1)
        export_png(normalize(img), out / f"{stem}_{plane}_mid.png")
    print("middle indices: " + ", ".join(mids))
    return EXIT_OK


def _slice_one(path: Path, name: str, args, orient_cfg, out: Path):
    try:
        vol = read_volume(path)
        action = _orientation_for(path, orient_cfg, args.dataset, args.plane)
        imgs = [rotate(s, action) for s in extract_slices(vol, args.plane, args.count)]
    except TooThin as exc:
        log.warning("skipping %s: %s", path, exc)
        return None
    return [_store_entry(img, out, f"{name}_{args.plane}_{img.slice_index:03d}") for img in imgs]


def cmd_slice(args) -> int:
    out = Path(args.out)
    orient_cfg = load_orientation_config(args.orient_config) if args.orient_config else {}
    _manifest(args, _plain(args), args.files).write(out / "manifest.json")
    names, seen = [], {}
    for f in args.files:
        stem = _volume_stem(Path(f))
        seen[stem] = seen.get(stem, 0) + 1
        names.append(stem if seen[stem] == 1 else f"{stem}-{seen[stem]}")
    with ThreadPoolExecutor(max_workers=args.jobs) as pool:
        results = list(pool.map(lambda pn: _slice_one(Path(pn[0]), pn[1], args, orient_cfg, out),
                                zip(args.files, names)))
    entries = [e for r in results if r is not None for e in r]
    skipped = sum(r is None for r in results)
    write_index(out, entries)
    print(f"{len(args.files) - skipped} volumes sliced, {skipped} skipped, "
          f"{len(entries)} slices written to {out}")
    return EXIT_OK


def _conform_one(entry: dict, src: Path, dst: Path, size: int, tolerance: float):
    """Returns (before shape, new entry or None, failure message or None)."""
    img = load_entry(src, entry)
    before = img.shape
    if before == (size, size):
        # already conformant: carry the files over untouched
        for key in ("png", "raw"):
            if entry.get(key) and (src / entry[key]).exists():
                shutil.copyfile(src / entry[key], dst / entry[key])
        return before, dict(entry), None
    try:
        fixed = conform(img, size, tolerance)
    except DataError as exc:
        return before, None, f"{type(exc).__name__}: {exc}"
    name = Path(entry["png"]).stem
    new = _store_entry(fixed, dst, name)
    new.update({k: v for k, v in entry.items() if k in ("source", "plane", "index")})
    return before, new, None


def cmd_conform(args) -> int:
    src, dst = Path(args.in_dir), Path(args.out)
    entries = read_index(src)
    _manifest(args, _plain(args), [src / e["png"] for e in entries]).write(dst / "manifest.json")
    with ThreadPoolExecutor(max_workers=args.jobs) as pool:
        results = list(pool.map(lambda e: _conform_one(e, src, dst, args.size, args.content_tolerance),
                                entries))
    before = verify_sizes(SliceImage(np.empty(shape, np.uint8)) for shape, _, _ in results)
    kept = [new for _, new, _ in results if new is not None]
    failures = [{"file": e["png"], "error": msg} for e, (_, _, msg) in zip(entries, results)
                if msg is not None]
    after = verify_sizes(SliceImage(np.empty((e["height"], e["width"]), np.uint8)) for e in kept)
    write_index(dst, kept)
    report = {"before": before.to_dict(), "after": after.to_dict(), "failures": failures}
    (dst / "conform_report.json").write_text(json.dumps(report, indent=2) + "\n")
    print(f"before: {_sizes_line(before)}")
    print(f"after:  {_sizes_line(after)}")
    print(f"{len(kept)} conformed, {len(failures)} failed")
    for f in failures:
        print(f"failed: {f['file']}: {f['error']}", file=sys.stderr)
    return EXIT_DATA if failures else EXIT_OK


def _sizes_line(report) -> str:
    if not report.counts:
        return "(empty)"
    return ", ".join(f"{h}x{w}: {c}" for (h, w), c in sorted(report.counts.items()))


def cmd_pack(args) -> int:
    src, out = Path(args.in_dir), Path(args.out)
    entries = read_index(src)
    _manifest(args, _plain(args), [src / e["png"] for e in entries]).write(
        out.with_name(out.name + ".manifest.json"))
    images = []
    for e in entries:
        img = load_entry(src, e)
        img = SliceImage(img.pixels, img.plane, img.slice_index, str(src / e["png"]))
        images.append(img if args.skip_normalize else normalize(img))
    if not images:
        log.warning("%s holds no slices; writing an empty dataset", src)
    ds = pack_dataset(images, out, args.size)
    print(f"packed {ds.n} images of {args.size}x{args.size} into {out}")
    return EXIT_OK


def _train_config(args):
    from .training import TrainConfig

    cfg_path = Path(args.config)
    try:
        raw = json.loads(cfg_path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{cfg_path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{cfg_path}: expected a JSON object")
    env_seed = _env_seed()
    if env_seed is not None:
        raw["seed"] = env_seed
    if args.run_dir:
        raw["run_dir"] = args.run_dir
    raw.setdefault("run_dir", str(cfg_path.with_suffix("")) + "_run")
    if args.deterministic:
        raw["deterministic"] = True
    if raw.get("dataset_path") is None:
        raise ConfigError(f"{cfg_path}: dataset_path is required")
    ds_path = Path(raw["dataset_path"])
    if not ds_path.is_absolute():
        raw["dataset_path"] = str(cfg_path.parent / ds_path)
    return TrainConfig.from_dict(raw)


def cmd_train(args) -> int:
    from .training import train

    config = _train_config(args)
    _manifest(args, config.to_dict(), [config.dataset_path], config.seed).write(
        Path(config.run_dir) / "manifest.json")
    dataset = read_dataset(config.dataset_path)
    resume = ckio.load_checkpoint(args.resume, config.config_hash()) if args.resume else None
    result = train(config, dataset, resume=resume)
    last = result.logs[-1] if result.logs else None
    if last is not None:
        print(f"epoch {last.epoch}: d_real {last.d_real:.4f}  d_fake {last.d_fake:.4f}  g {last.g:.4f}")
    print(f"run directory: {config.run_dir}")
    return EXIT_OK


def cmd_generate(args) -> int:
    from .training import sample_grid, state_from_checkpoint

    seed = args.seed if args.seed is not None else (_env_seed() or 0)
    if args.n < 1:
        raise ConfigError("--n must be at least 1")
    out = Path(args.out)
    _manifest(args, {**_plain(args), "seed": seed}, [args.checkpoint], seed).write(
        out.with_name(out.name + ".manifest.json"))
    state = state_from_checkpoint(ckio.load_checkpoint(args.checkpoint))
    cols = math.ceil(math.sqrt(args.n))
    rows = math.ceil(args.n / cols)
    grid = sample_grid(state.generator, rows, cols, seed, out, count=args.n)
    print(f"wrote {args.n} samples ({grid.shape[1]}x{grid.shape[0]} grid) to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .verify import end_to_end, layer_suite, summarize

    reports = list(summarize(layer_suite(range(args.seeds))).values())
    for r in reports:
        print(r)
    if not args.skip_end_to_end:
        for r in end_to_end():
            print(r)
            reports.append(r)
    failed = [r.name for r in reports if not r.passed]
    if failed:
        raise VerificationError("gradient check failed: " + ", ".join(failed))
    print("all gradient checks passed")
    return EXIT_OK


# --- parser ----------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mrigan", description="NIfTI volumes to slice stores, datasets and a trained DCGAN.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("inspect", help="print a NIfTI header summary and save middle slices")
    s.add_argument("file")
    s.add_argument("--out", default=".", help="directory for the three middle-slice PNGs")
    s.set_defaults(func=cmd_inspect)

    s = sub.add_parser("slice", help="extract central slices into a slice store")
    s.add_argument("--plane", required=True, choices=PLANES)
    s.add_argument("--count", type=int, default=15)
    s.add_argument("--orient-config", help="JSON: dataset name -> {plane: action}")
    s.add_argument("--dataset", help="orientation-config key to use for every file")
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("files", nargs="+")
    s.set_defaults(func=cmd_slice)

    s = sub.add_parser("conform", help="pad/crop every slice in a store to a square size")
    s.add_argument("--size", type=int, default=256)
    s.add_argument("--in", dest="in_dir", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--content-tolerance", type=float, default=0.001)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_conform)

    s = sub.add_parser("pack", help="normalize a conformed store into a dataset tensor file")
    s.add_argument("--in", dest="in_dir", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--size", type=int, default=256)
    s.add_argument("--skip-normalize", action="store_true",
                   help="store values as they are; they must already lie in [-1, 1]")
    s.set_defaults(func=cmd_pack)

    s = sub.add_parser("train", help="train the DCGAN from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--run-dir", help="overrides run_dir from the config")
    s.add_argument("--deterministic", action="store_true", help="single-threaded BLAS")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("generate", help="sample a grid of images from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--n", type=int, default=9)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("gradcheck", help="finite-difference check of every layer and both losses")
    s.add_argument("--seeds", type=int, default=5)
    s.add_argument("--skip-end-to-end", action="store_true")
    s.set_defaults(func=cmd_gradcheck)
    return p


def _setup_logging(verbose: bool) -> None:
    # handler on the package logger, so callers' root configuration is left alone
    root = logging.getLogger("mrigan")
    root.setLevel(logging.INFO if verbose else logging.WARNING)
    if not any(getattr(h, "_mrigan", False) for h in root.handlers):
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter("mrigan: %(levelname)s: %(message)s"))
        handler._mrigan = True
        root.addHandler(handler)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    _setup_logging(args.verbose)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"mrigan {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except VerificationError as exc:
        print(f"mrigan {args.command}: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (DataError, OSError) as exc:
        print(f"mrigan {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except MriganError as exc:
        print(f"mrigan {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
