"""Command-line entry point: ``patchfeas <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error (bad spec, image, CSV,
placement), 3 numerical failure (non-finite loss in training or attack).

Every run that writes files also writes a JSON manifest holding the full
flag set and the SHA-256 of each artifact; ``patchfeas verify`` re-hashes
the artifacts listed in a manifest.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, pnm
from .archspec import bundled_specs, load_spec, propagate_shapes
from .attack import (
    AttackConfig, PatchSpec, apply_patch, auto_place, measure_effect, momentum_patch_attack, parse_target,
)
from .geometry import RectPlacement, largest_inscribed_rect
from .regions import (
    MODES, FeasibilityQuery, conv_region_bound, count_regions_exact, fc_network, feasible_region,
    layer_factors, layer_multiplier, random_fc_weights,
)
from .report import build_report_from_files, feasibility_csv, feasibility_row, reference_rows
from .rfield import influence_region, receptive_field
from .segnet.data import gen_shapes_dataset, load_dataset, save_dataset
from .segnet.engine import ModelParams, Network
from .segnet.train import TrainConfig, train

log = logging.getLogger("patchfeas")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
C0_SWEEP = (1, 2, 3, 4, 5, 6, 7, 8, 16, 32, 64)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- helpers ---------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(path, args: argparse.Namespace, artifacts) -> Path:
    """Flags plus artifact hashes; paths are stored relative to the manifest."""
    path = Path(path)
    base = path.parent.resolve()
    flags = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    entries = {}
    for a in sorted({Path(p).resolve() for p in artifacts}):
        try:
            key = str(a.relative_to(base))
        except ValueError:
            key = str(a)
        entries[key] = sha256_file(a)
    doc = {"tool": "patchfeas", "version": __version__, "flags": flags, "artifacts": entries}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")
    return path


def verify_manifest(path) -> list[str]:
    """Names of artifacts whose current hash differs from the manifest (or are missing)."""
    path = Path(path)
    doc = json.loads(path.read_text())
    bad = []
    for name, digest in doc["artifacts"].items():
        p = Path(name) if Path(name).is_absolute() else path.parent / name
        if not p.exists() or sha256_file(p) != digest:
            bad.append(name)
    return bad


def parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("patch dims must be positive")
    return h, w


def parse_patch_arg(text: str):
    """``HxW``, ``HxW@top,left`` or ``HxW@auto`` -> (h, w, placement or 'auto' or None)."""
    size, _, where = text.partition("@")
    h, w = parse_size(size)
    if not where:
        return h, w, None
    if where == "auto":
        return h, w, "auto"
    try:
        top, left = (int(v) for v in where.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad placement {where!r}") from None
    return h, w, (top, left)


def _emit(text: str, out) -> list[Path]:
    if out is None:
        sys.stdout.write(text)
        return []
    Path(out).write_text(text)
    return [Path(out)]


def _finish(args, artifacts, default_manifest=None) -> None:
    if not artifacts:
        return
    target = args.manifest or default_manifest or Path(str(artifacts[0]) + ".manifest.json")
    write_manifest(target, args, artifacts)


def _csv(header, rows) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return out.getvalue()


def _workers(args) -> int:
    if getattr(args, "workers", None):
        return args.workers
    env = os.environ.get("PATCHFEAS_WORKERS")
    try:
        return max(int(env), 1) if env else 1
    except ValueError:
        raise UsageError(f"PATCHFEAS_WORKERS must be an integer, got {env!r}") from None


# -- subcommands -----------------------------------------------------------------


def cmd_bounds(args) -> int:
    if args.c0_sweep:
        rows = []
        for c_out in (64, 128):
            for c0 in C0_SWEEP:
                m = layer_multiplier((c0, 25, 25), (c_out, 25, 25))
                rows.append((c0, c_out, 25, 25, f"{m.log10:.4f}"))
        _finish(args, _emit(_csv(("c0", "out_channels", "h", "w", "log10_multiplier"), rows), args.out))
        return EXIT_OK
    if args.spec is None:
        raise UsageError("bounds needs --spec (or --c0-sweep)")
    net = load_spec(args.spec)
    h, w = args.patch
    factors = layer_factors(net, (net.input_shape[0], h, w), args.mode)
    cum = 0.0
    rows = []
    for f in factors:
        cum += f.factor.log10
        rows.append((f.index, f.in_vol, f.out_vol, f"{f.factor.log10:.6f}", f"{cum:.6f}"))
    header = ("layer_index", "in_vol", "out_vol", "log10_factor", "cumulative_log10")
    _finish(args, _emit(_csv(header, rows), args.out))
    return EXIT_OK


def cmd_feasibility(args) -> int:
    if args.log10 is not None:
        if args.classes is None:
            raise UsageError("--log10 needs --classes")
        res = feasible_region(FeasibilityQuery.from_log10(args.log10, args.classes, args.patch or ()))
        lines = [f"max_area {res.max_area}", f"max_side {res.max_side}"]
        lines += [f"patch {h}x{w} {'feasible' if ok else 'infeasible'}" for h, w, ok in res.covers]
        if res.ambiguous:
            log.warning("log10 bound sits on a power of the class count; max_area may be off by one")
        _finish(args, _emit("\n".join(lines) + "\n", args.out))
        return EXIT_OK
    if args.reference:
        rows = reference_rows(args.classes or 19)
    elif args.spec:
        net = load_spec(args.spec)
        patches = args.patch or [(2, 2)]
        rows = [feasibility_row(net.name, net, h, w, args.classes or net_classes(net), args.mode)
                for h, w in patches]
    else:
        raise UsageError("feasibility needs --log10, --spec or --reference")
    _finish(args, _emit(feasibility_csv(rows), args.out))
    return EXIT_OK


def net_classes(net) -> int:
    return propagate_shapes(net).shapes[-1][0]


def cmd_rf(args) -> int:
    net = propagate_shapes(load_spec(args.spec))
    rows = [(l.index, l.kind, l.rf_h, l.rf_w, l.jump_h, l.jump_w, l.offset_h, l.offset_w)
            for l in receptive_field(net).layers]
    text = _csv(("layer", "kind", "rf_h", "rf_w", "jump_h", "jump_w", "offset_h", "offset_w"), rows)
    if args.patch is not None:
        h, w, where = args.patch
        if not isinstance(where, tuple):
            raise UsageError("rf --patch needs an explicit placement HxW@top,left")
        box = influence_region(net, RectPlacement(where[0], where[1], h, w))
        text += f"# influence top={box.top} left={box.left} height={box.height} width={box.width}\n"
    _finish(args, _emit(text, args.out))
    return EXIT_OK


def cmd_place(args) -> int:
    labels = pnm.read(args.mask)
    if labels.ndim != 2:
        raise ValueError("mask must be a PGM image")
    mask = labels == args.cls
    rect = largest_inscribed_rect(mask)
    doc = {"rect": rect.to_dict()}
    if args.patch is not None:
        h, w = args.patch
        top, left = auto_place(mask, h, w)
        doc["patch"] = {"top": top, "left": left, "height": h, "width": w}
    _finish(args, _emit(json.dumps(doc, sort_keys=True) + "\n", args.out))
    return EXIT_OK


def cmd_count_regions(args) -> int:
    widths = [int(v) for v in args.widths.split(",")]
    net = fc_network(widths)
    weights = random_fc_weights(net, np.random.default_rng(args.seed))
    lo, hi = args.domain
    count = count_regions_exact(net, weights, [(lo, hi)] * widths[0], args.resolution)
    bound = conv_region_bound(net, net.input_shape, "per_layer_input")
    text = f"count {count}\nbound {bound}\n"
    _finish(args, _emit(text, args.out))
    return EXIT_OK


def cmd_gen_data(args) -> int:
    ds = gen_shapes_dataset(args.count, args.size, args.seed)
    out = Path(args.out)
    written = save_dataset(ds, out)
    _finish(args, written, out / "manifest.json")
    return EXIT_OK


def cmd_train(args) -> int:
    data = load_dataset(args.data)
    if not 0 <= args.val < len(data):
        raise ValueError(f"--val {args.val} leaves no training data in a set of {len(data)}")
    tr, va = data.split(len(data) - args.val)
    spec = load_spec(args.spec)
    cfg = TrainConfig(args.epochs, args.lr, args.momentum, args.batch_size, args.seed)
    params, hist = train(spec, tr, va, cfg)
    out = Path(args.out)
    params.save(out)
    hist_path = out.with_name(out.name + ".history.json")
    hist_path.write_text(json.dumps({"train_loss": hist.train_loss, "val_accuracy": hist.val_accuracy},
                                    indent=2) + "\n")
    if hist.val_accuracy:
        print(f"val_accuracy {hist.val_accuracy[-1]:.4f}")
    _finish(args, [out, hist_path])
    return EXIT_OK


def _load_image(path) -> np.ndarray:
    img = pnm.read(path)
    if img.ndim != 3:
        raise ValueError(f"{path}: expected a PPM colour image")
    return pnm.from_uint8(img)


def cmd_attack(args) -> int:
    params = ModelParams.load(args.model)
    net = Network(params)
    image = _load_image(args.image)
    if image.shape[1:] != net.spec.input_shape[1:]:
        raise ValueError(f"image is {image.shape[1:]}, the model expects {net.spec.input_shape[1:]}")
    num_classes = net.spec.shapes[-1][0]
    if args.labels:
        labels = pnm.read(args.labels)
    else:
        labels = net.predict(image[None])[0]
    target = parse_target(args.target, labels, num_classes)
    h, w, where = args.patch
    if where is None or where == "auto":
        top, left = auto_place(target.focus, h, w)
    else:
        top, left = where
    cfg = AttackConfig(iterations=args.iters, step=args.step, momentum=args.momentum, eot=args.eot,
                       max_jitter=args.jitter, noise=args.noise, smooth=args.smooth, seed=args.seed,
                       workers=_workers(args))
    patch0 = PatchSpec.gray(h, w, top, left)
    result = momentum_patch_attack(net, image, target, patch0, cfg)
    effect = measure_effect(net, image, result.patch, target, smooth=args.smooth)
    box = influence_region(net.spec, result.patch.box)
    outside = int((effect.changed_mask & ~box.to_mask(effect.changed_mask.shape)).sum())
    feas = feasibility_row(net.spec.name, params.spec, h, w, num_classes)
    metrics = {
        "arch": net.spec.name, "patch_h": h, "patch_w": w, "top": top, "left": left,
        "target": args.target, "iterations": args.iters, "seed": args.seed,
        "changed_pixels": effect.changed_pixels, "agreement": effect.agreement,
        "object_agreement": effect.object_agreement, "best_loss": result.best_loss,
        "best_iteration": result.best_iteration, "locality_violations": result.locality_violations,
        "influence": box.to_dict(), "changed_outside_influence": outside,
        "feasible_max_area": feas.max_area,
        "verdict": "exceeds" if effect.changed_pixels > feas.max_area else "within",
    }
    prefix = args.out_prefix
    Path(prefix).parent.mkdir(parents=True, exist_ok=True)
    paths = {
        "patched": Path(f"{prefix}_patched.ppm"), "patch": Path(f"{prefix}_patch.ppm"),
        "before": Path(f"{prefix}_before.pgm"), "after": Path(f"{prefix}_after.pgm"),
        "changed": Path(f"{prefix}_changed.pgm"), "metrics": Path(f"{prefix}_metrics.json"),
        "trace": Path(f"{prefix}_trace.csv"),
    }
    pnm.write(paths["patched"], pnm.to_uint8(apply_patch(image, result.patch, smooth=args.smooth)))
    pnm.write(paths["patch"], pnm.to_uint8(result.patch.pixels))
    pnm.write(paths["before"], effect.before.astype(np.uint8))
    pnm.write(paths["after"], effect.after.astype(np.uint8))
    pnm.write(paths["changed"], effect.changed_mask.astype(np.uint8) * 255)
    paths["metrics"].write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    paths["trace"].write_text(_csv(("iteration", "loss"), [(i, repr(v)) for i, v in enumerate(result.trace)]))
    print(json.dumps({k: metrics[k] for k in ("changed_pixels", "agreement", "object_agreement", "verdict")}))
    _finish(args, list(paths.values()), Path(f"{prefix}_manifest.json"))
    return EXIT_OK


def cmd_report(args) -> int:
    rep = build_report_from_files(args.feasibility, args.metrics or [])
    _finish(args, _emit(rep.to_csv(), args.out))
    return EXIT_OK


def cmd_verify(args) -> int:
    bad = verify_manifest(args.manifest_file)
    for name in bad:
        print(f"MISMATCH {name}")
    if bad:
        return EXIT_DATA
    print("ok")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for every random choice (default 0)")
    common.add_argument("--manifest", type=Path, help="manifest path (default derived from the outputs)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="patchfeas", description="Patch-attack feasibility bounds and a desk-scale attack lab.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("bounds", parents=[common], help="per-layer region bound factors")
    s.add_argument("--spec", help=f"spec file or bundled name ({', '.join(bundled_specs())})")
    s.add_argument("--patch", type=parse_size, default=(2, 2), help="patch size HxW (default 2x2)")
    s.add_argument("--mode", choices=MODES, default="as_printed")
    s.add_argument("--c0-sweep", action="store_true", help="single-layer multipliers for 25x25 inputs over c0")
    s.add_argument("--out", type=Path)
    s.set_defaults(func=cmd_bounds)

    s = sub.add_parser("feasibility", parents=[common], help="largest area admitting arbitrary class maps")
    s.add_argument("--log10", type=float, help="log10 of a region bound")
    s.add_argument("--classes", type=int, help="number of output classes D")
    s.add_argument("--spec", help="compute the bound from a spec instead")
    s.add_argument("--patch", type=parse_size, action="append", help="patch size HxW (repeatable)")
    s.add_argument("--mode", choices=MODES, default="as_printed")
    s.add_argument("--reference", action="store_true", help="table from published Cityscapes-scale bounds")
    s.add_argument("--out", type=Path)
    s.set_defaults(func=cmd_feasibility)

    s = sub.add_parser("rf", parents=[common], help="receptive field per layer")
    s.add_argument("--spec", required=True)
    s.add_argument("--patch", type=parse_patch_arg, help="HxW@top,left: also print its influence box")
    s.add_argument("--out", type=Path)
    s.set_defaults(func=cmd_rf)

    s = sub.add_parser("place", parents=[common], help="largest inscribed rectangle of a class in a mask")
    s.add_argument("--mask", required=True, type=Path, help="class-index PGM")
    s.add_argument("--class", dest="cls", type=int, required=True)
    s.add_argument("--patch", type=parse_size, help="also centre a patch of this size")
    s.add_argument("--out", type=Path)
    s.set_defaults(func=cmd_place)

    s = sub.add_parser("count-regions", parents=[common], help="grid count of linear regions of a random tiny net")
    s.add_argument("--widths", default="2,4", help="comma-separated layer widths, first is the input dim")
    s.add_argument("--domain", type=float, nargs=2, default=(-2.0, 2.0), metavar=("LO", "HI"))
    s.add_argument("--resolution", type=int, default=401)
    s.add_argument("--out", type=Path)
    s.set_defaults(func=cmd_count_regions)

    s = sub.add_parser("gen-data", parents=[common], help="procedural shapes dataset")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--out", type=Path, default=Path("shapes"))
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", parents=[common], help="train the segmentation network")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--spec", default="unet_toy")
    s.add_argument("--val", type=int, default=200, help="last N samples held out (default 200)")
    s.add_argument("--epochs", type=int, default=30)
    s.add_argument("--lr", type=float, default=0.05)
    s.add_argument("--momentum", type=float, default=0.9)
    s.add_argument("--batch-size", type=int, default=8)
    s.add_argument("--out", type=Path, default=Path("model.pseg"))
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("attack", parents=[common], help="optimise an adversarial patch")
    s.add_argument("--model", type=Path, required=True)
    s.add_argument("--image", type=Path, required=True, help="PPM image")
    s.add_argument("--labels", type=Path, help="class PGM the target is built from (default: clean prediction)")
    s.add_argument("--target", required=True, help="class_switch:FROM:TO, erase:CLS or custom:MASK.pgm")
    s.add_argument("--patch", type=parse_patch_arg, required=True, help="HxW[@top,left|@auto]")
    s.add_argument("--iters", type=int, default=5000)
    s.add_argument("--step", type=float, default=0.01)
    s.add_argument("--momentum", type=float, default=0.9)
    s.add_argument("--eot", action="store_true")
    s.add_argument("--jitter", type=int, default=2)
    s.add_argument("--noise", type=float, default=0.02)
    s.add_argument("--smooth", action="store_true")
    s.add_argument("--workers", type=int, help="EOT workers (default $PATCHFEAS_WORKERS or 1)")
    s.add_argument("--out-prefix", default="attack")
    s.set_defaults(func=cmd_attack)

    s = sub.add_parser("report", parents=[common], help="join feasibility CSVs with attack metrics")
    s.add_argument("--feasibility", nargs="+", required=True, help="feasibility CSV globs")
    s.add_argument("--metrics", nargs="*", help="metrics JSON globs")
    s.add_argument("--out", type=Path)
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("verify", parents=[common], help="re-hash the artifacts of a manifest")
    s.add_argument("manifest_file", type=Path)
    s.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"patchfeas: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"patchfeas: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError, KeyError) as exc:
        print(f"patchfeas: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
