"""Command-line entry point: slice, train, extract, eval, split.

Exit codes: 0 ok, 1 usage or missing input, 2 data/format error,
3 numerical failure during training.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .datasets import aligned_planes, axis_index, nonaligned_planes, slice_scene
from .field import CheckpointError, FieldError, field_evaluator, load_checkpoint, save_checkpoint
from .geometry import GeometryError, normalize_scene
from .io import FormatError, read_obj, read_sections, write_obj, write_sections
from .meshing import ExtractionConfig, marching_cubes
from .metrics import (
    MetricsError,
    MetricsReport,
    connected_components,
    heldout_split,
    iou_2d,
    iou_volume,
    nn_distances,
    paired_samples,
)
from .training import ConfigError, NonFiniteLossError, TrainConfig, load_config, train

logger = logging.getLogger("sectionsdf")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
THREADS_ENV = "CROSSSDF_THREADS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; 2 is reserved for bad data here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _require(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    return p


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return 1


def _parse_plane_spec(spec: str):
    """'aligned:N[:axis]' or 'nonaligned:N[:axis]'."""
    parts = spec.split(":")
    if parts[0] not in ("aligned", "nonaligned") or len(parts) not in (2, 3):
        raise UsageError(f"bad --planes spec {spec!r}; expected aligned:N[:axis] or nonaligned:N[:axis]")
    try:
        n = int(parts[1])
    except ValueError:
        raise UsageError(f"bad plane count in {spec!r}") from None
    return parts[0], n, parts[2] if len(parts) == 3 else None


# --- subcommands ----------------------------------------------------------------


def cmd_slice(args) -> int:
    mesh = read_obj(_require(args.mesh))
    if args.planes:
        mode, n, axis = _parse_plane_spec(args.planes)
        axis = axis or args.axis
    elif args.aligned is not None:
        mode, n, axis = "aligned", args.aligned, args.axis
    else:
        mode, n, axis = "nonaligned", args.nonaligned, args.axis
    if n < 1:
        raise UsageError("plane count must be at least 1")
    try:
        axis_index(axis)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if mesh.is_empty:
        raise GeometryError("mesh has no triangles")
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    make = aligned_planes if mode == "aligned" else nonaligned_planes
    sections = slice_scene(mesh, make(lo, hi, n, axis, args.inset))
    write_sections(args.out, sections, {"seed": args.seed, "mode": mode, "axis": axis})
    if args.figures:
        from .plotting import plot_sections

        plot_sections(sections, Path(args.figures) / "sections.png")
    print("plane,contours")
    for i, s in enumerate(sections.sections):
        print(f"{i},{len(s.contours)}")
    return EXIT_OK


def cmd_train(args) -> int:
    sections = read_sections(_require(args.sections))
    cfg = load_config(_require(args.config)) if args.config else TrainConfig()
    overrides = {"threads": _threads(args)}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.deterministic:
        overrides["deterministic"] = True
    cfg = replace(cfg, **overrides)
    if cfg.deterministic:
        cfg = replace(cfg, threads=1)
    sections = normalize_scene(sections)
    try:
        params, log = train(sections, cfg, checkpoint_path=args.out_checkpoint, log_path=args.log)
    except NonFiniteLossError as exc:
        path = exc.checkpoint
        if path is None and exc.last_good is not None:
            path = args.out_checkpoint
            save_checkpoint(exc.last_good, path)
        print(f"error: {exc}", file=sys.stderr)
        print(f"last good checkpoint: {path}", file=sys.stderr)
        return EXIT_NUMERIC
    for w in log.warnings:
        print(f"warning: {w}", file=sys.stderr)
    if args.figures:
        from .plotting import plot_training_log

        plot_training_log(log.rows, Path(args.figures) / "training.png")
    last = log.rows[-1] if log.rows else {}
    print("epochs,seed,loss_total,off_fraction,seconds")
    print(f"{len(log.rows)},{cfg.seed},{last.get('loss_total', float('nan'))!r},{last.get('off_fraction', float('nan'))!r},{log.seconds:.1f}")
    return EXIT_OK


def cmd_extract(args) -> int:
    params = load_checkpoint(_require(args.checkpoint))
    cfg = ExtractionConfig(resolution=args.res)
    mesh = marching_cubes(field_evaluator(params), cfg, transform=params.normalization)
    if mesh.is_empty:
        print("warning: field has no zero crossing; wrote an empty mesh", file=sys.stderr)
    write_obj(args.out_mesh, mesh, header=f"extracted at {args.res}^3\nseed={args.seed}")
    print("vertices,triangles,components")
    print(f"{len(mesh.vertices)},{len(mesh.triangles)},{connected_components(mesh)}")
    return EXIT_OK


def _heldout_ious(args):
    params = load_checkpoint(_require(args.field))
    heldout = read_sections(_require(args.heldout))
    ev = field_evaluator(params)
    tf = params.normalization

    def world(p):
        return ev(tf.forward(p))

    return [iou_2d(world, s.plane, s.contours, resolution=args.iou_res) for s in heldout.sections]


def cmd_eval(args) -> int:
    if (args.field is None) != (args.heldout is None):
        raise UsageError("--field and --heldout must be given together")
    pred = read_obj(_require(args.pred))
    gt = read_obj(_require(args.gt))
    if pred.is_empty or gt.is_empty:
        raise MetricsError("empty mesh")
    a, b = paired_samples(pred, gt, args.samples, args.seed)
    d_ab, d_ba = nn_distances(a, b), nn_distances(b, a)
    ious = _heldout_ious(args) if args.field else None
    report = MetricsReport(
        cd_x100=100.0 * 0.5 * (float(np.mean(d_ab)) + float(np.mean(d_ba))),
        hd_x100=100.0 * max(float(np.max(d_ab)), float(np.max(d_ba))),
        cc=connected_components(pred),
        sample_count=args.samples,
        seed=args.seed,
        iou2d=float(np.mean(ious)) if ious else None,
        iou_vol=iou_volume(pred, gt, args.vol_res) if args.vol_res else None,
    )
    out = Path(args.out)
    out.write_text(report.to_csv() if out.suffix.lower() == ".csv" else report.to_json() + "\n")
    if args.figures:
        from .plotting import plot_distance_histogram, plot_slice_iou

        fig_dir = Path(args.figures)
        plot_distance_histogram(d_ab, d_ba, fig_dir / "distances.png")
        if ious:
            plot_slice_iou(ious, fig_dir / "heldout_iou.png")
    sys.stdout.write(report.to_csv())
    return EXIT_OK


def cmd_split(args) -> int:
    sections = read_sections(_require(args.sections))
    train_idx, held_idx = heldout_split(len(sections))
    write_sections(args.train_out, sections.subset(train_idx), {"seed": args.seed, "indices": train_idx})
    write_sections(args.heldout_out, sections.subset(held_idx), {"seed": args.seed, "indices": held_idx})
    print("split,count")
    print(f"train,{len(train_idx)}")
    print(f"heldout,{len(held_idx)}")
    return EXIT_OK


# --- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="global seed (recorded in outputs)")
    common.add_argument("--threads", type=int, default=None, help=f"worker threads (fallback: ${THREADS_ENV})")
    common.add_argument("--figures", metavar="DIR", help="write report figures (PNG) into DIR")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="sectionsdf", description="Neural SDF reconstruction from planar cross-sections.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("slice", parents=[common], help="cut a watertight OBJ into cross-sections")
    p.add_argument("--mesh", required=True)
    p.add_argument("--out", required=True)
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--planes", metavar="SPEC", help="aligned:N[:axis] or nonaligned:N[:axis]")
    mode.add_argument("--aligned", type=int, metavar="N")
    mode.add_argument("--nonaligned", type=int, metavar="N")
    p.add_argument("--axis", default="z", help="x, y or z (default z)")
    p.add_argument("--inset", type=float, default=0.02, help="end-plane inset as a fraction of the extent")
    p.set_defaults(func=cmd_slice)

    p = sub.add_parser("train", parents=[common], help="fit a field to cross-sections")
    p.add_argument("--sections", required=True)
    p.add_argument("--config")
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--log")
    p.add_argument("--epochs", type=int)
    p.add_argument("--deterministic", action="store_true", help="single worker, ordered reductions")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", parents=[common], help="marching cubes on a trained field")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-mesh", required=True)
    p.add_argument("--res", type=int, default=256)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("eval", parents=[common], help="CD / HD / CC (and IoU) of a predicted mesh")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--field", metavar="CHECKPOINT")
    p.add_argument("--heldout", metavar="SECTIONS")
    p.add_argument("--out", required=True, help="report path (.json or .csv)")
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--iou-res", type=int, default=512)
    p.add_argument("--vol-res", type=int, default=0, help="volume IoU resolution (0 = skip)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("split", parents=[common], help="withhold every (n//10)-th slice")
    p.add_argument("--sections", required=True)
    p.add_argument("--train-out", required=True)
    p.add_argument("--heldout-out", required=True)
    p.set_defaults(func=cmd_split)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.seed is None and args.command != "train":
        args.seed = 0
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        msg = str(exc) if str(exc).startswith("no such file") else f"no such file: {exc.filename}"
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, GeometryError, CheckpointError, MetricsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FieldError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
