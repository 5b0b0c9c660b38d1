"""Command-line entry point.

Subcommands: gradcheck, synth, labelgen, pretrain, analyze, inspect.
Exit codes: 0 success, 1 validation failure, 2 usage error. All outputs are
deterministic given flags and seed; the MTP_SEED environment variable, when
set, overrides any seed from flags or config files.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import DATASET_FORMAT, TENSOR_FORMAT, __version__
from . import analytics
from . import annotation_pipeline as annotations
from . import mtp_engine as engine
from .errors import (
    CheckpointError,
    ConfigError,
    DatasetError,
    FixtureError,
    LabelError,
    TrainingError,
)
from .tensorcore import Rng, Tensor, gradcheck
from .tensorcore.tensor import CONTAINER_MAGIC, MAGIC, container_from_bytes, tensor_from_bytes

VERSION_STRING = f"mtplab {__version__} (formats: {TENSOR_FORMAT}, {DATASET_FORMAT})"

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2


def _seed_override(seed: int) -> int:
    env = os.environ.get("MTP_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"MTP_SEED must be an integer, got {env!r}") from None
    return seed


def _cmd_gradcheck(args) -> int:
    names = gradcheck.case_names()
    if args.ops != "all":
        requested = [n.strip() for n in args.ops.split(",") if n.strip()]
        unknown = [n for n in requested if n not in names]
        if unknown:
            print(f"unknown op name(s): {', '.join(unknown)}", file=sys.stderr)
            print(f"available: {', '.join(names)}", file=sys.stderr)
            return EXIT_USAGE
        names = requested
    seed = _seed_override(args.seed)
    failures = 0
    for name in names:
        err = gradcheck.run_case(name, seed=seed)
        status = "ok" if err <= args.tolerance else "FAIL"
        print(f"{name:24s} max-rel-error {err:.3e}  {status}")
        if err > args.tolerance:
            failures += 1
    print(f"{len(names) - failures}/{len(names)} ops within tolerance {args.tolerance:g}")
    return EXIT_OK if failures == 0 else EXIT_FAIL


def _cmd_synth(args) -> int:
    lo_hi = args.boxes.split("-")
    if len(lo_hi) != 2:
        print("--boxes wants LO-HI, e.g. 1-3", file=sys.stderr)
        return EXIT_USAGE
    spec = annotations.SynthSpec(
        n_samples=args.samples,
        height=args.grid,
        width=args.grid,
        n_classes=args.classes,
        boxes_min=int(lo_hi[0]),
        boxes_max=int(lo_hi[1]),
        dataset_id=args.dataset_id,
    )
    seed = _seed_override(args.seed)
    samples = annotations.synth_dataset(spec, Rng(seed))
    annotations.write_dataset(args.out, samples, spec.n_classes)
    n_inst = sum(len(s.instances) for s in samples)
    print(f"wrote {len(samples)} samples ({n_inst} instances) to {args.out}")
    return EXIT_OK


def _cmd_labelgen(args) -> int:
    with open(args.boxes, "r", encoding="utf-8") as fh:
        box_objs = json.load(fh)
    if not isinstance(box_objs, list) or not box_objs:
        print("boxes file must be a non-empty JSON array", file=sys.stderr)
        return EXIT_USAGE
    boxes = [
        annotations.RotatedBox(
            float(b["cx"]), float(b["cy"]), float(b["w"]), float(b["h"]),
            annotations.normalize_theta(float(b["theta"])), int(b["class_id"]),
        )
        for b in box_objs
    ]
    n_classes = args.classes or (max(b.class_id for b in boxes) + 1)
    spec_like = annotations.SynthSpec(
        n_samples=1, height=args.grid, width=args.grid, n_classes=n_classes,
        boxes_min=0, boxes_max=len(boxes), dataset_id=args.dataset_id, noise=0.0,
    )
    image = annotations.render_image(spec_like, boxes, Rng(0))
    sample, dropped = annotations.build_sample(boxes, image, args.dataset_id)
    for inst in sample.instances:
        x0, y0, x1, y1 = inst.hbox
        print(
            f"instance class={inst.class_id} hbox=({x0},{y0})-({x1},{y1}) "
            f"pixels={int(inst.mask.sum())}"
        )
    labeled = int((sample.semantic != annotations.IGNORE_INDEX).sum())
    print(f"semantic: {labeled}/{sample.semantic.size} labeled pixels; dropped {dropped} empty boxes")
    if args.out:
        annotations.write_dataset(args.out, [sample], n_classes)
        print(f"wrote 1 sample to {args.out}")
    return EXIT_OK


def _cmd_pretrain(args) -> int:
    with open(args.config, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    if "seed" in obj:
        obj["seed"] = _seed_override(obj["seed"])
    cfg = engine.parse_train_config(obj)
    streams = engine.load_streams(cfg)
    result = engine.train_mtp(streams, cfg)
    os.makedirs(args.out, exist_ok=True)
    trace_path = os.path.join(args.out, "trace.csv")
    ckpt_path = os.path.join(args.out, "checkpoint.tnsr")
    with open(trace_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(engine.trace_to_csv(result.trace))
    engine.save_checkpoint(ckpt_path, result.params)
    if result.trace:
        final = result.trace[-1].report
        print(f"final total loss {final.total!r}")
        for label, terms in (
            ("l_rod", final.l_rod),
            ("l_ins_b", final.l_ins_b),
            ("l_ins_m", final.l_ins_m),
            ("l_sem", final.l_sem),
        ):
            print(f"  {label}: " + " ".join(repr(t) for t in terms))
    else:
        print("0 iterations requested; checkpoint equals initialization")
    print(f"wrote {trace_path} and {ckpt_path}")
    return EXIT_OK


def _default_fixture_path() -> str:
    return os.path.join(os.path.dirname(__file__), "data", "schedule_fixture.json")


def _cmd_analyze(args) -> int:
    path = args.fixture or _default_fixture_path()
    rows = analytics.load_fixture(path)
    report = analytics.reconcile_table(rows)
    csv = analytics.emit_report([cfg for cfg, _ in rows])
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            fh.write(csv)
    else:
        sys.stdout.write(csv)
    print(report.summary())
    if not report.all_match:
        for c in report.mismatches:
            print(f"mismatch: {c.dataset} {c.cell} expected {c.expected} derived {c.derived}")
        return EXIT_FAIL
    return EXIT_OK


def _cmd_inspect(args) -> int:
    with open(args.path, "rb") as fh:
        buf = fh.read()
    if buf.startswith(CONTAINER_MAGIC):
        entries = container_from_bytes(buf)
        backbone = sum(1 for k in entries if engine.is_backbone_key(k))
        print(f"{TENSOR_FORMAT} container: {len(entries)} tensors "
              f"({backbone} backbone, {len(entries) - backbone} head)")
        for key, t in entries.items():
            print(f"  {key}  {t.shape}")
        return EXIT_OK
    if buf.startswith(MAGIC):
        t, _ = tensor_from_bytes(buf, 0)
        d = t.data
        print(f"{TENSOR_FORMAT} tensor: shape {t.shape}, "
              f"min {d.min():.6g}, max {d.max():.6g}, mean {d.mean():.6g}")
        return EXIT_OK
    if buf.startswith(b"MTSD1 "):
        ds = annotations.dataset_from_bytes(buf)
        n_inst = sum(len(s.instances) for s in ds.samples)
        n_box = sum(len(s.rboxes) for s in ds.samples)
        print(
            f"{DATASET_FORMAT} dataset: {len(ds.samples)} samples, grid "
            f"{ds.height}x{ds.width}, {ds.n_classes} classes, stream id {ds.dataset_id}, "
            f"{n_inst} instances, {n_box} rotated boxes"
        )
        return EXIT_OK
    print(f"unrecognized file format: {args.path}", file=sys.stderr)
    return EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mtplab",
        description="Desk-scale multi-task pretraining lab",
    )
    parser.add_argument("--version", action="version", version=VERSION_STRING)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference checks of registered ops")
    p.add_argument("--ops", default="all", help="comma-separated op names, or 'all'")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("synth", help="generate a synthetic MTSD1 dataset")
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--grid", type=int, default=32)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--boxes", default="1-3", help="boxes per image, LO-HI")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dataset-id", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("labelgen", help="run the label pipeline over boxes from JSON")
    p.add_argument("--boxes", required=True, help="JSON array of rotated boxes")
    p.add_argument("--grid", type=int, default=32)
    p.add_argument("--classes", type=int, default=0, help="class count (0 = infer)")
    p.add_argument("--dataset-id", type=int, default=1)
    p.add_argument("--out", default="", help="optional MTSD1 output path")
    p.set_defaults(func=_cmd_labelgen)

    p = sub.add_parser("pretrain", help="run multi-task pretraining from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("analyze", help="reconcile the finetuning-schedule table")
    p.add_argument("--fixture", default="", help="fixture JSON (default: packaged)")
    p.add_argument("--out", default="", help="CSV output path (default: stdout)")
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("inspect", help="describe a TNSR1/TNSR1C/MTSD1 file")
    p.add_argument("path")
    p.set_defaults(func=_cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, FixtureError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, CheckpointError, DatasetError, LabelError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except json.JSONDecodeError as e:
        print(f"error: invalid JSON: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
