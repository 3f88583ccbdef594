"""Command-line front end.

Subcommands cover the full workflow: generate a synthetic dataset, segment
a single volume, train the material model, calibrate offset curves and
alpha factors, run detection on one bag, evaluate a dataset split, and
sweep offsets for a PD/PFA curve.

Exit codes: 0 success, 2 usage error, 3 configuration error, 4 I/O or
format error, 5 contract violation.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import __version__
from .adaptation import (
    ThreatDefinition,
    load_alpha_table,
    load_offset_functions,
    apply_ors,
    calibrate_offsets,
    save_alpha_table,
    save_offset_functions,
    select_alpha,
)
from .classify import (
    FeatureConfig,
    MaterialModel,
    SynthSpec,
    TrainConfig,
    OTHERS_CLASS,
    classify_objects,
    extract_feature,
    synth_others,
    train,
)
from .errors import AtrError, ConfigError, ContractError, VolumeFormatError
from .evaluation import evaluate, pd_pfa_sweep, sweep_tsv
from .phantom import PhantomSpec, generate_dataset, load_dataset
from .segmentation import SegmentationConfig, segment
from .volume import read_volume, write_volume

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_IO = 4
EXIT_CONTRACT = 5


def _seg_config(path):
    return SegmentationConfig.load(path) if path else SegmentationConfig()


def _segment_and_classify(records, seg_cfg, model):
    """Per-bag segmentation + classification over a list of BagRecords.

    Returns (classified objects, segments by bag, gt by bag). Bags are
    processed sequentially in bag-id order for reproducibility.
    """
    objects, segments, gt_bags = [], {}, {}
    for rec in sorted(records, key=lambda r: r.bag_id):
        raw = rec.load_raw()
        seg = segment(raw, seg_cfg)
        segments[rec.bag_id] = seg
        gt_bags[rec.bag_id] = (rec.load_gt(), rec.gt_objects())
        objects.extend(classify_objects(raw, seg, model, bag_id=rec.bag_id))
    return objects, segments, gt_bags


def _resolve_offsets(args, tdef):
    """Per-material offsets from an offset-function file and a target PD."""
    if not getattr(args, "offsets", None):
        return {}
    if getattr(args, "target_pd", None) is None:
        raise ConfigError("--offsets requires --target-pd")
    functions = load_offset_functions(args.offsets)
    offsets = {}
    for material in tdef.materials():
        if material not in functions:
            raise ConfigError(f"no offset curve for material {material!r}")
        off, clamped = functions[material].query(args.target_pd)
        if clamped:
            print(
                f"note: target PD {args.target_pd} outside the calibrated "
                f"range for {material}; using the clamped endpoint",
                file=sys.stderr,
            )
        offsets[material] = off
    return offsets


def _resolve_alphas(args):
    if getattr(args, "alphas", None):
        return load_alpha_table(args.alphas)
    return {}


def cmd_generate(args):
    spec = PhantomSpec.load(args.spec) if args.spec else PhantomSpec()
    index = generate_dataset(spec, args.n_bags, args.seed, args.out)
    print(f"wrote {index['n_bags']} bags to {args.out}")
    return EXIT_OK


def cmd_segment(args):
    raw = read_volume(args.input)
    labels = segment(raw, _seg_config(args.config))
    write_volume(labels, args.output)
    print(f"{labels.max_label} objects -> {args.output}")
    return EXIT_OK


def cmd_train(args):
    records = load_dataset(args.data, split=args.split)
    if not records:
        raise ConfigError(f"no bags in split {args.split!r} under {args.data}")
    feature_cfg = FeatureConfig()
    excluded = set(args.exclude_material or [])
    feats, labels = [], []
    densities = {}
    for rec in sorted(records, key=lambda r: r.bag_id):
        raw, gt = rec.load_raw(), rec.load_gt()
        for obj in rec.manifest["objects"]:
            if obj["material"] in excluded:
                continue
            feats.append(extract_feature(raw, gt, obj["label"], feature_cfg))
            labels.append(obj["material"])
            densities.setdefault(obj["material"], []).append(obj["density_mhu"])
    known = sorted(set(labels))
    known_ranges = tuple(
        (min(densities[m]) - args.range_margin, max(densities[m]) + args.range_margin)
        for m in known
    )
    spec = SynthSpec(
        known_ranges=known_ranges,
        feature=feature_cfg,
        count=args.synth_count,
        seed=args.seed,
    )
    for f in synth_others(spec):
        feats.append(f)
        labels.append(OTHERS_CLASS)
    model = train(feats, labels, TrainConfig(), seed=args.seed, feature_cfg=feature_cfg)
    model.meta["known_ranges"] = {m: list(r) for m, r in zip(known, known_ranges)}
    model.save(args.model)
    print(f"trained on {len(feats)} samples ({len(model.classes)} classes)")
    return EXIT_OK


def cmd_calibrate(args):
    records = load_dataset(args.data, split=args.split)
    if not records:
        raise ConfigError(f"no bags in split {args.split!r} under {args.data}")
    model = MaterialModel.load(args.model)
    tdef = ThreatDefinition.load(args.threats)
    objects, segments, gt_bags = _segment_and_classify(
        records, _seg_config(args.config), model
    )
    alphas = select_alpha(objects, segments, gt_bags, tdef, evaluator=evaluate)
    functions = calibrate_offsets(
        objects, segments, gt_bags, tdef, evaluator=evaluate, alphas=alphas
    )
    save_offset_functions(functions, args.out_offsets)
    save_alpha_table(alphas, args.out_alphas)
    for m, f in sorted(functions.items()):
        lo, hi = f.pd_range()
        print(f"{m}: alpha={alphas[m]} pd range [{lo:.3f}, {hi:.3f}]")
    return EXIT_OK


def cmd_detect(args):
    raw = read_volume(args.input)
    model = MaterialModel.load(args.model)
    tdef = ThreatDefinition.load(args.threats)
    labels = segment(raw, _seg_config(args.config))
    if args.segments:
        write_volume(labels, args.segments)
    objects = classify_objects(raw, labels, model, bag_id=args.bag_id)
    detections = apply_ors(
        objects, tdef, offsets=_resolve_offsets(args, tdef), alphas=_resolve_alphas(args)
    )
    lines = ["bag_id\tlabel\tmaterial\tscore\tmass_g\tdensity_mhu\tthickness_mm"]
    for d in detections:
        lines.append(
            f"{d.bag_id}\t{d.label}\t{d.material}\t{d.score:.6f}\t"
            f"{d.stats.mass_g:.3f}\t{d.stats.density_mhu:.3f}\t"
            f"{d.stats.thickness_mm:.3f}"
        )
    text = "\n".join(lines) + "\n"
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    print(f"{len(detections)} detections", file=sys.stderr)
    return EXIT_OK


def cmd_evaluate(args):
    records = load_dataset(args.data, split=args.split)
    if not records:
        raise ConfigError(f"no bags in split {args.split!r} under {args.data}")
    model = MaterialModel.load(args.model)
    tdef = ThreatDefinition.load(args.threats)
    objects, segments, gt_bags = _segment_and_classify(
        records, _seg_config(args.config), model
    )
    detections = apply_ors(
        objects, tdef, offsets=_resolve_offsets(args, tdef), alphas=_resolve_alphas(args)
    )
    report = evaluate(detections, segments, gt_bags, tdef)
    if args.report:
        report.save(args.report)
    if args.tsv:
        with open(args.tsv, "w") as fh:
            fh.write(report.rows_tsv())
    print(
        f"PD={report.pd:.4f} PFA={report.pfa:.4f} "
        f"({report.n_detected}/{report.n_threats} threats, "
        f"{report.n_false_alarms} false alarms / {report.n_nonthreats} non-threats)"
    )
    return EXIT_OK


def cmd_sweep(args):
    records = load_dataset(args.data, split=args.split)
    if not records:
        raise ConfigError(f"no bags in split {args.split!r} under {args.data}")
    model = MaterialModel.load(args.model)
    tdef = ThreatDefinition.load(args.threats)
    objects, segments, gt_bags = _segment_and_classify(
        records, _seg_config(args.config), model
    )
    grid = np.round(np.arange(-0.5, 0.51, args.step), 6).tolist()
    rows = pd_pfa_sweep(
        objects, segments, gt_bags, tdef, grid, alphas=_resolve_alphas(args)
    )
    text = sweep_tsv(rows)
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="atrkit",
        description="adaptive threat recognition toolkit for volumetric CT",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument(
        "--threads",
        type=int,
        default=1,
        help="worker count hint; processing is sequential and deterministic "
        "regardless of this value",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--spec", help="phantom spec JSON (defaults built in)")
    p.add_argument("--n-bags", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("segment", help="segment one raw volume")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--config", help="segmentation config JSON")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("train", help="train the material classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="odd", choices=["odd", "even"])
    p.add_argument("--model", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--synth-count", type=int, default=200)
    p.add_argument(
        "--exclude-material",
        action="append",
        help="drop this material from training (repeatable); its objects "
        "can then only be found through the others class",
    )
    p.add_argument(
        "--range-margin",
        type=float,
        default=60.0,
        help="MHU margin added around observed class densities when "
        "synthesizing 'others' features",
    )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", help="fit offset curves and alpha factors")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="odd", choices=["odd", "even"])
    p.add_argument("--model", required=True)
    p.add_argument("--threats", required=True)
    p.add_argument("--config", help="segmentation config JSON")
    p.add_argument("--out-offsets", required=True)
    p.add_argument("--out-alphas", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("detect", help="detect threats in one raw volume")
    p.add_argument("--input", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--threats", required=True)
    p.add_argument("--config", help="segmentation config JSON")
    p.add_argument("--offsets", help="offset-function JSON from calibrate")
    p.add_argument("--target-pd", type=float)
    p.add_argument("--alphas", help="alpha table JSON from calibrate")
    p.add_argument("--bag-id", type=int, default=0)
    p.add_argument("--segments", help="also write the segmentation here")
    p.add_argument("--output", help="detections TSV (stdout when omitted)")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("evaluate", help="PD/PFA over a dataset split")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="even", choices=["odd", "even"])
    p.add_argument("--model", required=True)
    p.add_argument("--threats", required=True)
    p.add_argument("--config", help="segmentation config JSON")
    p.add_argument("--offsets", help="offset-function JSON from calibrate")
    p.add_argument("--target-pd", type=float)
    p.add_argument("--alphas", help="alpha table JSON from calibrate")
    p.add_argument("--report", help="write the full report JSON here")
    p.add_argument("--tsv", help="write per-threat match rows here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="PD/PFA versus offset curve")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="even", choices=["odd", "even"])
    p.add_argument("--model", required=True)
    p.add_argument("--threats", required=True)
    p.add_argument("--config", help="segmentation config JSON")
    p.add_argument("--alphas", help="alpha table JSON from calibrate")
    p.add_argument("--step", type=float, default=0.1)
    p.add_argument("--output", help="sweep TSV (stdout when omitted)")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except VolumeFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except AtrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
