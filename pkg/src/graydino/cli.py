"""Command-line entry points.

Exit codes are a stable contract: 0 success, 1 check failure, 2 input error
(bad config, bad file, bad arguments), 3 numerical divergence.  All commands
are deterministic given their config and seed; set GRAYDINO_DETERMINISTIC=1
(or pass --deterministic where available) to insist on the single-threaded
numeric path even when the environment configured threads differently.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import augment, checks, numerics as nm
from .config import ConfigError, crop_config_to_dict, load_run_config
from .data import (DatasetManifest, DecodeError, ManifestRecord, PhantomTemplate,
                   ValidationError, derive_rng, generate_phantom, load_image,
                   load_manifest, sample_phantom_spec, save_manifest, write_pgm)
from .engine import TrainingDivergence, evaluate_collapse, load_checkpoint, train
from .probe import ProbeError, evaluate_probe, extract_features, train_linear_probe

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_INPUT_ERROR = 2
EXIT_DIVERGED = 3


def _force_single_thread() -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = "1"


def _deterministic_requested(args) -> bool:
    if getattr(args, "deterministic", False):
        return True
    return os.environ.get("GRAYDINO_DETERMINISTIC", "") not in ("", "0")


def cmd_pretrain(args) -> int:
    try:
        cfg = load_run_config(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR
    if cfg.manifest is None:
        print("error: config must name a manifest for pretraining", file=sys.stderr)
        return EXIT_INPUT_ERROR
    out_dir = args.out or cfg.output_dir
    if out_dir is None:
        print("error: no output directory (--out or config output_dir)", file=sys.stderr)
        return EXIT_INPUT_ERROR
    if _deterministic_requested(args):
        _force_single_thread()
    try:
        manifest = load_manifest(cfg.manifest)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR
    try:
        result = train(manifest, cfg.vit, cfg.crop, cfg.train, cfg.loss_weights,
                       cfg.temperatures, out_dir=out_dir, resume=args.resume)
    except TrainingDivergence as exc:
        step = exc.step if exc.step is not None else "unknown"
        print(f"error: training diverged at step {step}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, ValidationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR
    state = result["state"]
    try:
        collapse = evaluate_collapse(state, manifest,
                                     cfg.temperatures.at(state.step, cfg.train.total_steps),
                                     cfg.crop)
    except ValueError:
        collapse = None
    summary = {
        "steps": state.step,
        "final_checkpoint": result["final_checkpoint"],
        "collapse_metric": collapse,
        "final_losses": {k: result["reports"][-1][k]
                         for k in ("L_image", "L_patch", "L_koleo", "L_total")}
        if result["reports"] else None,
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _probe_split(manifest: DatasetManifest, seed: int,
                 eval_frac: float = 0.2) -> tuple[DatasetManifest, DatasetManifest]:
    """Deterministic train/eval split on record indices (both classes land in
    both halves for any corpus with a few examples per class)."""
    n = len(manifest.records)
    order = derive_rng(seed, 6).permutation(n)
    n_eval = max(1, int(round(eval_frac * n)))
    if n_eval >= n:
        raise ProbeError("manifest too small to split for probing")
    eval_idx = set(order[:n_eval].tolist())
    train_recs = [manifest.records[i] for i in range(n) if i not in eval_idx]
    eval_recs = [manifest.records[i] for i in range(n) if i in eval_idx]
    base = manifest.base_dir
    return (DatasetManifest(seed=manifest.seed, records=train_recs, base_dir=base),
            DatasetManifest(seed=manifest.seed, records=eval_recs, base_dir=base))


def cmd_probe(args) -> int:
    try:
        state, extra = load_checkpoint(args.ckpt)
    except Exception as exc:
        print(f"error: cannot load checkpoint: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR
    try:
        manifest = load_manifest(args.manifest)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR
    crop_doc = extra.get("crop")
    if crop_doc is not None:
        crop_cfg = augment.MultiCropConfig(**{k: tuple(v) if isinstance(v, list) else v
                                              for k, v in crop_doc.items()})
    else:
        crop_cfg = augment.MultiCropConfig()
    try:
        train_man, eval_man = _probe_split(manifest, args.seed)
        feats_train = extract_features(state, train_man, crop_cfg)
        feats_eval = extract_features(state, eval_man, crop_cfg)
        probe = train_linear_probe(feats_train, seed=args.seed)
        report = evaluate_probe(probe, feats_eval, args.metric, seed=args.seed)
    except ProbeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR
    doc = report.to_dict()
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
            fh.write("\n")
    print(json.dumps(doc, sort_keys=True))
    return EXIT_OK


def cmd_augment_preview(args) -> int:
    try:
        img = load_image(args.image)
    except DecodeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR
    if args.config:
        try:
            crop_cfg = load_run_config(args.config).crop
        except ConfigError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INPUT_ERROR
    else:
        crop_cfg = augment.MultiCropConfig()
    os.makedirs(args.out, exist_ok=True)
    views = augment.multi_crop(img, crop_cfg, derive_rng(args.seed, 5))
    sidecar = {
        "theta": crop_cfg.theta,
        "box": dataclasses.asdict(views.box),
        "box_padded": dataclasses.asdict(views.box_padded),
        "config": crop_config_to_dict(crop_cfg),
        "views": [],
    }
    for i, (view, crop) in enumerate(zip(views.views, views.crops)):
        name = f"view_{i:02d}.pgm"
        write_pgm(os.path.join(args.out, name), np.clip(view, 0.0, 1.0))
        sidecar["views"].append({
            "file": name,
            "crop": dataclasses.asdict(crop),
            "is_global": views.is_global[i],
            "flipped": views.flipped[i],
            "used_fallback": views.used_fallback[i],
            "size": view.shape[0],
        })
    with open(os.path.join(args.out, "views.json"), "w") as fh:
        json.dump(sidecar, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"wrote {len(views.views)} views to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.fault:
        nm.set_gradient_fault(args.fault)
    try:
        report = checks.run_gradient_checks(master_seed=args.seed,
                                            seeds_per_check=args.seeds)
    finally:
        nm.set_gradient_fault(None)
    print(json.dumps(report, sort_keys=True))
    if not report["passed"]:
        failing = [c for c in report["checks"] if not c["passed"]]
        for c in failing:
            print(f"FAIL {c['name']}: max relative error {c['max_rel_err']:.3e}",
                  file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


def cmd_phantom_gen(args) -> int:
    if args.template:
        try:
            with open(args.template) as fh:
                template = PhantomTemplate.from_dict(json.load(fh))
        except (OSError, json.JSONDecodeError, ValidationError) as exc:
            print(f"error: invalid template: {exc}", file=sys.stderr)
            return EXIT_INPUT_ERROR
    else:
        template = PhantomTemplate()
    if args.count < 1:
        print("error: count must be >= 1", file=sys.stderr)
        return EXIT_INPUT_ERROR
    os.makedirs(args.out, exist_ok=True)
    rng = derive_rng(args.seed, 9)
    records = []
    for i in range(args.count):
        spec = sample_phantom_spec(template, rng)
        img, box, label = generate_phantom(spec, seed=int(
            derive_rng(args.seed, 10, i).integers(0, 2 ** 63)))
        name = f"phantom_{i:05d}.pgm"
        write_pgm(os.path.join(args.out, name), img)
        records.append(ManifestRecord(path=name, label=label,
                                      content_box=(box.x_min, box.y_min,
                                                   box.x_max, box.y_max)))
    try:
        manifest = DatasetManifest(seed=args.seed, records=records, base_dir=args.out)
    except ValidationError as exc:
        # e.g. a template that only produces positives violates the dense-label rule
        print(f"error: generated corpus is invalid: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR
    save_manifest(manifest, os.path.join(args.out, "manifest.json"))
    n_pos = sum(r.label for r in records)
    print(json.dumps({"count": args.count, "positives": n_pos,
                      "out": args.out}, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graydino",
        description="Content-guided self-distillation pretraining for "
                    "single-channel images, at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="run the self-distillation training loop")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--deterministic", action="store_true",
                   help="force single-threaded numerics")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="linear-probe a frozen checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--metric", choices=("auroc", "accuracy"), default="accuracy")
    p.add_argument("--out", default=None, help="report JSON path")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("augment-preview", help="write the views of one image")
    p.add_argument("--image", required=True)
    p.add_argument("--config", default=None, help="run config JSON (crop block used)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_augment_preview)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=20, help="random instances per check")
    p.add_argument("--fault", default=None,
                   help="inject a gradient fault into the named op (testing hook)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("phantom-gen", help="generate a synthetic labeled corpus")
    p.add_argument("--template", default=None, help="phantom template JSON")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom_gen)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
