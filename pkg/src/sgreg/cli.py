"""Command-line entry point.

Subcommands: generate | train | register | evaluate | experiment.
Exit codes: 0 ok, 2 usage error, 3 data error, 4 numeric failure.
Every failure prints a single machine-parseable line ``error[<kind>]: ...``
to stderr before exiting.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from .errors import DataError, NumericError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class UsageError(Exception):
    pass


def _load_yaml(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing config file: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise DataError(f"corrupt config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise DataError(f"corrupt config {path}: expected a mapping")
    return data


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args) -> int:
    from .synthdata import (
        DatasetBounds,
        DeformBounds,
        SoIEncodingKind,
        generate_conflict_pair,
        generate_plain_pair,
        write_dataset,
    )

    if args.train <= 0 or args.test <= 0:
        raise UsageError("--train and --test must be positive pair counts")
    if args.val < 0 or args.plain_test < 0:
        raise UsageError("pair counts must not be negative")

    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise DataError(f"output directory {out} is not empty (use --force to overwrite)")

    encoding = SoIEncodingKind(args.encoding, sigma=args.sigma)
    bounds = DatasetBounds()
    deform = DeformBounds() if args.deform else None
    base = args.seed * 1_000_000
    plan = {
        ("conflict", "train"): (generate_conflict_pair, base, args.train, None),
        ("conflict", "val"): (generate_conflict_pair, base + 100_000, args.val, None),
        ("conflict", "test"): (generate_conflict_pair, base + 200_000, args.test, None),
        ("plain", "test"): (generate_plain_pair, base + 300_000, args.plain_test, deform),
    }
    if args.kind != "both":
        plan = {k: v for k, v in plan.items() if k[0] == args.kind}

    if args.dry_run:
        for (kind, split), (_, first_seed, count, _) in plan.items():
            print(f"would generate {kind}/{split}: {count} pairs, seeds {first_seed}..{first_seed + count - 1}")
        return EXIT_OK

    for (kind, split), (gen, first_seed, count, dfm) in plan.items():
        if count == 0:
            continue
        kwargs = dict(
            image_size=args.image_size,
            transform_bounds=bounds,
            encoding=encoding,
            noise_std=args.noise_std,
        )
        if dfm is not None:
            kwargs["deform"] = dfm
        samples = [gen(first_seed + i, **kwargs) for i in range(count)]
        manifest = write_dataset(
            samples,
            out / kind / split,
            encoding=encoding,
            kind_label=kind,
            extra_meta={"split": split, "seed": args.seed},
        )
        print(f"wrote {kind}/{split}: {count} pairs -> {manifest}")
    print(f"dataset root: {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    from .training import TrainConfig, train
    from .transform import AffineBounds
    from .viz import save_loss_curves, save_montage

    raw = _load_yaml(args.config) if args.config else {}
    if args.data:
        raw["dataset_dir"] = args.data
    if args.val_data:
        raw["val_dir"] = args.val_data
    if args.out:
        raw["checkpoint_dir"] = args.out
    if args.seed is not None:
        raw["seed"] = args.seed
    if "affine_bounds" in raw and isinstance(raw["affine_bounds"], dict):
        raw["affine_bounds"] = AffineBounds(**raw["affine_bounds"])
    try:
        config = TrainConfig(**raw)
    except TypeError as exc:
        raise UsageError(f"bad training config: {exc}") from exc
    if config.dataset_dir is None:
        raise UsageError("no dataset: pass --data or set dataset_dir in the config")

    bundle, record = train(config)
    out_dir = Path(config.checkpoint_dir or ".")
    name = f"{config.variant}-{config.transform_model}"
    save_loss_curves(record, out_dir / f"{name}.loss.png", title=f"{config.variant} training")
    if record.snapshots:
        save_montage(record.snapshots, out_dir / f"{name}.itn_evolution.png")
    best = max((v for v in record.val_dice if v is not None), default=float("nan"))
    print(f"trained {config.variant} ({config.transform_model}): best val Dice {best:.4f}, "
          f"checkpoint in {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# register


def _read_raster_image(path):
    from PIL import Image as PILImage

    from .transform import Image

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing raster file: {path}")
    arr = np.array(PILImage.open(path)).astype(np.float64) / 65535.0
    return Image(torch.tensor(arr))


def _write_raster_image(path, img) -> None:
    from PIL import Image as PILImage

    arr = np.clip(img.data.numpy(), 0.0, 1.0)
    PILImage.fromarray(np.rint(arr * 65535).astype(np.uint16)).save(path, format="PNG")


def cmd_register(args) -> int:
    from .networks import load_bundle
    from .refine import RefineConfig, refine
    from .training import predict, prediction_field
    from .transform import AffineParams, resample
    from .viz import save_refine_trace

    bundle, _ = load_bundle(args.model)
    moving = _read_raster_image(args.moving)
    fixed = _read_raster_image(args.fixed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    trace = None
    if args.refine:
        cfg = RefineConfig(max_iters=args.iters, learning_rate=args.lr)
        params, trace = refine(bundle, moving, fixed, cfg)
    else:
        params, _, _ = predict(bundle, moving, fixed)

    if isinstance(params, AffineParams):
        (out / "params.txt").write_text(
            " ".join("%.17g" % v for v in params.vector().tolist()) + "\n"
        )
    else:
        payload = {"spacing": list(params.spacing), "grid": params.grid.tolist()}
        (out / "params.txt").write_text(json.dumps(payload) + "\n")

    field = prediction_field(bundle, moving, fixed, params)
    warped = resample(moving, field)
    _write_raster_image(out / "warped.raster", warped)

    if trace is not None:
        (out / "refine_trace.json").write_text(
            json.dumps(
                {
                    "losses": trace.losses,
                    "iterations_run": trace.iterations_run,
                    "converged": trace.converged,
                    "diagnostic": trace.diagnostic,
                },
                indent=2,
            )
            + "\n"
        )
        save_refine_trace(trace, out / "refine_trace.png")
    print(f"registered {args.moving} -> {args.fixed}; outputs in {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate


def cmd_evaluate(args) -> int:
    from .evaluation import evaluate_suite
    from .networks import load_bundle
    from .refine import ExternalRefineConfig, RefineConfig

    bundles = [load_bundle(p)[0] for p in args.models]
    refine_cfg = RefineConfig(max_iters=args.refine_iters, learning_rate=args.refine_lr)
    oracle_cfg = ExternalRefineConfig(iters=args.oracle_iters, seed=args.seed or 0)
    result = evaluate_suite(
        bundles, args.data, refine_cfg, out_dir=args.out, oracle_cfg=oracle_cfg, progress=True
    )
    for row in result.rows:
        print(
            f"{row.method:18s} {row.phase:7s} dice={row.dice_mean:.4f}±{row.dice_std:.4f} "
            f"asd={row.asd_mean:.3f}±{row.asd_std:.3f}"
        )
    print(f"table written to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# experiment


def cmd_experiment(args) -> int:
    from .experiment import (
        ExperimentConfig,
        load_experiment_manifest,
        planned_stages,
        run_experiment,
        verify_dataset_hashes,
    )

    if args.from_manifest:
        manifest = load_experiment_manifest(args.from_manifest)
        cfg = ExperimentConfig.from_dict(manifest["config"])
        if args.data:
            cfg.data_root = args.data
        verify_dataset_hashes(cfg, manifest["dataset_hashes"])
    else:
        raw = _load_yaml(args.config) if args.config else {}
        if args.data:
            raw["data_root"] = args.data
        if args.seed is not None:
            raw["seed"] = args.seed
        try:
            cfg = ExperimentConfig.from_dict(raw)
        except TypeError as exc:
            raise UsageError(f"bad experiment config: {exc}") from exc
    if not cfg.data_root:
        raise UsageError("no dataset root: pass --data or set data_root in the config")

    if args.dry_run:
        print("planned stages:")
        for stage in planned_stages(cfg):
            print(f"  - {stage}")
        return EXIT_OK

    result = run_experiment(cfg, args.out, argv=list(sys.argv[1:]), progress=True)
    for name, suite in (("conflict", result.conflict), ("plain", result.plain)):
        if suite is None:
            continue
        print(f"\n{name} test set:")
        for row in suite.rows:
            print(f"  {row.method:18s} {row.phase:7s} dice={row.dice_mean:.4f} asd={row.asd_mean:.3f}")
    print(f"\nresults in {result.out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sgreg",
        description="Structure-guided registration: synthetic data, training, refinement, evaluation.",
    )
    parser.add_argument("--version", action="version", version=f"sgreg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate synthetic datasets")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--train", type=int, default=100)
    g.add_argument("--val", type=int, default=10)
    g.add_argument("--test", type=int, default=100)
    g.add_argument("--plain-test", type=int, default=100)
    g.add_argument("--image-size", type=int, default=48)
    g.add_argument("--kind", choices=("both", "conflict", "plain"), default="both")
    g.add_argument("--encoding", choices=("binary_mask", "distance_map", "centroid_map"), default="binary_mask")
    g.add_argument("--sigma", type=float, default=1.5)
    g.add_argument("--noise-std", type=float, default=0.02)
    g.add_argument("--deform", action="store_true", help="add B-spline deformation to plain pairs")
    g.add_argument("--force", action="store_true")
    g.add_argument("--dry-run", action="store_true")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one variant")
    t.add_argument("--config", help="YAML file with TrainConfig fields")
    t.add_argument("--data", help="training split directory")
    t.add_argument("--val-data", help="validation split directory")
    t.add_argument("--out", help="checkpoint directory")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("register", help="register one image pair")
    r.add_argument("--model", required=True)
    r.add_argument("--moving", required=True)
    r.add_argument("--fixed", required=True)
    r.add_argument("--refine", action="store_true")
    r.add_argument("--iters", type=int, default=500)
    r.add_argument("--lr", type=float, default=1e-3)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_register)

    e = sub.add_parser("evaluate", help="run the metric suite for trained models")
    e.add_argument("--models", nargs="+", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--refine-iters", type=int, default=300)
    e.add_argument("--refine-lr", type=float, default=1e-3)
    e.add_argument("--oracle-iters", type=int, default=250)
    e.add_argument("--seed", type=int)
    e.set_defaults(func=cmd_evaluate)

    x = sub.add_parser("experiment", help="train all variants and produce the comparison tables")
    x.add_argument("--config", help="YAML file with ExperimentConfig fields")
    x.add_argument("--data", help="dataset root from `sgreg generate`")
    x.add_argument("--out", required=True)
    x.add_argument("--seed", type=int)
    x.add_argument("--from-manifest", help="rerun from a previous experiment manifest")
    x.add_argument("--dry-run", action="store_true")
    x.set_defaults(func=cmd_experiment)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed its message
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error[usage]: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        stage = getattr(exc, "experiment_stage", None)
        prefix = f" (stage: {stage})" if stage else ""
        print(f"error[data]: {exc}{prefix}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        stage = getattr(exc, "experiment_stage", None)
        prefix = f" (stage: {stage})" if stage else ""
        print(f"error[numeric]: {exc}{prefix}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error[usage]: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
