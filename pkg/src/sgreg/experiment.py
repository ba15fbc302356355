"""Reproducible end-to-end comparison runs.

An experiment trains every requested variant with shared seeds on the
conflict training split, evaluates all of them before and after per-pair
refinement on the conflict test split and, when present, on the plain
(non-conflict) test split, and writes a results directory:

    <out>/table.json, table.csv    combined metric tables
    <out>/plots/                   comparison bars, loss curves, montages
    <out>/checkpoints/             one archive + training record per variant
    <out>/manifest.json            config snapshot, dataset and checkpoint
                                   hashes, command history, tool version

Re-running with the manifest's config on byte-identical datasets reproduces
the tables within the tolerances stated in the acceptance tests.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .errors import DataError
from .evaluation import SuiteResult, evaluate_suite
from .networks import load_bundle
from .refine import ExternalRefineConfig, RefineConfig
from .synthdata import read_manifest
from .training import TrainConfig, train
from .viz import save_comparison_plot, save_loss_curves, save_montage

DEFAULT_VARIANTS = ("STN-u", "STN-s", "ISTN-e", "ISTN-i")


@dataclass
class ExperimentConfig:
    data_root: str = ""
    seed: int = 17
    variants: tuple = DEFAULT_VARIANTS
    transform_model: str = "affine"
    epochs: int = 200
    batch_size: int = 16
    learning_rate: float = 1e-3
    encoding: str = "binary_mask"
    refine_max_iters: int = 300
    refine_learning_rate: float = 1e-3
    oracle_iters: int = 250
    oracle_restarts: int = 3
    bspline_spacing: float = 8.0
    bspline_max_disp: float = 4.0
    prealign_checkpoint: str | None = None

    def to_dict(self) -> dict:
        out = asdict(self)
        out["variants"] = list(self.variants)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise DataError(f"unknown experiment config keys: {sorted(unknown)}")
        cfg = cls(**data)
        return cls(**{**data, "variants": tuple(cfg.variants)})


@dataclass
class ExperimentResult:
    out_dir: Path
    conflict: SuiteResult
    plain: SuiteResult | None
    records: dict = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)


def _stage(name: str, progress: bool):
    if progress:
        print(f"[experiment] stage: {name}", flush=True)


def _dataset_dirs(root: Path) -> dict:
    dirs = {
        "conflict_train": root / "conflict" / "train",
        "conflict_val": root / "conflict" / "val",
        "conflict_test": root / "conflict" / "test",
        "plain_test": root / "plain" / "test",
    }
    for key in ("conflict_train", "conflict_val", "conflict_test"):
        if not (dirs[key] / "manifest.json").exists():
            raise DataError(f"missing dataset split {key} at {dirs[key]} (run `sgreg generate` first)")
    if not (dirs["plain_test"] / "manifest.json").exists():
        dirs["plain_test"] = None
    return dirs


def planned_stages(cfg: ExperimentConfig) -> list[str]:
    stages = [f"train {v} ({cfg.transform_model})" for v in cfg.variants]
    stages += ["evaluate conflict test set", "evaluate plain test set (if present)", "write tables, plots, manifest"]
    return stages


def run_experiment(cfg: ExperimentConfig, out_dir, *, argv=None, progress: bool = True) -> ExperimentResult:
    start = time.perf_counter()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "plots").mkdir(exist_ok=True)
    dirs = _dataset_dirs(Path(cfg.data_root))

    dataset_hashes = {
        key: read_manifest(path)["dataset_hash"]
        for key, path in dirs.items()
        if path is not None
    }

    bundles = []
    records = {}
    stage = "setup"
    try:
        for variant in cfg.variants:
            stage = f"train {variant}"
            _stage(stage, progress)
            tc = TrainConfig(
                variant=variant,
                transform_model=cfg.transform_model,
                epochs=cfg.epochs,
                batch_size=cfg.batch_size,
                learning_rate=cfg.learning_rate,
                seed=cfg.seed,
                dataset_dir=str(dirs["conflict_train"]),
                val_dir=str(dirs["conflict_val"]),
                checkpoint_dir=str(out_dir / "checkpoints"),
                encoding=cfg.encoding,
                bspline_spacing=cfg.bspline_spacing,
                bspline_max_disp=cfg.bspline_max_disp,
                prealign_checkpoint=cfg.prealign_checkpoint,
            )
            bundle, record = train(tc)
            bundles.append(bundle)
            records[variant] = record
            save_loss_curves(
                record, out_dir / "plots" / f"loss_{variant}.png", title=f"{variant} training"
            )
            if record.snapshots:
                save_montage(
                    record.snapshots,
                    out_dir / "plots" / f"itn_evolution_{variant}.png",
                    title=f"{variant}: learned representation over training",
                )

        refine_cfg = RefineConfig(max_iters=cfg.refine_max_iters, learning_rate=cfg.refine_learning_rate)
        oracle_cfg = ExternalRefineConfig(
            iters=cfg.oracle_iters, restarts=cfg.oracle_restarts, seed=cfg.seed
        )

        stage = "evaluate conflict"
        _stage(stage, progress)
        conflict = evaluate_suite(
            bundles, str(dirs["conflict_test"]), refine_cfg, oracle_cfg=oracle_cfg, progress=progress
        )
        save_comparison_plot(conflict, out_dir / "plots" / "comparison_conflict.png")

        plain = None
        if dirs["plain_test"] is not None:
            stage = "evaluate plain"
            _stage(stage, progress)
            plain = evaluate_suite(
                bundles, str(dirs["plain_test"]), refine_cfg, oracle_cfg=oracle_cfg, progress=progress
            )
            save_comparison_plot(plain, out_dir / "plots" / "comparison_plain.png")

        stage = "write outputs"
        _stage(stage, progress)
        table = {"conflict": conflict.to_dict()["rows"]}
        if plain is not None:
            table["plain"] = plain.to_dict()["rows"]
        (out_dir / "table.json").write_text(json.dumps(table, indent=2) + "\n")
        _write_csv(out_dir / "table.csv", table)

        manifest = {
            "format": "sgreg-experiment",
            "tool_version": __version__,
            "config": cfg.to_dict(),
            "dataset_hashes": dataset_hashes,
            "checkpoint_hashes": {
                v: _file_hash(out_dir / "checkpoints" / f"{v}-{cfg.transform_model}.ckpt")
                for v in cfg.variants
            },
            "command_history": [argv] if argv else [],
            "wall_clock_s": time.perf_counter() - start,
        }
        manifest["manifest_hash"] = hashlib.sha256(
            json.dumps({"config": manifest["config"], "datasets": dataset_hashes}, sort_keys=True).encode()
        ).hexdigest()
        (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    except Exception as exc:
        exc.experiment_stage = stage
        if progress:
            print(f"[experiment] stage '{stage}' failed; partial outputs kept in {out_dir}", flush=True)
        raise

    return ExperimentResult(out_dir=out_dir, conflict=conflict, plain=plain, records=records, manifest=manifest)


def _write_csv(path: Path, table: dict) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["test_set", "method", "transform_model", "phase", "dice_mean", "dice_std", "asd_mean", "asd_std", "n_pairs"]
        )
        for name, rows in table.items():
            for r in rows:
                writer.writerow(
                    [name, r["method"], r["transform_model"], r["phase"],
                     f"{r['dice_mean']:.4f}", f"{r['dice_std']:.4f}",
                     f"{r['asd_mean']:.4f}", f"{r['asd_std']:.4f}", r["n_pairs"]]
                )


def _file_hash(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_experiment_manifest(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing manifest file: {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt manifest {path}: {exc}") from exc
    if manifest.get("format") != "sgreg-experiment":
        raise DataError(f"corrupt manifest {path}: unrecognised format")
    return manifest


def verify_dataset_hashes(cfg: ExperimentConfig, expected: dict) -> None:
    dirs = _dataset_dirs(Path(cfg.data_root))
    for key, expected_hash in expected.items():
        path = dirs.get(key)
        if path is None:
            raise DataError(f"dataset split {key} missing, cannot reproduce the manifest run")
        actual = read_manifest(path)["dataset_hash"]
        if actual != expected_hash:
            raise DataError(
                f"dataset split {key} changed since the manifest run: {actual[:12]} != {expected_hash[:12]}"
            )
