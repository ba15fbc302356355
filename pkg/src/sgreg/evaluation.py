"""Overlap metrics and the multi-method before/after-refinement comparison.

Dice and average surface distance are computed on binarised structure maps;
the binarisation threshold is a single shared constant applied everywhere,
including to bilinearly warped masks. The evaluation suite reports one row
per method and phase plus an identity row, a structure-oracle row (direct
parameter optimisation on the SoI maps, the practical upper bound), and an
intensity-oracle row (the same optimiser on the raw images, i.e. what
classical intensity-based registration would converge to).
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.spatial import cKDTree

from .errors import DataError
from .networks import NET_DTYPE, ModelBundle
from .transform import Image, warp

BINARIZE_THRESHOLD = 0.5


def binarize(t: torch.Tensor, threshold: float = BINARIZE_THRESHOLD) -> torch.Tensor:
    return t >= threshold


def _as_mask(x) -> np.ndarray:
    if isinstance(x, Image):
        x = x.data
    if torch.is_tensor(x):
        x = x.numpy()
    return np.asarray(x) >= BINARIZE_THRESHOLD


def dice(a, b) -> float:
    """Overlap 2|A∩B| / (|A|+|B|); defined as 1.0 when both masks are empty."""
    am = _as_mask(a)
    bm = _as_mask(b)
    if am.shape != bm.shape:
        raise ValueError(f"shape mismatch: {am.shape} vs {bm.shape}")
    sizes = int(am.sum()) + int(bm.sum())
    if sizes == 0:
        return 1.0
    return 2.0 * int((am & bm).sum()) / sizes


def dice_batch(warped_sm: torch.Tensor, s_f: torch.Tensor) -> torch.Tensor:
    """Per-pair Dice between binarised maps, shapes (B, 1, H, W)."""
    a = binarize(warped_sm).flatten(1)
    b = binarize(s_f).flatten(1)
    inter = (a & b).sum(1).double()
    sizes = a.sum(1).double() + b.sum(1).double()
    return torch.where(sizes > 0, 2 * inter / sizes.clamp(min=1), torch.ones_like(inter))


def _boundary_points(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with at least one non-mask 4-neighbour (image border counts)."""
    padded = np.pad(mask, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    ys, xs = np.nonzero(mask & ~interior)
    return np.stack([ys, xs], axis=1).astype(np.float64)


def asd(a, b, spacing: float = 1.0) -> float:
    """Symmetric average boundary distance, in pixels by default."""
    am = _as_mask(a)
    bm = _as_mask(b)
    if am.shape != bm.shape:
        raise ValueError(f"shape mismatch: {am.shape} vs {bm.shape}")
    if not am.any() or not bm.any():
        raise ValueError("empty mask for ASD")
    pa = _boundary_points(am)
    pb = _boundary_points(bm)
    d_ab = cKDTree(pb).query(pa)[0].mean()
    d_ba = cKDTree(pa).query(pb)[0].mean()
    return float((d_ab + d_ba) / 2 * spacing)


@dataclass
class MetricRow:
    method: str
    transform_model: str
    phase: str  # "before" | "after" | "single" for Id and oracle rows
    dice_mean: float
    dice_std: float
    asd_mean: float
    asd_std: float
    n_pairs: int


@dataclass
class SuiteResult:
    rows: list
    per_pair_dice: dict  # (method, phase) -> list of per-pair Dice values

    def row(self, method: str, phase: str) -> MetricRow:
        for r in self.rows:
            if r.method == method and r.phase == phase:
                return r
        raise KeyError(f"no row for {method!r}/{phase!r}")

    def dice_values(self, method: str, phase: str) -> np.ndarray:
        return np.asarray(self.per_pair_dice[(method, phase)])

    def to_dict(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows]}


def _metric_row(method, transform_model, phase, warped_list, s_f_list) -> tuple[MetricRow, list]:
    dices = [dice(w, s) for w, s in zip(warped_list, s_f_list)]
    asds = [asd(w, s) for w, s in zip(warped_list, s_f_list)]
    row = MetricRow(
        method=method,
        transform_model=transform_model,
        phase=phase,
        dice_mean=float(np.mean(dices)),
        dice_std=float(np.std(dices)),
        asd_mean=float(np.mean(asds)),
        asd_std=float(np.std(asds)),
        n_pairs=len(dices),
    )
    return row, dices


def evaluate_suite(
    models: list[ModelBundle],
    test_data,
    refine_cfg=None,
    out_dir=None,
    *,
    oracle_cfg=None,
    include_intensity_oracle: bool = True,
    progress: bool = False,
) -> SuiteResult:
    """Before/after-refinement comparison of several models on one test set.

    ``test_data`` is a dataset directory or a list of samples; all bundles
    must share the transform model and training resolution. Writes
    ``table.json``, ``table.csv`` and a bar plot when ``out_dir`` is given.
    """
    from .refine import ExternalRefineConfig, RefineConfig, optimize_params_batch, refine
    from .synthdata import read_dataset
    from .training import fields_from_raw, prediction_field

    refine_cfg = refine_cfg or RefineConfig()
    oracle_cfg = oracle_cfg or ExternalRefineConfig()
    samples = read_dataset(test_data) if not isinstance(test_data, list) else test_data
    if any(s.S_M is None or s.S_F is None for s in samples):
        raise DataError("evaluation needs SoI maps on every test sample")
    if models:
        shapes = {tuple(b.image_shape) for b in models}
        kinds = {b.transform_model for b in models}
        if len(shapes) > 1 or len(kinds) > 1:
            raise ValueError("all models must share the transform model and resolution")
        transform_model = models[0].transform_model
    else:
        transform_model = "affine"

    s_m = torch.stack([s.S_M.data.to(NET_DTYPE) for s in samples])[:, None]
    s_f = torch.stack([s.S_F.data.to(NET_DTYPE) for s in samples])[:, None]
    m_img = torch.stack([s.M.data.to(NET_DTYPE) for s in samples])[:, None]
    f_img = torch.stack([s.F.data.to(NET_DTYPE) for s in samples])[:, None]
    s_f_list = [t[0] for t in s_f]

    rows: list[MetricRow] = []
    per_pair: dict = {}

    def add(method, phase, warped_list):
        row, dices = _metric_row(method, transform_model, phase, warped_list, s_f_list)
        rows.append(row)
        per_pair[(method, phase)] = dices

    add("Id", "single", [t[0] for t in s_m])

    for bundle in models:
        name = bundle.variant
        if progress:
            print(f"[evaluate] {name}: one-pass predictions")
        warped_before = []
        for i, s in enumerate(samples):
            fld = prediction_field(bundle, s.M, s.F)
            warped_before.append(warp(s_m[i][None], fld.coords[None].to(NET_DTYPE))[0, 0])
        add(name, "before", warped_before)

        if progress:
            print(f"[evaluate] {name}: per-pair refinement")
        warped_after = []
        for i, s in enumerate(samples):
            params, _ = refine(bundle, s.M, s.F, refine_cfg)
            fld = prediction_field(bundle, s.M, s.F, params)
            warped_after.append(warp(s_m[i][None], fld.coords[None].to(NET_DTYPE))[0, 0])
        add(name, "after", warped_after)

    settings = dict(
        transform_model=transform_model,
        affine_bounds=models[0].affine_bounds if models else None,
        bspline_spacing=models[0].bspline_spacing if models else 8.0,
        bspline_max_disp=models[0].bspline_max_disp if models else 4.0,
    )
    if settings["affine_bounds"] is None:
        from .transform import AffineBounds

        settings["affine_bounds"] = AffineBounds()

    if progress:
        print("[evaluate] structure oracle")
    raws, _ = optimize_params_batch(s_m, s_f, cfg=oracle_cfg, **settings)
    fields, _ = fields_from_raw(_OracleSettings(**settings), raws, tuple(s_m.shape[-2:]), None)
    warped = warp(s_m, fields)
    add("SoI", "single", [t[0] for t in warped])

    if include_intensity_oracle:
        if progress:
            print("[evaluate] intensity oracle")
        raws, _ = optimize_params_batch(m_img, f_img, cfg=oracle_cfg, **settings)
        fields, _ = fields_from_raw(_OracleSettings(**settings), raws, tuple(s_m.shape[-2:]), None)
        warped = warp(s_m, fields)
        add("intensity-oracle", "single", [t[0] for t in warped])

    result = SuiteResult(rows=rows, per_pair_dice=per_pair)
    if out_dir is not None:
        write_table(result, out_dir)
    return result


@dataclass(frozen=True)
class _OracleSettings:
    transform_model: str
    affine_bounds: object
    bspline_spacing: float
    bspline_max_disp: float


def write_table(result: SuiteResult, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "table.json").write_text(json.dumps(result.to_dict(), indent=2) + "\n")
    with open(out_dir / "table.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["method", "transform_model", "phase", "dice_mean", "dice_std", "asd_mean", "asd_std", "n_pairs"]
        )
        for r in result.rows:
            writer.writerow(
                [r.method, r.transform_model, r.phase, f"{r.dice_mean:.4f}", f"{r.dice_std:.4f}", f"{r.asd_mean:.4f}", f"{r.asd_std:.4f}", r.n_pairs]
            )
    from .viz import save_comparison_plot

    save_comparison_plot(result, out_dir / "comparison.png")
