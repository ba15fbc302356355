"""End-to-end training of the four model variants.

Each batch runs the representation network on both images (identity for the
STN-u/STN-s variants), predicts raw transformation parameters from the pair
of representations, bounds them, builds the dense sampling field, warps, and
takes one optimiser step on all trainable parameters jointly against the
variant's loss. The checkpoint with the best validation Dice is kept.

B-spline models optionally compose a frozen affine pre-alignment model: its
one-pass prediction per pair is folded into the sampling field analytically,
so images are still resampled only once.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses
from .errors import DataError, NumericError
from .evaluation import dice_batch
from .networks import NET_DTYPE, ModelBundle, build_bundle, load_bundle, save_bundle
from .synthdata import ToySample, read_dataset, read_manifest
from .transform import (
    AffineBounds,
    AffineParams,
    BSplineParams,
    DisplacementField,
    Image,
    bound_raw,
    bspline_fields_from_grids,
    compose_prealign,
    control_grid_shape,
    fields_from_matrices,
    matrix_from_vector,
    warp,
)

SUPERVISED_VARIANTS = ("STN-s", "ISTN-e", "ISTN-i")


@dataclass
class TrainConfig:
    variant: str = "ISTN-e"
    transform_model: str = "affine"
    epochs: int = 200
    batch_size: int = 16
    learning_rate: float = 1e-3
    term_weights: dict | None = None
    seed: int = 0
    dataset_dir: str | None = None
    val_dir: str | None = None
    checkpoint_dir: str | None = None
    affine_bounds: AffineBounds = field(default_factory=AffineBounds)
    bspline_spacing: float = 8.0
    bspline_max_disp: float = 4.0
    encoding: str = "binary_mask"
    prealign_checkpoint: str | None = None
    snapshot_count: int = 8

    def __post_init__(self) -> None:
        from .networks import TRANSFORM_MODELS, VARIANTS

        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.transform_model not in TRANSFORM_MODELS:
            raise ValueError(f"unknown transform model {self.transform_model!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        out["affine_bounds"] = {
            "translation": self.affine_bounds.translation,
            "rotation": self.affine_bounds.rotation,
            "log_scale": self.affine_bounds.log_scale,
            "shear": self.affine_bounds.shear,
        }
        return out


@dataclass
class TrainRecord:
    loss_history: list = field(default_factory=list)  # per-epoch mean components
    val_dice: list = field(default_factory=list)
    wall_clock_s: float = 0.0
    best_epoch: int = 0
    snapshots: list = field(default_factory=list, repr=False)  # (epoch, HxW array)

    def to_dict(self) -> dict:
        return {
            "loss_history": self.loss_history,
            "val_dice": self.val_dice,
            "wall_clock_s": self.wall_clock_s,
            "best_epoch": self.best_epoch,
        }


def _stack(samples: list[ToySample], name: str) -> torch.Tensor | None:
    arrays = [getattr(s, name) for s in samples]
    if any(a is None for a in arrays):
        return None
    return torch.stack([a.data.to(NET_DTYPE) for a in arrays])[:, None]


def prealign_matrices(prealign: ModelBundle, m: torch.Tensor, f: torch.Tensor) -> torch.Tensor:
    """Frozen one-pass affine predictions for a batch, as (B, 3, 3) matrices."""
    with torch.no_grad():
        m_rep = prealign.itn(m) if prealign.itn is not None else m
        f_rep = prealign.itn(f) if prealign.itn is not None else f
        raw = prealign.stn(m_rep, f_rep)
        vec = bound_raw(raw, prealign.affine_bounds)
        return matrix_from_vector(vec)


def fields_from_raw(
    bundle: ModelBundle,
    raw: torch.Tensor,
    shape: tuple[int, int],
    prealign_mats: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Bounded sampling fields from raw STN outputs.

    Returns ``(full, own)`` where ``own`` realises only the predicted
    transform and ``full`` additionally composes the frozen pre-alignment
    (they are the same tensor when there is none). ``full`` warps raw
    images; ``own`` warps anything already computed in pre-aligned space.
    """
    if bundle.transform_model == "affine":
        vec = bound_raw(raw, bundle.affine_bounds)
        own = fields_from_matrices(matrix_from_vector(vec), shape)
    else:
        gy, gx = control_grid_shape(shape, bundle.bspline_spacing)
        cap = bundle.bspline_max_disp
        grids = cap * torch.tanh(raw.reshape(-1, gy, gx, 2) / cap)
        spacing = (bundle.bspline_spacing, bundle.bspline_spacing)
        own = bspline_fields_from_grids(grids, spacing, shape)
    if prealign_mats is None:
        return own, own
    return compose_prealign(prealign_mats.to(own.dtype), own), own


def _batch_loss(
    bundle: ModelBundle,
    variant: str,
    m: torch.Tensor,
    f: torch.Tensor,
    s_m: torch.Tensor | None,
    s_f: torch.Tensor | None,
    m_in: torch.Tensor,
    prealign_mats: torch.Tensor | None,
    weights: dict | None,
) -> losses.LossReport:
    m_rep = bundle.itn(m_in) if bundle.itn is not None else m_in
    f_rep = bundle.itn(f) if bundle.itn is not None else f
    raw = bundle.stn(m_rep, f_rep)
    full, own = fields_from_raw(bundle, raw, tuple(m.shape[-2:]), prealign_mats)

    if variant == "STN-u":
        value = losses.loss_stn_u(warp(m, full), f)
        return losses.LossReport(total=value, components={"stn_u": value})
    if variant == "STN-s":
        value = losses.loss_stn_s(warp(s_m, full), s_f)
        return losses.LossReport(total=value, components={"stn_s": value})
    if variant == "ISTN-e":
        return losses.loss_istn_explicit(m_rep, f_rep, s_m, s_f, warp(s_m, full), weights)
    return losses.loss_istn_implicit(warp(m_rep, own), f_rep, warp(s_m, full), s_f, weights)


def _validation_dice(
    bundle: ModelBundle,
    m: torch.Tensor,
    f: torch.Tensor,
    s_m: torch.Tensor | None,
    s_f: torch.Tensor | None,
    m_in: torch.Tensor,
    prealign_mats: torch.Tensor | None,
) -> float | None:
    if s_m is None or s_f is None:
        return None
    with torch.no_grad():
        m_rep = bundle.itn(m_in) if bundle.itn is not None else m_in
        f_rep = bundle.itn(f) if bundle.itn is not None else f
        raw = bundle.stn(m_rep, f_rep)
        full, _ = fields_from_raw(bundle, raw, tuple(m.shape[-2:]), prealign_mats)
        return dice_batch(warp(s_m, full), s_f).mean().item()


def _prepare(samples, prealign):
    m = _stack(samples, "M")
    f = _stack(samples, "F")
    s_m = _stack(samples, "S_M")
    s_f = _stack(samples, "S_F")
    if prealign is not None:
        mats = prealign_matrices(prealign, m, f)
        m_in = warp(m, fields_from_matrices(mats, tuple(m.shape[-2:])))
    else:
        mats = None
        m_in = m
    return m, f, s_m, s_f, m_in, mats


def train(
    config: TrainConfig,
    train_samples: list[ToySample] | None = None,
    val_samples: list[ToySample] | None = None,
) -> tuple[ModelBundle, TrainRecord]:
    """Train one variant; returns the best-validation bundle and its record."""
    start = time.perf_counter()
    if train_samples is None:
        if config.dataset_dir is None:
            raise DataError("no training data: provide samples or a dataset_dir")
        manifest = read_manifest(config.dataset_dir)
        if manifest["encoding"]["kind"] != config.encoding:
            raise DataError(
                f"dataset encodes SoI as {manifest['encoding']['kind']!r} "
                f"but the training config expects {config.encoding!r}"
            )
        train_samples = read_dataset(config.dataset_dir)
    if val_samples is None and config.val_dir is not None:
        val_samples = read_dataset(config.val_dir)

    needs_soi = config.variant in SUPERVISED_VARIANTS
    if needs_soi and any(s.S_M is None or s.S_F is None for s in train_samples):
        raise DataError(f"variant {config.variant} needs SoI maps on every training sample")

    prealign = None
    if config.prealign_checkpoint is not None:
        prealign, _ = load_bundle(config.prealign_checkpoint)
        if prealign.transform_model != "affine":
            raise DataError("pre-alignment checkpoint must be an affine model")
        for p in prealign.stn.parameters():
            p.requires_grad_(False)
        if prealign.itn is not None:
            for p in prealign.itn.parameters():
                p.requires_grad_(False)

    shape = train_samples[0].M.shape
    bundle = build_bundle(
        config.variant,
        config.transform_model,
        shape,
        affine_bounds=config.affine_bounds,
        bspline_spacing=config.bspline_spacing,
        bspline_max_disp=config.bspline_max_disp,
        seed=config.seed,
        prealign=prealign,
    )

    m, f, s_m, s_f, m_in, mats = _prepare(train_samples, prealign)
    if val_samples:
        vm, vf, vs_m, vs_f, vm_in, vmats = _prepare(val_samples, prealign)

    params = list(bundle.stn.parameters())
    if bundle.itn is not None:
        params += list(bundle.itn.parameters())
    optimizer = torch.optim.Adam(params, lr=config.learning_rate)
    rng = np.random.default_rng(config.seed + 1)

    record = TrainRecord()
    best = (-1.0, 0, None)  # (val dice, epoch, state)
    n = m.shape[0]
    snapshot_at = set()
    if bundle.itn is not None and config.snapshot_count > 0:
        snapshot_at = set(
            int(e) for e in np.unique(np.linspace(0, config.epochs - 1, config.snapshot_count).round())
        )
    probe = (vm_in if val_samples else m_in)[:1]

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_sums: dict[str, float] = {}
        batches = 0
        for lo in range(0, n, config.batch_size):
            idx = torch.as_tensor(order[lo : lo + config.batch_size])
            optimizer.zero_grad()
            report = _batch_loss(
                bundle,
                config.variant,
                m[idx],
                f[idx],
                None if s_m is None else s_m[idx],
                None if s_f is None else s_f[idx],
                m_in[idx],
                None if mats is None else mats[idx],
                config.term_weights,
            )
            if not torch.isfinite(report.total):
                raise NumericError(
                    f"non-finite loss at epoch {epoch} batch {batches}: "
                    + ", ".join(f"{k}={v:g}" for k, v in report.item().items())
                )
            report.total.backward()
            optimizer.step()
            for key, value in report.item().items():
                epoch_sums[key] = epoch_sums.get(key, 0.0) + value
            batches += 1
        record.loss_history.append({k: v / batches for k, v in epoch_sums.items()})

        if val_samples:
            vd = _validation_dice(bundle, vm, vf, vs_m, vs_f, vm_in, vmats)
        else:
            vd = None
        record.val_dice.append(vd)
        score = vd if vd is not None else -record.loss_history[-1]["total"]
        if score > best[0]:
            best = (score, epoch, _snapshot_state(bundle))

        if epoch in snapshot_at:
            with torch.no_grad():
                rep = bundle.itn(probe)[0, 0].numpy().copy()
            record.snapshots.append((epoch, rep))

    if best[2] is not None:
        _restore_state(bundle, best[2])
        record.best_epoch = best[1]
    record.wall_clock_s = time.perf_counter() - start

    if config.checkpoint_dir is not None:
        ckpt_dir = Path(config.checkpoint_dir)
        name = f"{config.variant}-{config.transform_model}"
        save_bundle(ckpt_dir / f"{name}.ckpt", bundle, config_snapshot=config.to_dict())
        import json

        tmp = ckpt_dir / f"{name}.train.json.tmp"
        tmp.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_text(json.dumps(record.to_dict(), indent=2))
        tmp.replace(ckpt_dir / f"{name}.train.json")
    return bundle, record


def _snapshot_state(bundle: ModelBundle) -> dict:
    state = {"stn": {k: v.clone() for k, v in bundle.stn.state_dict().items()}}
    if bundle.itn is not None:
        state["itn"] = {k: v.clone() for k, v in bundle.itn.state_dict().items()}
    return state


def _restore_state(bundle: ModelBundle, state: dict) -> None:
    bundle.stn.load_state_dict(state["stn"])
    if bundle.itn is not None:
        bundle.itn.load_state_dict(state["itn"])


def predict(bundle: ModelBundle, m: Image, f: Image):
    """One-pass prediction for a single pair.

    Returns ``(params, m_rep, f_rep)``: the bounded transformation
    parameters and the two representation images (copies of the inputs for
    identity-representation variants).
    """
    if m.shape != f.shape:
        raise ValueError(f"shape mismatch: {m.shape} vs {f.shape}")
    if tuple(m.shape) != tuple(bundle.image_shape):
        raise ValueError(
            f"shape mismatch: pair is {m.shape}, model was trained at {tuple(bundle.image_shape)}"
        )
    mt = m.data.to(NET_DTYPE)[None, None]
    ft = f.data.to(NET_DTYPE)[None, None]
    with torch.no_grad():
        if bundle.prealign is not None:
            mats = prealign_matrices(bundle.prealign, mt, ft)
            m_in = warp(mt, fields_from_matrices(mats, tuple(m.shape)))
        else:
            m_in = mt
        m_rep = bundle.itn(m_in) if bundle.itn is not None else m_in
        f_rep = bundle.itn(ft) if bundle.itn is not None else ft
        raw = bundle.stn(m_rep, f_rep)
        if bundle.transform_model == "affine":
            params = AffineParams.from_vector(bound_raw(raw[0], bundle.affine_bounds))
        else:
            gy, gx = control_grid_shape(m.shape, bundle.bspline_spacing)
            cap = bundle.bspline_max_disp
            grid = cap * torch.tanh(raw[0].reshape(gy, gx, 2) / cap)
            params = BSplineParams(
                spacing=(bundle.bspline_spacing, bundle.bspline_spacing), grid=grid
            )
    return params, Image(m_rep[0, 0].double()), Image(f_rep[0, 0].double())


def prediction_field(bundle: ModelBundle, m: Image, f: Image, params=None) -> DisplacementField:
    """Full sampling field for a pair, composing any frozen pre-alignment."""
    if params is None:
        params, _, _ = predict(bundle, m, f)
    if isinstance(params, AffineParams):
        own = fields_from_matrices(matrix_from_vector(params.vector())[None], tuple(m.shape))
    else:
        own = bspline_fields_from_grids(
            params.grid[None], params.spacing, tuple(m.shape)
        )
    if bundle.prealign is not None:
        mt = m.data.to(NET_DTYPE)[None, None]
        ft = f.data.to(NET_DTYPE)[None, None]
        mats = prealign_matrices(bundle.prealign, mt, ft)
        own = compose_prealign(mats.to(own.dtype), own)
    return DisplacementField(own[0])
