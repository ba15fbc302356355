"""Per-pair iterative refinement of a predicted transformation.

Two routes are provided. :func:`refine` follows the trained model's own
mechanism: it copies the prediction network and takes gradient steps on the
copy's weights while the representation network stays frozen, minimising the
refinement loss between the warped moving representation and the fixed one.
:func:`refine_external` instead optimises the transformation parameters
directly (multi-restart Adam on the same loss), which is both a cheaper
cross-check and the route used for the intensity and structure oracles.

No annotations are needed for the pair being refined; the representations
come from the frozen networks. The input bundle is never modified.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import torch

from .losses import loss_refine
from .networks import NET_DTYPE, ModelBundle
from .training import fields_from_raw, prealign_matrices
from .transform import (
    AffineBounds,
    AffineParams,
    BSplineParams,
    Image,
    control_grid_shape,
    fields_from_matrices,
    warp,
)

_PERFECT_LOSS = 1e-12


@dataclass
class RefineConfig:
    max_iters: int = 500
    learning_rate: float = 1e-3
    convergence_tol: float = 1e-6  # relative loss change over the window
    window: int = 10
    log_every: int = 0

    def __post_init__(self) -> None:
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.convergence_tol < 0:
            raise ValueError("convergence_tol must be non-negative")


@dataclass
class RefineTrace:
    losses: list = field(default_factory=list)
    initial_params: object = None
    final_params: object = None
    iterations_run: int = 0
    converged: bool = False
    diagnostic: str | None = None


@dataclass
class ExternalRefineConfig:
    iters: int = 300
    learning_rate: float = 0.03
    restarts: int = 3
    init_scale: float = 0.35  # random-restart std, relative to each bound
    seed: int = 0


def _params_from_raw(bundle: ModelBundle, raw: torch.Tensor):
    from .transform import bound_raw

    if bundle.transform_model == "affine":
        return AffineParams.from_vector(bound_raw(raw, bundle.affine_bounds))
    gy, gx = control_grid_shape(bundle.image_shape, bundle.bspline_spacing)
    cap = bundle.bspline_max_disp
    grid = cap * torch.tanh(raw.reshape(gy, gx, 2) / cap)
    return BSplineParams(spacing=(bundle.bspline_spacing, bundle.bspline_spacing), grid=grid)


def _raw_from_params(bundle: ModelBundle, params) -> torch.Tensor:
    """Invert the tanh bounding, clamped strictly inside the open interval."""

    def unbound(value: torch.Tensor, bound: torch.Tensor) -> torch.Tensor:
        ratio = (value / bound).clamp(-1 + 1e-9, 1 - 1e-9)
        return bound * torch.atanh(ratio)

    if isinstance(params, AffineParams):
        vec = params.vector().to(NET_DTYPE)
        return unbound(vec, bundle.affine_bounds.vector(NET_DTYPE))
    cap = torch.tensor(bundle.bspline_max_disp, dtype=NET_DTYPE)
    return unbound(params.grid.to(NET_DTYPE), cap).reshape(-1)


def _frozen_representations(bundle: ModelBundle, m: Image, f: Image):
    """Representations and pre-alignment computed once; all gradients blocked."""
    mt = m.data.to(NET_DTYPE)[None, None]
    ft = f.data.to(NET_DTYPE)[None, None]
    with torch.no_grad():
        if bundle.prealign is not None:
            mats = prealign_matrices(bundle.prealign, mt, ft)
            m_in = warp(mt, fields_from_matrices(mats, tuple(m.shape)))
        else:
            mats = None
            m_in = mt
        m_rep = bundle.itn(m_in) if bundle.itn is not None else m_in
        f_rep = bundle.itn(ft) if bundle.itn is not None else ft
    return m_rep, f_rep, mats


def refine(bundle: ModelBundle, m: Image, f: Image, cfg: RefineConfig = RefineConfig()):
    """Iteratively update a copy of the prediction network for one pair.

    Returns ``(params, trace)`` where ``params`` achieves the best loss seen.
    The representation network is applied once up front and never updated.
    """
    if m.shape != f.shape or tuple(m.shape) != tuple(bundle.image_shape):
        raise ValueError(f"shape mismatch: pair {m.shape} vs model {tuple(bundle.image_shape)}")
    m_rep, f_rep, mats = _frozen_representations(bundle, m, f)
    stn = copy.deepcopy(bundle.stn)
    optimizer = torch.optim.Adam(stn.parameters(), lr=cfg.learning_rate)

    trace = RefineTrace()
    best_loss = math.inf
    best_raw = None
    for it in range(cfg.max_iters):
        raw = stn(m_rep, f_rep)
        _, own = fields_from_raw(bundle, raw, tuple(m.shape), mats)
        value = loss_refine(warp(m_rep, own), f_rep)
        trace.iterations_run = it + 1
        if not torch.isfinite(value):
            trace.diagnostic = f"non-finite refinement loss at iteration {it}"
            break
        loss = float(value.detach())
        trace.losses.append(loss)
        if loss < best_loss:
            best_loss = loss
            best_raw = raw[0].detach().clone()
        if loss <= _PERFECT_LOSS:
            trace.converged = True
            break
        if it >= cfg.window:
            prev = trace.losses[-1 - cfg.window]
            if abs(prev - loss) / max(abs(prev), 1e-30) < cfg.convergence_tol:
                trace.converged = True
                break
        optimizer.zero_grad()
        value.backward()
        optimizer.step()
        if cfg.log_every and (it + 1) % cfg.log_every == 0:
            print(f"  refine iter {it + 1}: loss={loss:.3e}")

    if best_raw is None:  # never saw a finite loss: fall back to the identity
        best_raw = torch.zeros(bundle.n_params, dtype=NET_DTYPE)
    params = _params_from_raw(bundle, best_raw)
    with torch.no_grad():
        initial_raw = bundle.stn(m_rep, f_rep)[0]
        if not torch.isfinite(initial_raw).all():
            initial_raw = torch.zeros_like(initial_raw)
    trace.initial_params = _params_from_raw(bundle, initial_raw)
    trace.final_params = params
    return params, trace


def optimize_params_batch(
    m_reps: torch.Tensor,
    f_reps: torch.Tensor,
    *,
    transform_model: str,
    affine_bounds: AffineBounds,
    bspline_spacing: float = 8.0,
    bspline_max_disp: float = 4.0,
    cfg: ExternalRefineConfig = ExternalRefineConfig(),
    init_raw: torch.Tensor | None = None,
    prealign_mats: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Direct multi-restart optimisation of raw parameters for a batch.

    ``m_reps`` and ``f_reps`` are (B, 1, H, W); restarts are folded into the
    batch so all pairs are optimised in one loop. Returns per-pair best raw
    vectors (B, P) and their losses (B,).
    """
    b = m_reps.shape[0]
    shape = tuple(m_reps.shape[-2:])
    if transform_model == "affine":
        n_params = 6
        scales = affine_bounds.vector(NET_DTYPE) * cfg.init_scale
    else:
        gy, gx = control_grid_shape(shape, bspline_spacing)
        n_params = gy * gx * 2
        scales = torch.full((n_params,), bspline_max_disp * cfg.init_scale, dtype=NET_DTYPE)

    gen = torch.Generator().manual_seed(cfg.seed)
    starts = [init_raw if init_raw is not None else torch.zeros(b, n_params, dtype=NET_DTYPE)]
    if cfg.restarts >= 2:
        starts.append(torch.zeros(b, n_params, dtype=NET_DTYPE))
    while len(starts) < cfg.restarts:
        starts.append(torch.randn(b, n_params, generator=gen, dtype=NET_DTYPE) * scales)
    r = len(starts)
    raw = torch.cat(starts, dim=0).clone().requires_grad_(True)

    reps = m_reps.repeat(r, 1, 1, 1)
    targets = f_reps.repeat(r, 1, 1, 1)
    mats = prealign_mats.repeat(r, 1, 1) if prealign_mats is not None else None

    optimizer = torch.optim.Adam([raw], lr=cfg.learning_rate)
    best_loss = torch.full((r * b,), math.inf, dtype=torch.float64)
    best_raw = raw.detach().clone()
    for _ in range(cfg.iters):
        _, own = fields_from_raw(
            _Settings(transform_model, affine_bounds, bspline_spacing, bspline_max_disp),
            raw,
            shape,
            mats,
        )
        per_pair = ((warp(reps, own) - targets) ** 2).mean(dim=(1, 2, 3))
        tracked = per_pair.detach().double()
        finite = torch.isfinite(tracked)
        improved = finite & (tracked < best_loss)
        best_loss[improved] = tracked[improved]
        best_raw[improved] = raw.detach()[improved]
        optimizer.zero_grad()
        per_pair[finite].sum().backward()
        optimizer.step()

    by_restart = best_loss.reshape(r, b)
    winner = by_restart.argmin(dim=0)
    picked = best_raw.reshape(r, b, n_params)[winner, torch.arange(b)]
    return picked, by_restart[winner, torch.arange(b)]


@dataclass(frozen=True)
class _Settings:
    transform_model: str
    affine_bounds: AffineBounds
    bspline_spacing: float
    bspline_max_disp: float


def refine_external(
    bundle: ModelBundle, m: Image, f: Image, cfg: ExternalRefineConfig = ExternalRefineConfig()
):
    """Traditional refinement: optimise the parameters themselves.

    With an identity representation network this is plain intensity-based
    registration of (M, F); with a trained one it registers the learned
    representations. The search is seeded with the bundle's own one-pass
    prediction plus an identity start and random restarts.
    """
    if m.shape != f.shape or tuple(m.shape) != tuple(bundle.image_shape):
        raise ValueError(f"shape mismatch: pair {m.shape} vs model {tuple(bundle.image_shape)}")
    m_rep, f_rep, mats = _frozen_representations(bundle, m, f)
    with torch.no_grad():
        raw0 = bundle.stn(m_rep, f_rep)
        vec0 = _raw_from_params(bundle, _params_from_raw(bundle, raw0[0]))[None]
    picked, _ = optimize_params_batch(
        m_rep,
        f_rep,
        transform_model=bundle.transform_model,
        affine_bounds=bundle.affine_bounds,
        bspline_spacing=bundle.bspline_spacing,
        bspline_max_disp=bundle.bspline_max_disp,
        cfg=cfg,
        init_raw=vec0,
        prealign_mats=mats,
    )
    return _params_from_raw(bundle, picked[0])
