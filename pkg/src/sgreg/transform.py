"""Differentiable 2D spatial transforms: bounded affine and cubic B-spline FFD.

Conventions used throughout the package:

* Normalised coordinates: the image domain is [-1, 1] per axis, with the
  centre of pixel ``i`` (out of ``N``) at ``-1 + (2 i + 1) / N``.
* Continuous pixel coordinates place the centre of pixel ``i`` at ``i``.
* A :class:`DisplacementField` stores, for every output pixel, the
  normalised *source* coordinate to sample from (backward warping).
* Coordinate order in the last axis is ``(x, y)``; arrays are indexed
  ``[y, x]``.

All operations are pure functions of their inputs and differentiable with
respect to every floating tensor argument.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

MIN_CONTROL_SPACING = 4.0
PARAM_ORDER = ("t_x", "t_y", "phi", "s_x", "s_y", "psi")


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ValueError(message)


def as_float_tensor(x, dtype: torch.dtype | None = None) -> torch.Tensor:
    t = torch.as_tensor(x)
    if not torch.is_floating_point(t):
        t = t.to(torch.float64)
    return t if dtype is None else t.to(dtype)


@dataclass(frozen=True)
class AffineBounds:
    """Half-widths of the open intervals the bounded affine parameters live in.

    Translation is in normalised units (0.5 means half the field of view),
    rotation and shear are radians, scale bounds apply to the log-scales.
    """

    translation: float = 0.5
    rotation: float = math.pi / 4
    log_scale: float = math.log(2.0)
    shear: float = math.pi / 8

    def vector(self, dtype: torch.dtype = torch.float64) -> torch.Tensor:
        b = (
            self.translation,
            self.translation,
            self.rotation,
            self.log_scale,
            self.log_scale,
            self.shear,
        )
        return torch.tensor(b, dtype=dtype)


@dataclass(eq=False)
class Image:
    """A 2D scalar grid with isotropic physical pixel spacing (mm)."""

    data: torch.Tensor
    spacing: float = 1.0

    def __post_init__(self) -> None:
        self.data = as_float_tensor(self.data)
        _require(self.data.ndim == 2, f"image must be 2D, got shape {tuple(self.data.shape)}")
        h, w = self.data.shape
        _require(h >= 8 and w >= 8, f"image must be at least 8x8, got {h}x{w}")
        _require(bool(torch.isfinite(self.data).all()), "image intensities must be finite")
        _require(self.spacing > 0, "pixel spacing must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.data.shape)  # type: ignore[return-value]


# A structure-of-interest map is image-shaped real-valued data (binary mask,
# signed distance map, or smoothed centroid map); it reuses the container.
SoIMap = Image


@dataclass(eq=False)
class DisplacementField:
    """Dense normalised source sampling coordinates, shape (H, W, d)."""

    coords: torch.Tensor

    def __post_init__(self) -> None:
        self.coords = as_float_tensor(self.coords)
        _require(
            self.coords.ndim == 3 and self.coords.shape[-1] == 2,
            f"field coords must have shape (H, W, 2), got {tuple(self.coords.shape)}",
        )
        _require(bool(torch.isfinite(self.coords).all()), "field coordinates must be finite")

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.coords.shape[:2])  # type: ignore[return-value]


@dataclass(eq=False)
class AffineParams:
    """Decomposed affine parameters: translation, rotation, log-scale, shear."""

    t: torch.Tensor
    phi: torch.Tensor
    s: torch.Tensor
    psi: torch.Tensor

    def __post_init__(self) -> None:
        self.t = as_float_tensor(self.t)
        self.phi = as_float_tensor(self.phi).reshape(())
        self.s = as_float_tensor(self.s)
        self.psi = as_float_tensor(self.psi).reshape(())
        _require(self.t.shape == (2,), "translation must be a length-2 vector")
        _require(self.s.shape == (2,), "log-scale must be a length-2 vector")
        for name, value in (("t", self.t), ("phi", self.phi), ("s", self.s), ("psi", self.psi)):
            _require(bool(torch.isfinite(value).all()), f"affine parameter {name} must be finite")

    def vector(self) -> torch.Tensor:
        """Parameters as a length-6 tensor in PARAM_ORDER (differentiable)."""
        return torch.stack([self.t[0], self.t[1], self.phi, self.s[0], self.s[1], self.psi])

    @classmethod
    def from_vector(cls, vec) -> "AffineParams":
        vec = as_float_tensor(vec)
        _require(vec.shape == (6,), f"expected 6 affine parameters, got shape {tuple(vec.shape)}")
        return cls(t=vec[0:2], phi=vec[2], s=vec[3:5], psi=vec[5])

    @classmethod
    def identity(cls, dtype: torch.dtype = torch.float64) -> "AffineParams":
        return cls.from_vector(torch.zeros(6, dtype=dtype))


@dataclass(eq=False)
class BSplineParams:
    """Cubic B-spline FFD: control-point displacements on a regular grid.

    ``grid`` has shape (G_y, G_x, 2) holding (dx, dy) displacements in
    pixels; ``spacing`` is the control-point spacing in pixels per axis,
    (s_y, s_x). The grid covers the image domain plus a one-control-point
    border on each side, see :func:`control_grid_shape`.
    """

    spacing: tuple[float, float]
    grid: torch.Tensor

    def __post_init__(self) -> None:
        if isinstance(self.spacing, (int, float)):
            self.spacing = (float(self.spacing), float(self.spacing))
        self.spacing = (float(self.spacing[0]), float(self.spacing[1]))
        _require(
            min(self.spacing) >= MIN_CONTROL_SPACING,
            f"control spacing must be at least {MIN_CONTROL_SPACING} pixels, got {self.spacing}",
        )
        self.grid = as_float_tensor(self.grid)
        _require(
            self.grid.ndim == 3 and self.grid.shape[-1] == 2,
            f"control grid must have shape (G_y, G_x, 2), got {tuple(self.grid.shape)}",
        )
        _require(bool(torch.isfinite(self.grid).all()), "control displacements must be finite")

    @classmethod
    def zeros(
        cls,
        target_shape: Sequence[int],
        spacing: float | tuple[float, float],
        dtype: torch.dtype = torch.float64,
    ) -> "BSplineParams":
        sp = (float(spacing), float(spacing)) if isinstance(spacing, (int, float)) else spacing
        gy, gx = control_grid_shape(target_shape, sp)
        return cls(spacing=sp, grid=torch.zeros(gy, gx, 2, dtype=dtype))


def bound_raw(raw: torch.Tensor, bounds: AffineBounds) -> torch.Tensor:
    """Map unbounded raw vectors (..., 6) into the open bound intervals.

    Each component goes through b * tanh(x / b), so the map is identity-like
    near zero and saturates strictly inside (-b, b).
    """
    b = bounds.vector(raw.dtype).to(raw.device)
    return b * torch.tanh(raw / b)


def bound_affine(raw, bounds: AffineBounds = AffineBounds()) -> AffineParams:
    """Squash a length-6 raw parameter vector into bounded AffineParams."""
    vec = as_float_tensor(raw)
    _require(vec.shape == (6,), f"expected 6 raw affine parameters, got shape {tuple(vec.shape)}")
    if not bool(torch.isfinite(vec).all()):
        raise ValueError("non-finite raw parameters")
    return AffineParams.from_vector(bound_raw(vec, bounds))


def matrix_from_vector(vec: torch.Tensor) -> torch.Tensor:
    """Homogeneous matrices (..., 3, 3) from parameter vectors (..., 6).

    Realises the factorisation  M_t @ R_phi @ inv(S_psi) @ D_s @ S_psi  with
    D_s = diag(exp(s)) and S_psi an x-axis shear by angle psi,
    S_psi = [[1, tan(psi)], [0, 1]].
    """
    tx, ty, phi, sx, sy, psi = vec.unbind(-1)
    cos, sin = torch.cos(phi), torch.sin(phi)
    ex, ey = torch.exp(sx), torch.exp(sy)
    tan = torch.tan(psi)
    # inv(S) @ D @ S is upper triangular: [[ex, (ex - ey) tan], [0, ey]]
    a = cos * ex
    b = cos * (ex - ey) * tan - sin * ey
    c = sin * ex
    d = sin * (ex - ey) * tan + cos * ey
    zero = torch.zeros_like(tx)
    one = torch.ones_like(tx)
    rows = [
        torch.stack([a, b, tx], dim=-1),
        torch.stack([c, d, ty], dim=-1),
        torch.stack([zero, zero, one], dim=-1),
    ]
    return torch.stack(rows, dim=-2)


def affine_matrix(p: AffineParams) -> torch.Tensor:
    """3x3 homogeneous matrix for decomposed affine parameters."""
    return matrix_from_vector(p.vector())


def identity_coords(shape: Sequence[int], dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """Normalised pixel-centre grid, shape (H, W, 2) with (x, y) order."""
    h, w = int(shape[0]), int(shape[1])
    xs = (2 * torch.arange(w, dtype=dtype) + 1) / w - 1
    ys = (2 * torch.arange(h, dtype=dtype) + 1) / h - 1
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy], dim=-1)


def apply_matrix(matrix: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Apply a homogeneous (3, 3) matrix to points (..., 2)."""
    lin = matrix[..., :2, :2]
    off = matrix[..., :2, 2]
    return coords @ lin.transpose(-1, -2) + off


def affine_to_field(matrix: torch.Tensor, target_shape: Sequence[int]) -> DisplacementField:
    """Dense sampling field realising an affine map on the pixel lattice."""
    matrix = as_float_tensor(matrix)
    _require(matrix.shape == (3, 3), f"expected a 3x3 homogeneous matrix, got {tuple(matrix.shape)}")
    base = identity_coords(target_shape, dtype=matrix.dtype)
    return DisplacementField(apply_matrix(matrix, base))


def map_field(matrix: torch.Tensor, field: DisplacementField) -> DisplacementField:
    """Compose an affine with an existing field: x -> A(field(x)).

    This is how a rigid or affine pre-alignment is combined with a B-spline
    field analytically, so the image is resampled only once.
    """
    matrix = as_float_tensor(matrix)
    _require(matrix.shape == (3, 3), f"expected a 3x3 homogeneous matrix, got {tuple(matrix.shape)}")
    return DisplacementField(apply_matrix(matrix.to(field.coords.dtype), field.coords))


def control_grid_shape(
    target_shape: Sequence[int], spacing: float | tuple[float, float]
) -> tuple[int, int]:
    """Control grid size covering the image plus a one-point border per side.

    With n = ceil((N - 1) / s) cells along an axis, control points sit at
    indices -1 .. n+1 (pixel positions k*s), i.e. n + 3 points.
    """
    if isinstance(spacing, (int, float)):
        spacing = (float(spacing), float(spacing))
    h, w = int(target_shape[0]), int(target_shape[1])
    ny = max(1, math.ceil((h - 1) / spacing[0]))
    nx = max(1, math.ceil((w - 1) / spacing[1]))
    return ny + 3, nx + 3


def _cubic_bspline_weights(u: torch.Tensor) -> torch.Tensor:
    """Uniform cubic B-spline basis B_0..B_3 evaluated at fractions u in [0, 1]."""
    u2 = u * u
    u3 = u2 * u
    w0 = (1 - u) ** 3 / 6
    w1 = (3 * u3 - 6 * u2 + 4) / 6
    w2 = (-3 * u3 + 3 * u2 + 3 * u + 1) / 6
    w3 = u3 / 6
    return torch.stack([w0, w1, w2, w3], dim=-1)


def _axis_tables(pos: torch.Tensor, spacing: float, ncells: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-position control indices (.., 4) into the bordered grid and weights."""
    t = pos / spacing
    cell = torch.clamp(torch.floor(t), 0, ncells - 1)
    u = t - cell
    idx = cell.long().unsqueeze(-1) + torch.arange(4, device=pos.device)
    return idx, _cubic_bspline_weights(u)


def bspline_displacement_at(
    grid: torch.Tensor,
    spacing: tuple[float, float],
    points_px: torch.Tensor,
) -> torch.Tensor:
    """Displacement (pixels) of the FFD at arbitrary pixel positions (..., 2).

    Points are (x, y) continuous pixel coordinates; values outside the image
    domain are clamped to the nearest cell, extending the boundary patch.
    """
    gy, gx = grid.shape[0], grid.shape[1]
    ix, wx = _axis_tables(points_px[..., 0], spacing[1], gx - 3)
    iy, wy = _axis_tables(points_px[..., 1], spacing[0], gy - 3)
    patches = grid[iy.unsqueeze(-1), ix.unsqueeze(-2)]  # (..., 4, 4, 2)
    w = wy.unsqueeze(-1) * wx.unsqueeze(-2)  # (..., 4, 4)
    return (w.unsqueeze(-1) * patches).sum(dim=(-2, -3))


def bspline_to_field(p: BSplineParams, target_shape: Sequence[int]) -> DisplacementField:
    """Dense sampling field for a cubic B-spline FFD on the pixel lattice.

    The dense displacement interpolates the control displacements with the
    tensor-product cubic basis and is added to the identity grid; an all-zero
    control grid therefore yields exact identity sampling.
    """
    h, w = int(target_shape[0]), int(target_shape[1])
    expect = control_grid_shape(target_shape, p.spacing)
    got = tuple(p.grid.shape[:2])
    if got != expect:
        raise ValueError(
            "inconsistent grid/spacing/shape: expected "
            f"{expect[0]}x{expect[1]} control points for image {h}x{w} at "
            f"spacing {p.spacing}, got {got[0]}x{got[1]}"
        )
    dtype = p.grid.dtype if p.grid.is_floating_point() else torch.float64
    pts = identity_pixel_coords(target_shape, dtype=dtype)
    disp_px = bspline_displacement_at(p.grid, p.spacing, pts)
    scale = torch.tensor([2.0 / w, 2.0 / h], dtype=dtype)
    return DisplacementField(identity_coords(target_shape, dtype) + disp_px * scale)


def identity_pixel_coords(shape: Sequence[int], dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """Continuous pixel-centre coordinates, shape (H, W, 2) with (x, y) order."""
    h, w = int(shape[0]), int(shape[1])
    gy, gx = torch.meshgrid(
        torch.arange(h, dtype=dtype), torch.arange(w, dtype=dtype), indexing="ij"
    )
    return torch.stack([gx, gy], dim=-1)


def fields_from_matrices(matrices: torch.Tensor, shape: Sequence[int]) -> torch.Tensor:
    """Batched affine sampling coordinates: (B, 3, 3) -> (B, H, W, 2)."""
    base = identity_coords(shape, dtype=matrices.dtype)
    lin = matrices[:, :2, :2]
    off = matrices[:, :2, 2]
    return torch.einsum("bij,hwj->bhwi", lin, base) + off[:, None, None, :]


def bspline_fields_from_grids(
    grids: torch.Tensor, spacing: tuple[float, float], shape: Sequence[int]
) -> torch.Tensor:
    """Batched FFD sampling coordinates: (B, G_y, G_x, 2) -> (B, H, W, 2)."""
    h, w = int(shape[0]), int(shape[1])
    dtype = grids.dtype
    pts = identity_pixel_coords(shape, dtype=dtype)
    gy, gx = grids.shape[1], grids.shape[2]
    ix, wx = _axis_tables(pts[..., 0], spacing[1], gx - 3)
    iy, wy = _axis_tables(pts[..., 1], spacing[0], gy - 3)
    patches = grids[:, iy.unsqueeze(-1), ix.unsqueeze(-2)]  # (B, H, W, 4, 4, 2)
    weights = (wy.unsqueeze(-1) * wx.unsqueeze(-2)).unsqueeze(0).unsqueeze(-1)
    disp_px = (weights * patches).sum(dim=(-2, -3))
    scale = torch.tensor([2.0 / w, 2.0 / h], dtype=dtype)
    return identity_coords(shape, dtype)[None] + disp_px * scale


def compose_prealign(matrices: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Apply per-batch affines (B, 3, 3) to sampling coords (B, H, W, 2)."""
    lin = matrices[:, :2, :2]
    off = matrices[:, :2, 2]
    return torch.einsum("bij,bhwj->bhwi", lin, coords) + off[:, None, None, :]


def warp(images: torch.Tensor, coords: torch.Tensor, padding_value: float = 0.0) -> torch.Tensor:
    """Bilinear warp of batched images (B, C, H, W) at coords (B, H', W', 2).

    Out-of-domain coordinates produce ``padding_value``. Differentiable with
    respect to both the intensities and the coordinates.
    """
    if padding_value != 0.0:
        return warp(images - padding_value, coords) + padding_value
    return F.grid_sample(images, coords, mode="bilinear", padding_mode="zeros", align_corners=False)


def resample(img: Image, field: DisplacementField, padding_value: float = 0.0) -> Image:
    """Sample an image at the field's source coordinates (backward warping)."""
    data = img.data[None, None]
    coords = field.coords[None].to(img.data.dtype)
    out = warp(data, coords, padding_value=padding_value)
    return Image(out[0, 0], spacing=img.spacing)
