"""Synthetic registration pairs where intensity and structure disagree.

Each scene is a bright rectangular distractor (the "white box") with a thin,
darker branching tree drawn inside it; the tree is the structure of interest.
A conflict pair moves the tree and the box by two different random affines,
so the intensity-optimal alignment and the structure-optimal alignment
differ by construction. A plain pair moves the whole scene rigidly (with an
optional bounded B-spline deformation), so the two objectives agree.

Fixed images are rendered analytically by evaluating the scene through the
backward transform at supersampled pixel positions, never by resampling the
moving raster, so the stored structure masks are exact rasterisations.

All arrays are canonically quantised to a 16-bit grid at creation time,
which makes the on-disk raster round-trip bit-identical.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image as PILImage
from scipy import ndimage

from .errors import DataError
from .transform import (
    AffineBounds,
    AffineParams,
    BSplineParams,
    Image,
    affine_matrix,
    bspline_displacement_at,
    control_grid_shape,
)

BOX_INTENSITY = 1.0
TREE_INTENSITY = 0.25
BACKGROUND_INTENSITY = 0.0
SUPERSAMPLE = 4

ENCODING_KINDS = ("binary_mask", "distance_map", "centroid_map")

_QMAX = 65535
_INTENSITY_RANGE = (0.0, 1.0)
_ENCODING_RANGES = {
    "binary_mask": (0.0, 1.0),
    "distance_map": (-1.0, 1.0),
    "centroid_map": (0.0, 1.0),
}

_RASTER_NAMES = ("M", "F", "S_M", "S_F")
_GT_ORDER = "t_x t_y phi s_x s_y psi"


@dataclass(frozen=True)
class SoIEncodingKind:
    """How the structure of interest is encoded as a real-valued image."""

    kind: str = "binary_mask"
    sigma: float = 1.5  # Gaussian std in pixels, centroid maps only

    def __post_init__(self) -> None:
        if self.kind not in ENCODING_KINDS:
            raise ValueError(f"unknown SoI encoding {self.kind!r}, expected one of {ENCODING_KINDS}")
        if self.kind == "centroid_map" and not self.sigma > 0:
            raise ValueError("centroid_map encoding needs sigma > 0")

    @property
    def value_range(self) -> tuple[float, float]:
        return _ENCODING_RANGES[self.kind]


@dataclass(frozen=True)
class DatasetBounds:
    """Sampling half-widths for ground-truth transforms, per component."""

    translation: float = 0.22
    rotation: float = 0.40
    log_scale: float = 0.12
    shear: float = 0.10

    def check_within(self, limits: AffineBounds) -> None:
        pairs = (
            ("translation", self.translation, limits.translation),
            ("rotation", self.rotation, limits.rotation),
            ("log_scale", self.log_scale, limits.log_scale),
            ("shear", self.shear, limits.shear),
        )
        for name, value, limit in pairs:
            if value < 0 or value > limit:
                raise ValueError(
                    f"dataset bound {name}={value} exceeds the transform bound {limit}"
                )

    def sample_vector(self, rng: np.random.Generator) -> np.ndarray:
        lims = np.array(
            [
                self.translation,
                self.translation,
                self.rotation,
                self.log_scale,
                self.log_scale,
                self.shear,
            ]
        )
        return rng.uniform(-lims, lims)


@dataclass(frozen=True)
class DeformBounds:
    """Sampling range for an optional ground-truth B-spline deformation."""

    spacing: float = 12.0
    max_disp: float = 2.5  # pixels per control point and axis


@dataclass(frozen=True)
class SceneGeometry:
    """Shape parameters of the box-plus-tree scene, in image-relative units."""

    stroke_px: float = 5.0
    tree_levels: int = 3
    branch_angle_deg: float = 27.0
    angle_jitter_deg: float = 9.0
    length_decay: tuple[float, float] = (0.60, 0.75)
    box_area: tuple[float, float] = (0.40, 0.70)
    box_aspect: tuple[float, float] = (0.75, 1.35)


@dataclass(eq=False)
class ToySample:
    """One moving/fixed pair with SoI maps and the generating transform."""

    M: Image
    F: Image
    S_M: Image | None
    S_F: Image | None
    gt_params: AffineParams
    seed: int
    gt_deform: BSplineParams | None = None


@dataclass(eq=False)
class _Scene:
    box: tuple[float, float, float, float]  # cx, cy, width, height (pixels)
    segments: np.ndarray  # (n, 2, 2) endpoints, pixel coords (x, y)
    landmarks: np.ndarray  # (k, 2) leaf endpoints, pixel coords
    stroke_px: float


def _sample_scene(rng: np.random.Generator, shape: tuple[int, int], geom: SceneGeometry) -> _Scene:
    h, w = shape
    area = rng.uniform(*geom.box_area) * h * w
    aspect = rng.uniform(*geom.box_aspect)
    bw = min(math.sqrt(area * aspect), 0.88 * w)
    bh = min(area / bw, 0.88 * h)
    cx = w / 2 + rng.uniform(-0.04, 0.04) * w
    cy = h / 2 + rng.uniform(-0.04, 0.04) * h

    # grow a binary tree upward from the lower-middle of the box
    margin = geom.stroke_px + 1.0
    root = np.array([cx + rng.uniform(-0.08, 0.08) * bw, cy + 0.38 * bh])
    segments: list[np.ndarray] = []
    leaves: list[np.ndarray] = []

    def grow(p: np.ndarray, angle: float, length: float, level: int) -> None:
        q = p + length * np.array([math.cos(angle), math.sin(angle)])
        segments.append(np.stack([p, q]))
        if level >= geom.tree_levels:
            leaves.append(q)
            return
        spread = math.radians(geom.branch_angle_deg)
        jitter = math.radians(geom.angle_jitter_deg)
        for sign in (-1.0, 1.0):
            child = angle + sign * spread + rng.uniform(-jitter, jitter)
            grow(q, child, length * rng.uniform(*geom.length_decay), level + 1)

    trunk = 0.34 * bh * rng.uniform(0.9, 1.1)
    grow(root, -math.pi / 2 + rng.uniform(-0.12, 0.12), trunk, 1)

    segs = np.array(segments)
    marks = np.array(leaves)
    # keep every point strictly inside the box
    lo = np.array([cx - bw / 2 + margin, cy - bh / 2 + margin])
    hi = np.array([cx + bw / 2 - margin, cy + bh / 2 - margin])
    segs = np.clip(segs, lo, hi)
    marks = np.clip(marks, lo, hi)
    return _Scene(box=(cx, cy, bw, bh), segments=segs, landmarks=marks, stroke_px=geom.stroke_px)


def _dist_to_segments(pts: np.ndarray, segs: np.ndarray) -> np.ndarray:
    a = segs[None, :, 0]  # (1, S, 2)
    ab = segs[None, :, 1] - a
    ap = pts[:, None, :] - a
    denom = np.maximum((ab * ab).sum(-1), 1e-12)
    tt = np.clip((ap * ab).sum(-1) / denom, 0.0, 1.0)
    closest = a + tt[..., None] * ab
    d = np.linalg.norm(pts[:, None, :] - closest, axis=-1)
    return d.min(axis=1)


def _subpixel_positions(shape: tuple[int, int], supersample: int) -> np.ndarray:
    h, w = shape
    off = (np.arange(supersample) + 0.5) / supersample - 0.5
    ys = (np.arange(h)[:, None] + off[None, :]).reshape(-1)
    xs = (np.arange(w)[:, None] + off[None, :]).reshape(-1)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([gx, gy], axis=-1)  # (h*ss, w*ss, 2)


def _px_to_norm(pts: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    h, w = shape
    return np.stack([(2 * pts[..., 0] + 1) / w - 1, (2 * pts[..., 1] + 1) / h - 1], axis=-1)


def _norm_to_px(pts: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    h, w = shape
    return np.stack([((pts[..., 0] + 1) * w - 1) / 2, ((pts[..., 1] + 1) * h - 1) / 2], axis=-1)


def _apply_backward(
    pts_px: np.ndarray,
    shape: tuple[int, int],
    matrix: np.ndarray,
    deform: BSplineParams | None,
) -> np.ndarray:
    """Evaluate the backward map matrix @ (x + bspline(x)) at pixel points."""
    pts = pts_px
    if deform is not None:
        disp = (
            bspline_displacement_at(
                deform.grid, deform.spacing, torch.as_tensor(pts, dtype=torch.float64)
            )
            .numpy()
        )
        pts = pts + disp
    pn = _px_to_norm(pts, shape)
    mapped = pn @ matrix[:2, :2].T + matrix[:2, 2]
    return _norm_to_px(mapped, shape)


def _render(
    scene: _Scene,
    shape: tuple[int, int],
    soi_matrix: np.ndarray,
    box_matrix: np.ndarray,
    deform: BSplineParams | None = None,
    supersample: int = SUPERSAMPLE,
) -> tuple[np.ndarray, np.ndarray]:
    """Intensity image and exact SoI mask under per-primitive backward maps."""
    h, w = shape
    pos = _subpixel_positions(shape, supersample).reshape(-1, 2)

    soi_pts = _apply_backward(pos, shape, soi_matrix, deform)
    tree = _dist_to_segments(soi_pts, scene.segments) <= scene.stroke_px / 2

    if np.array_equal(box_matrix, soi_matrix):
        box_pts = soi_pts
    else:
        box_pts = _apply_backward(pos, shape, box_matrix, deform)
    cx, cy, bw, bh = scene.box
    box = (np.abs(box_pts[:, 0] - cx) <= bw / 2) & (np.abs(box_pts[:, 1] - cy) <= bh / 2)

    values = np.where(tree, TREE_INTENSITY, np.where(box, BOX_INTENSITY, BACKGROUND_INTENSITY))
    ss = supersample
    block = values.reshape(h, ss, w, ss)
    intensity = block.mean(axis=(1, 3))
    mask = tree.astype(np.float64).reshape(h, ss, w, ss).mean(axis=(1, 3)) >= 0.5
    return intensity, mask.astype(np.float64)


def _map_landmarks(
    landmarks: np.ndarray,
    shape: tuple[int, int],
    matrix: np.ndarray,
    deform: BSplineParams | None,
) -> np.ndarray:
    """Positions in the fixed image whose backward map lands on the landmarks."""
    inv = np.linalg.inv(matrix)
    zn = _px_to_norm(landmarks, shape) @ inv[:2, :2].T + inv[:2, 2]
    z = _norm_to_px(zn, shape)
    if deform is None:
        return z
    x = z.copy()
    for _ in range(4):  # fixed-point inversion of x + d(x) = z
        disp = bspline_displacement_at(
            torch.as_tensor(deform.grid), deform.spacing, torch.as_tensor(x, dtype=torch.float64)
        ).numpy()
        x = z - disp
    return x


# ---------------------------------------------------------------------------
# SoI encodings


def encode_soi(soi, kind: SoIEncodingKind, shape: tuple[int, int] | None = None) -> Image:
    """Encode a binary mask or a landmark list as a real-valued SoI map.

    Masks feed the binary and signed-distance encodings; landmark arrays of
    shape (k, 2) in pixel (x, y) coordinates feed the centroid encoding and
    require a target ``shape``.
    """
    if kind.kind == "centroid_map":
        marks = np.asarray(soi, dtype=np.float64).reshape(-1, 2)
        if marks.size == 0:
            raise ValueError("empty SoI")
        if shape is None:
            raise ValueError("centroid_map encoding needs the target image shape")
        h, w = shape
        if np.any(marks[:, 0] < -0.5) or np.any(marks[:, 0] > w - 0.5) or np.any(
            marks[:, 1] < -0.5
        ) or np.any(marks[:, 1] > h - 0.5):
            raise ValueError("landmarks must lie within the image domain")
        ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
        acc = np.zeros((h, w))
        for lx, ly in marks:
            acc += np.exp(-((xs - lx) ** 2 + (ys - ly) ** 2) / (2 * kind.sigma**2))
        return Image(torch.tensor(acc / acc.max()))

    mask = _as_binary_mask(soi)
    if not mask.any():
        raise ValueError("empty SoI")
    if kind.kind == "binary_mask":
        return Image(torch.tensor(mask.astype(np.float64)))

    # signed distance: negative inside, positive outside, normalised by the
    # image diagonal; pixels beyond the image border count as background
    inside = ndimage.distance_transform_edt(np.pad(mask, 1, constant_values=False))[1:-1, 1:-1]
    outside = ndimage.distance_transform_edt(~mask)
    signed = (outside - inside) / math.hypot(*mask.shape)
    return Image(torch.tensor(np.clip(signed, -1.0, 1.0)))


def _as_binary_mask(soi) -> np.ndarray:
    if isinstance(soi, Image):
        soi = soi.data
    arr = np.asarray(torch.as_tensor(soi).numpy() if torch.is_tensor(soi) else soi)
    if arr.ndim != 2:
        raise ValueError(f"mask must be 2D, got shape {arr.shape}")
    if not np.isin(arr, (0, 1)).all():
        raise ValueError("mask must be binary")
    return arr.astype(bool)


# ---------------------------------------------------------------------------
# pair generators


def _quantize(arr: np.ndarray, lo: float, hi: float) -> np.ndarray:
    q = np.rint((np.clip(arr, lo, hi) - lo) / (hi - lo) * _QMAX)
    return q.astype(np.uint16)


def _dequantize(q: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return lo + q.astype(np.float64) * (hi - lo) / _QMAX


def _canonical(arr: np.ndarray, value_range: tuple[float, float]) -> torch.Tensor:
    return torch.tensor(_dequantize(_quantize(arr, *value_range), *value_range))


def _generate_pair(
    seed: int,
    image_size,
    transform_bounds: DatasetBounds,
    *,
    conflict: bool,
    deform: DeformBounds | None,
    encoding: SoIEncodingKind,
    geometry: SceneGeometry,
    noise_std: float,
    affine_bounds: AffineBounds,
) -> ToySample:
    if isinstance(image_size, int):
        image_size = (image_size, image_size)
    shape = (int(image_size[0]), int(image_size[1]))
    if min(shape) < 32:
        raise ValueError(f"image_size must be at least 32, got {shape}")
    transform_bounds.check_within(affine_bounds)

    rng = np.random.default_rng(seed)
    scene = _sample_scene(rng, shape, geometry)

    gt_params = AffineParams.from_vector(transform_bounds.sample_vector(rng))
    soi_matrix = affine_matrix(gt_params).numpy()
    if conflict:
        box_params = AffineParams.from_vector(transform_bounds.sample_vector(rng))
        box_matrix = affine_matrix(box_params).numpy()
    else:
        box_matrix = soi_matrix

    gt_deform = None
    if deform is not None:
        gy, gx = control_grid_shape(shape, deform.spacing)
        grid = rng.uniform(-deform.max_disp, deform.max_disp, size=(gy, gx, 2))
        gt_deform = BSplineParams(spacing=deform.spacing, grid=torch.tensor(grid))

    eye = np.eye(3)
    m_int, m_mask = _render(scene, shape, eye, eye)
    f_int, f_mask = _render(scene, shape, soi_matrix, box_matrix, deform=gt_deform)

    if noise_std > 0:
        noise = rng.normal(0.0, noise_std, size=shape)  # shared field, keeps
        m_int = m_int + noise  # zero-bound pairs bit-identical
        f_int = f_int + noise

    if encoding.kind == "centroid_map":
        s_m = encode_soi(scene.landmarks, encoding, shape)
        f_marks = _map_landmarks(scene.landmarks, shape, soi_matrix, gt_deform)
        f_marks = np.clip(f_marks, 0.0, [shape[1] - 1.0, shape[0] - 1.0])
        s_f = encode_soi(f_marks, encoding, shape)
    else:
        s_m = encode_soi(m_mask, encoding)
        s_f = encode_soi(f_mask, encoding)

    rng_span = encoding.value_range
    return ToySample(
        M=Image(_canonical(m_int, _INTENSITY_RANGE)),
        F=Image(_canonical(f_int, _INTENSITY_RANGE)),
        S_M=Image(_canonical(s_m.data.numpy(), rng_span)),
        S_F=Image(_canonical(s_f.data.numpy(), rng_span)),
        gt_params=gt_params,
        seed=int(seed),
        gt_deform=gt_deform,
    )


def generate_conflict_pair(
    seed: int,
    image_size=48,
    transform_bounds: DatasetBounds | None = None,
    *,
    encoding: SoIEncodingKind = SoIEncodingKind(),
    geometry: SceneGeometry = SceneGeometry(),
    noise_std: float = 0.02,
    affine_bounds: AffineBounds = AffineBounds(),
) -> ToySample:
    """A pair whose tree and box move by two independent random affines.

    Aligning intensities (dominated by the box) then disagrees with aligning
    the structure of interest; ``gt_params`` stores the tree transform.
    """
    return _generate_pair(
        seed,
        image_size,
        transform_bounds or DatasetBounds(),
        conflict=True,
        deform=None,
        encoding=encoding,
        geometry=geometry,
        noise_std=noise_std,
        affine_bounds=affine_bounds,
    )


def generate_plain_pair(
    seed: int,
    image_size=48,
    transform_bounds: DatasetBounds | None = None,
    deform: DeformBounds | None = None,
    *,
    encoding: SoIEncodingKind = SoIEncodingKind(),
    geometry: SceneGeometry = SceneGeometry(),
    noise_std: float = 0.02,
    affine_bounds: AffineBounds = AffineBounds(),
) -> ToySample:
    """A pair moved by one shared affine, optionally with a B-spline deformation."""
    return _generate_pair(
        seed,
        image_size,
        transform_bounds or DatasetBounds(),
        conflict=False,
        deform=deform,
        encoding=encoding,
        geometry=geometry,
        noise_std=noise_std,
        affine_bounds=affine_bounds,
    )


# ---------------------------------------------------------------------------
# dataset files


def _png_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    PILImage.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def _read_png(path: Path) -> np.ndarray:
    if not path.exists():
        raise FileNotFoundError(f"missing raster file: {path}")
    arr = np.array(PILImage.open(io.BytesIO(path.read_bytes())))
    return arr.astype(np.uint16)


def _sample_ranges(encoding: SoIEncodingKind) -> dict:
    return {
        "M": list(_INTENSITY_RANGE),
        "F": list(_INTENSITY_RANGE),
        "S_M": list(encoding.value_range),
        "S_F": list(encoding.value_range),
    }


def _gt_text(p: AffineParams) -> str:
    return " ".join("%.17g" % v for v in p.vector().tolist()) + "\n"


def _sample_hash(quantized: dict, gt_text: str, deform: BSplineParams | None) -> str:
    digest = hashlib.sha256()
    for name in sorted(quantized):
        arr = quantized[name]
        digest.update(name.encode())
        digest.update(str(arr.shape).encode())
        digest.update(arr.astype("<u2").tobytes())
    digest.update(gt_text.encode())
    if deform is not None:
        digest.update(str(deform.spacing).encode())
        digest.update(deform.grid.numpy().astype("<f8").tobytes())
    return digest.hexdigest()


def _quantized_arrays(sample: ToySample, ranges: dict) -> dict:
    out = {}
    for name in _RASTER_NAMES:
        img = getattr(sample, name)
        if img is None:
            continue
        lo, hi = ranges[name]
        out[name] = _quantize(img.data.numpy(), lo, hi)
    return out


def write_dataset(
    samples: list[ToySample],
    directory,
    *,
    encoding: SoIEncodingKind = SoIEncodingKind(),
    kind_label: str = "conflict",
    extra_meta: dict | None = None,
) -> Path:
    """Write samples plus a manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ranges = _sample_ranges(encoding)
    has_soi = all(s.S_M is not None and s.S_F is not None for s in samples)
    entries = {}
    for sample in samples:
        sub = directory / str(sample.seed)
        sub.mkdir(parents=True, exist_ok=True)
        quantized = _quantized_arrays(sample, ranges)
        for name, arr in quantized.items():
            (sub / f"{name}.raster").write_bytes(_png_bytes(arr))
        gt = _gt_text(sample.gt_params)
        (sub / "gt.txt").write_text(gt)
        if sample.gt_deform is not None:
            np.savez(
                sub / "gt_deform.npz",
                grid=sample.gt_deform.grid.numpy(),
                spacing=np.array(sample.gt_deform.spacing),
            )
        entries[str(sample.seed)] = _sample_hash(quantized, gt, sample.gt_deform)

    shape = list(samples[0].M.shape) if samples else None
    manifest = {
        "format": "sgreg-dataset",
        "version": 1,
        "kind": kind_label,
        "encoding": {"kind": encoding.kind, "sigma": encoding.sigma},
        "image_size": shape,
        "value_ranges": ranges,
        "gt_order": _GT_ORDER,
        "has_soi": has_soi,
        "seeds": [s.seed for s in samples],
        "samples": entries,
        "meta": extra_meta or {},
    }
    manifest["dataset_hash"] = _manifest_content_hash(manifest)
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _manifest_content_hash(manifest: dict) -> str:
    body = {k: manifest[k] for k in ("kind", "encoding", "image_size", "value_ranges", "seeds", "samples")}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"missing manifest file: {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt manifest {path}: {exc}") from exc
    if manifest.get("format") != "sgreg-dataset":
        raise DataError(f"corrupt manifest {path}: unrecognised format")
    return manifest


def read_dataset(directory) -> list[ToySample]:
    """Load a dataset directory, verifying shapes and content hashes."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    expect_shape = tuple(manifest["image_size"])
    ranges = manifest["value_ranges"]
    names = _RASTER_NAMES if manifest.get("has_soi", True) else ("M", "F")
    samples = []
    for seed in manifest["seeds"]:
        sub = directory / str(seed)
        quantized = {}
        decoded = {}
        for name in names:
            arr = _read_png(sub / f"{name}.raster")
            if arr.shape != expect_shape:
                raise DataError(
                    f"shape mismatch in {sub / (name + '.raster')}: "
                    f"got {arr.shape}, manifest says {expect_shape}"
                )
            quantized[name] = arr
            lo, hi = ranges[name]
            decoded[name] = torch.tensor(_dequantize(arr, lo, hi))
        gt_path = sub / "gt.txt"
        if not gt_path.exists():
            raise FileNotFoundError(f"missing transform file: {gt_path}")
        gt_text = gt_path.read_text()
        values = [float(v) for v in gt_text.split()]
        if len(values) != 6:
            raise DataError(f"corrupt transform file {gt_path}: expected 6 values")
        deform = None
        deform_path = sub / "gt_deform.npz"
        if deform_path.exists():
            with np.load(deform_path) as data:
                deform = BSplineParams(
                    spacing=tuple(data["spacing"].tolist()), grid=torch.tensor(data["grid"])
                )
        if _sample_hash(quantized, gt_text, deform) != manifest["samples"][str(seed)]:
            raise DataError(f"corrupt sample {sub}: content hash mismatch")
        samples.append(
            ToySample(
                M=Image(decoded["M"]),
                F=Image(decoded["F"]),
                S_M=Image(decoded["S_M"]) if "S_M" in decoded else None,
                S_F=Image(decoded["S_F"]) if "S_F" in decoded else None,
                gt_params=AffineParams.from_vector(np.array(values)),
                seed=int(seed),
                gt_deform=deform,
            )
        )
    return samples
