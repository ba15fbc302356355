"""Representation and transformation-prediction networks, plus checkpoints.

The representation network (ITN) maps an image to an image of the same
shape; one shared parameter set processes both the moving and the fixed
image. The prediction network (STN) maps the 2-channel concatenation of an
image pair to a raw transformation parameter vector. Final layers are
zero-initialised so a fresh model always predicts the identity transform.

Variants: STN-u and STN-s carry no representation network (the identity
function is used), ISTN-e and ISTN-i always carry one.
"""

from __future__ import annotations

import copy
import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import DataError
from .transform import AffineBounds, Image, control_grid_shape

VARIANTS = ("STN-u", "STN-s", "ISTN-e", "ISTN-i")
TRANSFORM_MODELS = ("affine", "bspline")

NET_DTYPE = torch.float32


class Itn(nn.Module):
    """Image-to-image network with an additive identity skip connection."""

    def __init__(self, widths=(16, 32, 16)):
        super().__init__()
        layers: list[nn.Module] = []
        previous = 1
        for width in widths:
            layers += [nn.Conv2d(previous, width, 3, padding=1), nn.ReLU()]
            previous = width
        final = nn.Conv2d(previous, 1, 3, padding=1)
        nn.init.zeros_(final.weight)
        nn.init.zeros_(final.bias)
        layers.append(final)
        self.stack = nn.Sequential(*layers)
        self.widths = tuple(widths)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.stack(x)


class Stn(nn.Module):
    """Image-pair to raw parameter vector: strided convs, GAP, two FC layers."""

    def __init__(self, n_params: int, widths=(16, 32, 64), fc_width: int = 64):
        super().__init__()
        convs: list[nn.Module] = []
        previous = 2
        for width in widths:
            convs += [nn.Conv2d(previous, width, 3, stride=2, padding=1), nn.ReLU()]
            previous = width
        self.features = nn.Sequential(*convs)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc1 = nn.Linear(previous, fc_width)
        self.fc2 = nn.Linear(fc_width, n_params)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)
        self.n_params = n_params
        self.widths = tuple(widths)
        self.fc_width = fc_width

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
        x = torch.cat([a, b], dim=1)
        x = self.pool(self.features(x)).flatten(1)
        return self.fc2(torch.relu(self.fc1(x)))


@dataclass(eq=False)
class ModelBundle:
    """A trained (or fresh) model: networks plus everything needed to warp.

    ``itn`` is None for the identity-representation variants. For B-spline
    bundles, ``prealign`` optionally holds a frozen affine bundle whose
    one-pass prediction is composed with the B-spline field analytically.
    """

    variant: str
    transform_model: str
    stn: Stn
    itn: Itn | None = None
    affine_bounds: AffineBounds = field(default_factory=AffineBounds)
    bspline_spacing: float = 8.0
    bspline_max_disp: float = 4.0
    image_shape: tuple[int, int] = (48, 48)
    prealign: "ModelBundle | None" = None

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.transform_model not in TRANSFORM_MODELS:
            raise ValueError(
                f"unknown transform model {self.transform_model!r}, expected one of {TRANSFORM_MODELS}"
            )
        if self.variant.startswith("ISTN") and self.itn is None:
            raise ValueError(f"variant {self.variant} requires a representation network")

    @property
    def n_params(self) -> int:
        if self.transform_model == "affine":
            return 6
        gy, gx = control_grid_shape(self.image_shape, self.bspline_spacing)
        return gy * gx * 2

    def clone(self) -> "ModelBundle":
        return copy.deepcopy(self)


def build_bundle(
    variant: str,
    transform_model: str = "affine",
    image_shape=(48, 48),
    *,
    affine_bounds: AffineBounds = AffineBounds(),
    bspline_spacing: float = 8.0,
    bspline_max_disp: float = 4.0,
    itn_widths=(16, 32, 16),
    stn_widths=(16, 32, 64),
    fc_width: int = 64,
    seed: int = 0,
    prealign: ModelBundle | None = None,
) -> ModelBundle:
    """Construct a fresh bundle with seeded initialisation.

    The probe forward pass asserts the ITN's shape contract at build time.
    """
    image_shape = (int(image_shape[0]), int(image_shape[1]))
    if transform_model == "affine":
        n_params = 6
    else:
        gy, gx = control_grid_shape(image_shape, bspline_spacing)
        n_params = gy * gx * 2
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        itn = Itn(itn_widths).to(NET_DTYPE) if variant.startswith("ISTN") else None
        stn = Stn(n_params, stn_widths, fc_width).to(NET_DTYPE)
    if itn is not None:
        probe = torch.zeros(1, 1, *image_shape, dtype=NET_DTYPE)
        out = itn(probe)
        if out.shape != probe.shape:
            raise ValueError(
                f"representation network broke the shape contract: {tuple(probe.shape)} -> {tuple(out.shape)}"
            )
    return ModelBundle(
        variant=variant,
        transform_model=transform_model,
        stn=stn,
        itn=itn,
        affine_bounds=affine_bounds,
        bspline_spacing=bspline_spacing,
        bspline_max_disp=bspline_max_disp,
        image_shape=image_shape,
        prealign=prealign,
    )


def itn_forward(itn: Itn | None, img: Image) -> Image:
    """Apply the representation network to a single image (identity if None)."""
    if itn is None:
        return Image(img.data.clone(), spacing=img.spacing)
    with torch.no_grad():
        out = itn(img.data.to(NET_DTYPE)[None, None])[0, 0]
    return Image(out.to(img.data.dtype), spacing=img.spacing)


def stn_forward(stn: Stn, a: Image, b: Image) -> torch.Tensor:
    """Raw, unbounded parameter vector for a single image pair."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    with torch.no_grad():
        raw = stn(a.data.to(NET_DTYPE)[None, None], b.data.to(NET_DTYPE)[None, None])
    return raw[0]


# ---------------------------------------------------------------------------
# checkpoints: a zip of raw little-endian arrays plus one JSON metadata entry


def _arch_meta(bundle: ModelBundle) -> dict:
    meta = {
        "variant": bundle.variant,
        "transform_model": bundle.transform_model,
        "affine_bounds": {
            "translation": bundle.affine_bounds.translation,
            "rotation": bundle.affine_bounds.rotation,
            "log_scale": bundle.affine_bounds.log_scale,
            "shear": bundle.affine_bounds.shear,
        },
        "bspline_spacing": bundle.bspline_spacing,
        "bspline_max_disp": bundle.bspline_max_disp,
        "image_shape": list(bundle.image_shape),
        "stn": {"widths": list(bundle.stn.widths), "fc_width": bundle.stn.fc_width, "n_params": bundle.stn.n_params},
        "itn": {"widths": list(bundle.itn.widths)} if bundle.itn is not None else None,
        "prealign": _arch_meta(bundle.prealign) if bundle.prealign is not None else None,
    }
    return meta


def _collect_arrays(bundle: ModelBundle, prefix: str = "") -> dict:
    arrays = {}
    for name, tensor in bundle.stn.state_dict().items():
        arrays[f"{prefix}stn.{name}"] = tensor.numpy()
    if bundle.itn is not None:
        for name, tensor in bundle.itn.state_dict().items():
            arrays[f"{prefix}itn.{name}"] = tensor.numpy()
    if bundle.prealign is not None:
        arrays.update(_collect_arrays(bundle.prealign, prefix=prefix + "prealign."))
    return arrays


def save_bundle(path, bundle: ModelBundle, config_snapshot: dict | None = None) -> Path:
    """Write a checkpoint archive; atomic via write-temp-then-rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"format": "sgreg-checkpoint", "version": 1, "model": _arch_meta(bundle)}
    if config_snapshot is not None:
        meta["config"] = config_snapshot
    arrays = _collect_arrays(bundle)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        # fixed timestamps keep checkpoint bytes reproducible
        def entry(name, payload):
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, payload)

        entry("meta.json", json.dumps(meta, indent=2, sort_keys=True))
        for name, arr in sorted(arrays.items()):
            buf = io.BytesIO()
            np.save(buf, arr)
            entry(f"arrays/{name}.npy", buf.getvalue())
    tmp.replace(path)
    return path


def _rebuild(meta: dict, arrays: dict, prefix: str = "") -> ModelBundle:
    bounds = AffineBounds(**meta["affine_bounds"])
    stn = Stn(meta["stn"]["n_params"], tuple(meta["stn"]["widths"]), meta["stn"]["fc_width"]).to(NET_DTYPE)
    stn.load_state_dict(
        {
            name[len(prefix) + 4 :]: torch.tensor(arr)
            for name, arr in arrays.items()
            if name.startswith(f"{prefix}stn.")
        }
    )
    itn = None
    if meta["itn"] is not None:
        itn = Itn(tuple(meta["itn"]["widths"])).to(NET_DTYPE)
        itn.load_state_dict(
            {
                name[len(prefix) + 4 :]: torch.tensor(arr)
                for name, arr in arrays.items()
                if name.startswith(f"{prefix}itn.")
            }
        )
    prealign = None
    if meta.get("prealign") is not None:
        sub = {k: v for k, v in arrays.items() if k.startswith(f"{prefix}prealign.")}
        prealign = _rebuild(meta["prealign"], sub, prefix=prefix + "prealign.")
    return ModelBundle(
        variant=meta["variant"],
        transform_model=meta["transform_model"],
        stn=stn,
        itn=itn,
        affine_bounds=bounds,
        bspline_spacing=meta["bspline_spacing"],
        bspline_max_disp=meta["bspline_max_disp"],
        image_shape=tuple(meta["image_shape"]),
        prealign=prealign,
    )


def load_bundle(path) -> tuple[ModelBundle, dict]:
    """Load a checkpoint archive; returns the bundle and its metadata."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint file: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            arrays = {}
            for name in zf.namelist():
                if name.startswith("arrays/") and name.endswith(".npy"):
                    arrays[name[len("arrays/") : -4]] = np.load(io.BytesIO(zf.read(name)))
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"corrupt checkpoint {path}: {exc}") from exc
    if meta.get("format") != "sgreg-checkpoint":
        raise DataError(f"corrupt checkpoint {path}: unrecognised format")
    return _rebuild(meta["model"], arrays), meta


def parameter_checksum(module: nn.Module | None) -> str:
    """Order-stable digest of all parameter bytes; None hashes to 'identity'."""
    if module is None:
        return "identity"
    import hashlib

    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.numpy().astype("<f4").tobytes())
    return digest.hexdigest()
