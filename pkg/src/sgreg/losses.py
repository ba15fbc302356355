"""Loss functions for the four training variants and test-time refinement.

Every dissimilarity is a mean-squared-error over pixels, so values are
resolution independent. Composite losses report their terms separately in a
:class:`LossReport`; term weights default to 1.0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .transform import Image


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, Image):
        return x.data
    return torch.as_tensor(x)


def mse(a, b) -> torch.Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return ((a - b) ** 2).mean()


def loss_stn_u(m_warped, f) -> torch.Tensor:
    """Unsupervised intensity loss: warped moving image vs fixed image."""
    return mse(m_warped, f)


def loss_stn_s(s_m_warped, s_f) -> torch.Tensor:
    """Structure-guided loss: warped moving SoI map vs fixed SoI map.

    The warp must be applied with the current transformation so gradients
    reach the parameters through the sampler.
    """
    return mse(s_m_warped, s_f)


def loss_itn(s_i, i_prime) -> torch.Tensor:
    """Representation loss: ITN output vs the SoI encoding of its input."""
    return mse(i_prime, s_i)


def loss_refine(m_prime_warped, f_prime) -> torch.Tensor:
    """Refinement loss between the warped and fixed learned representations.

    Only network outputs are involved, so no annotations are needed for the
    pair being refined. With an identity representation network this is
    exactly :func:`loss_stn_u`.
    """
    return mse(m_prime_warped, f_prime)


@dataclass
class LossReport:
    """A total loss plus its named, already-weighted component values."""

    total: torch.Tensor
    components: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        comp_sum = sum(float(torch.as_tensor(v).detach()) for v in self.components.values())
        if abs(float(torch.as_tensor(self.total).detach()) - comp_sum) > 1e-6:
            raise ValueError("LossReport total does not match the sum of its components")

    def item(self) -> dict:
        out = {"total": float(torch.as_tensor(self.total).detach())}
        out.update({k: float(torch.as_tensor(v).detach()) for k, v in self.components.items()})
        return out


def _weighted(components: dict, weights: dict | None) -> LossReport:
    weights = weights or {}
    scaled = {k: v * float(weights.get(k, 1.0)) for k, v in components.items()}
    total = sum(scaled.values())
    return LossReport(total=total, components=scaled)


def loss_istn_explicit(m_prime, f_prime, s_m, s_f, s_m_warped, weights=None) -> LossReport:
    """Explicit composite loss: two representation terms plus the structure term."""
    return _weighted(
        {
            "itn_m": loss_itn(s_m, m_prime),
            "itn_f": loss_itn(s_f, f_prime),
            "stn_s": loss_stn_s(s_m_warped, s_f),
        },
        weights,
    )


def loss_istn_implicit(m_prime_warped, f_prime, s_m_warped, s_f, weights=None) -> LossReport:
    """Implicit composite loss with cross terms tying representations to SoI maps."""
    return _weighted(
        {
            "stn_i_m": mse(m_prime_warped, s_f),
            "stn_i_f": mse(s_m_warped, f_prime),
            "stn_s": loss_stn_s(s_m_warped, s_f),
        },
        weights,
    )


def bending_energy(grid: torch.Tensor) -> torch.Tensor:
    """Second-difference smoothness of a control grid; optional, off by default."""
    e = grid.new_zeros(())
    if grid.shape[0] > 2:
        d2 = grid[2:] - 2 * grid[1:-1] + grid[:-2]
        e = e + (d2**2).mean()
    if grid.shape[1] > 2:
        d2 = grid[:, 2:] - 2 * grid[:, 1:-1] + grid[:, :-2]
        e = e + (d2**2).mean()
    return e
