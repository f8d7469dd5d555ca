"""Time-varying offsets from a learnable Gaussian-bump basis.

Each attribute group (position, rotation, scale, opacity) of each Gaussian
carries B basis functions b_j(t) = exp(-(t - center_j)^2 / (2 width_j^2))
with per-channel weights; the offset added to the unconstrained canonical
parameter is sum_j weight_j * b_j(t).  Times are window-normalized to [0, 1].
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .scene import GaussianSet

GROUPS = ("position", "rotation", "scale", "opacity")
CHANNELS = {"position": 3, "rotation": 4, "scale": 3, "opacity": 1}

# raw GaussianSet field backing each group
GROUP_FIELDS = {
    "position": "positions",
    "rotation": "rot_params",
    "scale": "log_scales",
    "opacity": "opacity_logits",
}


@dataclass
class DeformationModel:
    """Basis coefficients per Gaussian and attribute group.

    weights[g]: (N, B, C) channel weights
    centers[g]: (N, B) bump centers in [0, 1]
    widths[g]:  (N, B) bump standard deviations, > 0
    """

    weights: dict
    centers: dict
    widths: dict

    def __post_init__(self):
        n = b = None
        for g in GROUPS:
            w, c, s = self.weights[g], self.centers[g], self.widths[g]
            if n is None:
                n, b = c.shape
            if c.shape != (n, b) or s.shape != (n, b) or w.shape != (n, b, CHANNELS[g]):
                raise ValidationError(f"inconsistent deformation shapes for group '{g}'")
            if np.any(s <= 0):
                raise ValidationError(f"widths must be positive in group '{g}'")
            if not np.all(np.isfinite(c)):
                raise ValidationError(f"centers must be finite in group '{g}'")

    @property
    def count(self) -> int:
        return self.centers["position"].shape[0]

    @property
    def basis_count(self) -> int:
        return self.centers["position"].shape[1]

    @classmethod
    def zero_init(cls, n: int, basis_count: int = 8) -> "DeformationModel":
        """Zero weights, uniform centers on [0, 1], widths 1/B."""
        centers = np.linspace(0.0, 1.0, basis_count)
        weights, cen, wid = {}, {}, {}
        for g in GROUPS:
            weights[g] = np.zeros((n, basis_count, CHANNELS[g]))
            cen[g] = np.tile(centers, (n, 1))
            wid[g] = np.full((n, basis_count), 1.0 / basis_count)
        return cls(weights=weights, centers=cen, widths=wid)

    def copy(self) -> "DeformationModel":
        return DeformationModel(
            weights={g: self.weights[g].copy() for g in GROUPS},
            centers={g: self.centers[g].copy() for g in GROUPS},
            widths={g: self.widths[g].copy() for g in GROUPS},
        )

    def select(self, index: np.ndarray) -> "DeformationModel":
        """Row subset / reordering, used by densification."""
        return DeformationModel(
            weights={g: self.weights[g][index] for g in GROUPS},
            centers={g: self.centers[g][index] for g in GROUPS},
            widths={g: self.widths[g][index] for g in GROUPS},
        )


@dataclass(frozen=True)
class LocalModel:
    """One window's scene: canonical Gaussians plus their deformation."""

    gaussians: GaussianSet
    deformation: DeformationModel

    def __post_init__(self):
        if self.deformation.count != self.gaussians.count:
            raise ValidationError("deformation must hold one coefficient block per Gaussian")


def _clamp_time(t: float) -> float:
    if t < 0.0 or t > 1.0:
        warnings.warn(f"deformation time {t} outside [0, 1]; clamped", stacklevel=3)
        return float(np.clip(t, 0.0, 1.0))
    return float(t)


def eval_basis(t: float, centers: np.ndarray, widths: np.ndarray) -> np.ndarray:
    """Bump values b_j(t) = exp(-(t - c_j)^2 / (2 w_j^2))."""
    if np.any(widths <= 0):
        raise ValidationError("basis widths must be positive")
    t = _clamp_time(t)
    d = t - centers
    return np.exp(-(d * d) / (2.0 * widths * widths))


def deform(g: GaussianSet, d: DeformationModel, t: float) -> GaussianSet:
    """Apply the time-t offsets in unconstrained parameter space.

    Returns a new GaussianSet whose raw parameters include the offsets;
    activation happens downstream as usual.
    """
    if d.count != g.count:
        raise ValidationError(
            f"deformation sized for {d.count} Gaussians, set has {g.count}"
        )
    t = _clamp_time(t)
    fields = {}
    for grp in GROUPS:
        b = eval_basis(t, d.centers[grp], d.widths[grp])        # (N, B)
        offset = np.einsum("nb,nbc->nc", b, d.weights[grp])      # (N, C)
        base = getattr(g, GROUP_FIELDS[grp])
        if base.ndim == 1:
            fields[GROUP_FIELDS[grp]] = base + offset[:, 0]
        else:
            fields[GROUP_FIELDS[grp]] = base + offset
    return GaussianSet(
        positions=fields["positions"],
        rot_params=fields["rot_params"],
        log_scales=fields["log_scales"],
        opacity_logits=fields["opacity_logits"],
        colors=g.colors,
    )


def deform_backward(g: GaussianSet, d: DeformationModel, t: float, grads: dict) -> tuple[dict, dict]:
    """Chain gradients on the deformed raw parameters back to inputs.

    grads maps raw field names ("positions", "rot_params", "log_scales",
    "opacity_logits") to arrays shaped like those fields.  Returns
    (canonical_grads, deformation_grads) where deformation_grads holds
    "weights"/"centers"/"widths" dicts keyed by group.
    """
    if d.count != g.count:
        raise ValidationError("deformation/model size mismatch")
    t = _clamp_time(t)
    canonical = {}
    dw, dc, ds = {}, {}, {}
    for grp in GROUPS:
        field = GROUP_FIELDS[grp]
        up = grads.get(field)
        if up is None:
            continue
        up2 = up[:, None] if up.ndim == 1 else up               # (N, C)
        canonical[field] = up.copy()
        centers, widths = d.centers[grp], d.widths[grp]
        b = eval_basis(t, centers, widths)                       # (N, B)
        dw[grp] = np.einsum("nb,nc->nbc", b, up2)
        # per-basis upstream through the offset: sum_c w_bc * up_c
        per_basis = np.einsum("nbc,nc->nb", d.weights[grp], up2)  # (N, B)
        delta = t - centers
        db_dcenter = b * delta / (widths * widths)
        db_dwidth = b * delta * delta / (widths ** 3)
        dc[grp] = per_basis * db_dcenter
        ds[grp] = per_basis * db_dwidth
    return canonical, {"weights": dw, "centers": dc, "widths": ds}
