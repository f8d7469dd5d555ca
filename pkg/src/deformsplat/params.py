"""Gradient containers for the trainable parameter tree.

A parameter tree pairs the raw GaussianSet fields with the deformation
coefficient blocks.  Gradients use the same nested layout so losses can be
accumulated term by term.
"""

from __future__ import annotations

import numpy as np

from .deformation import CHANNELS, GROUPS, DeformationModel
from .scene import GaussianSet

GAUSSIAN_FIELDS = ("positions", "rot_params", "log_scales", "opacity_logits", "colors")


def zero_grads(g: GaussianSet, d: DeformationModel) -> dict:
    n, k, b = g.count, g.sh_coeff_count, d.basis_count
    return {
        "gaussians": {
            "positions": np.zeros((n, 3)),
            "rot_params": np.zeros((n, 4)),
            "log_scales": np.zeros((n, 3)),
            "opacity_logits": np.zeros(n),
            "colors": np.zeros((n, 3, k)),
        },
        "deformation": {
            "weights": {grp: np.zeros((n, b, CHANNELS[grp])) for grp in GROUPS},
            "centers": {grp: np.zeros((n, b)) for grp in GROUPS},
            "widths": {grp: np.zeros((n, b)) for grp in GROUPS},
        },
    }


def add_gaussian_grads(dst: dict, src: dict, scale: float = 1.0) -> None:
    """Accumulate raw-field gradients into dst["gaussians"]; ignores
    auxiliary keys like "payload3d" or "mean2d"."""
    for name, arr in src.items():
        if name not in dst["gaussians"]:
            continue
        dst["gaussians"][name] += scale * arr


def add_deformation_grads(dst: dict, src: dict, scale: float = 1.0) -> None:
    """Accumulate deform_backward output into dst["deformation"]."""
    for part in ("weights", "centers", "widths"):
        for grp, arr in src[part].items():
            dst["deformation"][part][grp] += scale * arr


def scale_grads(tree: dict, scale: float) -> dict:
    out = zero_like(tree)
    for name, arr in tree["gaussians"].items():
        out["gaussians"][name] = scale * arr
    for part in ("weights", "centers", "widths"):
        for grp, arr in tree["deformation"][part].items():
            out["deformation"][part][grp] = scale * arr
    return out


def zero_like(tree: dict) -> dict:
    return {
        "gaussians": {k: np.zeros_like(v) for k, v in tree["gaussians"].items()},
        "deformation": {
            part: {g: np.zeros_like(a) for g, a in tree["deformation"][part].items()}
            for part in ("weights", "centers", "widths")
        },
    }


def flatten_params(g: GaussianSet, d: DeformationModel) -> dict:
    """Name -> array view of every trainable parameter."""
    out = {name: getattr(g, name) for name in GAUSSIAN_FIELDS}
    for part, tree in (("weights", d.weights), ("centers", d.centers), ("widths", d.widths)):
        for grp in GROUPS:
            out[f"deform.{grp}.{part}"] = tree[grp]
    return out


def flatten_grads(tree: dict) -> dict:
    out = dict(tree["gaussians"])
    for part in ("weights", "centers", "widths"):
        for grp in GROUPS:
            out[f"deform.{grp}.{part}"] = tree["deformation"][part][grp]
    return out
