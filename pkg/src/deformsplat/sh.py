"""Real spherical harmonics for view-dependent color, degrees 0 to 3.

Follows the common radiance-field convention: channel color is the SH dot
product plus a 0.5 offset, clamped at zero from below.
"""

from __future__ import annotations

import numpy as np

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


def degree_from_coeff_count(k: int) -> int:
    degree = int(round(np.sqrt(k))) - 1
    if (degree + 1) ** 2 != k or not (0 <= degree <= 3):
        raise ValueError(f"unsupported SH coefficient count {k}")
    return degree


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Basis values for unit directions, shape (N, 3) -> (N, (degree+1)^2)."""
    n = dirs.shape[0]
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    out = np.empty((n, (degree + 1) ** 2), dtype=np.float64)
    out[:, 0] = SH_C0
    if degree >= 1:
        out[:, 1] = -SH_C1 * y
        out[:, 2] = SH_C1 * z
        out[:, 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[:, 4] = SH_C2[0] * x * y
        out[:, 5] = SH_C2[1] * y * z
        out[:, 6] = SH_C2[2] * (2 * zz - xx - yy)
        out[:, 7] = SH_C2[3] * x * z
        out[:, 8] = SH_C2[4] * (xx - zz)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        out[:, 9] = SH_C3[0] * y * (3 * xx - yy)
        out[:, 10] = SH_C3[1] * x * y * z
        out[:, 11] = SH_C3[2] * y * (4 * zz - xx - yy)
        out[:, 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        out[:, 13] = SH_C3[4] * x * (4 * zz - xx - yy)
        out[:, 14] = SH_C3[5] * z * (xx - yy)
        out[:, 15] = SH_C3[6] * x * (xx - yy)
    return out


def sh_basis_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """d basis / d direction, shape (N, K, 3)."""
    n = dirs.shape[0]
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    zero = np.zeros(n)
    k = (degree + 1) ** 2
    g = np.zeros((n, k, 3), dtype=np.float64)
    if degree >= 1:
        g[:, 1, 1] = -SH_C1
        g[:, 2, 2] = SH_C1
        g[:, 3, 0] = -SH_C1
    if degree >= 2:
        g[:, 4] = SH_C2[0] * np.stack([y, x, zero], axis=-1)
        g[:, 5] = SH_C2[1] * np.stack([zero, z, y], axis=-1)
        g[:, 6] = SH_C2[2] * np.stack([-2 * x, -2 * y, 4 * z], axis=-1)
        g[:, 7] = SH_C2[3] * np.stack([z, zero, x], axis=-1)
        g[:, 8] = SH_C2[4] * np.stack([2 * x, zero, -2 * z], axis=-1)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        g[:, 9] = SH_C3[0] * np.stack([6 * x * y, 3 * xx - 3 * yy, zero], axis=-1)
        g[:, 10] = SH_C3[1] * np.stack([y * z, x * z, x * y], axis=-1)
        g[:, 11] = SH_C3[2] * np.stack([-2 * x * y, 4 * zz - xx - 3 * yy, 8 * y * z], axis=-1)
        g[:, 12] = SH_C3[3] * np.stack([-6 * x * z, -6 * y * z, 6 * zz - 3 * xx - 3 * yy], axis=-1)
        g[:, 13] = SH_C3[4] * np.stack([4 * zz - 3 * xx - yy, -2 * x * y, 8 * x * z], axis=-1)
        g[:, 14] = SH_C3[5] * np.stack([2 * x * z, -2 * y * z, xx - yy], axis=-1)
        g[:, 15] = SH_C3[6] * np.stack([3 * xx - yy, -2 * x * y, zero], axis=-1)
    return g


def eval_sh_color(coeffs: np.ndarray, dirs: np.ndarray | None):
    """Evaluate per-Gaussian RGB from SH coefficients.

    coeffs: (N, 3, K); dirs: (N, 3) unit view directions (ignored for K=1).
    Returns (color (N, 3), cache) where cache is used by the backward pass.
    """
    k = coeffs.shape[2]
    degree = degree_from_coeff_count(k)
    if degree == 0:
        raw = coeffs[:, :, 0] * SH_C0 + 0.5
        basis = None
    else:
        basis = sh_basis(dirs, degree)
        raw = np.einsum("nck,nk->nc", coeffs, basis) + 0.5
    color = np.maximum(raw, 0.0)
    cache = {"degree": degree, "basis": basis, "dirs": dirs, "clamped": raw < 0.0}
    return color, cache


def eval_sh_color_backward(coeffs: np.ndarray, cache: dict, grad_color: np.ndarray):
    """Gradients of the evaluated color w.r.t. coefficients and direction.

    Returns (grad_coeffs (N, 3, K), grad_dirs (N, 3) or None).
    """
    grad = np.where(cache["clamped"], 0.0, grad_color)
    degree = cache["degree"]
    if degree == 0:
        grad_coeffs = (grad * SH_C0)[:, :, None]
        return grad_coeffs, None
    basis = cache["basis"]
    grad_coeffs = np.einsum("nc,nk->nck", grad, basis)
    basis_grad = sh_basis_grad(cache["dirs"], degree)
    grad_dirs = np.einsum("nc,nck,nkd->nd", grad, coeffs, basis_grad)
    return grad_coeffs, grad_dirs


def rgb_to_sh0(rgb: np.ndarray) -> np.ndarray:
    """Degree-0 coefficient that reproduces the given color."""
    return (rgb - 0.5) / SH_C0
