"""SSIM with an 11x11 Gaussian window (sigma 1.5) and its analytic gradient.

Local statistics come from separable Gaussian filtering; the SSIM map is
evaluated on the interior where the window fits entirely, so constant
images produce their closed-form value exactly.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ValidationError

WINDOW = 11
SIGMA = 1.5
C1 = 0.01**2
C2 = 0.03**2
MARGIN = WINDOW // 2


def gaussian_kernel(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


_KERNEL = gaussian_kernel()


def _filt(img: np.ndarray) -> np.ndarray:
    out = correlate1d(img, _KERNEL, axis=0, mode="constant")
    return correlate1d(out, _KERNEL, axis=1, mode="constant")


def _interior(img: np.ndarray) -> np.ndarray:
    return img[MARGIN:-MARGIN, MARGIN:-MARGIN]


def _embed(interior: np.ndarray, shape) -> np.ndarray:
    full = np.zeros(shape, dtype=np.float64)
    full[MARGIN:-MARGIN, MARGIN:-MARGIN] = interior
    return full


def ssim_map(x: np.ndarray, y: np.ndarray):
    """Per-pixel SSIM over the valid interior.

    x, y: (H, W) or (H, W, C).  Returns (map over (H-10, W-10[, C]), cache).
    """
    if x.shape != y.shape:
        raise ValidationError(f"image shapes differ: {x.shape} vs {y.shape}")
    if x.shape[0] < WINDOW or x.shape[1] < WINDOW:
        raise ValidationError(f"images must be at least {WINDOW}x{WINDOW} for SSIM")
    mu_x, mu_y = _filt(x), _filt(y)
    s_xx = _filt(x * x) - mu_x * mu_x
    s_yy = _filt(y * y) - mu_y * mu_y
    s_xy = _filt(x * y) - mu_x * mu_y
    mu_x, mu_y = _interior(mu_x), _interior(mu_y)
    s_xx, s_yy, s_xy = _interior(s_xx), _interior(s_yy), _interior(s_xy)
    a1 = 2.0 * mu_x * mu_y + C1
    a2 = 2.0 * s_xy + C2
    b1 = mu_x * mu_x + mu_y * mu_y + C1
    b2 = s_xx + s_yy + C2
    smap = (a1 * a2) / (b1 * b2)
    cache = {
        "x": x, "y": y, "mu_x": mu_x, "mu_y": mu_y,
        "a1": a1, "a2": a2, "b1": b1, "b2": b2, "smap": smap,
    }
    return smap, cache


def ssim_map_backward(cache: dict, grad_map: np.ndarray) -> np.ndarray:
    """Gradient of sum(grad_map * ssim_map) with respect to the first image."""
    x, y = cache["x"], cache["y"]
    mu_x, mu_y = cache["mu_x"], cache["mu_y"]
    a1, a2, b1, b2, smap = cache["a1"], cache["a2"], cache["b1"], cache["b2"], cache["smap"]
    denom = b1 * b2
    d_a1 = grad_map * a2 / denom
    d_a2 = grad_map * a1 / denom
    d_b1 = -grad_map * smap / b1
    d_b2 = -grad_map * smap / b2
    g_mu = 2.0 * (d_a1 * mu_y + d_b1 * mu_x)
    g_sxx = d_b2
    g_sxy = 2.0 * d_a2
    shape = x.shape
    # adjoint of the (symmetric) filter is the filter itself
    t_mu = _filt(_embed(g_mu, shape))
    t_sxx = _filt(_embed(g_sxx, shape))
    t_sxx_mu = _filt(_embed(2.0 * mu_x * g_sxx, shape))
    t_sxy = _filt(_embed(g_sxy, shape))
    t_sxy_mu = _filt(_embed(mu_y * g_sxy, shape))
    return t_mu + 2.0 * x * t_sxx - t_sxx_mu + y * t_sxy - t_sxy_mu
