"""Evaluation metrics: PSNR, SSIM, and the depth error/accuracy suite.

Depth metrics expect median scaling to have been applied already; tool
masks are honored by passing a validity mask.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import ssim as ssim_mod
from .errors import ValidationError

logger = logging.getLogger(__name__)

PSNR_CAP = 99.0


@dataclass(frozen=True)
class DepthMetricReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta_1: float           # fraction with max(d/d*, d*/d) < 1.25
    delta_2: float           # ... < 1.25^2
    n_excluded_log: int = 0  # pixels with pred <= 0, dropped from log/delta


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """10 log10(1 / MSE) on [0, 1] images; identical inputs return the cap."""
    if a.shape != b.shape:
        raise ValidationError(f"image shapes differ: {a.shape} vs {b.shape}")
    if mask is not None:
        valid = ~mask
        if not valid.any():
            raise ValidationError("psnr: every pixel masked")
        diff = a[valid] - b[valid]
    else:
        diff = a - b
    mse = float(np.mean(diff**2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, float(10.0 * np.log10(1.0 / mse)))


def ssim(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Mean local SSIM (11x11 Gaussian window, sigma 1.5) over the interior."""
    smap, _ = ssim_mod.ssim_map(a, b)
    if mask is None:
        return float(smap.mean())
    iv = ~mask[ssim_mod.MARGIN:-ssim_mod.MARGIN, ssim_mod.MARGIN:-ssim_mod.MARGIN]
    if not iv.any():
        raise ValidationError("ssim: every interior pixel masked")
    if smap.ndim == 3:
        return float(smap[iv].mean())
    return float(smap[iv].mean())


def median_scale(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    """Rescale pred by median(gt) / median(pred) over the valid pixels."""
    if pred.shape != gt.shape:
        raise ValidationError("depth map shapes differ")
    if valid is None:
        valid = np.isfinite(pred) & np.isfinite(gt)
    if not valid.any():
        raise ValidationError("median_scale: no valid pixels")
    mp = float(np.median(pred[valid]))
    if mp == 0.0:
        raise ValidationError("median_scale: predicted median is zero")
    return pred * (float(np.median(gt[valid])) / mp)


def depth_metrics(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray | None = None) -> DepthMetricReport:
    """Error and accuracy metrics over the valid-pixel set.

    gt must be positive on valid pixels.  Pixels with pred <= 0 are
    excluded from the log and threshold metrics, with the count reported.
    """
    if pred.shape != gt.shape:
        raise ValidationError("depth map shapes differ")
    if valid is None:
        valid = np.isfinite(pred) & np.isfinite(gt) & (gt > 0)
    d = pred[valid].astype(np.float64)
    dstar = gt[valid].astype(np.float64)
    if d.size == 0:
        raise ValidationError("depth_metrics: empty valid set")
    if np.any(dstar <= 0):
        raise ValidationError("depth_metrics: ground truth must be positive on valid pixels")
    diff = d - dstar
    abs_rel = float(np.mean(np.abs(diff) / dstar))
    sq_rel = float(np.mean(diff**2 / dstar))
    rmse = float(np.sqrt(np.mean(diff**2)))
    pos = d > 0
    n_excluded = int((~pos).sum())
    if n_excluded:
        logger.warning("depth_metrics: %d pixels with pred <= 0 excluded from log/delta", n_excluded)
    if pos.any():
        log_diff = np.log(d[pos]) - np.log(dstar[pos])
        rmse_log = float(np.sqrt(np.mean(log_diff**2)))
        ratio = np.maximum(d[pos] / dstar[pos], dstar[pos] / d[pos])
        delta_1 = float(np.mean(ratio < 1.25))
        delta_2 = float(np.mean(ratio < 1.25**2))
    else:
        rmse_log, delta_1, delta_2 = float("inf"), 0.0, 0.0
    return DepthMetricReport(
        abs_rel=abs_rel, sq_rel=sq_rel, rmse=rmse, rmse_log=rmse_log,
        delta_1=delta_1, delta_2=delta_2, n_excluded_log=n_excluded,
    )
