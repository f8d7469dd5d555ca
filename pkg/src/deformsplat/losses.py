"""Training losses: masked rendering loss, 2D trajectory supervision, and
the three neighborhood motion regularizers, each with analytic gradients.

The physics terms operate on activated states (positions and unit
quaternions); quaternion gradients are returned with respect to the unit
quaternions and the caller chains them through normalization.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import params, ssim
from .deformation import DeformationModel, deform, deform_backward
from .errors import ValidationError
from .renderer import Z_NEAR, project, render, render_backward
from .scene import Camera, GaussianSet, rotmat_grad_wrt_quat
from .initialization import TrackSet

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    lambda_rgb: float = 1.0
    lambda_track: float = 0.01
    lambda_rigid: float = 0.05
    lambda_rot: float = 0.05
    lambda_iso: float = 0.05
    lambda_mix: float = 0.2      # D-SSIM share inside the rendering loss
    lambda_w: float = 2000.0     # neighbor weight falloff, 1 / scene-unit^2
    k_neighbors: int = 8

    def __post_init__(self):
        for name in ("lambda_rgb", "lambda_track", "lambda_rigid", "lambda_rot",
                     "lambda_iso", "lambda_mix", "lambda_w"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        if self.k_neighbors < 1:
            raise ValidationError("k_neighbors must be >= 1")


@dataclass(frozen=True)
class NeighborGraph:
    """k nearest neighbors on canonical positions, self excluded."""

    idx: np.ndarray      # (N, k) neighbor indices
    weights: np.ndarray  # (N, k) exp(-lambda_w * squared distance)


def build_neighbor_graph(positions: np.ndarray, k: int, lambda_w: float) -> NeighborGraph:
    """Exact kNN by Euclidean distance, ties broken by index."""
    n = positions.shape[0]
    if n < 2:
        raise ValidationError("neighbor graph needs at least 2 points")
    k_eff = min(k, n - 1)
    idx = np.empty((n, k_eff), dtype=np.int64)
    w = np.empty((n, k_eff))
    chunk = max(1, int(2e6 // max(n, 1)))
    for lo in range(0, n, chunk):
        rows = positions[lo:lo + chunk]
        diff = rows[:, None, :] - positions[None, :, :]
        d2 = np.einsum("rnk,rnk->rn", diff, diff)
        for r in range(rows.shape[0]):
            d2[r, lo + r] = np.inf
        # stable sort keeps index order on ties
        nn = np.argsort(d2, axis=1, kind="stable")[:, :k_eff]
        idx[lo:lo + chunk] = nn
        w[lo:lo + chunk] = np.exp(-lambda_w * np.take_along_axis(d2, nn, axis=1))
    return NeighborGraph(idx=idx, weights=w)


# ---------------------------------------------------------------------------
# rendering loss
# ---------------------------------------------------------------------------

def rendering_loss(rendered: np.ndarray, observed: np.ndarray, mask: np.ndarray,
                   lambda_mix: float = 0.2):
    """(1 - lambda) L1 + lambda D-SSIM outside the tool mask.

    Masked pixels are zero-filled in both images before SSIM filtering and
    excluded from every pooling mean, which makes the loss exactly
    invariant to edits inside masked regions.

    Returns (loss, gradient w.r.t. the rendered image).
    """
    if rendered.shape != observed.shape:
        raise ValidationError("rendered/observed shapes differ")
    valid = ~mask
    n_valid = int(valid.sum())
    grad = np.zeros_like(rendered)
    if n_valid == 0:
        logger.warning("rendering_loss: every pixel masked; returning zero loss")
        return 0.0, grad
    diff = rendered - observed
    v3 = valid[:, :, None]
    l1 = float(np.abs(diff[valid]).mean())
    grad += (1.0 - lambda_mix) * np.sign(diff) * v3 / (n_valid * 3)

    rz = np.where(v3, rendered, 0.0)
    oz = np.where(v3, observed, 0.0)
    smap, cache = ssim.ssim_map(rz, oz)
    iv = valid[ssim.MARGIN:-ssim.MARGIN, ssim.MARGIN:-ssim.MARGIN]
    count = int(iv.sum()) * 3
    if count == 0:
        dssim = 0.0
    else:
        mean_ssim = float(smap[iv].sum() / count)
        dssim = (1.0 - mean_ssim) / 2.0
        grad_map = np.where(iv[:, :, None], -0.5 * lambda_mix / count, 0.0)
        grad += ssim.ssim_map_backward(cache, grad_map) * v3
    return (1.0 - lambda_mix) * l1 + lambda_mix * dssim, grad


# ---------------------------------------------------------------------------
# 2D trajectory (tracking) loss
# ---------------------------------------------------------------------------

def _bilinear_sample(img: np.ndarray, pts: np.ndarray):
    """Sample (H, W, C) at float (x, y) points; returns values and corners."""
    h, w = img.shape[:2]
    x = np.clip(pts[:, 0], 0.0, w - 1.0)
    y = np.clip(pts[:, 1], 0.0, h - 1.0)
    x0 = np.clip(np.floor(x).astype(int), 0, w - 2) if w > 1 else np.zeros(len(x), int)
    y0 = np.clip(np.floor(y).astype(int), 0, h - 2) if h > 1 else np.zeros(len(y), int)
    fx, fy = x - x0, y - y0
    w00 = (1 - fx) * (1 - fy)
    w01 = fx * (1 - fy)
    w10 = (1 - fx) * fy
    w11 = fx * fy
    vals = (
        img[y0, x0] * w00[:, None]
        + img[y0, x0 + 1] * w01[:, None]
        + img[y0 + 1, x0] * w10[:, None]
        + img[y0 + 1, x0 + 1] * w11[:, None]
    )
    return vals, (y0, x0, w00, w01, w10, w11)


def _bilinear_scatter(shape, corners, grads: np.ndarray) -> np.ndarray:
    y0, x0, w00, w01, w10, w11 = corners
    out = np.zeros(shape)
    np.add.at(out, (y0, x0), grads * w00[:, None])
    np.add.at(out, (y0, x0 + 1), grads * w01[:, None])
    np.add.at(out, (y0 + 1, x0), grads * w10[:, None])
    np.add.at(out, (y0 + 1, x0 + 1), grads * w11[:, None])
    return out


def tracking_loss(
    g: GaussianSet,
    d: DeformationModel,
    cam0: Camera,
    cam_j: Camera,
    t0_norm: float,
    tj_norm: float,
    tracks: TrackSet,
    j: int,
):
    """L1 error between observed tracks at frame j and reprojected motion.

    The motion map is rasterized at the window's first view using the
    time-t0 geometry with per-Gaussian centers at time tj as payload; it is
    sampled at the visible query pixels and projected through frame j's
    camera.  Returns (loss, grad tree over canonical and deformation).
    """
    grads = params.zero_grads(g, d)
    vis = tracks.visibility[:, 0] & tracks.visibility[:, j]
    if not vis.any():
        logger.warning("tracking_loss: no visible tracks at frame %d", j)
        return 0.0, grads

    g0 = deform(g, d, t0_norm)
    gj = deform(g, d, tj_norm)
    proj = project(g0, cam0, payload3d=gj.positions)
    out = render(proj, cam0, modes=("color", "depth", "trajectory"))

    queries = tracks.query_pixels[vis]
    targets = tracks.positions[vis, j]
    xw, corners = _bilinear_sample(out.trajectory, queries)

    pc = xw @ cam_j.rotation.T + cam_j.translation
    z = pc[:, 2]
    usable = z > Z_NEAR
    if not usable.any():
        logger.warning("tracking_loss: all sampled motion points behind camera")
        return 0.0, grads
    u = cam_j.fx * pc[:, 0] / z + cam_j.cx
    v = cam_j.fy * pc[:, 1] / z + cam_j.cy
    resid = np.stack([u, v], axis=1) - targets
    n_used = int(usable.sum())
    loss = float(np.abs(resid[usable]).sum() / n_used)

    # d loss / d (u, v)
    g_uv = np.where(usable[:, None], np.sign(resid) / n_used, 0.0)
    g_pc = np.zeros_like(pc)
    g_pc[:, 0] = g_uv[:, 0] * cam_j.fx / z
    g_pc[:, 1] = g_uv[:, 1] * cam_j.fy / z
    g_pc[:, 2] = -(g_uv[:, 0] * cam_j.fx * pc[:, 0] + g_uv[:, 1] * cam_j.fy * pc[:, 1]) / z**2
    g_xw = g_pc @ cam_j.rotation
    grad_traj = _bilinear_scatter(out.trajectory.shape, corners, g_xw)

    raster_grads = render_backward(proj, cam0, grad_trajectory=grad_traj)
    payload_grad = raster_grads.pop("payload3d")

    canon0, deform0 = deform_backward(g, d, t0_norm, {
        "positions": raster_grads["positions"],
        "rot_params": raster_grads["rot_params"],
        "log_scales": raster_grads["log_scales"],
        "opacity_logits": raster_grads["opacity_logits"],
    })
    for name, arr in canon0.items():
        grads["gaussians"][name] += arr
    grads["gaussians"]["colors"] += raster_grads["colors"]
    params.add_deformation_grads(grads, deform0)

    canon_j, deform_j = deform_backward(g, d, tj_norm, {"positions": payload_grad})
    grads["gaussians"]["positions"] += canon_j["positions"]
    params.add_deformation_grads(grads, deform_j)
    return loss, grads


# ---------------------------------------------------------------------------
# physics regularizers
# ---------------------------------------------------------------------------

def _pair_arrays(graph: NeighborGraph):
    n, k = graph.idx.shape
    i = np.repeat(np.arange(n), k)
    j = graph.idx.ravel()
    w = graph.weights.ravel() / n
    return i, j, w


def _quat_right_matrix(p: np.ndarray) -> np.ndarray:
    """R(p) with q * p = R(p) q, shape (..., 4, 4)."""
    w, x, y, z = p[..., 0], p[..., 1], p[..., 2], p[..., 3]
    rows = [
        np.stack([w, -x, -y, -z], axis=-1),
        np.stack([x, w, z, -y], axis=-1),
        np.stack([y, -z, w, x], axis=-1),
        np.stack([z, y, -x, w], axis=-1),
    ]
    return np.stack(rows, axis=-2)


def _quat_left_matrix(q: np.ndarray) -> np.ndarray:
    """L(q) with q * p = L(q) p, shape (..., 4, 4)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rows = [
        np.stack([w, -x, -y, -z], axis=-1),
        np.stack([x, w, -z, y], axis=-1),
        np.stack([y, z, w, -x], axis=-1),
        np.stack([z, -y, x, w], axis=-1),
    ]
    return np.stack(rows, axis=-2)


def rigidity_loss(graph: NeighborGraph, pos_c, quat_c, pos_t, quat_t):
    """Local rigidity: neighbor offsets should rotate with each Gaussian.

    All quaternions must be unit-norm.  Returns (loss, grads) with grads
    keyed by "pos_c", "quat_c", "pos_t", "quat_t".
    """
    from .scene import quat_to_rotmat

    n = pos_c.shape[0]
    i, j, w = _pair_arrays(graph)
    r_c = quat_to_rotmat(quat_c)
    r_t = quat_to_rotmat(quat_t)
    delta_r = np.einsum("nab,ncb->nac", r_t, r_c)          # R_t R_c^T
    e_c = pos_c[j] - pos_c[i]
    e_t = pos_t[j] - pos_t[i]
    rot_e = np.einsum("pab,pb->pa", delta_r[i], e_c)
    v = e_t - rot_e
    norm = np.linalg.norm(v, axis=1)
    loss = float(np.sum(w * norm))

    safe = np.where(norm > 1e-12, norm, 1.0)
    u = np.where((norm > 1e-12)[:, None], v / safe[:, None], 0.0) * w[:, None]

    g_pos_t = np.zeros_like(pos_t)
    np.add.at(g_pos_t, j, u)
    np.add.at(g_pos_t, i, -u)
    g_ec = -np.einsum("pba,pb->pa", delta_r[i], u)
    g_pos_c = np.zeros_like(pos_c)
    np.add.at(g_pos_c, j, g_ec)
    np.add.at(g_pos_c, i, -g_ec)

    g_delta_r = np.zeros((n, 3, 3))
    np.add.at(g_delta_r, i, -np.einsum("pa,pb->pab", u, e_c))
    g_rt = np.einsum("nab,ncb->nac", g_delta_r, r_c.transpose(0, 2, 1))  # dR_t = G R_c
    g_rc = np.einsum("nba,nbc->nac", g_delta_r, r_t)                      # dR_c = G^T R_t
    g_quat_t = np.einsum("nqab,nab->nq", rotmat_grad_wrt_quat(quat_t), g_rt)
    g_quat_c = np.einsum("nqab,nab->nq", rotmat_grad_wrt_quat(quat_c), g_rc)
    return loss, {"pos_c": g_pos_c, "quat_c": g_quat_c, "pos_t": g_pos_t, "quat_t": g_quat_t}


def rotation_loss(graph: NeighborGraph, quat_c, quat_t):
    """Neighbors should share the same canonical-to-observed rotation."""
    rel = np.einsum("nab,nb->na", _quat_left_matrix(quat_t), _conj(quat_c))
    sign = np.where(rel[:, 0] < 0, -1.0, 1.0)
    rel = rel * sign[:, None]

    i, j, w = _pair_arrays(graph)
    d = rel[j] - rel[i]
    loss = float(np.sum(w * np.sum(d * d, axis=1)))

    g_rel = np.zeros_like(rel)
    scaled = 2.0 * w[:, None] * d
    np.add.at(g_rel, j, scaled)
    np.add.at(g_rel, i, -scaled)
    g_rel = g_rel * sign[:, None]

    # rel = quat_t * conj(quat_c): linear in each factor
    g_quat_t = np.einsum("nba,nb->na", _quat_right_matrix(_conj(quat_c)), g_rel)
    g_conj_c = np.einsum("nba,nb->na", _quat_left_matrix(quat_t), g_rel)
    g_quat_c = _conj(g_conj_c)
    return loss, {"quat_c": g_quat_c, "quat_t": g_quat_t}


def _conj(q: np.ndarray) -> np.ndarray:
    out = q.copy()
    out[:, 1:] = -out[:, 1:]
    return out


def isometry_loss(graph: NeighborGraph, pos_c, pos_t):
    """Neighbor distances should be preserved over time (absolute difference)."""
    i, j, w = _pair_arrays(graph)
    e_c = pos_c[j] - pos_c[i]
    e_t = pos_t[j] - pos_t[i]
    n_c = np.linalg.norm(e_c, axis=1)
    n_t = np.linalg.norm(e_t, axis=1)
    diff = n_c - n_t
    loss = float(np.sum(w * np.abs(diff)))

    s = w * np.sign(diff)
    safe_c = np.where(n_c > 1e-12, n_c, 1.0)
    safe_t = np.where(n_t > 1e-12, n_t, 1.0)
    g_ec = s[:, None] * np.where((n_c > 1e-12)[:, None], e_c / safe_c[:, None], 0.0)
    g_et = -s[:, None] * np.where((n_t > 1e-12)[:, None], e_t / safe_t[:, None], 0.0)
    g_pos_c = np.zeros_like(pos_c)
    g_pos_t = np.zeros_like(pos_t)
    np.add.at(g_pos_c, j, g_ec)
    np.add.at(g_pos_c, i, -g_ec)
    np.add.at(g_pos_t, j, g_et)
    np.add.at(g_pos_t, i, -g_et)
    return loss, {"pos_c": g_pos_c, "pos_t": g_pos_t}


def total_loss(terms: dict, weights: LossWeights) -> float:
    """Weighted sum of the five loss terms; missing terms count as zero."""
    lam = {
        "rgb": weights.lambda_rgb,
        "track": weights.lambda_track,
        "rigid": weights.lambda_rigid,
        "rot": weights.lambda_rot,
        "iso": weights.lambda_iso,
    }
    return float(sum(lam[name] * value for name, value in terms.items()))
