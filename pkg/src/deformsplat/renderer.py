"""Differentiable software splatting of 3D Gaussians.

Forward: perspective projection with the local affine Jacobian, 16x16 tile
binning, front-to-back alpha compositing of color / view depth / alpha /
an optional 3D payload per Gaussian (used for trajectory maps).

Backward: gradients of any scalar of the output maps with respect to every
raw Gaussian parameter.  Per-pixel blending state is recomputed from the
projected scene instead of being stored, which keeps memory bounded.

Compositing semantics: contributions with alpha < 1/255 are skipped
without touching transmittance; the contribution that drives transmittance
below 1e-4 is the last one composited for its pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .scene import (
    ActivatedGaussians,
    Camera,
    GaussianSet,
    activate,
    activate_backward,
    covariance,
    quat_to_rotmat,
    rotmat_grad_wrt_quat,
)
from . import sh

TILE = 16
COV2D_REG = 0.3          # pixel^2 added to the 2D covariance diagonal
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4             # transmittance floor for early termination
Z_NEAR = 0.01
# screen-extent cull radius in standard deviations; sqrt(2 ln 255) bounds
# every skipped contribution below the alpha floor regardless of opacity
CULL_SIGMA = float(np.sqrt(2.0 * np.log(255.0)))
CHUNK = 64               # contributors composited per vectorized block


@dataclass
class RenderOutput:
    color: np.ndarray                 # (H, W, 3)
    depth: np.ndarray                 # (H, W)
    alpha: np.ndarray                 # (H, W)
    trajectory: np.ndarray | None     # (H, W, 3) or None


@dataclass
class ProjectedScene:
    """Depth-sorted, culled per-Gaussian arrays plus backward caches."""

    cam: Camera
    n_total: int
    orig_index: np.ndarray    # (M,) indices into the source GaussianSet
    tvec: np.ndarray          # (M, 3) view-space positions
    view_depth: np.ndarray    # (M,)
    mean2d: np.ndarray        # (M, 2)
    jac: np.ndarray           # (M, 2, 3)
    cov3d: np.ndarray         # (M, 3, 3)
    cov2d: np.ndarray         # (M, 2, 2)
    conic: np.ndarray         # (M, 2, 2) inverse of cov2d
    radius: np.ndarray        # (M,)
    color: np.ndarray         # (M, 3)
    opacity: np.ndarray       # (M,)
    payload3d: np.ndarray | None
    # caches for the backward pass
    quats: np.ndarray
    scales: np.ndarray
    raw_rot: np.ndarray
    raw_log_scales: np.ndarray
    raw_logits: np.ndarray
    positions: np.ndarray
    coeffs: np.ndarray
    sh_cache: dict
    sh_coeff_count: int

    @property
    def count(self) -> int:
        return self.orig_index.shape[0]


def project(
    g: GaussianSet,
    cam: Camera,
    payload3d: np.ndarray | None = None,
    z_near: float = Z_NEAR,
) -> ProjectedScene:
    """Activate, transform to view space, cull, and splat to 2D."""
    act: ActivatedGaussians = activate(g)
    n = g.count
    tvec = act.positions @ cam.rotation.T + cam.translation
    z = tvec[:, 2]
    front = z > z_near

    fx, fy = cam.fx, cam.fy
    with np.errstate(divide="ignore", invalid="ignore"):
        u = fx * tvec[:, 0] / z + cam.cx
        v = fy * tvec[:, 1] / z + cam.cy
    mean2d = np.stack([u, v], axis=1)

    jac = np.zeros((n, 2, 3))
    zs = np.where(front, z, 1.0)
    jac[:, 0, 0] = fx / zs
    jac[:, 0, 2] = -fx * tvec[:, 0] / zs**2
    jac[:, 1, 1] = fy / zs
    jac[:, 1, 2] = -fy * tvec[:, 1] / zs**2

    cov3d = covariance(act.quats, act.scales)
    m = jac @ cam.rotation
    cov2d = m @ cov3d @ m.transpose(0, 2, 1)
    cov2d[:, 0, 0] += COV2D_REG
    cov2d[:, 1, 1] += COV2D_REG

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    if np.any(front & (det <= 0)):
        raise RuntimeError("singular 2D covariance after regularization")
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = CULL_SIGMA * np.sqrt(lam_max)

    inside = (
        (mean2d[:, 0] + radius >= 0)
        & (mean2d[:, 0] - radius <= cam.width - 1)
        & (mean2d[:, 1] + radius >= 0)
        & (mean2d[:, 1] - radius <= cam.height - 1)
    )
    keep = front & inside
    idx = np.nonzero(keep)[0]
    order = idx[np.argsort(z[idx], kind="stable")]

    degree = sh.degree_from_coeff_count(g.sh_coeff_count)
    if degree > 0:
        dirs = act.positions[order] - cam.center
        dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    else:
        dirs = None
    color, sh_cache = sh.eval_sh_color(act.colors[order], dirs)

    conic = np.empty((len(order), 2, 2))
    det_o = det[order]
    conic[:, 0, 0] = c[order] / det_o
    conic[:, 1, 1] = a[order] / det_o
    conic[:, 0, 1] = conic[:, 1, 0] = -b[order] / det_o

    return ProjectedScene(
        cam=cam,
        n_total=n,
        orig_index=order,
        tvec=tvec[order],
        view_depth=z[order],
        mean2d=mean2d[order],
        jac=jac[order],
        cov3d=cov3d[order],
        cov2d=cov2d[order],
        conic=conic,
        radius=radius[order],
        color=color,
        opacity=act.opacities[order],
        payload3d=None if payload3d is None else np.asarray(payload3d)[order],
        quats=act.quats[order],
        scales=act.scales[order],
        raw_rot=g.rot_params[order],
        raw_log_scales=g.log_scales[order],
        raw_logits=g.opacity_logits[order],
        positions=act.positions[order],
        coeffs=act.colors[order],
        sh_cache=sh_cache,
        sh_coeff_count=g.sh_coeff_count,
    )


# ---------------------------------------------------------------------------
# tile binning
# ---------------------------------------------------------------------------

def _tile_lists(proj: ProjectedScene):
    """Per-tile contributor index lists, depth order preserved within a tile."""
    cam = proj.cam
    ntx = (cam.width + TILE - 1) // TILE
    nty = (cam.height + TILE - 1) // TILE
    m = proj.count
    if m == 0:
        return ntx, nty, np.zeros(0, dtype=np.int64), np.zeros(ntx * nty + 1, dtype=np.int64)
    x, y = proj.mean2d[:, 0], proj.mean2d[:, 1]
    r = proj.radius
    tx0 = np.clip(np.floor((x - r) / TILE), 0, ntx - 1).astype(np.int64)
    tx1 = np.clip(np.floor((x + r) / TILE), 0, ntx - 1).astype(np.int64)
    ty0 = np.clip(np.floor((y - r) / TILE), 0, nty - 1).astype(np.int64)
    ty1 = np.clip(np.floor((y + r) / TILE), 0, nty - 1).astype(np.int64)
    nx = tx1 - tx0 + 1
    counts = nx * (ty1 - ty0 + 1)
    total = int(counts.sum())
    gids = np.repeat(np.arange(m), counts)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local = np.arange(total) - np.repeat(offsets, counts)
    lx = local % nx[gids]
    ly = local // nx[gids]
    tile_ids = (ty0[gids] + ly) * ntx + (tx0[gids] + lx)
    # gids are already in global depth order; a stable sort by tile keeps
    # each tile's list depth-sorted
    perm = np.argsort(tile_ids, kind="stable")
    sorted_gids = gids[perm]
    starts = np.searchsorted(tile_ids[perm], np.arange(ntx * nty + 1))
    return ntx, nty, sorted_gids, starts


def _tile_pixels(tx: int, ty: int, width: int, height: int):
    xs = np.arange(tx * TILE, min((tx + 1) * TILE, width))
    ys = np.arange(ty * TILE, min((ty + 1) * TILE, height))
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    return xs, ys, np.stack([gx.ravel(), gy.ravel()], axis=1).astype(np.float64)


def _chunk_alphas(proj: ProjectedScene, ids: np.ndarray, pix: np.ndarray):
    """Raw alphas (G, P) for contributor ids at pixel locations."""
    delta = pix[None, :, :] - proj.mean2d[ids][:, None, :]          # (G, P, 2)
    con = proj.conic[ids]
    q = (
        con[:, None, 0, 0] * delta[:, :, 0] ** 2
        + 2.0 * con[:, None, 0, 1] * delta[:, :, 0] * delta[:, :, 1]
        + con[:, None, 1, 1] * delta[:, :, 1] ** 2
    )
    a = proj.opacity[ids][:, None] * np.exp(-0.5 * q)
    return a, delta


def _composite_chunk(a_raw: np.ndarray, t_run: np.ndarray, alive: np.ndarray):
    """Inclusion masks and transmittances for one contributor block.

    Returns (include (G, P), t_excl (G, P), new t_run, new alive).
    """
    gsz = a_raw.shape[0]
    a_eff = np.where(a_raw >= ALPHA_MIN, a_raw, 0.0)
    cp = np.cumprod(1.0 - a_eff, axis=0)
    t_excl = t_run[None, :] * np.concatenate([np.ones((1, a_raw.shape[1])), cp[:-1]], axis=0)
    t_incl = t_run[None, :] * cp
    # t_incl is non-increasing down the chunk, so argmax finds the first
    # contributor whose inclusion crosses the floor; it stays composited
    terminated = t_incl < T_MIN
    any_term = terminated.any(axis=0)
    first = np.where(any_term, np.argmax(terminated, axis=0), gsz)
    include = (
        (np.arange(gsz)[:, None] <= first[None, :])
        & (a_raw >= ALPHA_MIN)
        & alive[None, :]
    )
    a_inc = np.where(include, a_raw, 0.0)
    t_run = t_run * np.prod(1.0 - a_inc, axis=0)
    alive = alive & ~any_term
    return include, t_excl, t_run, alive


def render(proj: ProjectedScene, cam: Camera, modes=("color", "depth")) -> RenderOutput:
    """Composite the projected scene into output maps."""
    h, w = cam.height, cam.width
    want_traj = "trajectory" in modes
    if want_traj and proj.payload3d is None:
        raise ValidationError("trajectory mode requires a projected payload")
    color = np.zeros((h, w, 3))
    depth = np.zeros((h, w))
    alpha = np.zeros((h, w))
    traj = np.zeros((h, w, 3)) if want_traj else None
    if proj.count == 0:
        return RenderOutput(color, depth, alpha, traj)

    ntx, nty, gids, starts = _tile_lists(proj)
    for ty in range(nty):
        for tx in range(ntx):
            tid = ty * ntx + tx
            ids_all = gids[starts[tid]:starts[tid + 1]]
            if len(ids_all) == 0:
                continue
            xs, ys, pix = _tile_pixels(tx, ty, w, h)
            p = pix.shape[0]
            t_run = np.ones(p)
            alive = np.ones(p, dtype=bool)
            acc_c = np.zeros((p, 3))
            acc_d = np.zeros(p)
            acc_a = np.zeros(p)
            acc_x = np.zeros((p, 3)) if want_traj else None
            for lo in range(0, len(ids_all), CHUNK):
                ids = ids_all[lo:lo + CHUNK]
                a_raw, _ = _chunk_alphas(proj, ids, pix)
                include, t_excl, t_run, alive = _composite_chunk(a_raw, t_run, alive)
                wgt = np.where(include, a_raw * t_excl, 0.0)
                acc_c += np.einsum("gp,gc->pc", wgt, proj.color[ids])
                acc_d += np.einsum("gp,g->p", wgt, proj.view_depth[ids])
                acc_a += wgt.sum(axis=0)
                if want_traj:
                    acc_x += np.einsum("gp,gc->pc", wgt, proj.payload3d[ids])
                if not alive.any():
                    break
            sl = (slice(ys[0], ys[-1] + 1), slice(xs[0], xs[-1] + 1))
            shape2 = (len(ys), len(xs))
            color[sl] = acc_c.reshape(shape2 + (3,))
            depth[sl] = acc_d.reshape(shape2)
            alpha[sl] = acc_a.reshape(shape2)
            if want_traj:
                traj[sl] = acc_x.reshape(shape2 + (3,))
    return RenderOutput(color, depth, alpha, traj)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def render_backward(
    proj: ProjectedScene,
    cam: Camera,
    grad_color: np.ndarray | None = None,
    grad_depth: np.ndarray | None = None,
    grad_alpha: np.ndarray | None = None,
    grad_trajectory: np.ndarray | None = None,
) -> dict:
    """Gradients of sum(grad * output) w.r.t. raw Gaussian parameters.

    Returns a dict with full-size arrays for "positions", "rot_params",
    "log_scales", "opacity_logits", "colors" and, when the scene carries a
    payload, "payload3d".  Culled Gaussians receive zero gradient.
    """
    m = proj.count
    grad_mean2d = np.zeros((m, 2))
    grad_conic = np.zeros((m, 2, 2))
    grad_rgb = np.zeros((m, 3))
    grad_vdepth = np.zeros(m)
    grad_opac = np.zeros(m)
    grad_payload = np.zeros((m, 3)) if proj.payload3d is not None else None

    want_traj = grad_trajectory is not None
    if want_traj and proj.payload3d is None:
        raise ValidationError("trajectory gradient without a projected payload")

    if m > 0:
        ntx, nty, gids, starts = _tile_lists(proj)
        h, w = cam.height, cam.width
        for ty in range(nty):
            for tx in range(ntx):
                tid = ty * ntx + tx
                ids_all = gids[starts[tid]:starts[tid + 1]]
                if len(ids_all) == 0:
                    continue
                xs, ys, pix = _tile_pixels(tx, ty, w, h)
                sl = (slice(ys[0], ys[-1] + 1), slice(xs[0], xs[-1] + 1))
                gc = grad_color[sl].reshape(-1, 3) if grad_color is not None else None
                gd = grad_depth[sl].reshape(-1) if grad_depth is not None else None
                ga = grad_alpha[sl].reshape(-1) if grad_alpha is not None else None
                gx = grad_trajectory[sl].reshape(-1, 3) if want_traj else None
                _tile_backward(
                    proj, ids_all, pix, gc, gd, ga, gx,
                    grad_mean2d, grad_conic, grad_rgb, grad_vdepth,
                    grad_opac, grad_payload,
                )

    return _projection_backward(
        proj, grad_mean2d, grad_conic, grad_rgb, grad_vdepth, grad_opac, grad_payload
    )


def _tile_backward(
    proj, ids_all, pix, gc, gd, ga, gx,
    grad_mean2d, grad_conic, grad_rgb, grad_vdepth, grad_opac, grad_payload,
):
    p = pix.shape[0]
    # forward replay, keeping per-chunk state
    records = []
    t_run = np.ones(p)
    alive = np.ones(p, dtype=bool)
    final_c = np.zeros((p, 3))
    final_d = np.zeros(p)
    final_a = np.zeros(p)
    final_x = np.zeros((p, 3)) if gx is not None else None
    for lo in range(0, len(ids_all), CHUNK):
        ids = ids_all[lo:lo + CHUNK]
        a_raw, delta = _chunk_alphas(proj, ids, pix)
        include, t_excl, t_run, alive = _composite_chunk(a_raw, t_run, alive)
        wgt = np.where(include, a_raw * t_excl, 0.0)
        records.append((ids, a_raw, delta, include, t_excl, wgt))
        final_c += np.einsum("gp,gc->pc", wgt, proj.color[ids])
        final_d += np.einsum("gp,g->p", wgt, proj.view_depth[ids])
        final_a += wgt.sum(axis=0)
        if gx is not None:
            final_x += np.einsum("gp,gc->pc", wgt, proj.payload3d[ids])
        if not alive.any():
            break

    # second sweep: prefix sums give the blend behind each contributor
    pref_c = np.zeros((p, 3))
    pref_d = np.zeros(p)
    pref_a = np.zeros(p)
    pref_x = np.zeros((p, 3)) if gx is not None else None
    for ids, a_raw, delta, include, t_excl, wgt in records:
        # floor guards against alpha saturating to 1.0 in float64
        one_minus = np.where(include, np.maximum(1.0 - a_raw, 1e-15), 1.0)
        grad_a = np.zeros_like(a_raw)

        if gc is not None:
            contrib = wgt[:, :, None] * proj.color[ids][:, None, :]
            cums = np.cumsum(contrib, axis=0) + pref_c[None]
            behind = (final_c[None] - cums) / one_minus[:, :, None]
            grad_a += np.einsum(
                "pc,gpc->gp", gc,
                t_excl[:, :, None] * proj.color[ids][:, None, :] - behind,
            )
            grad_rgb_local = np.einsum("gp,pc->gc", wgt, gc)
            np.add.at(grad_rgb, ids, grad_rgb_local)
            pref_c = cums[-1]
        if gd is not None:
            contrib = wgt * proj.view_depth[ids][:, None]
            cums = np.cumsum(contrib, axis=0) + pref_d[None]
            behind = (final_d[None] - cums) / one_minus
            grad_a += gd[None] * (t_excl * proj.view_depth[ids][:, None] - behind)
            np.add.at(grad_vdepth, ids, np.einsum("gp,p->g", wgt, gd))
            pref_d = cums[-1]
        if ga is not None:
            cums = np.cumsum(wgt, axis=0) + pref_a[None]
            behind = (final_a[None] - cums) / one_minus
            grad_a += ga[None] * (t_excl - behind)
            pref_a = cums[-1]
        if gx is not None:
            contrib = wgt[:, :, None] * proj.payload3d[ids][:, None, :]
            cums = np.cumsum(contrib, axis=0) + pref_x[None]
            behind = (final_x[None] - cums) / one_minus[:, :, None]
            grad_a += np.einsum(
                "pc,gpc->gp", gx,
                t_excl[:, :, None] * proj.payload3d[ids][:, None, :] - behind,
            )
            np.add.at(grad_payload, ids, np.einsum("gp,pc->gc", wgt, gx))
            pref_x = cums[-1]

        grad_a = np.where(include, grad_a, 0.0)
        # alpha = opacity * exp(-q/2)
        gexp = a_raw / proj.opacity[ids][:, None]
        np.add.at(grad_opac, ids, (grad_a * gexp).sum(axis=1))
        grad_q = -0.5 * a_raw * grad_a
        ad = np.einsum("gij,gpj->gpi", proj.conic[ids], delta)
        np.add.at(grad_mean2d, ids, -2.0 * np.einsum("gp,gpi->gi", grad_q, ad))
        np.add.at(grad_conic, ids, np.einsum("gp,gpi,gpj->gij", grad_q, delta, delta))


def _projection_backward(
    proj, grad_mean2d, grad_conic, grad_rgb, grad_vdepth, grad_opac, grad_payload
) -> dict:
    cam = proj.cam
    n = proj.n_total
    out = {
        "positions": np.zeros((n, 3)),
        "rot_params": np.zeros((n, 4)),
        "log_scales": np.zeros((n, 3)),
        "opacity_logits": np.zeros(n),
        "colors": np.zeros((n, 3, proj.sh_coeff_count)),
        # screen-space positional gradient, kept for densification stats
        "mean2d": np.zeros((n, 2)),
    }
    if proj.payload3d is not None:
        out["payload3d"] = np.zeros((n, 3))
    m = proj.count
    if m == 0:
        return out

    # q = d^T conic d with conic = cov2d^{-1}: d q/d cov2d = -conic (d d^T) conic
    grad_cov2d = -np.einsum("gij,gjk,gkl->gil", proj.conic, grad_conic, proj.conic)

    rot = cam.rotation
    mmat = proj.jac @ rot
    grad_cov3d = np.einsum("gji,gjk,gkl->gil", mmat, grad_cov2d, mmat)
    grad_m = 2.0 * np.einsum("gij,gjk,gkl->gil", grad_cov2d, mmat, proj.cov3d)
    grad_jac = grad_m @ rot.T

    fx, fy = cam.fx, cam.fy
    tx, tyv, tz = proj.tvec[:, 0], proj.tvec[:, 1], proj.tvec[:, 2]
    grad_tvec = np.zeros((m, 3))
    # J entries: J00 = fx/tz, J02 = -fx tx/tz^2, J11 = fy/tz, J12 = -fy ty/tz^2
    grad_tvec[:, 0] += grad_jac[:, 0, 2] * (-fx / tz**2)
    grad_tvec[:, 1] += grad_jac[:, 1, 2] * (-fy / tz**2)
    grad_tvec[:, 2] += (
        grad_jac[:, 0, 0] * (-fx / tz**2)
        + grad_jac[:, 1, 1] * (-fy / tz**2)
        + grad_jac[:, 0, 2] * (2.0 * fx * tx / tz**3)
        + grad_jac[:, 1, 2] * (2.0 * fy * tyv / tz**3)
    )
    # screen means: u = fx tx/tz + cx, v = fy ty/tz + cy
    gu, gv = grad_mean2d[:, 0], grad_mean2d[:, 1]
    grad_tvec[:, 0] += gu * fx / tz
    grad_tvec[:, 1] += gv * fy / tz
    grad_tvec[:, 2] += -(gu * fx * tx + gv * fy * tyv) / tz**2
    grad_tvec[:, 2] += grad_vdepth

    grad_pos = grad_tvec @ rot

    # cov3d = R(q) diag(s^2) R(q)^T
    rq = quat_to_rotmat(proj.quats)
    s2 = proj.scales**2
    grad_rq = 2.0 * np.einsum("gij,gjk,gk->gik", grad_cov3d, rq, s2)
    grad_s2 = np.einsum("gji,gjk,gki->gi", rq, grad_cov3d, rq)
    grad_log_scales = grad_s2 * 2.0 * s2
    dr_dq = rotmat_grad_wrt_quat(proj.quats)
    grad_quat = np.einsum("gqij,gij->gq", dr_dq, grad_rq)

    grad_coeffs, grad_dirs = sh.eval_sh_color_backward(proj.coeffs, proj.sh_cache, grad_rgb)
    if grad_dirs is not None:
        diff = proj.positions - cam.center
        norm = np.linalg.norm(diff, axis=1, keepdims=True)
        dirs = diff / norm
        inner = np.sum(grad_dirs * dirs, axis=1, keepdims=True)
        grad_pos = grad_pos + (grad_dirs - dirs * inner) / norm

    # activation chain on the kept subset
    sub = GaussianSet(
        positions=proj.positions,
        rot_params=proj.raw_rot,
        log_scales=proj.raw_log_scales,
        opacity_logits=proj.raw_logits,
        colors=np.zeros((m, 3, proj.sh_coeff_count)),
    )
    act_grads = activate_backward(
        sub, grad_quats=grad_quat, grad_scales=None, grad_opacities=grad_opac
    )

    idx = proj.orig_index
    out["positions"][idx] = grad_pos
    out["rot_params"][idx] = act_grads["rot_params"]
    out["log_scales"][idx] = grad_log_scales  # already w.r.t. log via s^2 chain
    out["opacity_logits"][idx] = act_grads["opacity_logits"]
    out["colors"][idx] = grad_coeffs
    out["mean2d"][idx] = grad_mean2d
    if grad_payload is not None:
        out["payload3d"][idx] = grad_payload
    return out


# ---------------------------------------------------------------------------
# reference renderer
# ---------------------------------------------------------------------------

def render_oracle(proj: ProjectedScene, cam: Camera, modes=("color", "depth")) -> RenderOutput:
    """Exact per-pixel compositing: global depth order, no cutoffs.

    Test oracle only; quadratic in scene size.
    """
    h, w = cam.height, cam.width
    want_traj = "trajectory" in modes
    color = np.zeros((h, w, 3))
    depth = np.zeros((h, w))
    alpha = np.zeros((h, w))
    traj = np.zeros((h, w, 3)) if want_traj else None
    m = proj.count
    if m == 0:
        return RenderOutput(color, depth, alpha, traj)
    gx, gy = np.meshgrid(np.arange(w), np.arange(h), indexing="xy")
    pix_all = np.stack([gx.ravel(), gy.ravel()], axis=1).astype(np.float64)
    block = 2048
    for lo in range(0, pix_all.shape[0], block):
        pix = pix_all[lo:lo + block]
        a, _ = _chunk_alphas(proj, np.arange(m), pix)
        trans = np.concatenate(
            [np.ones((1, pix.shape[0])), np.cumprod(1.0 - a, axis=0)[:-1]], axis=0
        )
        wgt = a * trans
        flat = slice(lo, lo + pix.shape[0])
        color.reshape(-1, 3)[flat] = np.einsum("gp,gc->pc", wgt, proj.color)
        depth.reshape(-1)[flat] = np.einsum("gp,g->p", wgt, proj.view_depth)
        alpha.reshape(-1)[flat] = wgt.sum(axis=0)
        if want_traj:
            traj.reshape(-1, 3)[flat] = np.einsum("gp,gc->pc", wgt, proj.payload3d)
    return RenderOutput(color, depth, alpha, traj)
