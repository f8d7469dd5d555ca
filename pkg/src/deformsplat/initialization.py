"""Coarse-to-fine canonical-space initialization.

Coarse: two-view DLT triangulation of precomputed tracks over wide-baseline
frame pairs, merged with Gaussians propagated from the previous window.
Fine: least-squares alignment of a monocular depth prior to the rendered
depth, then back-projection of high-photometric-error pixels.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .deformation import DeformationModel, LocalModel, deform
from .errors import ValidationError
from .scene import Camera, GaussianSet, logit
from . import sh

logger = logging.getLogger(__name__)

REPROJECTION_TOL_PX = 2.0
FALLBACK_SCALE = 0.01


@dataclass(frozen=True)
class TrackSet:
    """Pixel trajectories for one window.

    query_pixels (K, 2): positions in the window's first frame.
    positions (K, m+1, 2), visibility (K, m+1).
    """

    query_pixels: np.ndarray
    positions: np.ndarray
    visibility: np.ndarray

    def __post_init__(self):
        k = self.query_pixels.shape[0]
        if self.query_pixels.shape != (k, 2):
            raise ValidationError("query_pixels must be (K, 2)")
        if self.positions.ndim != 3 or self.positions.shape[0] != k or self.positions.shape[2] != 2:
            raise ValidationError("positions must be (K, m+1, 2)")
        if self.visibility.shape != self.positions.shape[:2]:
            raise ValidationError("visibility must match positions")
        if k > 0:
            vis = self.visibility
            if not np.all(np.isfinite(self.positions[vis])):
                raise ValidationError("visible track positions must be finite")
            v0 = vis[:, 0]
            if not np.allclose(self.positions[v0, 0], self.query_pixels[v0]):
                raise ValidationError("frame-0 positions must equal query pixels where visible")

    @property
    def count(self) -> int:
        return self.query_pixels.shape[0]

    @property
    def n_frames(self) -> int:
        return self.positions.shape[1]


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray  # (N, 3) world frame
    colors: np.ndarray  # (N, 3) in [0, 1]

    def __post_init__(self):
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValidationError("points must be (N, 3)")
        if self.colors.shape != self.points.shape:
            raise ValidationError("colors must match points")
        if self.points.size and not np.all(np.isfinite(self.points)):
            raise ValidationError("points must be finite")

    @property
    def count(self) -> int:
        return self.points.shape[0]


def empty_cloud() -> PointCloud:
    return PointCloud(points=np.zeros((0, 3)), colors=np.zeros((0, 3)))


@dataclass(frozen=True)
class DepthAlignment:
    alpha: float
    beta: float
    aligned: np.ndarray
    degenerate: bool = False


# ---------------------------------------------------------------------------
# triangulation
# ---------------------------------------------------------------------------

def select_pairs(cams: list[Camera], k: int = 4) -> list[tuple[int, int]]:
    """(first, last) plus the widest-baseline pairs among quartile frames."""
    m = len(cams) - 1
    if m < 1:
        return []
    quartiles = sorted(set(int(round(q * m)) for q in (0.0, 0.25, 0.5, 0.75, 1.0)))
    centers = {q: cams[q].center for q in quartiles}
    candidates = []
    for ai in range(len(quartiles)):
        for bi in range(ai + 1, len(quartiles)):
            a, b = quartiles[ai], quartiles[bi]
            candidates.append((float(np.linalg.norm(centers[a] - centers[b])), a, b))
    candidates.sort(key=lambda t: (-t[0], t[1], t[2]))
    pairs = [(0, m)]
    for _, a, b in candidates:
        if len(pairs) >= k:
            break
        if (a, b) not in pairs:
            pairs.append((a, b))
    return pairs


def _bilinear_colors(image: np.ndarray, pts: np.ndarray) -> np.ndarray:
    h, w = image.shape[:2]
    x = np.clip(pts[:, 0], 0, w - 1)
    y = np.clip(pts[:, 1], 0, h - 1)
    x0 = np.clip(np.floor(x).astype(int), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(y).astype(int), 0, max(h - 2, 0))
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    return (
        image[y0, x0] * (1 - fx) * (1 - fy)
        + image[y0, x1] * fx * (1 - fy)
        + image[y1, x0] * (1 - fx) * fy
        + image[y1, x1] * fx * fy
    )


def triangulate_pair(
    pix_a: np.ndarray, pix_b: np.ndarray, cam_a: Camera, cam_b: Camera
) -> tuple[np.ndarray, np.ndarray]:
    """Linear two-view triangulation; returns (points (N, 3), ok mask).

    Points behind either camera or reprojecting worse than 2 px are
    rejected.
    """
    pa = cam_a.projection_matrix()
    pb = cam_b.projection_matrix()
    n = pix_a.shape[0]
    a_mat = np.empty((n, 4, 4))
    a_mat[:, 0] = pix_a[:, 0, None] * pa[2] - pa[0]
    a_mat[:, 1] = pix_a[:, 1, None] * pa[2] - pa[1]
    a_mat[:, 2] = pix_b[:, 0, None] * pb[2] - pb[0]
    a_mat[:, 3] = pix_b[:, 1, None] * pb[2] - pb[1]
    _, _, vt = np.linalg.svd(a_mat)
    hom = vt[:, -1, :]
    ok = np.abs(hom[:, 3]) > 1e-12
    pts = np.zeros((n, 3))
    pts[ok] = hom[ok, :3] / hom[ok, 3:4]

    for cam, pix in ((cam_a, pix_a), (cam_b, pix_b)):
        proj, depth = cam.project(pts)
        ok &= depth > 0
        err = np.linalg.norm(proj - pix, axis=1)
        ok &= np.where(np.isfinite(err), err, np.inf) <= REPROJECTION_TOL_PX
    return pts, ok


def triangulate_tracks(
    tracks: TrackSet,
    cams: list[Camera],
    pairs: list[tuple[int, int]],
    image0: np.ndarray | None = None,
) -> PointCloud:
    """Triangulate every track visible in both frames of each pair.

    Per-pair clouds are concatenated and voxel-deduplicated.  Colors are
    sampled from the first frame at the query pixels.
    """
    if len(pairs) < 1:
        raise ValidationError("triangulation needs at least one frame pair")
    all_pts, all_cols = [], []
    usable_pairs = 0
    for a, b in pairs:
        if np.linalg.norm(cams[a].center - cams[b].center) < 1e-12:
            logger.warning("triangulation pair (%d, %d) has zero baseline; skipped", a, b)
            continue
        usable_pairs += 1
        vis = tracks.visibility[:, a] & tracks.visibility[:, b]
        if not vis.any():
            continue
        pts, ok = triangulate_pair(
            tracks.positions[vis, a], tracks.positions[vis, b], cams[a], cams[b]
        )
        if not ok.any():
            continue
        kept = pts[ok]
        if image0 is not None:
            cols = _bilinear_colors(image0, tracks.query_pixels[vis][ok])
        else:
            cols = np.full_like(kept, 0.5)
        all_pts.append(kept)
        all_cols.append(cols)
    if usable_pairs == 0:
        logger.warning("all triangulation pairs degenerate; returning empty cloud")
        return empty_cloud()
    if not all_pts:
        return empty_cloud()
    pts = np.concatenate(all_pts, axis=0)
    cols = np.concatenate(all_cols, axis=0)
    keep = _voxel_dedup_indices(pts)
    return PointCloud(points=pts[keep], colors=cols[keep])


# ---------------------------------------------------------------------------
# cloud -> Gaussians and fusion
# ---------------------------------------------------------------------------

def _nn_distances(points: np.ndarray, k: int) -> np.ndarray:
    """Mean distance to the k nearest neighbors (fewer if N - 1 < k)."""
    n = points.shape[0]
    k_eff = min(k, n - 1)
    out = np.empty(n)
    chunk = max(1, int(2e6 // max(n, 1)))
    for lo in range(0, n, chunk):
        diff = points[lo:lo + chunk, None, :] - points[None, :, :]
        d2 = np.einsum("rnk,rnk->rn", diff, diff)
        for r in range(min(chunk, n - lo)):
            d2[r, lo + r] = np.inf
        part = np.partition(d2, k_eff - 1, axis=1)[:, :k_eff]
        out[lo:lo + chunk] = np.sqrt(part).mean(axis=1)
    return out


def points_to_gaussians(cloud: PointCloud, sh_coeff_count: int = 1) -> GaussianSet:
    """Isotropic Gaussians at the cloud points, following the usual recipe:
    scale from the 3 nearest neighbors, identity rotation, opacity 0.1."""
    n = cloud.count
    if n == 0:
        raise ValidationError("cannot build Gaussians from an empty cloud")
    if n == 1:
        diag = 0.0
    else:
        diag = float(np.linalg.norm(cloud.points.max(axis=0) - cloud.points.min(axis=0)))
    if n >= 2:
        scales = _nn_distances(cloud.points, 3)
        scales = np.where(scales > 0, scales, max(FALLBACK_SCALE * diag, 1e-6))
    else:
        # no neighbors: 1% of the bounding-box diagonal, floored for a
        # degenerate single-point box
        scales = np.full(n, max(FALLBACK_SCALE * diag, 1e-2))
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    colors = np.zeros((n, 3, sh_coeff_count))
    colors[:, :, 0] = sh.rgb_to_sh0(np.clip(cloud.colors, 0.0, 1.0))
    return GaussianSet(
        positions=cloud.points.copy(),
        rot_params=rot,
        log_scales=np.log(scales)[:, None].repeat(3, axis=1),
        opacity_logits=np.full(n, logit(0.1)),
        colors=colors,
    )


def propagate_cross_window(prev: LocalModel, t_norm: float) -> GaussianSet:
    """Previous window's Gaussians deformed to the next window's start time."""
    return deform(prev.gaussians, prev.deformation, float(np.clip(t_norm, 0.0, 1.0)))


def _voxel_dedup_indices(points: np.ndarray, edge: float | None = None) -> np.ndarray:
    """Indices of at most one point per voxel, earliest row preferred."""
    n = points.shape[0]
    if n <= 1:
        return np.arange(n)
    if edge is None:
        edge = float(np.median(_nn_distances(points, 1)))
    if edge <= 0:
        # coincident cloud: collapse exact duplicates
        _, first = np.unique(points.round(12), axis=0, return_index=True)
        return np.sort(first)
    cells = np.floor(points / edge).astype(np.int64)
    _, first = np.unique(cells, axis=0, return_index=True)
    return np.sort(first)


def _concat_sets(a: GaussianSet, b: GaussianSet) -> GaussianSet:
    return GaussianSet(
        positions=np.concatenate([a.positions, b.positions]),
        rot_params=np.concatenate([a.rot_params, b.rot_params]),
        log_scales=np.concatenate([a.log_scales, b.log_scales]),
        opacity_logits=np.concatenate([a.opacity_logits, b.opacity_logits]),
        colors=np.concatenate([a.colors, b.colors]),
    )


def _select_set(g: GaussianSet, idx: np.ndarray) -> GaussianSet:
    return GaussianSet(
        positions=g.positions[idx],
        rot_params=g.rot_params[idx],
        log_scales=g.log_scales[idx],
        opacity_logits=g.opacity_logits[idx],
        colors=g.colors[idx],
    )


def fuse(tri: GaussianSet | None, win: GaussianSet | None) -> GaussianSet:
    """Concatenate with voxel deduplication; optimized (win) rows win ties.

    The voxel edge is the median nearest-neighbor spacing of the
    triangulated side.
    """
    tri_n = 0 if tri is None else tri.count
    win_n = 0 if win is None else win.count
    if tri_n == 0 and win_n == 0:
        raise ValidationError("fuse: both inputs empty; window uninitializable")
    if tri_n == 0:
        return win
    if win_n == 0:
        combined = tri
    else:
        combined = _concat_sets(win, tri)
    edge = float(np.median(_nn_distances(tri.positions, 1))) if tri_n > 1 else None
    keep = _voxel_dedup_indices(combined.positions, edge)
    return _select_set(combined, keep)


# ---------------------------------------------------------------------------
# fine stage
# ---------------------------------------------------------------------------

def align_depth(d_render: np.ndarray, d_est: np.ndarray, valid: np.ndarray | None = None) -> DepthAlignment:
    """Least-squares affine fit of the estimated depth to the rendered one.

    Solves min over (alpha, beta) of sum (d_render - alpha d_est - beta)^2
    on the valid pixel set via the normal equations.
    """
    if d_render.shape != d_est.shape:
        raise ValidationError("depth map shapes differ")
    if valid is None:
        valid = np.isfinite(d_render) & np.isfinite(d_est) & (d_render > 0)
    x = d_est[valid].astype(np.float64)
    y = d_render[valid].astype(np.float64)
    if x.size < 2:
        raise ValidationError("align_depth needs at least 2 valid overlapping pixels")
    mx, my = x.mean(), y.mean()
    var = np.mean((x - mx) ** 2)
    if var == 0.0:
        logger.warning("align_depth: constant estimated depth; degenerate fit")
        return DepthAlignment(alpha=0.0, beta=float(my), aligned=np.full_like(d_est, my),
                              degenerate=True)
    alpha = float(np.mean((x - mx) * (y - my)) / var)
    beta = float(my - alpha * mx)
    return DepthAlignment(alpha=alpha, beta=beta, aligned=alpha * d_est + beta)


@dataclass(frozen=True)
class RefineConfig:
    mode: str = "quantile"    # "quantile" or "absolute"
    threshold: float = 0.7
    stride: int = 2

    def __post_init__(self):
        if self.mode not in ("quantile", "absolute"):
            raise ValidationError(f"unknown refine mode '{self.mode}'")
        if self.stride < 1:
            raise ValidationError("stride must be >= 1")


def photometric_error(i_render: np.ndarray, i_obs: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Mean absolute channel difference; zero at masked pixels."""
    err = np.abs(i_render - i_obs).mean(axis=2)
    return np.where(mask, 0.0, err)


def retention_cut(error: np.ndarray, mask: np.ndarray, cfg: RefineConfig) -> float:
    if cfg.mode == "absolute":
        return float(cfg.threshold)
    vals = error[~mask]
    if vals.size == 0:
        return np.inf
    return float(np.quantile(vals, cfg.threshold))


def refine_regions(
    i_render: np.ndarray,
    i_obs: np.ndarray,
    mask: np.ndarray,
    d_fine: np.ndarray,
    cam: Camera,
    cfg: RefineConfig = RefineConfig(),
) -> PointCloud:
    """Back-project pixels whose photometric error exceeds the retention cut.

    Candidate pixels are subsampled on a stride grid and carried with the
    observed colors; pixels with non-positive aligned depth are skipped.
    """
    err = photometric_error(i_render, i_obs, mask)
    cut = retention_cut(err, mask, cfg)
    select = (err > cut) & ~mask & (d_fine > 0)
    select[np.arange(select.shape[0]) % cfg.stride != 0, :] = False
    select[:, np.arange(select.shape[1]) % cfg.stride != 0] = False
    ys, xs = np.nonzero(select)
    if len(ys) == 0:
        return empty_cloud()
    pix = np.stack([xs, ys], axis=1).astype(np.float64)
    pts = cam.backproject(pix, d_fine[ys, xs])
    return PointCloud(points=pts, colors=i_obs[ys, xs].copy())
