"""Synthetic deformable scenes with exact ground truth.

A textured parametric surface (tilted plane or tube) is displaced along y
by a sine of time whose phase depends on the rest coordinates.  Images,
depths and tracks come from per-pixel ray-surface intersection: a dense
forward splat seeds a Newton solve in surface parameters so every covered
pixel carries machine-precision surface coordinates.

Monocular-style depth priors are the ground truth under a seeded affine
distortion plus optional noise, mimicking scale ambiguity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .initialization import TrackSet
from .scene import Camera, Frame, make_frame

NEWTON_ITERS = 6
NEWTON_H = 1e-6


@dataclass(frozen=True)
class SceneSpec:
    surface: str = "plane"          # "plane" | "tube"
    texture: str = "checker"        # "checker" | "noise"
    amplitude: float = 0.05         # sine displacement, scene units
    omega: float = 3.0              # rad / unit time
    camera_path: str = "forward"    # "fixed" | "orbit" | "forward"
    n_frames: int = 30
    width: int = 64
    height: int = 64
    seed: int = 0
    dt: float = 1.0 / 30.0
    checker_period_px: float = 8.0
    plane_depth: float = 2.0
    plane_tilt: float = 0.25
    tube_radius: float = 1.0
    tube_far: float = 6.0
    orbit_step_deg: float = 2.0
    forward_step: float = 0.02      # units per frame along +z
    lateral_osc: float = 0.05
    mono_scale: float = 1.3
    mono_shift: float = 0.2
    mono_noise: float = 0.01
    with_masks: bool = False
    oversample: int = 4

    def __post_init__(self):
        if self.amplitude < 0 or self.omega < 0:
            raise ValidationError("amplitude and omega must be >= 0")
        if self.n_frames < 1:
            raise ValidationError("n_frames must be >= 1")
        if self.surface not in ("plane", "tube"):
            raise ValidationError(f"unknown surface '{self.surface}'")
        if self.texture not in ("checker", "noise"):
            raise ValidationError(f"unknown texture '{self.texture}'")
        if self.camera_path not in ("fixed", "orbit", "forward"):
            raise ValidationError(f"unknown camera path '{self.camera_path}'")
        if self.camera_path == "orbit" and self.n_frames > 1 and self.orbit_step_deg == 0:
            raise ValidationError("orbit path with zero angular step is degenerate")


# ---------------------------------------------------------------------------
# surface model
# ---------------------------------------------------------------------------

def rest_points(spec: SceneSpec, ab: np.ndarray) -> np.ndarray:
    """Rest-state surface points for parameters (..., 2)."""
    a, b = ab[..., 0], ab[..., 1]
    if spec.surface == "plane":
        return np.stack([a, b, spec.plane_depth + spec.plane_tilt * b], axis=-1)
    return np.stack(
        [spec.tube_radius * np.cos(a), spec.tube_radius * np.sin(a), b], axis=-1
    )


def deform_points(spec: SceneSpec, p0: np.ndarray, t: float) -> np.ndarray:
    """Sine displacement along y with a rest-coordinate phase."""
    phase = p0[..., 0] + p0[..., 1] + p0[..., 2]
    out = p0.copy()
    out[..., 1] = out[..., 1] + spec.amplitude * np.sin(spec.omega * t + phase)
    return out


def surface_at(spec: SceneSpec, ab: np.ndarray, t: float) -> np.ndarray:
    return deform_points(spec, rest_points(spec, ab), t)


class _Texture:
    """Seeded procedural albedo over surface parameters."""

    def __init__(self, spec: SceneSpec):
        rng = np.random.default_rng(spec.seed)
        self.spec = spec
        if spec.texture == "checker":
            # period in parameter units so that one cell spans roughly
            # checker_period_px pixels at the mean depth
            fx = float(spec.width)
            depth = spec.plane_depth if spec.surface == "plane" else spec.tube_radius
            self.period = spec.checker_period_px * depth / fx
            self.colors = rng.uniform(0.15, 0.95, size=(2, 3))
        else:
            n_comp = 8
            self.freqs = rng.uniform(2.0, 18.0, size=(3, n_comp, 2))
            self.phases = rng.uniform(0.0, 2.0 * np.pi, size=(3, n_comp))
            self.amps = rng.uniform(0.04, 0.12, size=(3, n_comp))

    def __call__(self, ab: np.ndarray) -> np.ndarray:
        a, b = ab[..., 0], ab[..., 1]
        if self.spec.texture == "checker":
            cell = (np.floor(a / self.period) + np.floor(b / self.period)).astype(int) % 2
            return self.colors[cell]
        out = np.empty(ab.shape[:-1] + (3,))
        for c in range(3):
            acc = 0.5 + sum(
                self.amps[c, k]
                * np.sin(self.freqs[c, k, 0] * a + self.freqs[c, k, 1] * b + self.phases[c, k])
                for k in range(self.amps.shape[1])
            )
            out[..., c] = acc
        return np.clip(out, 0.02, 0.98)


# ---------------------------------------------------------------------------
# cameras
# ---------------------------------------------------------------------------

def _look_at(position: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    z = target - position
    z = z / np.linalg.norm(z)
    x = np.cross(np.array([0.0, 1.0, 0.0]), z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    rot = np.stack([x, y, z], axis=0)
    return rot, -rot @ position


def make_cameras(spec: SceneSpec) -> list[Camera]:
    fx = fy = float(spec.width)
    cx, cy = (spec.width - 1) / 2.0, (spec.height - 1) / 2.0
    cams = []
    for k in range(spec.n_frames):
        if spec.camera_path == "fixed":
            rot = np.eye(3)
            trans = np.zeros(3)
        elif spec.camera_path == "forward":
            rot = np.eye(3)
            pos = np.array(
                [spec.lateral_osc * np.sin(2.0 * np.pi * k / max(spec.n_frames, 2)),
                 0.0,
                 spec.forward_step * k]
            )
            trans = -rot @ pos
        else:  # orbit
            theta = np.radians(spec.orbit_step_deg) * k
            center = np.array([0.0, 0.0, spec.plane_depth])
            radius = spec.plane_depth
            pos = center + radius * np.array([np.sin(theta), 0.0, -np.cos(theta)])
            rot, trans = _look_at(pos, center)
        cams.append(Camera(fx=fx, fy=fy, cx=cx, cy=cy, width=spec.width,
                           height=spec.height, rotation=rot, translation=trans))
    return cams


def _param_bounds(spec: SceneSpec, cams: list[Camera]) -> tuple[np.ndarray, np.ndarray]:
    if spec.surface == "tube":
        zs = [c.center[2] for c in cams]
        return (np.array([0.0, min(zs) - 0.5]),
                np.array([2.0 * np.pi, max(zs) + spec.tube_far]))
    corners = []
    w, h = spec.width, spec.height
    pix = np.array([[0.0, 0.0], [w - 1, 0.0], [0.0, h - 1], [w - 1, h - 1],
                    [(w - 1) / 2, (h - 1) / 2]])
    for cam in cams:
        dist = np.linalg.norm(cam.center - np.array([0.0, 0.0, spec.plane_depth]))
        dist = max(dist, 0.5)
        for scale in (0.6, 1.0, 1.8):
            pts = cam.backproject(pix, np.full(len(pix), dist * scale))
            corners.append(pts[:, :2])
    allc = np.concatenate(corners, axis=0)
    margin = spec.amplitude + 0.4
    return allc.min(axis=0) - margin, allc.max(axis=0) + margin


# ---------------------------------------------------------------------------
# per-frame rendering via splat-seeded Newton intersection
# ---------------------------------------------------------------------------

def _project_params(spec: SceneSpec, cam: Camera, ab: np.ndarray, t: float):
    pts = surface_at(spec, ab, t)
    pix, depth = cam.project(pts)
    return pix, depth


def _render_frame(spec: SceneSpec, cam: Camera, t: float,
                  lo: np.ndarray, hi: np.ndarray, texture: _Texture):
    h, w = spec.height, spec.width
    n_a = spec.oversample * max(w, h)
    n_b = spec.oversample * max(w, h)
    aa = np.linspace(lo[0], hi[0], n_a)
    bb = np.linspace(lo[1], hi[1], n_b)
    ga, gb = np.meshgrid(aa, bb, indexing="ij")
    ab = np.stack([ga.ravel(), gb.ravel()], axis=-1)
    pix, depth = _project_params(spec, cam, ab, t)

    ok = (depth > 0.05) & np.all(np.isfinite(pix), axis=1)
    ok &= (pix[:, 0] > -0.5) & (pix[:, 0] < w - 0.5)
    ok &= (pix[:, 1] > -0.5) & (pix[:, 1] < h - 0.5)
    ab, pix, depth = ab[ok], pix[ok], depth[ok]

    # splat: nearest sample per pixel wins (sorted far to near)
    order = np.argsort(-depth, kind="stable")
    ui = np.rint(pix[order, 0]).astype(int)
    vi = np.rint(pix[order, 1]).astype(int)
    winner = np.full((h, w), -1, dtype=np.int64)
    winner[vi, ui] = order

    covered = winner >= 0
    ys, xs = np.nonzero(covered)
    ab_pix = ab[winner[ys, xs]]

    # Newton refinement in surface parameters toward exact pixel centers
    target = np.stack([xs, ys], axis=1).astype(np.float64)
    cur = ab_pix.copy()
    for _ in range(NEWTON_ITERS):
        f0, _ = _project_params(spec, cam, cur, t)
        r = f0 - target
        if np.max(np.abs(r)) < 1e-10:
            break
        ja = (_project_params(spec, cam, cur + [NEWTON_H, 0.0], t)[0]
              - _project_params(spec, cam, cur - [NEWTON_H, 0.0], t)[0]) / (2 * NEWTON_H)
        jb = (_project_params(spec, cam, cur + [0.0, NEWTON_H], t)[0]
              - _project_params(spec, cam, cur - [0.0, NEWTON_H], t)[0]) / (2 * NEWTON_H)
        det = ja[:, 0] * jb[:, 1] - jb[:, 0] * ja[:, 1]
        det = np.where(np.abs(det) < 1e-18, 1e-18, det)
        da = (r[:, 0] * jb[:, 1] - r[:, 1] * jb[:, 0]) / det
        db = (ja[:, 0] * r[:, 1] - ja[:, 1] * r[:, 0]) / det
        cur[:, 0] -= da
        cur[:, 1] -= db

    f0, zf = _project_params(spec, cam, cur, t)
    good = (np.max(np.abs(f0 - target), axis=1) < 1e-6) & (zf > 0.05)

    depth_map = np.zeros((h, w))
    image = np.zeros((h, w, 3))
    param_map = np.zeros((h, w, 2))
    ys, xs, cur = ys[good], xs[good], cur[good]
    depth_map[ys, xs] = zf[good]
    image[ys, xs] = texture(cur)
    param_map[ys, xs] = cur
    cover = np.zeros((h, w), dtype=bool)
    cover[ys, xs] = True
    return image, depth_map, param_map, cover


# ---------------------------------------------------------------------------
# bundle
# ---------------------------------------------------------------------------

@dataclass
class SceneBundle:
    spec: SceneSpec
    frames: list
    cams: list
    gt_depth: np.ndarray       # (n, H, W), 0 where uncovered
    param_maps: np.ndarray     # (n, H, W, 2)
    covered: np.ndarray        # (n, H, W) bool

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([f.timestamp for f in self.frames])

    def mono_depth(self, i: int) -> np.ndarray:
        """Ground truth under a seeded affine distortion plus noise."""
        spec = self.spec
        rng = np.random.default_rng(spec.seed * 7919 + 1000 + i)
        gt = self.gt_depth[i]
        noise = rng.normal(0.0, spec.mono_noise, size=gt.shape) if spec.mono_noise > 0 else 0.0
        return np.where(self.covered[i], spec.mono_scale * gt + spec.mono_shift + noise, 0.0)

    def make_tracks(self, start: int, end: int, count: int = 2048) -> TrackSet:
        """Exact trajectories for grid-sampled query pixels of frame `start`."""
        spec = self.spec
        cover0 = self.covered[start]
        ys, xs = np.nonzero(cover0)
        if len(ys) == 0:
            raise ValidationError("first frame has no surface coverage")
        stride = max(1, int(np.sqrt(len(ys) / max(count, 1))))
        sel = np.zeros_like(cover0)
        sel[::stride, ::stride] = True
        sel &= cover0
        ys, xs = np.nonzero(sel)
        if len(ys) > count:
            keep = np.linspace(0, len(ys) - 1, count).astype(int)
            ys, xs = ys[keep], xs[keep]
        ab = self.param_maps[start][ys, xs]

        k = len(ys)
        m = end - start
        positions = np.zeros((k, m, 2))
        visibility = np.zeros((k, m), dtype=bool)
        for j in range(m):
            fi = start + j
            t = self.frames[fi].timestamp
            cam = self.cams[fi]
            pix, depth = _project_params(spec, cam, ab, t)
            inb = (
                (depth > 0.05)
                & (pix[:, 0] >= 0) & (pix[:, 0] <= spec.width - 1)
                & (pix[:, 1] >= 0) & (pix[:, 1] <= spec.height - 1)
            )
            # occlusion: the splatted depth at the landing pixel must match
            ui = np.clip(np.rint(pix[:, 0]).astype(int), 0, spec.width - 1)
            vi = np.clip(np.rint(pix[:, 1]).astype(int), 0, spec.height - 1)
            seen = self.gt_depth[fi][vi, ui]
            unoccluded = np.abs(seen - depth) <= np.maximum(0.02 * depth, 1e-3) + 0.05
            visibility[:, j] = inb & unoccluded & self.covered[fi][vi, ui]
            positions[:, j] = pix
        query = positions[:, 0].copy()
        return TrackSet(query_pixels=query, positions=positions, visibility=visibility)


def _tool_mask(spec: SceneSpec, k: int) -> np.ndarray:
    mask = np.zeros((spec.height, spec.width), dtype=bool)
    if not spec.with_masks:
        return mask
    w = max(4, spec.width // 8)
    h = max(4, spec.height // 6)
    x0 = int((spec.width - w) * (0.5 + 0.5 * np.sin(0.3 * k)))
    y0 = int((spec.height - h) * 0.7)
    mask[y0:y0 + h, x0:x0 + w] = True
    return mask


def generate(spec: SceneSpec) -> SceneBundle:
    """Render the full bundle; deterministic for a fixed spec."""
    cams = make_cameras(spec)
    lo, hi = _param_bounds(spec, cams)
    texture = _Texture(spec)
    n = spec.n_frames
    frames = []
    gt_depth = np.zeros((n, spec.height, spec.width))
    param_maps = np.zeros((n, spec.height, spec.width, 2))
    covered = np.zeros((n, spec.height, spec.width), dtype=bool)
    for k in range(n):
        t = k * spec.dt
        image, depth, pmap, cover = _render_frame(spec, cams[k], t, lo, hi, texture)
        frames.append(make_frame(image, t, _tool_mask(spec, k)))
        gt_depth[k] = depth
        param_maps[k] = pmap
        covered[k] = cover
    return SceneBundle(
        spec=spec, frames=frames, cams=cams,
        gt_depth=gt_depth, param_maps=param_maps, covered=covered,
    )
