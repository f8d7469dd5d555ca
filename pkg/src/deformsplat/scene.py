"""Core scene data model: Gaussian primitives, cameras, frames and windows.

Parameters are stored unconstrained (raw quaternions, log-scales, opacity
logits) and activated on use, so plain gradient steps cannot leave the
valid region.  All containers are value objects; nothing here mutates its
inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        bad = tuple(int(v) for v in np.argwhere(~np.isfinite(arr))[0])
        raise ValidationError(f"{name} contains a non-finite value at index {bad}")


# ---------------------------------------------------------------------------
# quaternion helpers (w, x, y, z convention)
# ---------------------------------------------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Normalize quaternions along the last axis."""
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ValidationError("cannot normalize a zero quaternion")
    return q / norm


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for unit quaternions, shape (..., 4) -> (..., 3, 3)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=q.dtype)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a * b along the last axis."""
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    out = q.copy()
    out[..., 1:] = -out[..., 1:]
    return out


def rotmat_grad_wrt_quat(q: np.ndarray) -> np.ndarray:
    """d(rotmat)/d(unit quaternion), shape (..., 4, 3, 3).

    Valid for unit quaternions; the normalization Jacobian is applied
    separately by the caller when the stored quaternion is unnormalized.
    """
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    zero = np.zeros_like(w)
    dR = np.empty(q.shape[:-1] + (4, 3, 3), dtype=q.dtype)
    dR[..., 0, :, :] = 2 * np.stack(
        [
            np.stack([zero, -z, y], axis=-1),
            np.stack([z, zero, -x], axis=-1),
            np.stack([-y, x, zero], axis=-1),
        ],
        axis=-2,
    )
    dR[..., 1, :, :] = 2 * np.stack(
        [
            np.stack([zero, y, z], axis=-1),
            np.stack([y, -2 * x, -w], axis=-1),
            np.stack([z, w, -2 * x], axis=-1),
        ],
        axis=-2,
    )
    dR[..., 2, :, :] = 2 * np.stack(
        [
            np.stack([-2 * y, x, w], axis=-1),
            np.stack([x, zero, z], axis=-1),
            np.stack([-w, z, -2 * y], axis=-1),
        ],
        axis=-2,
    )
    dR[..., 3, :, :] = 2 * np.stack(
        [
            np.stack([-2 * z, -w, x], axis=-1),
            np.stack([w, -2 * z, y], axis=-1),
            np.stack([x, y, zero], axis=-1),
        ],
        axis=-2,
    )
    return dR


# ---------------------------------------------------------------------------
# Gaussian primitives
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianSet:
    """Canonical-space primitives in unconstrained parameterization.

    positions      (N, 3) scene units
    rot_params     (N, 4) raw quaternion parameters, (w, x, y, z)
    log_scales     (N, 3) scale = exp(log_scale)
    opacity_logits (N,)   opacity = logistic(logit)
    colors         (N, 3, (L+1)^2) spherical-harmonic coefficients
    """

    positions: np.ndarray
    rot_params: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        n = self.positions.shape[0]
        if n < 1:
            raise ValidationError("GaussianSet requires count >= 1")
        if self.positions.shape != (n, 3):
            raise ValidationError(f"positions must be (N, 3), got {self.positions.shape}")
        if self.rot_params.shape != (n, 4):
            raise ValidationError(f"rot_params must be (N, 4), got {self.rot_params.shape}")
        if self.log_scales.shape != (n, 3):
            raise ValidationError(f"log_scales must be (N, 3), got {self.log_scales.shape}")
        if self.opacity_logits.shape != (n,):
            raise ValidationError(f"opacity_logits must be (N,), got {self.opacity_logits.shape}")
        if self.colors.ndim != 3 or self.colors.shape[:2] != (n, 3):
            raise ValidationError(f"colors must be (N, 3, K), got {self.colors.shape}")
        for name in ("positions", "rot_params", "log_scales", "opacity_logits", "colors"):
            _check_finite(name, getattr(self, name))

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    @property
    def sh_coeff_count(self) -> int:
        return self.colors.shape[2]

    def copy(self) -> "GaussianSet":
        return GaussianSet(
            self.positions.copy(),
            self.rot_params.copy(),
            self.log_scales.copy(),
            self.opacity_logits.copy(),
            self.colors.copy(),
        )


@dataclass(frozen=True)
class ActivatedGaussians:
    """Activated view of a GaussianSet: unit quaternions, positive scales,
    opacities in (0, 1).  Positions and SH coefficients pass through."""

    positions: np.ndarray   # (N, 3)
    quats: np.ndarray       # (N, 4) unit norm
    scales: np.ndarray      # (N, 3) > 0
    opacities: np.ndarray   # (N,) in (0, 1)
    colors: np.ndarray      # (N, 3, K)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


def activate(g: GaussianSet) -> ActivatedGaussians:
    """Map unconstrained parameters to their valid-domain values."""
    for name in ("positions", "rot_params", "log_scales", "opacity_logits", "colors"):
        _check_finite(name, getattr(g, name))
    return ActivatedGaussians(
        positions=g.positions,
        quats=quat_normalize(g.rot_params),
        scales=np.exp(g.log_scales),
        opacities=sigmoid(g.opacity_logits),
        colors=g.colors,
    )


def activate_backward(
    g: GaussianSet,
    grad_quats: np.ndarray | None = None,
    grad_scales: np.ndarray | None = None,
    grad_opacities: np.ndarray | None = None,
) -> dict:
    """Chain gradients on activated values back to the raw parameters.

    Returns a dict with keys among {"rot_params", "log_scales",
    "opacity_logits"} for the gradients that were provided.
    """
    out = {}
    if grad_quats is not None:
        norm = np.linalg.norm(g.rot_params, axis=-1, keepdims=True)
        qhat = g.rot_params / norm
        # d qhat / d q = (I - qhat qhat^T) / |q|
        inner = np.sum(grad_quats * qhat, axis=-1, keepdims=True)
        out["rot_params"] = (grad_quats - qhat * inner) / norm
    if grad_scales is not None:
        out["log_scales"] = grad_scales * np.exp(g.log_scales)
    if grad_opacities is not None:
        o = sigmoid(g.opacity_logits)
        out["opacity_logits"] = grad_opacities * o * (1.0 - o)
    return out


def covariance(rotation: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """3D covariance R diag(s^2) R^T from a unit quaternion and scale vector.

    Accepts batched inputs with matching leading dimensions.
    """
    R = quat_to_rotmat(np.asarray(rotation, dtype=np.float64))
    s2 = np.asarray(scale, dtype=np.float64) ** 2
    return np.einsum("...ik,...k,...jk->...ij", R, s2, R)


def relative_rotation_angle(ra: np.ndarray, rb: np.ndarray) -> float:
    """Angle in degrees between two rotation matrices, in [0, 180]."""
    for name, r in (("Ra", ra), ("Rb", rb)):
        err = np.abs(r @ r.T - np.eye(3)).max()
        if err > 1e-6 or abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ValidationError(f"{name} is not orthonormal (error {err:.2e})")
    rel = ra @ rb.T
    c = np.clip((np.trace(rel) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.degrees(np.arccos(c)))


# ---------------------------------------------------------------------------
# cameras and frames
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Camera:
    """Pinhole camera; world-to-camera pose, x right, y down, z forward.

    Pixel coordinates: u = fx * X/Z + cx, v = fy * Y/Z + cy.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray     # (3, 3) world -> camera
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError("principal point must lie inside the image")
        r = self.rotation
        if r.shape != (3, 3):
            raise ValidationError("rotation must be 3x3")
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValidationError("rotation must be orthonormal with determinant +1")
        if self.translation.shape != (3,):
            raise ValidationError("translation must be a 3-vector")

    def world_to_cam(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def cam_to_world(self, points: np.ndarray) -> np.ndarray:
        return (points - self.translation) @ self.rotation

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def project(self, points_world: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Project world points; returns (pixels (N, 2), view depth (N,))."""
        pc = self.world_to_cam(points_world)
        z = pc[..., 2]
        u = self.fx * pc[..., 0] / z + self.cx
        v = self.fy * pc[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1), z

    def projection_matrix(self) -> np.ndarray:
        """3x4 matrix K [R | t]."""
        K = np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )
        return K @ np.concatenate([self.rotation, self.translation[:, None]], axis=1)

    def backproject(self, pixels: np.ndarray, depths: np.ndarray) -> np.ndarray:
        """Lift pixels at the given view depths back to world space."""
        x = (pixels[..., 0] - self.cx) / self.fx * depths
        y = (pixels[..., 1] - self.cy) / self.fy * depths
        pc = np.stack([x, y, depths], axis=-1)
        return self.cam_to_world(pc)


@dataclass(frozen=True)
class Frame:
    """One observed video frame."""

    image: np.ndarray      # (H, W, 3) in [0, 1]
    timestamp: float
    tool_mask: np.ndarray  # (H, W) bool, True = instrument pixel

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValidationError("image must be (H, W, 3)")
        if self.image.min() < 0 or self.image.max() > 1:
            raise ValidationError("image values must lie in [0, 1]")
        if self.tool_mask.shape != self.image.shape[:2]:
            raise ValidationError("tool_mask dimensions must match the image")


def make_frame(image: np.ndarray, timestamp: float, tool_mask: np.ndarray | None = None) -> Frame:
    if tool_mask is None:
        tool_mask = np.zeros(image.shape[:2], dtype=bool)
    return Frame(image=image, timestamp=float(timestamp), tool_mask=tool_mask)


# ---------------------------------------------------------------------------
# windows
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WindowPlan:
    """Contiguous, non-overlapping frame ranges covering [0, n_frames).

    boundaries: list of (start, end) half-open index ranges.
    t0: canonical time per window, the timestamp of its first frame.
    """

    boundaries: tuple
    t0: np.ndarray

    def __post_init__(self):
        if len(self.boundaries) == 0:
            raise ValidationError("WindowPlan requires at least one window")
        prev_end = 0
        for start, end in self.boundaries:
            if start != prev_end or end <= start:
                raise ValidationError(f"windows must partition the sequence, got {self.boundaries}")
            prev_end = end
        if len(self.t0) != len(self.boundaries):
            raise ValidationError("t0 must have one entry per window")

    @property
    def n_windows(self) -> int:
        return len(self.boundaries)

    @property
    def n_frames(self) -> int:
        return self.boundaries[-1][1]

    def window_of_frame(self, idx: int) -> int:
        for w, (start, end) in enumerate(self.boundaries):
            if start <= idx < end:
                return w
        raise ValidationError(f"frame {idx} outside the plan")


def make_window_plan(boundaries, timestamps) -> WindowPlan:
    ts = np.asarray(timestamps, dtype=np.float64)
    t0 = np.array([ts[start] for start, _ in boundaries])
    return WindowPlan(boundaries=tuple(tuple(b) for b in boundaries), t0=t0)


def normalize_window_time(t: float, t_start: float, t_end: float) -> float:
    """Map a global timestamp into the window's [0, 1] span."""
    if t_end <= t_start:
        return 0.0
    return float(np.clip((t - t_start) / (t_end - t_start), 0.0, 1.0))
