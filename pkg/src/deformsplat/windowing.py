"""Adaptive partitioning of a sequence into contiguous local windows.

A new window opens when, relative to the first frame of the current window,
the translational MSE, the relative rotation angle, or the mean absolute
RGB difference crosses its threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .scene import Camera, Frame, WindowPlan, make_window_plan, relative_rotation_angle


@dataclass(frozen=True)
class PartitionConfig:
    """Thresholds for opening a new window.

    delta_t is in squared scene units and depends on the dataset scale, so
    it has no default.
    """

    delta_t: float
    delta_r: float = 15.0     # degrees
    rgb_diff: float = 0.05    # mean absolute difference on [0, 1] images

    def __post_init__(self):
        if self.delta_t <= 0 or self.delta_r <= 0 or self.rgb_diff <= 0:
            raise ValidationError("partition thresholds must be positive")


def translation_mse(ta: np.ndarray, tb: np.ndarray) -> float:
    """Mean of squared component differences between translation vectors."""
    d = np.asarray(ta, dtype=np.float64) - np.asarray(tb, dtype=np.float64)
    return float(np.mean(d * d))


def rgb_difference(fa: Frame, fb: Frame) -> float:
    """Mean absolute RGB difference over pixels unmasked in both frames."""
    valid = ~(fa.tool_mask | fb.tool_mask)
    if not valid.any():
        return 0.0
    return float(np.mean(np.abs(fa.image[valid] - fb.image[valid])))


def partition(poses: list[Camera], frames: list[Frame], cfg: PartitionConfig) -> WindowPlan:
    """Scan frames in order, opening windows per the threshold rule."""
    if len(frames) == 0:
        raise ValidationError("cannot partition an empty sequence")
    if len(poses) != len(frames):
        raise ValidationError("poses and frames must be aligned")
    boundaries = []
    anchor = 0
    for j in range(1, len(frames)):
        trigger = (
            translation_mse(poses[j].translation, poses[anchor].translation) > cfg.delta_t
            or relative_rotation_angle(poses[j].rotation, poses[anchor].rotation) > cfg.delta_r
            or rgb_difference(frames[j], frames[anchor]) > cfg.rgb_diff
        )
        if trigger:
            boundaries.append((anchor, j))
            anchor = j
    boundaries.append((anchor, len(frames)))
    timestamps = [f.timestamp for f in frames]
    return make_window_plan(boundaries, timestamps)


def uniform_partition(n_frames: int, n_windows: int, timestamps=None) -> WindowPlan:
    """Contiguous windows of near-equal size (ablation baseline)."""
    if n_frames < 1:
        raise ValidationError("n_frames must be >= 1")
    if not (1 <= n_windows <= n_frames):
        raise ValidationError(
            f"n_windows must lie in [1, n_frames], got {n_windows} for {n_frames} frames"
        )
    edges = np.ceil(np.linspace(0, n_frames, n_windows + 1)).astype(int)
    boundaries = [(int(edges[i]), int(edges[i + 1])) for i in range(n_windows)]
    if timestamps is None:
        timestamps = np.arange(n_frames, dtype=np.float64)
    return make_window_plan(boundaries, timestamps)
