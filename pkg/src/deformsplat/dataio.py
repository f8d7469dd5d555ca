"""On-disk formats: dataset layout, track files, PFM depth, checkpoints,
manifests, run configs and metric reports.

Dataset layout under a root directory:
    images/%06d.png      8-bit RGB
    masks/%06d.png       optional; nonzero = instrument pixel
    poses.txt            one 4x4 world-to-camera matrix per line, row-major
    intrinsics.txt       fx fy cx cy width height
    timestamps.txt       optional; defaults to the frame index
    tracks/window_%03d.trk
    monodepth/%06d.pfm   32-bit float PFM
    depth_gt/%06d.pfm    optional ground truth depth (synthetic scenes)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .deformation import CHANNELS, GROUPS, DeformationModel, LocalModel
from .errors import FormatError, ValidationError
from .initialization import TrackSet
from .scene import Camera, Frame, GaussianSet, WindowPlan, make_frame, make_window_plan

TRACK_MAGIC = b"TRK1"
CHECKPOINT_MAGIC = b"LEGS"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def load_image(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_image(path: Path, image: np.ndarray) -> None:
    arr = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_mask(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    return arr > 0


def save_mask(path: Path, mask: np.ndarray) -> None:
    Image.fromarray((mask.astype(np.uint8)) * 255).save(path)


def save_depth_png(path: Path, depth: np.ndarray) -> None:
    """16-bit normalized visualization with a min/max sidecar."""
    lo, hi = float(depth.min()), float(depth.max())
    scale = hi - lo if hi > lo else 1.0
    norm = np.clip((depth - lo) / scale, 0.0, 1.0)
    Image.fromarray((norm * 65535.0).astype(np.uint16)).save(path)
    Path(str(path) + ".range.txt").write_text(f"{lo} {hi}\n")


# ---------------------------------------------------------------------------
# PFM (grayscale, little-endian)
# ---------------------------------------------------------------------------

def save_pfm(path: Path, data: np.ndarray) -> None:
    if data.ndim != 2:
        raise ValidationError("PFM writer expects a 2D array")
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{data.shape[1]} {data.shape[0]}\n".encode())
        fh.write(b"-1.0\n")
        # PFM stores rows bottom to top
        fh.write(np.flipud(data).astype("<f4").tobytes())


def load_pfm(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().strip()
        if header != b"Pf":
            raise FormatError(f"{path}: not a grayscale PFM file")
        dims = fh.readline().split()
        if len(dims) != 2:
            raise FormatError(f"{path}: malformed PFM dimensions")
        w, h = int(dims[0]), int(dims[1])
        scale = float(fh.readline())
        payload = fh.read(w * h * 4)
        if len(payload) != w * h * 4:
            raise FormatError(f"{path}: expected {w * h * 4} payload bytes, got {len(payload)}")
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(payload, dtype=dtype).reshape(h, w)
    return np.flipud(data).astype(np.float64)


# ---------------------------------------------------------------------------
# track files
# ---------------------------------------------------------------------------

def save_tracks(tracks: TrackSet, path: Path) -> None:
    with open(path, "wb") as fh:
        fh.write(TRACK_MAGIC)
        fh.write(struct.pack("<II", tracks.count, tracks.n_frames))
        rec = np.empty((tracks.count, tracks.n_frames, 9), dtype=np.uint8)
        uv = tracks.positions.astype("<f4")
        rec[:, :, 0:4] = uv[:, :, 0:1].view(np.uint8).reshape(tracks.count, tracks.n_frames, 4)
        rec[:, :, 4:8] = uv[:, :, 1:2].view(np.uint8).reshape(tracks.count, tracks.n_frames, 4)
        rec[:, :, 8] = tracks.visibility.astype(np.uint8)
        fh.write(rec.tobytes())


def load_tracks(path: Path) -> TrackSet:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != TRACK_MAGIC:
        raise FormatError(f"{path}: bad magic or truncated header")
    k, m = struct.unpack("<II", raw[4:12])
    expected = 12 + k * m * 9
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, got {len(raw)}")
    if k == 0:
        return TrackSet(
            query_pixels=np.zeros((0, 2)),
            positions=np.zeros((0, m, 2)),
            visibility=np.zeros((0, m), dtype=bool),
        )
    rec = np.frombuffer(raw[12:], dtype=np.uint8).reshape(k, m, 9)
    u = rec[:, :, 0:4].copy().view("<f4")[:, :, 0]
    v = rec[:, :, 4:8].copy().view("<f4")[:, :, 0]
    vis = rec[:, :, 8] > 0
    positions = np.stack([u, v], axis=-1).astype(np.float64)
    return TrackSet(query_pixels=positions[:, 0].copy(), positions=positions, visibility=vis)


# ---------------------------------------------------------------------------
# poses / intrinsics / dataset
# ---------------------------------------------------------------------------

def _orthonormalize(r: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


def load_poses(path: Path) -> list[np.ndarray]:
    mats = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        vals = line.split()
        if len(vals) != 16:
            raise FormatError(f"{path}:{ln}: expected 16 values, got {len(vals)}")
        mat = np.array([float(v) for v in vals]).reshape(4, 4)
        r = mat[:3, :3]
        if np.linalg.det(r) < 0:
            raise FormatError(f"{path}:{ln}: rotation has determinant -1")
        err = np.abs(r @ r.T - np.eye(3)).max()
        if err > 1e-6:
            raise FormatError(f"{path}:{ln}: rotation not orthonormal (error {err:.2e})")
        mat[:3, :3] = _orthonormalize(r)
        mats.append(mat)
    return mats


def save_poses(path: Path, cams: list[Camera]) -> None:
    lines = []
    for cam in cams:
        mat = np.eye(4)
        mat[:3, :3] = cam.rotation
        mat[:3, 3] = cam.translation
        lines.append(" ".join(repr(float(v)) for v in mat.ravel()))
    Path(path).write_text("\n".join(lines) + "\n")


def load_intrinsics(path: Path) -> tuple:
    vals = Path(path).read_text().split()
    if len(vals) != 6:
        raise FormatError(f"{path}: expected 'fx fy cx cy width height'")
    fx, fy, cx, cy = (float(v) for v in vals[:4])
    w, h = int(vals[4]), int(vals[5])
    return fx, fy, cx, cy, w, h


@dataclass
class Dataset:
    frames: list
    cams: list
    root: Path

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([f.timestamp for f in self.frames])

    def tracks_path(self, window_index: int) -> Path:
        return self.root / "tracks" / f"window_{window_index:03d}.trk"

    def monodepth(self, frame_index: int) -> np.ndarray:
        return load_pfm(self.root / "monodepth" / f"{frame_index:06d}.pfm")

    def gt_depth(self, frame_index: int) -> np.ndarray | None:
        path = self.root / "depth_gt" / f"{frame_index:06d}.pfm"
        return load_pfm(path) if path.exists() else None


def load_dataset(root: Path) -> Dataset:
    """Read the on-disk layout into frames and cameras."""
    root = Path(root)
    img_dir = root / "images"
    if not img_dir.is_dir():
        raise ValidationError(f"{root}: missing images/ directory")
    img_paths = sorted(img_dir.glob("*.png"))
    if not img_paths:
        raise ValidationError(f"{img_dir}: no PNG frames found")
    poses = load_poses(root / "poses.txt")
    if len(poses) != len(img_paths):
        raise ValidationError(
            f"{root}: {len(img_paths)} images but {len(poses)} poses"
        )
    fx, fy, cx, cy, w, h = load_intrinsics(root / "intrinsics.txt")
    ts_path = root / "timestamps.txt"
    if ts_path.exists():
        stamps = [float(v) for v in ts_path.read_text().split()]
        if len(stamps) != len(img_paths):
            raise ValidationError(f"{ts_path}: {len(stamps)} entries for {len(img_paths)} frames")
    else:
        stamps = list(range(len(img_paths)))

    frames, cams = [], []
    for i, path in enumerate(img_paths):
        image = load_image(path)
        if image.shape[:2] != (h, w):
            raise ValidationError(f"{path}: size {image.shape[:2]} does not match intrinsics {(h, w)}")
        mask_path = root / "masks" / path.name
        mask = load_mask(mask_path) if mask_path.exists() else None
        frames.append(make_frame(image, stamps[i], mask))
        cams.append(Camera(fx=fx, fy=fy, cx=cx, cy=cy, width=w, height=h,
                           rotation=poses[i][:3, :3], translation=poses[i][:3, 3]))
    return Dataset(frames=frames, cams=cams, root=root)


def save_dataset(root: Path, frames: list, cams: list,
                 gt_depth: np.ndarray | None = None,
                 monodepth=None) -> None:
    """Write the layout that load_dataset reads (tracks are written
    separately once a window plan exists)."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    any_mask = any(f.tool_mask.any() for f in frames)
    if any_mask:
        (root / "masks").mkdir(exist_ok=True)
    for i, frame in enumerate(frames):
        save_image(root / "images" / f"{i:06d}.png", frame.image)
        if any_mask:
            save_mask(root / "masks" / f"{i:06d}.png", frame.tool_mask)
    save_poses(root / "poses.txt", cams)
    cam = cams[0]
    (root / "intrinsics.txt").write_text(
        f"{cam.fx} {cam.fy} {cam.cx} {cam.cy} {cam.width} {cam.height}\n"
    )
    (root / "timestamps.txt").write_text(
        "\n".join(repr(float(f.timestamp)) for f in frames) + "\n"
    )
    if gt_depth is not None:
        (root / "depth_gt").mkdir(exist_ok=True)
        for i in range(len(frames)):
            save_pfm(root / "depth_gt" / f"{i:06d}.pfm", gt_depth[i])
    if monodepth is not None:
        (root / "monodepth").mkdir(exist_ok=True)
        for i in range(len(frames)):
            save_pfm(root / "monodepth" / f"{i:06d}.pfm", monodepth(i))


# ---------------------------------------------------------------------------
# checkpoints and manifest
# ---------------------------------------------------------------------------

def save_checkpoint(model: LocalModel, path: Path) -> None:
    """Binary layout: magic, version u32, counts (N, sh coeffs, B) u32,
    then little-endian float64 blocks in declared field order."""
    g, d = model.gaussians, model.deformation
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IIII", CHECKPOINT_VERSION, g.count, g.sh_coeff_count,
                             d.basis_count))
        for arr in (g.positions, g.rot_params, g.log_scales, g.opacity_logits, g.colors):
            fh.write(arr.astype("<f8").tobytes())
        for grp in GROUPS:
            for arr in (d.centers[grp], d.widths[grp], d.weights[grp]):
                fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path: Path) -> LocalModel:
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic")
    version, n, sh_k, basis = struct.unpack("<IIII", raw[4:20])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    off = 20

    def take(shape):
        nonlocal off
        count = int(np.prod(shape))
        end = off + count * 8
        if end > len(raw):
            raise FormatError(f"{path}: truncated checkpoint (need {end} bytes, have {len(raw)})")
        arr = np.frombuffer(raw[off:end], dtype="<f8").reshape(shape).astype(np.float64)
        off = end
        return arr

    g = GaussianSet(
        positions=take((n, 3)),
        rot_params=take((n, 4)),
        log_scales=take((n, 3)),
        opacity_logits=take((n,)),
        colors=take((n, 3, sh_k)),
    )
    centers, widths, weights = {}, {}, {}
    for grp in GROUPS:
        centers[grp] = take((n, basis))
        widths[grp] = take((n, basis))
        weights[grp] = take((n, basis, CHANNELS[grp]))
    d = DeformationModel(weights=weights, centers=centers, widths=widths)
    return LocalModel(gaussians=g, deformation=d)


def save_manifest(path: Path, plan: WindowPlan, timestamps: np.ndarray,
                  checkpoint_names: list[str]) -> None:
    lines = ["# window start end t_start t_end checkpoint"]
    for wi, (start, end) in enumerate(plan.boundaries):
        lines.append(
            f"{wi} {start} {end} {timestamps[start]!r} {timestamps[end - 1]!r} "
            f"{checkpoint_names[wi]}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path: Path):
    """Returns (plan, timestamps-per-window (start, end), checkpoint names)."""
    boundaries, names, spans = [], [], []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 6:
            raise FormatError(f"{path}: malformed manifest line: {line!r}")
        _, start, end, t0, t1, name = parts
        boundaries.append((int(start), int(end)))
        spans.append((float(t0), float(t1)))
        names.append(name)
    if not boundaries:
        raise FormatError(f"{path}: empty manifest")
    return boundaries, spans, names


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

CONFIG_KEYS = {
    # paths
    "dataset_root": str,
    "output_dir": str,
    # partitioning
    "delta_t": float,
    "delta_r": float,
    "rgb_diff": float,
    # training
    "iterations": int,
    "learning_rate": float,
    "seed": int,
    "basis_count": int,
    "sh_degree": int,
    "test_every": int,
    "pair_count": int,
    "track_count": int,
    "densify_interval": int,
    "densify_grad_threshold": float,
    "prune_opacity_threshold": float,
    "densify_stop_fraction": float,
    # loss weights
    "lambda_rgb": float,
    "lambda_track": float,
    "lambda_rigid": float,
    "lambda_rot": float,
    "lambda_iso": float,
    "lambda_mix": float,
    "lambda_w": float,
    "k_neighbors": int,
    # fine-stage refinement
    "refine_mode": str,
    "refine_threshold": float,
    "refine_stride": int,
    # synthetic scene generation
    "scene_surface": str,
    "scene_texture": str,
    "scene_amplitude": float,
    "scene_omega": float,
    "scene_camera_path": str,
    "scene_n_frames": int,
    "scene_width": int,
    "scene_height": int,
    "scene_seed": int,
    "scene_dt": float,
    "scene_orbit_step_deg": float,
    "scene_forward_step": float,
    "scene_mono_noise": float,
    "scene_with_masks": int,
}


def parse_config(path: Path) -> dict:
    """Flat key = value text config; unknown keys are errors."""
    cfg = {}
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{ln}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ValidationError(f"{path}:{ln}: unknown config key '{key}'")
        try:
            cfg[key] = CONFIG_KEYS[key](value)
        except ValueError as exc:
            raise ValidationError(f"{path}:{ln}: bad value for '{key}': {value!r}") from exc
    return cfg


def require_keys(cfg: dict, keys: list[str], path) -> None:
    for key in keys:
        if key not in cfg:
            raise ValidationError(f"{path}: missing required config key '{key}'")


# ---------------------------------------------------------------------------
# metric report
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ("frame", "psnr", "ssim", "abs_rel", "sq_rel", "rmse",
                  "rmse_log", "delta_1.25", "delta_1.25^2")


def save_report(path: Path, rows: list[dict], note: str = "") -> None:
    lines = []
    if note:
        for piece in note.splitlines():
            lines.append(f"# {piece}")
    lines.append(",".join(REPORT_COLUMNS))
    for row in rows:
        lines.append(",".join(_fmt(row.get(c)) for c in REPORT_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    return f"{value:.6f}"
