"""Command-line entry points for the full pipeline.

Subcommands: synth, partition, reconstruct, evaluate, render.  All behavior
flows through a flat key=value config file; exit codes are 0 on success,
1 on validation errors, 2 on internal errors.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataio
from .errors import ValidationError
from .initialization import RefineConfig
from .losses import LossWeights
from .metrics import depth_metrics, median_scale, psnr, ssim
from .scene import make_window_plan
from .synth import SceneSpec, generate
from .trainer import GlobalModel, SequenceData, TrainConfig, query, run_progressive, train_test_split
from .windowing import PartitionConfig, partition

logger = logging.getLogger(__name__)


def _partition_config(cfg: dict, path) -> PartitionConfig:
    dataio.require_keys(cfg, ["delta_t"], path)
    return PartitionConfig(
        delta_t=cfg["delta_t"],
        delta_r=cfg.get("delta_r", 15.0),
        rgb_diff=cfg.get("rgb_diff", 0.05),
    )


def _train_config(cfg: dict) -> TrainConfig:
    defaults = TrainConfig()
    return TrainConfig(
        iterations_per_window=cfg.get("iterations", defaults.iterations_per_window),
        learning_rate=cfg.get("learning_rate", defaults.learning_rate),
        densify_interval=cfg.get("densify_interval", defaults.densify_interval),
        densify_grad_threshold=cfg.get("densify_grad_threshold", defaults.densify_grad_threshold),
        prune_opacity_threshold=cfg.get("prune_opacity_threshold", defaults.prune_opacity_threshold),
        densify_stop_fraction=cfg.get("densify_stop_fraction", defaults.densify_stop_fraction),
        seed=cfg.get("seed", defaults.seed),
        basis_count=cfg.get("basis_count", defaults.basis_count),
        sh_degree=cfg.get("sh_degree", defaults.sh_degree),
        test_every=cfg.get("test_every", defaults.test_every),
        pair_count=cfg.get("pair_count", defaults.pair_count),
        track_count=cfg.get("track_count", defaults.track_count),
    )


def _loss_weights(cfg: dict) -> LossWeights:
    defaults = LossWeights()
    return LossWeights(
        lambda_rgb=cfg.get("lambda_rgb", defaults.lambda_rgb),
        lambda_track=cfg.get("lambda_track", defaults.lambda_track),
        lambda_rigid=cfg.get("lambda_rigid", defaults.lambda_rigid),
        lambda_rot=cfg.get("lambda_rot", defaults.lambda_rot),
        lambda_iso=cfg.get("lambda_iso", defaults.lambda_iso),
        lambda_mix=cfg.get("lambda_mix", defaults.lambda_mix),
        lambda_w=cfg.get("lambda_w", defaults.lambda_w),
        k_neighbors=cfg.get("k_neighbors", defaults.k_neighbors),
    )


def _refine_config(cfg: dict) -> RefineConfig:
    defaults = RefineConfig()
    return RefineConfig(
        mode=cfg.get("refine_mode", defaults.mode),
        threshold=cfg.get("refine_threshold", defaults.threshold),
        stride=cfg.get("refine_stride", defaults.stride),
    )


def _scene_spec(cfg: dict) -> SceneSpec:
    defaults = SceneSpec()
    return SceneSpec(
        surface=cfg.get("scene_surface", defaults.surface),
        texture=cfg.get("scene_texture", defaults.texture),
        amplitude=cfg.get("scene_amplitude", defaults.amplitude),
        omega=cfg.get("scene_omega", defaults.omega),
        camera_path=cfg.get("scene_camera_path", defaults.camera_path),
        n_frames=cfg.get("scene_n_frames", defaults.n_frames),
        width=cfg.get("scene_width", defaults.width),
        height=cfg.get("scene_height", defaults.height),
        seed=cfg.get("scene_seed", defaults.seed),
        dt=cfg.get("scene_dt", defaults.dt),
        orbit_step_deg=cfg.get("scene_orbit_step_deg", defaults.orbit_step_deg),
        forward_step=cfg.get("scene_forward_step", defaults.forward_step),
        mono_noise=cfg.get("scene_mono_noise", defaults.mono_noise),
        with_masks=bool(cfg.get("scene_with_masks", defaults.with_masks)),
    )


def _load_cfg(args) -> dict:
    return dataio.parse_config(Path(args.config))


def _dataset_tracks_provider(dataset: dataio.Dataset):
    def provider(wi: int, start: int, end: int):
        path = dataset.tracks_path(wi)
        if not path.exists():
            raise ValidationError(f"missing tracks file {path}")
        tracks = dataio.load_tracks(path)
        if tracks.n_frames != end - start:
            raise ValidationError(
                f"{path}: tracks cover {tracks.n_frames} frames, window has {end - start}"
            )
        return tracks
    return provider


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _load_cfg(args)
    dataio.require_keys(cfg, ["dataset_root"], args.config)
    spec = _scene_spec(cfg)
    part_cfg = _partition_config(cfg, args.config)
    bundle = generate(spec)
    root = Path(cfg["dataset_root"])
    dataio.save_dataset(root, bundle.frames, bundle.cams,
                        gt_depth=bundle.gt_depth, monodepth=bundle.mono_depth)
    plan = partition(bundle.cams, bundle.frames, part_cfg)
    (root / "tracks").mkdir(exist_ok=True)
    count = cfg.get("track_count", TrainConfig().track_count)
    for wi, (start, end) in enumerate(plan.boundaries):
        tracks = bundle.make_tracks(start, end, count)
        dataio.save_tracks(tracks, root / "tracks" / f"window_{wi:03d}.trk")
    print(f"wrote {spec.n_frames} frames, {plan.n_windows} track windows to {root}")
    return 0


def cmd_partition(args) -> int:
    cfg = _load_cfg(args)
    dataio.require_keys(cfg, ["dataset_root"], args.config)
    dataset = dataio.load_dataset(Path(cfg["dataset_root"]))
    plan = partition(dataset.cams, dataset.frames, _partition_config(cfg, args.config))
    print(f"{plan.n_windows} windows")
    for wi, (start, end) in enumerate(plan.boundaries):
        print(f"window {wi:3d}: frames [{start}, {end})")
    return 0


def cmd_reconstruct(args) -> int:
    cfg = _load_cfg(args)
    dataio.require_keys(cfg, ["dataset_root", "output_dir"], args.config)
    dataset = dataio.load_dataset(Path(cfg["dataset_root"]))
    seq = SequenceData(frames=dataset.frames, cams=dataset.cams)
    mono_dir = dataset.root / "monodepth"
    mono = dataset.monodepth if mono_dir.is_dir() else None
    model = run_progressive(
        seq,
        _partition_config(cfg, args.config),
        _train_config(cfg),
        _loss_weights(cfg),
        tracks_provider=_dataset_tracks_provider(dataset),
        monodepth_provider=mono,
        refine_cfg=_refine_config(cfg),
    )
    out_dir = Path(cfg["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for wi, local in enumerate(model.models):
        name = f"window_{wi:03d}.legs"
        dataio.save_checkpoint(local, out_dir / name)
        names.append(name)
    dataio.save_manifest(out_dir / "manifest.txt", model.plan, model.timestamps, names)
    print(f"reconstructed {model.plan.n_windows} windows -> {out_dir}")
    return 0


def _load_global_model(out_dir: Path, timestamps: np.ndarray) -> GlobalModel:
    boundaries, _, names = dataio.load_manifest(out_dir / "manifest.txt")
    plan = make_window_plan(boundaries, timestamps)
    models = [dataio.load_checkpoint(out_dir / name) for name in names]
    return GlobalModel(plan=plan, models=models, timestamps=timestamps, diagnostics=[])


def cmd_evaluate(args) -> int:
    cfg = _load_cfg(args)
    dataio.require_keys(cfg, ["dataset_root", "output_dir"], args.config)
    dataset = dataio.load_dataset(Path(cfg["dataset_root"]))
    out_dir = Path(cfg["output_dir"])
    model = _load_global_model(out_dir, dataset.timestamps)
    test_every = cfg.get("test_every", TrainConfig().test_every)
    _, test_idx = train_test_split(len(dataset.frames), test_every)
    if args.split == "train":
        eval_idx, _ = train_test_split(len(dataset.frames), test_every)
    elif args.split == "all":
        eval_idx = np.arange(len(dataset.frames))
    else:
        eval_idx = test_idx

    render_dir = out_dir / "renders"
    render_dir.mkdir(exist_ok=True)
    rows = []
    sums = {}
    for i in eval_idx:
        frame = dataset.frames[i]
        out = query(model, dataset.cams[i], float(frame.timestamp))
        mask = frame.tool_mask
        row = {
            "frame": str(i),
            "psnr": psnr(out.color, frame.image, mask[:, :, None].repeat(3, axis=2)),
            "ssim": ssim(out.color, frame.image, mask),
        }
        gt = dataset.gt_depth(i)
        if gt is not None:
            valid = (gt > 0) & ~mask
            if valid.sum() > 0:
                scaled = median_scale(out.depth, gt, valid)
                rep = depth_metrics(scaled, gt, valid)
                row.update({
                    "abs_rel": rep.abs_rel, "sq_rel": rep.sq_rel, "rmse": rep.rmse,
                    "rmse_log": rep.rmse_log, "delta_1.25": rep.delta_1,
                    "delta_1.25^2": rep.delta_2,
                })
        rows.append(row)
        for key, val in row.items():
            if key != "frame":
                sums.setdefault(key, []).append(val)
        dataio.save_image(render_dir / f"{i:06d}.png", np.clip(out.color, 0.0, 1.0))
        dataio.save_depth_png(render_dir / f"{i:06d}_depth.png", out.depth)
    mean_row = {"frame": "mean"}
    mean_row.update({k: float(np.mean(v)) for k, v in sums.items()})
    rows.append(mean_row)
    note = ("tool-masked pixels excluded from all metrics; "
            "median scaling applied to depth before the depth metrics")
    dataio.save_report(out_dir / "report.csv", rows, note)
    print(f"evaluated {len(eval_idx)} frames -> {out_dir / 'report.csv'}")
    print(f"mean PSNR {mean_row.get('psnr', float('nan')):.3f} dB")
    return 0


def cmd_render(args) -> int:
    cfg = _load_cfg(args)
    dataio.require_keys(cfg, ["dataset_root", "output_dir"], args.config)
    dataset = dataio.load_dataset(Path(cfg["dataset_root"]))
    model = _load_global_model(Path(cfg["output_dir"]), dataset.timestamps)
    t = args.time if args.time is not None else float(dataset.frames[args.frame].timestamp)
    out = query(model, dataset.cams[args.frame], t)
    dataio.save_image(Path(args.out), np.clip(out.color, 0.0, 1.0))
    dataio.save_depth_png(Path(str(args.out) + ".depth.png"), out.depth)
    print(f"rendered frame pose {args.frame} at t={t} -> {args.out}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deformsplat",
        description="Windowed deformable Gaussian-splatting reconstruction",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn in (("synth", cmd_synth), ("partition", cmd_partition),
                     ("reconstruct", cmd_reconstruct), ("evaluate", cmd_evaluate),
                     ("render", cmd_render)):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="key = value config file")
        p.set_defaults(fn=fn)
        if name == "evaluate":
            p.add_argument("--split", choices=("test", "train", "all"), default="test")
        if name == "render":
            p.add_argument("--frame", type=int, required=True, help="frame index providing the pose")
            p.add_argument("--time", type=float, default=None, help="timestamp (default: frame's)")
            p.add_argument("--out", required=True, help="output image path")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # internal failure
        logger.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
