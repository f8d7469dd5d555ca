"""Progressive per-window optimization.

Each window trains its own canonical set and deformation model with Adam
on the combined loss; densification and opacity pruning run on a fixed
schedule.  Windows are optimized strictly in order, seeding each new
window from the previous one.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import initialization as init
from . import losses as losses_mod
from . import params
from .deformation import DeformationModel, GROUPS, LocalModel, deform
from .errors import TrainingDivergedError, ValidationError
from .renderer import RenderOutput, project, render, render_backward
from .scene import (
    Camera,
    Frame,
    GaussianSet,
    WindowPlan,
    activate_backward,
    normalize_window_time,
    quat_normalize,
)
from .windowing import PartitionConfig, partition

logger = logging.getLogger(__name__)

# learning-rate multipliers per parameter class, relative to the base rate
LR_MULTIPLIERS = {
    "positions": 1.0,
    "rot_params": 0.05,
    "log_scales": 0.25,
    "opacity_logits": 2.5,
    "colors": 0.125,
}
DEFORM_LR_MULTIPLIER = 1.0
WIDTH_FLOOR = 1e-4
SPLIT_SCALE_FACTOR = 1.6
PERCENT_DENSE = 0.01


@dataclass(frozen=True)
class TrainConfig:
    iterations_per_window: int = 1000
    learning_rate: float = 1.6e-3
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-4
    prune_opacity_threshold: float = 0.005
    densify_stop_fraction: float = 0.7
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    basis_count: int = 8
    sh_degree: int = 0
    test_every: int = 8       # every test_every-th frame is held out (7:1)
    pair_count: int = 4       # triangulation pairs per window
    track_count: int = 2048   # synthetic query pixels per window

    def __post_init__(self):
        if self.iterations_per_window < 1:
            raise ValidationError("iterations_per_window must be >= 1")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")


@dataclass
class GlobalModel:
    plan: WindowPlan
    models: list
    timestamps: np.ndarray
    diagnostics: list


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def adam_step(param, grad, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns (param, m, v)."""
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    param = param - lr * m_hat / (np.sqrt(v_hat) + eps)
    return param, m, v


class Adam:
    """Adam over a name -> array parameter dict with per-name rates."""

    def __init__(self, param_refs: dict, lr: float, multipliers: dict, cfg: TrainConfig):
        self.params = param_refs
        self.lr = lr
        self.multipliers = multipliers
        self.beta1, self.beta2, self.eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon
        self.t = 0
        self.m = {k: np.zeros_like(p) for k, p in param_refs.items()}
        self.v = {k: np.zeros_like(p) for k, p in param_refs.items()}

    def step(self, grads: dict) -> None:
        self.t += 1
        for name, p in self.params.items():
            g = grads[name]
            new_p, self.m[name], self.v[name] = adam_step(
                p, g, self.m[name], self.v[name], self.t,
                self.lr * self.multipliers.get(name, 1.0),
                self.beta1, self.beta2, self.eps,
            )
            p[...] = new_p

    def remap_rows(self, new_from_old: np.ndarray, new_params: dict) -> None:
        """Re-index optimizer state after densification; fresh rows get
        zero moments."""
        for name in list(self.m.keys()):
            old_m, old_v = self.m[name], self.v[name]
            shape = new_params[name].shape
            m = np.zeros(shape)
            v = np.zeros(shape)
            src = new_from_old >= 0
            m[src] = old_m[new_from_old[src]]
            v[src] = old_v[new_from_old[src]]
            self.m[name], self.v[name] = m, v
        self.params = new_params


def _lr_multipliers(g: GaussianSet, d: DeformationModel) -> dict:
    mult = dict(LR_MULTIPLIERS)
    for grp in GROUPS:
        for part in ("weights", "centers", "widths"):
            mult[f"deform.{grp}.{part}"] = DEFORM_LR_MULTIPLIER
    return mult


# ---------------------------------------------------------------------------
# densification
# ---------------------------------------------------------------------------

def densify_and_prune(
    local: LocalModel,
    grad_sum: np.ndarray,
    grad_cnt: np.ndarray,
    cfg: TrainConfig,
    scene_extent: float,
    rng: np.random.Generator,
):
    """Clone small / split large high-gradient Gaussians, prune transparent
    ones.  Returns (LocalModel, new_from_old) where new_from_old maps each
    new row to its surviving source row or -1 for fresh rows."""
    g, d = local.gaussians, local.deformation
    n = g.count
    mean_grad = grad_sum / np.maximum(grad_cnt, 1.0)
    opacity = 1.0 / (1.0 + np.exp(-g.opacity_logits))
    low_opacity = opacity < cfg.prune_opacity_threshold

    candidates = (mean_grad > cfg.densify_grad_threshold) & ~low_opacity
    max_scale = np.exp(g.log_scales).max(axis=1)
    split_mask = candidates & (max_scale > PERCENT_DENSE * scene_extent)
    clone_mask = candidates & ~split_mask

    survivors = np.nonzero(~split_mask & ~low_opacity)[0]
    clones = np.nonzero(clone_mask & ~split_mask)[0]
    splits = np.nonzero(split_mask)[0]

    blocks_idx = [survivors, clones]
    pieces = {name: [getattr(g, name)[survivors], getattr(g, name)[clones]]
              for name in params.GAUSSIAN_FIELDS}
    if len(splits):
        from .scene import quat_to_rotmat

        parent = {name: getattr(g, name)[splits] for name in params.GAUSSIAN_FIELDS}
        rot = quat_to_rotmat(quat_normalize(parent["rot_params"]))
        scales = np.exp(parent["log_scales"])
        for _ in range(2):
            eps = rng.standard_normal((len(splits), 3))
            offsets = np.einsum("nij,nj->ni", rot, scales * eps)
            pieces["positions"].append(parent["positions"] + offsets)
            pieces["rot_params"].append(parent["rot_params"].copy())
            pieces["log_scales"].append(parent["log_scales"] - np.log(SPLIT_SCALE_FACTOR))
            pieces["opacity_logits"].append(parent["opacity_logits"].copy())
            pieces["colors"].append(parent["colors"].copy())
            blocks_idx.append(splits)

    new_g = GaussianSet(**{name: np.concatenate(pieces[name]) for name in params.GAUSSIAN_FIELDS})
    if new_g.count == 0:
        raise ValidationError("densify_and_prune removed every Gaussian (model collapsed)")

    row_sources = np.concatenate(blocks_idx)
    new_d = d.select(row_sources)
    # only survivor rows keep optimizer state
    new_from_old = np.full(new_g.count, -1, dtype=np.int64)
    new_from_old[: len(survivors)] = survivors
    return LocalModel(gaussians=new_g, deformation=new_d), new_from_old


# ---------------------------------------------------------------------------
# per-window optimization
# ---------------------------------------------------------------------------

def _check_finite(term: str, value: float, iteration: int) -> None:
    if not np.isfinite(value):
        raise TrainingDivergedError(iteration, term, float(value))


def optimize_window(
    init_gaussians: GaussianSet,
    frames: list,
    cams: list,
    tracks: init.TrackSet | None,
    cfg: TrainConfig,
    weights: losses_mod.LossWeights,
    frame_times: np.ndarray,
    train_indices: np.ndarray | None = None,
    deformation: DeformationModel | None = None,
    rng: np.random.Generator | None = None,
):
    """Train one window; returns (LocalModel, diagnostics dict)."""
    if init_gaussians.count == 0:
        raise ValidationError("optimize_window: empty initialization")
    if len(frames) == 0:
        raise ValidationError("optimize_window: no frames")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    if train_indices is None or len(train_indices) == 0:
        train_indices = np.arange(len(frames))
    g = init_gaussians.copy()
    d = (deformation if deformation is not None
         else DeformationModel.zero_init(g.count, cfg.basis_count)).copy()

    extent = float(np.linalg.norm(g.positions.max(axis=0) - g.positions.min(axis=0)))
    extent = max(extent, 1e-6)
    graph = _maybe_graph(g, weights)
    adam = Adam(params.flatten_params(g, d), cfg.learning_rate, _lr_multipliers(g, d), cfg)

    grad_sum = np.zeros(g.count)
    grad_cnt = np.zeros(g.count)
    densify_stop = int(cfg.densify_stop_fraction * cfg.iterations_per_window)
    first_loss = last_loss = None

    for it in range(1, cfg.iterations_per_window + 1):
        j = int(train_indices[rng.integers(len(train_indices))])
        t_n = float(frame_times[j])
        grads = params.zero_grads(g, d)

        deformed = deform(g, d, t_n)
        proj = project(deformed, cams[j])
        out = render(proj, cams[j])
        l_rgb, grad_img = losses_mod.rendering_loss(
            out.color, frames[j].image, frames[j].tool_mask, weights.lambda_mix
        )
        _check_finite("rgb", l_rgb, it)
        raster = render_backward(proj, cams[j], grad_color=grad_img * weights.lambda_rgb)
        screen_norm = np.linalg.norm(raster["mean2d"], axis=1)
        grad_sum[proj.orig_index] += screen_norm[proj.orig_index]
        grad_cnt[proj.orig_index] += 1.0
        canon, dgrads = deformation_chain(g, d, t_n, raster)
        for name, arr in canon.items():
            grads["gaussians"][name] += arr
        grads["gaussians"]["colors"] += raster["colors"]
        params.add_deformation_grads(grads, dgrads)

        terms = {"rgb": l_rgb}
        if tracks is not None and weights.lambda_track > 0 and len(frames) > 1:
            l_track, track_grads = losses_mod.tracking_loss(
                g, d, cams[0], cams[j], float(frame_times[0]), t_n, tracks, j
            )
            _check_finite("track", l_track, it)
            terms["track"] = l_track
            _accumulate_tree(grads, track_grads, weights.lambda_track)

        if graph is not None:
            physics_terms = _physics_losses(g, d, deformed, t_n, graph, weights, grads, it)
            terms.update(physics_terms)

        total = losses_mod.total_loss(terms, weights)
        _check_finite("total", total, it)
        if first_loss is None:
            first_loss = total
        last_loss = total

        adam.step(params.flatten_grads(grads))
        _floor_widths(d)

        if (
            cfg.densify_interval > 0
            and cfg.densify_interval <= it <= densify_stop
            and it % cfg.densify_interval == 0
        ):
            local, new_from_old = densify_and_prune(
                LocalModel(gaussians=g, deformation=d), grad_sum, grad_cnt, cfg, extent, rng
            )
            g, d = local.gaussians.copy(), local.deformation
            new_params = params.flatten_params(g, d)
            adam.remap_rows(new_from_old, new_params)
            graph = _maybe_graph(g, weights)
            grad_sum = np.zeros(g.count)
            grad_cnt = np.zeros(g.count)

    model = LocalModel(gaussians=g, deformation=d)
    diag = {"first_loss": first_loss, "final_loss": last_loss, "count": g.count}
    return model, diag


def deformation_chain(g: GaussianSet, d: DeformationModel, t_n: float, raster: dict):
    """Route raster gradients on the deformed raw fields back through the
    deformation model."""
    from .deformation import deform_backward

    return deform_backward(g, d, t_n, {
        "positions": raster["positions"],
        "rot_params": raster["rot_params"],
        "log_scales": raster["log_scales"],
        "opacity_logits": raster["opacity_logits"],
    })


def _accumulate_tree(dst: dict, src: dict, scale: float) -> None:
    for name, arr in src["gaussians"].items():
        dst["gaussians"][name] += scale * arr
    for part in ("weights", "centers", "widths"):
        for grp, arr in src["deformation"][part].items():
            dst["deformation"][part][grp] += scale * arr


def _floor_widths(d: DeformationModel) -> None:
    """Keep basis widths positive after unconstrained Adam steps."""
    for grp in GROUPS:
        np.maximum(d.widths[grp], WIDTH_FLOOR, out=d.widths[grp])


def _maybe_graph(g: GaussianSet, weights: losses_mod.LossWeights):
    if g.count < 2:
        return None
    if weights.lambda_rigid == 0 and weights.lambda_rot == 0 and weights.lambda_iso == 0:
        return None
    return losses_mod.build_neighbor_graph(g.positions, weights.k_neighbors, weights.lambda_w)


def _physics_losses(g, d, deformed, t_n, graph, weights, grads, iteration) -> dict:
    from .deformation import deform_backward

    pos_c, pos_t = g.positions, deformed.positions
    quat_c = quat_normalize(g.rot_params)
    quat_t = quat_normalize(deformed.rot_params)
    terms = {}
    acc_pos_c = np.zeros_like(pos_c)
    acc_pos_t = np.zeros_like(pos_t)
    acc_quat_c = np.zeros_like(quat_c)
    acc_quat_t = np.zeros_like(quat_t)

    if weights.lambda_rigid > 0:
        val, gr = losses_mod.rigidity_loss(graph, pos_c, quat_c, pos_t, quat_t)
        _check_finite("rigid", val, iteration)
        terms["rigid"] = val
        acc_pos_c += weights.lambda_rigid * gr["pos_c"]
        acc_pos_t += weights.lambda_rigid * gr["pos_t"]
        acc_quat_c += weights.lambda_rigid * gr["quat_c"]
        acc_quat_t += weights.lambda_rigid * gr["quat_t"]
    if weights.lambda_rot > 0:
        val, gr = losses_mod.rotation_loss(graph, quat_c, quat_t)
        _check_finite("rot", val, iteration)
        terms["rot"] = val
        acc_quat_c += weights.lambda_rot * gr["quat_c"]
        acc_quat_t += weights.lambda_rot * gr["quat_t"]
    if weights.lambda_iso > 0:
        val, gr = losses_mod.isometry_loss(graph, pos_c, pos_t)
        _check_finite("iso", val, iteration)
        terms["iso"] = val
        acc_pos_c += weights.lambda_iso * gr["pos_c"]
        acc_pos_t += weights.lambda_iso * gr["pos_t"]

    # canonical-side activation chain
    canon_act = activate_backward(g, grad_quats=acc_quat_c)
    grads["gaussians"]["positions"] += acc_pos_c
    grads["gaussians"]["rot_params"] += canon_act["rot_params"]
    # deformed-side chain: activation then deformation
    def_act = activate_backward(deformed, grad_quats=acc_quat_t)
    canon_t, dgrads = deform_backward(g, d, t_n, {
        "positions": acc_pos_t,
        "rot_params": def_act["rot_params"],
    })
    grads["gaussians"]["positions"] += canon_t["positions"]
    grads["gaussians"]["rot_params"] += canon_t["rot_params"]
    params.add_deformation_grads(grads, dgrads)
    return terms


# ---------------------------------------------------------------------------
# progressive pipeline
# ---------------------------------------------------------------------------

@dataclass
class SequenceData:
    frames: list
    cams: list

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([f.timestamp for f in self.frames], dtype=np.float64)

    def __len__(self) -> int:
        return len(self.frames)


def train_test_split(n_frames: int, test_every: int):
    """Hold out every test_every-th frame (indices test_every-1, ...)."""
    idx = np.arange(n_frames)
    test = (idx % test_every) == (test_every - 1)
    return idx[~test], idx[test]


def run_progressive(
    seq: SequenceData,
    partition_cfg: PartitionConfig | None,
    cfg: TrainConfig,
    weights: losses_mod.LossWeights,
    tracks_provider,
    monodepth_provider=None,
    refine_cfg: init.RefineConfig = init.RefineConfig(),
    plan: WindowPlan | None = None,
    propagate: bool = True,
) -> GlobalModel:
    """Partition, initialize and train every window in order.

    tracks_provider(window_index, start, end) -> TrackSet
    monodepth_provider(frame_index) -> (H, W) depth prior, or None to skip
    the fine stage.
    """
    if plan is None:
        if partition_cfg is None:
            raise ValidationError("either a partition config or an explicit plan is required")
        plan = partition(seq.cams, seq.frames, partition_cfg)
    ts = seq.timestamps
    train_idx, _ = train_test_split(len(seq), cfg.test_every)
    train_set = set(train_idx.tolist())

    models, diags = [], []
    prev_model = None
    prev_span = None
    for wi, (start, end) in enumerate(plan.boundaries):
        try:
            fused = _init_window(
                seq, plan, wi, start, end, cfg, tracks_provider, monodepth_provider,
                refine_cfg, prev_model, prev_span, propagate,
            )
        except ValidationError as exc:
            raise ValidationError(f"window {wi} initialization failed: {exc}") from exc

        t_start, t_end = ts[start], ts[end - 1]
        frame_times = np.array(
            [normalize_window_time(t, t_start, t_end) for t in ts[start:end]]
        )
        local_train = np.array(
            [i - start for i in range(start, end) if i in train_set], dtype=int
        )
        if len(local_train) == 0:
            logger.warning("window %d has no training frames; using all frames", wi)
            local_train = np.arange(end - start)
        tracks = tracks_provider(wi, start, end)
        rng = np.random.default_rng(cfg.seed + wi)
        model, diag = optimize_window(
            fused, seq.frames[start:end], seq.cams[start:end], tracks, cfg, weights,
            frame_times, train_indices=local_train, rng=rng,
        )
        models.append(model)
        diag["window"] = wi
        diags.append(diag)
        prev_model = model
        prev_span = (t_start, t_end)
        logger.info(
            "window %d [%d, %d): %d Gaussians, loss %.4f -> %.4f",
            wi, start, end, diag["count"], diag["first_loss"], diag["final_loss"],
        )
    return GlobalModel(plan=plan, models=models, timestamps=ts, diagnostics=diags)


def _init_window(
    seq, plan, wi, start, end, cfg, tracks_provider, monodepth_provider,
    refine_cfg, prev_model, prev_span, propagate,
):
    tracks = tracks_provider(wi, start, end)
    cams_w = seq.cams[start:end]
    pairs = init.select_pairs(cams_w, cfg.pair_count)
    if pairs:
        cloud = init.triangulate_tracks(tracks, cams_w, pairs, seq.frames[start].image)
    else:
        cloud = init.empty_cloud()
    sh_k = (cfg.sh_degree + 1) ** 2
    tri_g = init.points_to_gaussians(cloud, sh_k) if cloud.count else None

    win_g = None
    if propagate and prev_model is not None:
        t_norm = normalize_window_time(seq.timestamps[start], prev_span[0], prev_span[1])
        win_g = init.propagate_cross_window(prev_model, t_norm)

    fused = init.fuse(tri_g, win_g)

    if monodepth_provider is not None:
        fused = _fine_stage(seq, start, fused, monodepth_provider, refine_cfg, sh_k)
    return fused


def _fine_stage(seq, start, fused, monodepth_provider, refine_cfg, sh_k):
    cam0 = seq.cams[start]
    frame0 = seq.frames[start]
    proj = project(fused, cam0)
    out = render(proj, cam0)
    mono = monodepth_provider(start)
    valid = (out.alpha > 0.5) & np.isfinite(mono)
    if valid.sum() < 2:
        logger.warning("fine stage: no rendered coverage to align against; skipped")
        return fused
    try:
        alignment = init.align_depth(out.depth, mono, valid)
    except ValidationError as exc:
        logger.warning("fine stage alignment failed (%s); skipped", exc)
        return fused
    if alignment.degenerate:
        logger.warning("fine stage alignment degenerate; refinement skipped")
        return fused
    new_cloud = init.refine_regions(
        out.color, frame0.image, frame0.tool_mask, alignment.aligned, cam0, refine_cfg
    )
    if new_cloud.count == 0:
        return fused
    return init.fuse(init.points_to_gaussians(new_cloud, sh_k), fused)


# ---------------------------------------------------------------------------
# evaluation-time rendering
# ---------------------------------------------------------------------------

def query(model: GlobalModel, cam: Camera, t: float) -> RenderOutput:
    """Render the scene at an arbitrary timestamp.

    The window whose (left-closed) span contains t is used; timestamps
    outside the sequence clamp to the nearest window with a warning.
    """
    ts = model.timestamps
    if t < ts[0] or t > ts[-1]:
        logger.warning("query time %.4f outside sequence span; clamped", t)
        t = float(np.clip(t, ts[0], ts[-1]))
    starts = np.array([ts[s] for s, _ in model.plan.boundaries])
    wi = int(np.searchsorted(starts, t, side="right") - 1)
    wi = max(0, min(wi, model.plan.n_windows - 1))
    start, end = model.plan.boundaries[wi]
    t_n = normalize_window_time(t, ts[start], ts[end - 1])
    local = model.models[wi]
    deformed = deform(local.gaussians, local.deformation, t_n)
    proj = project(deformed, cam)
    return render(proj, cam)
