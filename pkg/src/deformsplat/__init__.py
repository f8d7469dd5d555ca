"""Windowed deformable 3D Gaussian splatting for posed monocular video.

The package reconstructs a deforming scene from posed frames plus
precomputed point tracks and monocular depth priors: the sequence is
partitioned into local windows, each window gets a triangulation-seeded
canonical Gaussian set with a basis-function deformation field, and both
are optimized against photometric, trajectory and motion-regularity
losses.  Everything runs on the CPU in float64.
"""

from .deformation import DeformationModel, LocalModel, deform, eval_basis
from .errors import FormatError, TrainingDivergedError, ValidationError
from .initialization import (
    DepthAlignment,
    PointCloud,
    RefineConfig,
    TrackSet,
    align_depth,
    fuse,
    points_to_gaussians,
    propagate_cross_window,
    refine_regions,
    triangulate_tracks,
)
from .losses import (
    LossWeights,
    NeighborGraph,
    build_neighbor_graph,
    isometry_loss,
    rendering_loss,
    rigidity_loss,
    rotation_loss,
    total_loss,
    tracking_loss,
)
from .metrics import DepthMetricReport, depth_metrics, median_scale, psnr, ssim
from .renderer import (
    ProjectedScene,
    RenderOutput,
    project,
    render,
    render_backward,
    render_oracle,
)
from .scene import (
    ActivatedGaussians,
    Camera,
    Frame,
    GaussianSet,
    WindowPlan,
    activate,
    covariance,
    make_frame,
    make_window_plan,
    relative_rotation_angle,
)
from .synth import SceneBundle, SceneSpec, generate
from .trainer import (
    Adam,
    GlobalModel,
    SequenceData,
    TrainConfig,
    adam_step,
    densify_and_prune,
    optimize_window,
    query,
    run_progressive,
)
from .windowing import PartitionConfig, partition, uniform_partition

__version__ = "0.1.0"
