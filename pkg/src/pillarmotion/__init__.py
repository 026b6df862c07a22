"""Self-supervised pillar motion estimation on LiDAR sweep pairs.

The motion of a driving scene is represented as a bird's-eye-view grid of
per-pillar 2D displacements. Instead of supervision, the field is fit by
minimizing structural consistency between the displaced sweep and the next
one, a cross-sensor flow regularizer, and a smoothness term, with static
regions downweighted by a probabilistic motion mask. A built-in synthetic
scene simulator provides exact flow and ground truth for validation.
"""

from .estimator import (
    EstimateResult,
    NumericalError,
    OptimizerConfig,
    ablation_run,
    estimate,
)
from .evaluation import (
    GroupStats,
    ablation_table,
    evaluate,
    evaluate_banded,
    lambda_sweep,
)
from .geometry import (
    CameraModel,
    FlowImage,
    ObjectFlowSamples,
    RigidTransform,
    ego_flow,
    factorize_object_flow,
    project,
    transform_points,
)
from .losses import (
    LossConfig,
    LossTerms,
    MaskWeights,
    SceneInputs,
    build_mask,
    chamfer_consistency,
    regularization,
    smoothness,
    static_probability,
    total_loss,
    variant_config,
)
from .nn_index import NeighborIndex
from .pillar_grid import (
    GridSpec,
    PillarMotionField,
    Pillarization,
    apply_motion,
    pillarize,
    scatter_motion,
)
from .simulator import (
    BoxSpec,
    LidarModel,
    SceneBundle,
    SceneSpec,
    SceneTruth,
    benchmark_suite,
    camera_ring,
    generate,
    occlusion_cull,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
