"""scenegrow: progressive 3D point-cloud scene construction and splat fitting.

The pipeline grows a colored point cloud from a single image by repeatedly
projecting the cloud into a new camera, filling the uncovered pixels with a
pluggable inpainting provider, recovering the depth scale of a monocular
depth estimate against the existing geometry, and warping the new points
along their rays so the seam closes. A simplified isotropic Gaussian-splat
scene is then optimized from the cloud with a mask-gated photometric loss.
"""

from .alignment import (
    ScaleFitReport,
    WarpField,
    apply_warp,
    build_warp_field,
    extract_boundary,
    fit_depth_scale,
)
from .errors import (
    ConfigError,
    DimensionMismatchError,
    EmptyCloudError,
    EmptyMaskError,
    NoCorrespondenceError,
    OptimizerError,
    OutputError,
    PipelineError,
    PoseOutsideWorldError,
    ProviderError,
    SceneGrowError,
)
from .fileio import export_ply, load_ply
from .geometry import (
    CameraIntrinsics,
    CameraPose,
    PointCloud,
    RgbdFrame,
    RoundTripReport,
    ValidityMask,
    lift_rgbd,
    project_cloud,
    ray_l1_norms,
    round_trip_check,
)
from .pipeline import (
    ConstructionConfig,
    ScaleFitParams,
    StepRecord,
    TrainingView,
    generate_training_views,
    init_cloud,
    run_construction,
)
from .providers import (
    ConstantFillProvider,
    InpaintRequest,
    OracleProvider,
    ProviderContext,
    RemoteProvider,
    estimate_depth,
    inpaint,
)
from .splats import (
    OptimizeSchedule,
    SplatScene,
    gradient_check,
    init_splats,
    load_checkpoint,
    masked_loss,
    optimize,
    psnr,
    render_splats,
    save_checkpoint,
)
from .trajectory import Trajectory, make_trajectory
from .world import SyntheticWorld, render_world, surface_distance

__version__ = "0.1.0"
