"""End-to-end construction loop: grow a point cloud along a trajectory.

Each step projects the existing cloud into the next camera, fills the
uncovered pixels with the inpainting provider, estimates depth, fits the
depth-scale coefficient against the projected reference, warps the new
points so the seam closes, and appends them to the cloud. Afterwards,
supplemental training views can be reprojected from the finished cloud for
splat optimization; those are never inpainted, their masks gate the loss.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from . import providers as prov
from .alignment import ScaleFitReport, apply_warp, build_warp_field, fit_depth_scale
from .errors import PipelineError, ProviderError
from .geometry import (
    CameraIntrinsics,
    CameraPose,
    PointCloud,
    RgbdFrame,
    ValidityMask,
    lift_rgbd,
    project_cloud,
    ray_l1_norms,
)
from .trajectory import Trajectory

log = logging.getLogger(__name__)

# Warn when warp clamping touches more than this fraction of the new pixels.
CLAMP_WARN_FRACTION = 0.01


@dataclass(frozen=True)
class ScaleFitParams:
    lr: float = 0.1
    max_iter: int = 100
    tol: float = 1e-5


@dataclass(frozen=True)
class StepRecord:
    """Observability record for one construction step."""

    step: int
    pose: CameraPose
    image_digest: str
    fill_fraction: float
    scale_fit: ScaleFitReport | None
    points_added: int
    cloud_size: int
    warp_clamped: int = 0
    warp_max_correction: float = 0.0
    warning: str | None = None


@dataclass(frozen=True)
class TrainingView:
    frame: RgbdFrame
    mask: ValidityMask
    pose: CameraPose


@dataclass
class ConstructionConfig:
    """Inputs for one construction run."""

    input: RgbdFrame | np.ndarray | str
    intr: CameraIntrinsics
    trajectory: Trajectory
    scale_fit: ScaleFitParams = field(default_factory=ScaleFitParams)
    prompt: str = ""
    prompt_schedule: tuple[tuple[int, str], ...] = ()
    seed: int = 0

    def prompt_for_step(self, step: int) -> str:
        prompt = self.prompt
        for at, text in sorted(self.prompt_schedule):
            if at <= step:
                prompt = text
        return prompt


def _digest(image: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(image).tobytes()).hexdigest()


def prepare_initial_frame(
    input_spec: RgbdFrame | np.ndarray | str,
    intr: CameraIntrinsics,
    pose0: CameraPose,
    provider,
    prompt: str = "",
) -> RgbdFrame:
    """Resolve the input variant (RGBD / RGB / text prompt) into a full frame.

    RGB-only input gets provider depth with the scale fixed to 1 by
    convention (the first frame defines the scene's metric scale). Prompt
    input generates the image by inpainting an all-holes frame first.
    """
    context = prov.ProviderContext(intr=intr, pose=pose0, step=0)
    if isinstance(input_spec, RgbdFrame):
        return input_spec
    if isinstance(input_spec, str):
        h, w = intr.shape
        request = prov.InpaintRequest(
            partial_rgb=np.zeros((h, w, 3)),
            mask=ValidityMask.zeros(h, w),
            prompt=input_spec or prompt,
        )
        rgb = prov.inpaint(provider, request, context)
    else:
        rgb = np.asarray(input_spec, dtype=np.float64)
        if rgb.shape != (intr.height, intr.width, 3):
            raise ValueError(
                f"rgb input shape {rgb.shape} does not match camera "
                f"{intr.height}x{intr.width}x3"
            )
    depth = prov.estimate_depth(provider, rgb, context)
    return RgbdFrame(rgb, depth)


def init_cloud(
    input_spec: RgbdFrame | np.ndarray | str,
    intr: CameraIntrinsics,
    pose0: CameraPose,
    provider,
    prompt: str = "",
) -> PointCloud:
    """Lift the (resolved) initial frame into the starting point cloud."""
    frame = prepare_initial_frame(input_spec, intr, pose0, provider, prompt)
    return lift_rgbd(frame, None, intr, pose0, select_value=1, source_step=0)


def run_construction(
    config: ConstructionConfig,
    provider,
    on_step=None,
) -> tuple[PointCloud, list[StepRecord]]:
    """Execute the construction loop over the configured trajectory.

    Deterministic given the config and a deterministic provider. Any step
    failure aborts with a PipelineError carrying the records accumulated so
    far, so callers can persist partial progress. ``on_step`` (optional)
    receives ``(record, frame, mask, scaled_depth)`` per step, including the
    initial frame at step 0, for artifact persistence.
    """
    intr = config.intr
    poses = config.trajectory.poses
    if len(poses) == 0:
        raise PipelineError("trajectory is empty")
    records: list[StepRecord] = []
    try:
        frame0 = prepare_initial_frame(
            config.input, intr, poses[0], provider, config.prompt_for_step(0)
        )
        cloud = lift_rgbd(frame0, None, intr, poses[0], select_value=1, source_step=0)
    except (ProviderError, ValueError) as exc:
        raise PipelineError(f"initialization failed: {exc}", step=0, records=records) from exc

    record0 = StepRecord(
        step=0,
        pose=poses[0],
        image_digest=_digest(frame0.rgb),
        fill_fraction=1.0,
        scale_fit=None,
        points_added=len(cloud),
        cloud_size=len(cloud),
    )
    records.append(record0)
    if on_step is not None:
        on_step(record0, frame0, ValidityMask.ones(intr.height, intr.width), frame0.depth)

    for i in range(1, len(poses)):
        pose = poses[i]
        try:
            projected, mask = project_cloud(cloud, intr, pose)
            context = prov.ProviderContext(intr=intr, pose=pose, step=i)
            request = prov.InpaintRequest(
                partial_rgb=projected.rgb, mask=mask, prompt=config.prompt_for_step(i)
            )
            image = prov.inpaint(provider, request, context)
            est_depth = prov.estimate_depth(provider, image, context)
            report = fit_depth_scale(
                est_depth,
                projected.depth,
                mask,
                lr=config.scale_fit.lr,
                max_iter=config.scale_fit.max_iter,
                tol=config.scale_fit.tol,
                ray_norms=ray_l1_norms(intr, pose),
            )
            scaled_depth = report.d * est_depth
            warp = build_warp_field(scaled_depth, mask, projected.depth, intr, pose)
            new_frame = RgbdFrame(image, scaled_depth)
            new_points, clamped = apply_warp(
                new_frame, mask, warp, intr, pose, source_step=i
            )
            cloud = PointCloud.concatenate([cloud, new_points])

            holes = int((mask.mask == 0).sum())
            warning = None
            if holes and clamped > CLAMP_WARN_FRACTION * holes:
                warning = (
                    f"warp clamped {clamped}/{holes} new pixels to the near plane"
                )
                log.warning("step %d: %s", i, warning)
            record = StepRecord(
                step=i,
                pose=pose,
                image_digest=_digest(image),
                fill_fraction=1.0 - mask.filled_fraction(),
                scale_fit=report,
                points_added=len(new_points),
                cloud_size=len(cloud),
                warp_clamped=clamped,
                warp_max_correction=warp.max_correction,
                warning=warning,
            )
            records.append(record)
            if on_step is not None:
                on_step(record, RgbdFrame(image, scaled_depth), mask, scaled_depth)
        except PipelineError as exc:
            raise PipelineError(
                f"step {i} failed: {exc}", step=i, records=records
            ) from exc
        except (ProviderError, ValueError) as exc:
            raise PipelineError(
                f"step {i} failed: {exc}", step=i, records=records
            ) from exc
    return cloud, records


def generate_training_views(
    cloud: PointCloud,
    intr: CameraIntrinsics,
    supplemental: Trajectory,
) -> tuple[list[TrainingView], int]:
    """Reproject the finished cloud along a supplemental trajectory.

    Views are never inpainted; the masks ride along to gate the photometric
    loss. Views with empty masks are excluded and counted.
    """
    views: list[TrainingView] = []
    excluded = 0
    for pose in supplemental.poses:
        frame, mask = project_cloud(cloud, intr, pose)
        if not mask.as_bool().any():
            excluded += 1
            log.warning("training view at %s has no coverage; excluded", pose.camera_center)
            continue
        views.append(TrainingView(frame=frame, mask=mask, pose=pose))
    return views, excluded
