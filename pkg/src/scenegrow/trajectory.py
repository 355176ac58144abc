"""Camera trajectory presets and overlap validation.

Construction presets emit N+1 poses (the input pose plus one per step);
the ``retrace`` preset resamples an existing trajectory in reverse with
interpolated in-between poses, for supplemental training views. New
trajectories are validated so consecutive views keep enough coverage
overlap, by lifting a constant-depth fiducial plane at each pose and
projecting it into the next.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from .errors import ConfigError
from .geometry import (
    CameraIntrinsics,
    CameraPose,
    RgbdFrame,
    lift_rgbd,
    project_cloud,
)

PRESETS = ("lookaround", "orbit", "dolly-zigzag", "retrace")


@dataclass(frozen=True)
class Trajectory:
    poses: tuple[CameraPose, ...]
    preset_name: str
    parameters: dict
    notes: tuple[str, ...] = field(default=())

    def __len__(self) -> int:
        return len(self.poses)


def _lookaround(params: dict) -> tuple[list[CameraPose], list[str]]:
    steps = int(params.get("steps", 10))
    yaw_total = math.radians(float(params.get("yaw_total_deg", 320.0)))
    start_yaw = math.radians(float(params.get("start_yaw_deg", 0.0)))
    pitch = math.radians(float(params.get("pitch_deg", 0.0)))
    center = np.asarray(params.get("center", (0.0, 0.0, 0.0)), dtype=np.float64)
    poses = [
        CameraPose.from_yaw_pitch(start_yaw + yaw_total * i / steps, pitch, center)
        for i in range(steps + 1)
    ]
    return poses, []


def _orbit(params: dict) -> tuple[list[CameraPose], list[str]]:
    steps = int(params.get("steps", 10))
    radius = float(params.get("radius", 0.5))
    yaw_total = math.radians(float(params.get("yaw_total_deg", 360.0)))
    lookat = np.asarray(params.get("lookat", (0.0, 0.0, 0.0)), dtype=np.float64)
    notes = []
    if radius < 0:
        raise ConfigError(f"orbit radius must be >= 0, got {radius}")
    if radius == 0.0:
        notes.append("orbit radius 0 degenerates to pure rotation about the lookat point")
    poses = []
    for i in range(steps + 1):
        theta = yaw_total * i / steps
        forward = np.array([math.sin(theta), 0.0, math.cos(theta)])
        eye = lookat - radius * forward
        poses.append(CameraPose.from_yaw_pitch(theta, 0.0, eye))
    return poses, notes


def _dolly_zigzag(params: dict) -> tuple[list[CameraPose], list[str]]:
    steps = int(params.get("steps", 10))
    step_m = float(params.get("step_m", 0.3))
    lateral_m = float(params.get("lateral_m", 0.1))
    start = np.asarray(params.get("start", (0.0, 0.0, 0.0)), dtype=np.float64)
    poses = []
    for i in range(steps + 1):
        lateral = 0.0 if i == 0 else (lateral_m if i % 2 == 1 else -lateral_m)
        eye = start + np.array([lateral, 0.0, -step_m * i])
        poses.append(CameraPose(np.eye(3), -eye))
    return poses, []


def _retrace(params: dict) -> tuple[list[CameraPose], list[str]]:
    base = params.get("base")
    if not isinstance(base, Trajectory):
        raise ConfigError("retrace needs a 'base' Trajectory parameter")
    count = int(params.get("count", 2 * (len(base) - 1)))
    if count < 1:
        return [], []
    nodes = list(reversed(base.poses))
    if len(nodes) == 1 or count == 1:
        return [nodes[0]] * count, []
    rots = Rotation.from_matrix(np.stack([p.rotation for p in nodes]))
    slerp = Slerp(np.arange(len(nodes)), rots)
    centers = np.stack([p.camera_center for p in nodes])
    poses = []
    for j in range(count):
        t = j * (len(nodes) - 1) / (count - 1)
        k = min(int(math.floor(t)), len(nodes) - 2)
        f = t - k
        eye = (1 - f) * centers[k] + f * centers[k + 1]
        rot = slerp([t]).as_matrix()[0]
        # Re-orthonormalize to keep the pose invariant airtight.
        u, _, vt = np.linalg.svd(rot)
        rot = u @ vt
        poses.append(CameraPose(rot, -rot @ eye))
    return poses, []


def validate_overlap(
    poses: list[CameraPose],
    intr: CameraIntrinsics,
    min_overlap: float,
    fiducial_depth: float,
) -> None:
    """Require each consecutive pose pair to share >= min_overlap coverage.

    Coverage is measured by projecting a constant-depth plane lifted at the
    earlier pose into the later one.
    """
    h, w = intr.shape
    plane = RgbdFrame(np.zeros((h, w, 3)), np.full((h, w), float(fiducial_depth)))
    for i in range(len(poses) - 1):
        cloud = lift_rgbd(plane, None, intr, poses[i])
        _, mask = project_cloud(cloud, intr, poses[i + 1])
        overlap = mask.filled_fraction()
        if overlap < min_overlap:
            raise ConfigError(
                f"trajectory overlap between poses {i} and {i + 1} is "
                f"{overlap:.3f} < required {min_overlap:.3f}"
            )


def make_trajectory(
    preset_name: str,
    parameters: dict,
    intr: CameraIntrinsics,
    min_overlap: float = 0.3,
    fiducial_depth: float = 2.0,
    validate: bool = True,
) -> Trajectory:
    """Build a named preset and validate its consecutive-view overlap."""
    builders = {
        "lookaround": _lookaround,
        "orbit": _orbit,
        "dolly-zigzag": _dolly_zigzag,
        "retrace": _retrace,
    }
    if preset_name not in builders:
        raise ConfigError(f"unknown trajectory preset {preset_name!r}; known: {PRESETS}")
    poses, notes = builders[preset_name](dict(parameters))
    if validate and len(poses) >= 2:
        validate_overlap(poses, intr, min_overlap, fiducial_depth)
    public_params = {k: v for k, v in parameters.items() if k != "base"}
    return Trajectory(tuple(poses), preset_name, public_params, tuple(notes))
