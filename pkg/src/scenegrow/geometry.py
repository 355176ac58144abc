"""Pinhole camera model: frames, masks, point clouds, lifting and projection.

Conventions, fixed once here and used everywhere:

- extrinsics are world-to-camera: ``x_cam = R @ x_world + t``
- the camera looks along +z, x points right, y points down
- pixel (u, v) covers the continuous square [u, u+1) x [v, v+1); its center
  sits at (u + 0.5, v + 0.5)
- invalid depth is NaN (zero stays a legal limit of small depths)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatchError

INVALID_DEPTH = np.nan

# Guards the division in projection; points closer than this are dropped.
Z_NEAR = 1e-4


def _frozen(values, dtype=np.float64) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixel units."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image size must be >= 1, got {self.width}x{self.height}")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)


@dataclass(frozen=True)
class CameraPose:
    """World-to-camera rigid transform, x_cam = rotation @ x_world + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = _frozen(self.rotation)
        tr = _frozen(self.translation)
        if rot.shape != (3, 3) or tr.shape != (3,):
            raise ValueError(f"pose needs a 3x3 rotation and 3-vector, got {rot.shape}, {tr.shape}")
        err = np.abs(rot.T @ rot - np.eye(3)).max()
        if err > 1e-9:
            raise ValueError(f"rotation not orthonormal (max |R^T R - I| = {err:.3e})")
        det = np.linalg.det(rot)
        if abs(det - 1.0) > 1e-9:
            raise ValueError(f"rotation must be proper (det = {det!r})")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tr)

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def look_at(cls, eye, target, up=(0.0, -1.0, 0.0)) -> "CameraPose":
        """Pose at ``eye`` looking toward ``target`` with no roll.

        ``up`` is the world direction that should map to the camera's -y
        (remember y points down in camera frame).
        """
        eye = np.asarray(eye, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        forward = target - eye
        norm = np.linalg.norm(forward)
        if norm < 1e-12:
            raise ValueError("look_at eye and target coincide")
        forward = forward / norm
        world_down = -np.asarray(up, dtype=np.float64)
        right = np.cross(world_down, forward)
        rnorm = np.linalg.norm(right)
        if rnorm < 1e-12:
            raise ValueError("look_at direction parallel to up vector")
        right = right / rnorm
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        return cls(rot, -rot @ eye)

    @classmethod
    def from_yaw_pitch(cls, yaw_rad: float, pitch_rad: float, center=(0.0, 0.0, 0.0)) -> "CameraPose":
        """Pose at ``center``; yaw turns the view toward +x, pitch toward +y (down)."""
        cy_, sy = np.cos(yaw_rad), np.sin(yaw_rad)
        cp, sp = np.cos(pitch_rad), np.sin(pitch_rad)
        forward = np.array([cp * sy, sp, cp * cy_])
        center = np.asarray(center, dtype=np.float64)
        return cls.look_at(center, center + forward)

    @property
    def camera_center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def to_world(self, points: np.ndarray) -> np.ndarray:
        return (points - self.translation) @ self.rotation

    def after_world_transform(self, rotation, translation) -> "CameraPose":
        """Pose observing the same scene after the world is moved by x' = R x + t."""
        rot_w = np.asarray(rotation, dtype=np.float64)
        t_w = np.asarray(translation, dtype=np.float64)
        new_rot = self.rotation @ rot_w.T
        new_t = self.translation - new_rot @ t_w
        return CameraPose(new_rot, new_t)


@dataclass(frozen=True)
class RgbdFrame:
    """An RGB image with aligned per-pixel metric depth (NaN = invalid)."""

    rgb: np.ndarray
    depth: np.ndarray

    def __post_init__(self):
        rgb = _frozen(self.rgb)
        depth = _frozen(self.depth)
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise ValueError(f"rgb must be HxWx3, got {rgb.shape}")
        if depth.shape != rgb.shape[:2]:
            raise DimensionMismatchError(
                f"depth shape {depth.shape} does not match rgb {rgb.shape[:2]}",
                expected=rgb.shape[:2],
                actual=depth.shape,
            )
        if rgb.size and (rgb.min() < 0.0 or rgb.max() > 1.0):
            raise ValueError("rgb values must lie in [0, 1]")
        finite = np.isfinite(depth)
        bad = finite & (depth <= 0.0)
        if bad.any():
            raise ValueError(f"{int(bad.sum())} depth values are <= 0; use NaN for invalid")
        if np.isinf(depth).any():
            raise ValueError("depth may not contain infinities; use NaN for invalid")
        object.__setattr__(self, "rgb", rgb)
        object.__setattr__(self, "depth", depth)

    @classmethod
    def empty(cls, height: int, width: int) -> "RgbdFrame":
        return cls(np.zeros((height, width, 3)), np.full((height, width), INVALID_DEPTH))

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]

    @property
    def valid_depth(self) -> np.ndarray:
        return np.isfinite(self.depth)


@dataclass(frozen=True)
class ValidityMask:
    """Per-pixel binary indicator: 1 = covered by existing points, 0 = hole."""

    mask: np.ndarray

    def __post_init__(self):
        mask = np.array(self.mask)
        if mask.dtype == bool:
            mask = mask.astype(np.uint8)
        mask = mask.astype(np.uint8, copy=False)
        if mask.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
        if mask.size and not np.isin(mask, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def ones(cls, height: int, width: int) -> "ValidityMask":
        return cls(np.ones((height, width), dtype=np.uint8))

    @classmethod
    def zeros(cls, height: int, width: int) -> "ValidityMask":
        return cls(np.zeros((height, width), dtype=np.uint8))

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    def as_bool(self) -> np.ndarray:
        return self.mask.astype(bool)

    def filled_fraction(self) -> float:
        return float(self.mask.mean()) if self.mask.size else 0.0


@dataclass(frozen=True)
class PointCloud:
    """Colored world-space points with the pipeline step that created each."""

    positions: np.ndarray
    colors: np.ndarray
    source_steps: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        pos = _frozen(self.positions).reshape(-1, 3)
        col = _frozen(self.colors).reshape(-1, 3)
        steps = self.source_steps
        if steps is None:
            steps = np.zeros(len(pos), dtype=np.int32)
        steps = _frozen(steps, dtype=np.int32).reshape(-1)
        if len(col) != len(pos) or len(steps) != len(pos):
            raise ValueError(
                f"point attribute lengths disagree: {len(pos)} positions, "
                f"{len(col)} colors, {len(steps)} steps"
            )
        if pos.size and not np.isfinite(pos).all():
            raise ValueError("point positions must be finite")
        if col.size and (col.min() < 0.0 or col.max() > 1.0):
            raise ValueError("point colors must lie in [0, 1]")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "colors", col)
        object.__setattr__(self, "source_steps", steps)

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, dtype=np.int32))

    @classmethod
    def concatenate(cls, clouds) -> "PointCloud":
        clouds = list(clouds)
        if not clouds:
            return cls.empty()
        return cls(
            np.concatenate([c.positions for c in clouds]),
            np.concatenate([c.colors for c in clouds]),
            np.concatenate([c.source_steps for c in clouds]),
        )

    def __len__(self) -> int:
        return len(self.positions)

    def transformed(self, rotation, translation) -> "PointCloud":
        """Rigidly move every point by x' = R x + t."""
        rot = np.asarray(rotation, dtype=np.float64)
        tr = np.asarray(translation, dtype=np.float64)
        return PointCloud(self.positions @ rot.T + tr, self.colors, self.source_steps)


@dataclass(frozen=True)
class RoundTripReport:
    max_depth_residual: float
    color_mismatches: int
    hole_pixels: int


def _check_frame_dims(frame: RgbdFrame, intr: CameraIntrinsics):
    if (frame.height, frame.width) != intr.shape:
        raise DimensionMismatchError(
            f"frame is {frame.height}x{frame.width} but camera expects "
            f"{intr.height}x{intr.width}",
            expected=intr.shape,
            actual=(frame.height, frame.width),
        )


def _check_mask_dims(mask: ValidityMask, shape: tuple[int, int]):
    if mask.shape != shape:
        raise DimensionMismatchError(
            f"mask shape {mask.shape} does not match frame shape {shape}",
            expected=shape,
            actual=mask.shape,
        )


def lift_rgbd(
    frame: RgbdFrame,
    mask: ValidityMask | None,
    intr: CameraIntrinsics,
    pose: CameraPose,
    select_value: int = 1,
    source_step: int = 0,
) -> PointCloud:
    """Lift pixels with valid depth and ``mask == select_value`` to world points.

    One point per selected pixel, placed on the ray through the pixel center:
    x_cam = ((u + 0.5 - cx) z / fx, (v + 0.5 - cy) z / fy, z), then mapped to
    world via the inverse extrinsics. Points are emitted in row-major pixel
    order. Colors are copied verbatim from the frame.
    """
    _check_frame_dims(frame, intr)
    if mask is None:
        mask = ValidityMask.ones(frame.height, frame.width)
    _check_mask_dims(mask, (frame.height, frame.width))
    if select_value not in (0, 1):
        raise ValueError(f"select_value must be 0 or 1, got {select_value}")

    selected = (mask.mask == select_value) & frame.valid_depth
    vv, uu = np.nonzero(selected)
    if len(vv) == 0:
        return PointCloud.empty()
    z = frame.depth[vv, uu]
    x = (uu + 0.5 - intr.cx) * z / intr.fx
    y = (vv + 0.5 - intr.cy) * z / intr.fy
    cam_points = np.column_stack([x, y, z])
    world = pose.to_world(cam_points)
    colors = frame.rgb[vv, uu]
    steps = np.full(len(vv), source_step, dtype=np.int32)
    return PointCloud(world, colors, steps)


def project_cloud(
    cloud: PointCloud,
    intr: CameraIntrinsics,
    pose: CameraPose,
    z_near: float = Z_NEAR,
) -> tuple[RgbdFrame, ValidityMask]:
    """Rasterize a point cloud to an image with a z-buffer and coverage mask.

    Each point with camera-space z > z_near lands on the nearest-integer pixel
    of (fx x/z + cx - 0.5, fy y/z + cy - 0.5). Per pixel the smallest z wins;
    equal depths resolve to the lowest point index. Points behind the camera
    or outside the image are silently dropped.
    """
    h, w = intr.shape
    rgb = np.zeros((h, w, 3))
    depth = np.full((h, w), INVALID_DEPTH)
    mask = np.zeros((h, w), dtype=np.uint8)
    if len(cloud) == 0:
        return RgbdFrame(rgb, depth), ValidityMask(mask)

    cam = pose.to_camera(cloud.positions)
    z = cam[:, 2]
    front = z > z_near
    u = np.rint(intr.fx * cam[:, 0] / np.where(front, z, 1.0) + intr.cx - 0.5).astype(np.int64)
    v = np.rint(intr.fy * cam[:, 1] / np.where(front, z, 1.0) + intr.cy - 0.5).astype(np.int64)
    keep = front & (u >= 0) & (u < w) & (v >= 0) & (v < h)
    idx = np.nonzero(keep)[0]
    if len(idx) == 0:
        return RgbdFrame(rgb, depth), ValidityMask(mask)

    # Stable sort by depth keeps equal-z ties in point-index order.
    order = idx[np.argsort(z[idx], kind="stable")]
    flat = v[order] * w + u[order]
    unique_flat, first = np.unique(flat, return_index=True)
    winners = order[first]

    rows, cols = np.divmod(unique_flat, w)
    depth[rows, cols] = z[winners]
    rgb[rows, cols] = cloud.colors[winners]
    mask[rows, cols] = 1
    return RgbdFrame(rgb, depth), ValidityMask(mask)


def round_trip_check(
    frame: RgbdFrame, intr: CameraIntrinsics, pose: CameraPose
) -> RoundTripReport:
    """Diagnostic: lift the frame and project it back through the same camera.

    Reports the max |depth - depth'| and exact color mismatch count over
    pixels that stayed covered, plus the number of valid pixels that fell out
    of coverage.
    """
    cloud = lift_rgbd(frame, None, intr, pose, select_value=1)
    reproj, mask = project_cloud(cloud, intr, pose)
    valid = frame.valid_depth
    covered = mask.as_bool() & valid
    if covered.any():
        residual = float(np.abs(frame.depth[covered] - reproj.depth[covered]).max())
        mismatches = int((frame.rgb[covered] != reproj.rgb[covered]).any(axis=-1).sum())
    else:
        residual = 0.0
        mismatches = 0
    holes = int((valid & ~mask.as_bool()).sum())
    return RoundTripReport(residual, mismatches, holes)


def pixel_rays_camera(intr: CameraIntrinsics) -> np.ndarray:
    """Per-pixel ray directions in camera frame, scaled so z = 1 (unit depth)."""
    vv, uu = np.mgrid[0 : intr.height, 0 : intr.width]
    x = (uu + 0.5 - intr.cx) / intr.fx
    y = (vv + 0.5 - intr.cy) / intr.fy
    return np.stack([x, y, np.ones_like(x)], axis=-1)


def pixel_rays_world(intr: CameraIntrinsics, pose: CameraPose) -> np.ndarray:
    """Per-unit-depth ray directions in world frame (H, W, 3)."""
    return pixel_rays_camera(intr) @ pose.rotation


def ray_l1_norms(intr: CameraIntrinsics, pose: CameraPose) -> np.ndarray:
    """L1 norm of each pixel's world ray per unit depth.

    Multiplying a depth residual by this converts it to the L1 distance
    between the two 3-D points on that ray.
    """
    return np.abs(pixel_rays_world(intr, pose)).sum(axis=-1)
