"""Procedural synthetic world with exact analytic ray intersection.

A closed axis-aligned box room (six inward-facing textured walls) plus a few
solid colored spheres. Every camera ray from a pose inside the room hits
geometry at finite depth, which makes the world a deterministic stand-in for
generative inpainting/depth models and a ground truth for end-to-end checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PoseOutsideWorldError
from .geometry import CameraIntrinsics, CameraPose, RgbdFrame, pixel_rays_world


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float
    albedo: np.ndarray


@dataclass(frozen=True)
class SyntheticWorld:
    lo: np.ndarray
    hi: np.ndarray
    spheres: tuple[Sphere, ...]
    texture: str
    checker_size: float
    face_corner_colors: np.ndarray  # (6, 4, 3): bilinear corner colors per face
    seed: int

    @classmethod
    def make(
        cls,
        size: float = 4.0,
        seed: int = 0,
        texture: str = "gradient",
        sphere_count: int = 2,
        checker_size: float = 0.5,
    ) -> "SyntheticWorld":
        """Build a cubic room of edge ``size`` centered at the origin."""
        if texture not in ("gradient", "checker"):
            raise ValueError(f"unknown texture {texture!r}")
        if size <= 0:
            raise ValueError("room size must be positive")
        rng = np.random.default_rng(seed)
        half = size / 2.0
        corners = rng.uniform(0.1, 0.95, size=(6, 4, 3))
        spheres = []
        for _ in range(sphere_count):
            radius = float(rng.uniform(0.25, 0.45) * size / 4.0)
            margin = radius + 0.15 * size
            center = rng.uniform(-half + margin, half - margin, size=3)
            albedo = rng.uniform(0.15, 0.95, size=3)
            spheres.append(Sphere(center, radius, albedo))
        world = cls(
            lo=np.full(3, -half),
            hi=np.full(3, half),
            spheres=tuple(spheres),
            texture=texture,
            checker_size=float(checker_size),
            face_corner_colors=corners,
            seed=seed,
        )
        return world

    def contains(self, point: np.ndarray) -> bool:
        p = np.asarray(point, dtype=np.float64)
        return bool((p > self.lo).all() and (p < self.hi).all())


def _wall_albedo(world: SyntheticWorld, face: np.ndarray, hit: np.ndarray) -> np.ndarray:
    """Texture lookup for wall hit points; ``face`` = axis * 2 + (1 if hi side).

    ``face`` and ``hit`` are flat arrays of the pixels that hit a wall.
    """
    axis = face // 2
    in_plane = np.array([[1, 2], [0, 2], [0, 1]])[axis]  # the two non-face axes
    n = len(face)
    rows = np.arange(n)
    a_m = hit[rows, in_plane[:, 0]] - world.lo[in_plane[:, 0]]
    b_m = hit[rows, in_plane[:, 1]] - world.lo[in_plane[:, 1]]
    extent = world.hi - world.lo
    a_n = np.clip(a_m / extent[in_plane[:, 0]], 0.0, 1.0)
    b_n = np.clip(b_m / extent[in_plane[:, 1]], 0.0, 1.0)
    corners = world.face_corner_colors[face]  # (n, 4, 3)
    if world.texture == "gradient":
        wa = (1 - a_n)[:, None] * (1 - b_n)[:, None] * corners[:, 0]
        wb = a_n[:, None] * (1 - b_n)[:, None] * corners[:, 1]
        wc = (1 - a_n)[:, None] * b_n[:, None] * corners[:, 2]
        wd = a_n[:, None] * b_n[:, None] * corners[:, 3]
        return wa + wb + wc + wd
    parity = (
        np.floor(a_m / world.checker_size).astype(np.int64)
        + np.floor(b_m / world.checker_size).astype(np.int64)
    ) % 2
    return np.where(parity[:, None] == 0, corners[:, 0], corners[:, 1])


def render_world(
    world: SyntheticWorld, intr: CameraIntrinsics, pose: CameraPose
) -> RgbdFrame:
    """Analytic nearest-intersection render: per-pixel albedo and camera-z depth."""
    origin = pose.camera_center
    if not world.contains(origin):
        raise PoseOutsideWorldError(
            f"camera center {origin.tolist()} is outside the room "
            f"[{world.lo.tolist()}, {world.hi.tolist()}]"
        )
    dirs = pixel_rays_world(intr, pose).reshape(-1, 3)  # per unit camera depth
    n = len(dirs)

    # Box exit: the camera is inside, so each ray leaves through exactly one face.
    with np.errstate(divide="ignore", invalid="ignore"):
        t_hi = (world.hi[None, :] - origin[None, :]) / dirs
        t_lo = (world.lo[None, :] - origin[None, :]) / dirs
    t_axis = np.where(dirs > 0, t_hi, np.where(dirs < 0, t_lo, np.inf))
    axis = np.argmin(t_axis, axis=1)
    t_box = t_axis[np.arange(n), axis]
    face = axis * 2 + (dirs[np.arange(n), axis] > 0).astype(np.int64)

    t_best = t_box.copy()
    sphere_id = np.full(n, -1, dtype=np.int64)
    for k, sph in enumerate(world.spheres):
        oc = origin[None, :] - sph.center[None, :]
        a = (dirs * dirs).sum(axis=1)
        b = 2.0 * (dirs * oc).sum(axis=1)
        c = float(oc[0] @ oc[0]) - sph.radius**2
        disc = b * b - 4 * a * c
        hit = disc > 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t1 = (-b - sq) / (2 * a)
        t2 = (-b + sq) / (2 * a)
        t_sph = np.where(t1 > 1e-9, t1, np.where(t2 > 1e-9, t2, np.inf))
        t_sph = np.where(hit, t_sph, np.inf)
        closer = t_sph < t_best
        t_best = np.where(closer, t_sph, t_best)
        sphere_id = np.where(closer, k, sphere_id)

    albedo = np.empty((n, 3))
    wall = sphere_id < 0
    if wall.any():
        hits = origin[None, :] + t_best[wall, None] * dirs[wall]
        albedo[wall] = _wall_albedo(world, face[wall], hits)
    for k, sph in enumerate(world.spheres):
        sel = sphere_id == k
        if sel.any():
            albedo[sel] = sph.albedo

    h, w = intr.shape
    # dirs have unit camera z, so the ray parameter equals camera-space depth.
    return RgbdFrame(albedo.reshape(h, w, 3), t_best.reshape(h, w))


def surface_distance(world: SyntheticWorld, points: np.ndarray) -> np.ndarray:
    """Distance from each point to the nearest world surface (walls or spheres)."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    inside_gap = np.minimum(p - world.lo[None, :], world.hi[None, :] - p).min(axis=1)
    outside = np.maximum(np.maximum(world.lo[None, :] - p, p - world.hi[None, :]), 0.0)
    d_out = np.linalg.norm(outside, axis=1)
    dist = np.where(d_out > 0, d_out, np.abs(inside_gap))
    for sph in world.spheres:
        d_sph = np.abs(np.linalg.norm(p - sph.center[None, :], axis=1) - sph.radius)
        dist = np.minimum(dist, d_sph)
    return dist
