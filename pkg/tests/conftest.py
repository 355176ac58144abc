import numpy as np
import pytest

from scenegrow import (
    CameraIntrinsics,
    CameraPose,
    RgbdFrame,
    SyntheticWorld,
)


@pytest.fixture
def intr_small():
    return CameraIntrinsics(fx=20.0, fy=20.0, cx=8.0, cy=8.0, width=16, height=16)


@pytest.fixture
def intr_room():
    return CameraIntrinsics(fx=48.0, fy=48.0, cx=32.0, cy=32.0, width=64, height=64)


@pytest.fixture
def room_world():
    return SyntheticWorld.make(size=4.0, seed=3, texture="gradient", sphere_count=2)


@pytest.fixture
def plain_room():
    return SyntheticWorld.make(size=4.0, seed=11, texture="gradient", sphere_count=0)


def random_rotation(rng) -> np.ndarray:
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_pose(rng) -> CameraPose:
    return CameraPose(random_rotation(rng), rng.uniform(-1.0, 1.0, size=3))


def random_frame(rng, height, width, depth_range=(0.2, 8.0)) -> RgbdFrame:
    rgb = rng.uniform(0.0, 1.0, size=(height, width, 3))
    depth = rng.uniform(*depth_range, size=(height, width))
    return RgbdFrame(rgb, depth)


def random_intrinsics(rng, max_size=64) -> CameraIntrinsics:
    w = int(rng.integers(2, max_size + 1))
    h = int(rng.integers(2, max_size + 1))
    return CameraIntrinsics(
        fx=float(rng.uniform(0.5, 3.0) * w),
        fy=float(rng.uniform(0.5, 3.0) * h),
        cx=float(rng.uniform(0.3, 0.7) * w),
        cy=float(rng.uniform(0.3, 0.7) * h),
        width=w,
        height=h,
    )
