import numpy as np
import pytest

from rsgyro import CameraIntrinsics, Rotation


def random_rotation(rng: np.random.Generator) -> Rotation:
    """Uniform random rotation via a normalized 4-normal quaternion."""
    return Rotation(rng.standard_normal(4))


def random_small_rotation(rng: np.random.Generator, max_rad: float) -> Rotation:
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    return Rotation.from_axis_angle(axis * rng.uniform(0.0, max_rad))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def intrinsics_600x800():
    return CameraIntrinsics(fx=600.0, fy=600.0, cx=300.0, cy=400.0, width=600, height=800)
