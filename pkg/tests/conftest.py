import math

import numpy as np
import pytest

from app.models.params import SimNoise
from app.models.scene import BodySpec, CameraSpec, PoseScript, SceneScript, TrajectorySegment
from app.services.frame_frontend import FramePair
from app.services.geometry import CameraIntrinsics, DepthImage

SMALL_CAMERA = CameraSpec(fx=60.0, fy=60.0, cx=39.5, cy=29.5, width=80, height=60)


def _frame(depth, t=0.0, K=None, intensity=None) -> FramePair:
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    if K is None:
        K = CameraIntrinsics(60.0, 60.0, (w - 1) / 2.0, (h - 1) / 2.0, w, h)
    if intensity is None:
        intensity = np.full(depth.shape, 0.5)
    return FramePair(intensity, DepthImage(depth, t), t, K)


def _corner_bodies(spacing: float = 0.06):
    """Back wall, floor and right wall: three orthogonal textured planes around the optical axis."""
    half_pi = math.pi / 2.0
    common = dict(shape="plane", size=(4.0, 4.0, 0.0), texture_scale=0.02, keypoint_spacing=spacing)
    return [
        BodySpec(name="back", texture_seed=1, trajectory=PoseScript(translation=(0.0, 0.0, 2.0)), **common),
        BodySpec(name="floor", texture_seed=2,
                 trajectory=PoseScript(translation=(0.0, 0.5, 1.5), rotvec=(half_pi, 0.0, 0.0)), **common),
        BodySpec(name="side", texture_seed=3,
                 trajectory=PoseScript(translation=(0.6, 0.0, 1.5), rotvec=(0.0, half_pi, 0.0)), **common),
    ]


def _corner_script(duration=0.1, camera_trajectory=None, extra_bodies=(), noise=None, name="corner") -> SceneScript:
    return SceneScript(
        name=name,
        bodies=_corner_bodies() + list(extra_bodies),
        camera=SMALL_CAMERA,
        camera_trajectory=camera_trajectory or PoseScript(),
        duration=duration,
        noise=noise or SimNoise(),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def K():
    return CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)


@pytest.fixture
def make_frame():
    return _frame


@pytest.fixture
def corner_script():
    return _corner_script


@pytest.fixture
def static_corner():
    return _corner_script()


@pytest.fixture
def sliding_wall():
    """One wall at 1 m sliding sideways at conveyor speed."""
    wall = BodySpec(
        name="wall", shape="plane", size=(4.0, 3.0, 0.0), texture_seed=5, texture_scale=0.02,
        trajectory=PoseScript(
            translation=(0.0, 0.0, 1.0),
            segments=[TrajectorySegment(duration=1.0, linear_velocity=(0.068, 0.0, 0.0))],
        ),
    )
    return SceneScript(name="slide", bodies=[wall], camera=SMALL_CAMERA, duration=0.2)
