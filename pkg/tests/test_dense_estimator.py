import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from app.core.errors import NoAssociations
from app.models.params import IcpParams
from app.models.scene import PoseScript
from app.services import sim
from app.services.dense_estimator import (
    Associations,
    compose_final,
    icp_refine,
    point_to_plane_jacobian,
    point_to_plane_residual,
    residual_grid,
)
from app.services.geometry import Pose
from app.services.world_model import initialize_scene


def random_associations(rng, n=20) -> Associations:
    normals = rng.normal(size=(n, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return Associations(
        model_index=np.arange(n),
        rows=np.zeros(n, dtype=int),
        cols=np.zeros(n, dtype=int),
        model_points=rng.uniform(-1.0, 1.0, (n, 3)),
        model_normals=normals,
        frame_points=rng.uniform(-1.0, 1.0, (n, 3)) + [0.0, 0.0, 2.0],
    )


def test_jacobian_matches_central_differences(rng):
    eps = 1e-6
    for _ in range(100):
        inverse_pose = Pose(Rotation.random(random_state=rng).as_matrix(), rng.uniform(-0.5, 0.5, 3))
        assoc = random_associations(rng)
        analytic = point_to_plane_jacobian(inverse_pose, assoc)
        numeric = np.empty_like(analytic)
        for k in range(6):
            step = np.zeros(6)
            step[k] = eps
            plus = point_to_plane_residual(Pose.exp(step).compose(inverse_pose), assoc)
            minus = point_to_plane_residual(Pose.exp(-step).compose(inverse_pose), assoc)
            numeric[:, k] = (plus - minus) / (2.0 * eps)
        assert np.linalg.norm(analytic - numeric) / np.linalg.norm(analytic) < 1e-5


@pytest.fixture
def corner_model(static_corner):
    frame = sim.render(static_corner, 0.0)
    return frame, initialize_scene(frame).get(0).cloud


def test_icp_on_the_same_frame_stays_at_identity(corner_model):
    frame, cloud = corner_model
    result = icp_refine(cloud, Pose.identity(), frame)
    np.testing.assert_allclose(result.transform.matrix(), np.eye(4), atol=1e-6)
    assert result.converged
    assert result.final_residual_rms < 1e-6


def test_icp_recovers_small_camera_motion(corner_model, corner_script):
    _, cloud = corner_model
    moved_camera = Pose.from_rotvec((0.0, math.radians(2.0), 0.0), (0.02, 0.0, 0.0))
    moved = corner_script(
        camera_trajectory=PoseScript(translation=(0.02, 0.0, 0.0), rotvec=(0.0, math.radians(2.0), 0.0))
    )
    frame = sim.render(moved, 0.0)
    result = icp_refine(cloud, Pose.identity(), frame)
    translation_error, rotation_error = result.transform.distance_to(moved_camera.inverse())
    assert translation_error < 0.002
    assert math.degrees(rotation_error) < 0.2
    assert result.rms_history[-1] <= result.rms_history[0]


def test_large_motion_needs_a_sparse_start(corner_model, corner_script):
    _, cloud = corner_model
    yaw = math.radians(25.0)
    moved = corner_script(camera_trajectory=PoseScript(translation=(-0.3, 0.0, 0.0), rotvec=(0.0, yaw, 0.0)))
    frame = sim.render(moved, 0.0)
    truth = Pose.from_rotvec((0.0, yaw, 0.0), (-0.3, 0.0, 0.0)).inverse()

    # about 7 mm and 0.6 degrees off, as a RANSAC estimate would be
    sparse = Pose.from_rotvec((0.0, 0.01, 0.005), (0.005, -0.004, 0.003)).compose(truth)
    refined = compose_final(sparse, icp_refine(cloud, sparse, frame).transform)
    translation_error, rotation_error = refined.distance_to(truth)
    assert translation_error < 0.002
    assert math.degrees(rotation_error) < 0.2

    try:
        from_identity = icp_refine(cloud, Pose.identity(), frame).transform
    except NoAssociations:
        return
    translation_error, rotation_error = from_identity.distance_to(truth)
    assert translation_error > 0.05 or math.degrees(rotation_error) > 5.0


def test_icp_moves_with_the_model_frame(corner_model, corner_script, rng):
    _, cloud = corner_model
    moved = corner_script(
        camera_trajectory=PoseScript(translation=(0.02, 0.0, 0.0), rotvec=(0.0, math.radians(2.0), 0.0))
    )
    frame = sim.render(moved, 0.0)
    params = IcpParams(robust=False, convergence_eps=1e-10, max_iterations=50)
    G = Pose(Rotation.random(random_state=rng).as_matrix(), rng.uniform(-0.5, 0.5, 3))

    plain = compose_final(Pose.identity(), icp_refine(cloud, Pose.identity(), frame, params).transform)
    regrounded = cloud.transformed(G, cloud.frame_id)
    start = G.inverse()
    moved_result = compose_final(start, icp_refine(regrounded, start, frame, params).transform)
    np.testing.assert_allclose(moved_result.matrix(), plain.compose(G.inverse()).matrix(), atol=1e-6)


def test_icp_steps_never_raise_the_residual(corner_model, corner_script):
    _, cloud = corner_model
    moved = corner_script(
        camera_trajectory=PoseScript(translation=(0.03, -0.01, 0.02), rotvec=(0.02, math.radians(3.0), 0.0))
    )
    frame = sim.render(moved, 0.0)
    result = icp_refine(cloud, Pose.identity(), frame, IcpParams(robust=False))
    assert len(result.rms_after_step) == result.iterations_used > 1
    for before, after in zip(result.rms_history, result.rms_after_step):
        assert after <= before + 1e-12


def test_compose_final_applies_the_refinement_first(rng):
    for _ in range(20):
        T_init = Pose(Rotation.random(random_state=rng).as_matrix(), rng.uniform(-1.0, 1.0, 3))
        T_icp = Pose(Rotation.random(random_state=rng).as_matrix(), rng.uniform(-0.1, 0.1, 3))
        points = rng.uniform(-1.0, 1.0, (10, 3))
        np.testing.assert_allclose(
            compose_final(T_init, T_icp).apply(points), T_init.apply(T_icp.apply(points)), atol=1e-12
        )
    np.testing.assert_allclose(compose_final(T_init, Pose.identity()).matrix(), T_init.matrix(), atol=1e-15)


def test_icp_without_overlap_raises(corner_model):
    frame, cloud = corner_model
    with pytest.raises(NoAssociations):
        icp_refine(cloud, Pose(translation=(0.0, 0.0, -10.0)), frame)


def test_icp_honours_the_pixel_mask(corner_model):
    frame, cloud = corner_model
    with pytest.raises(NoAssociations):
        icp_refine(cloud, Pose.identity(), frame, mask=np.zeros(frame.shape, dtype=bool))


def test_residual_grid_vanishes_at_the_true_pose(corner_model):
    frame, cloud = corner_model
    grid = residual_grid(cloud, Pose.identity(), frame)
    finite = np.isfinite(grid)
    assert finite.mean() > 0.5
    np.testing.assert_allclose(grid[finite], 0.0, atol=1e-9)
