import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from app.core.errors import DegenerateCloud, UnknownId
from app.models.params import RedetectionParams
from app.services import sim
from app.services.geometry import Pose
from app.services.model_manager import (
    GRASP_FRAME,
    RedetectionCursor,
    attach_grasp_frame,
    fit_grasp_frame,
    redetect,
    replace_duplicate,
)
from app.services.world_model import KeypointSet, PointCloud, SegmentationMap, initialize_scene, spawn_object


def cloud_of(points) -> PointCloud:
    points = np.asarray(points, dtype=np.float64)
    return PointCloud(points, np.full_like(points, np.nan), np.zeros(len(points)), "object:1")


def box_surface(size, step=0.005) -> np.ndarray:
    """Grid samples on the six faces of an axis-aligned box centred at the origin."""
    half = np.asarray(size) / 2.0
    axes = [np.linspace(-h, h, int(round(2 * h / step)) + 1) for h in half]
    faces = []
    for k in range(3):
        i, j = [a for a in range(3) if a != k]
        u, v = np.meshgrid(axes[i], axes[j], indexing="ij")
        for sign in (-1.0, 1.0):
            face = np.zeros((u.size, 3))
            face[:, i], face[:, j], face[:, k] = u.ravel(), v.ravel(), sign * half[k]
            faces.append(face)
    return np.unique(np.vstack(faces), axis=0)


def test_grasp_box_fits_a_cuboid():
    grasp = fit_grasp_frame(cloud_of(box_surface((0.2, 0.1, 0.05))))
    np.testing.assert_allclose(grasp.extents, [0.1, 0.05, 0.025], rtol=0.05)
    np.testing.assert_allclose(grasp.pose.translation, 0.0, atol=1e-9)
    assert np.linalg.det(grasp.pose.rotation) > 0


def test_grasp_box_of_a_cube_is_centred():
    cube = box_surface((1.0, 1.0, 1.0), step=0.1) + 0.5
    grasp = fit_grasp_frame(cloud_of(cube))
    np.testing.assert_allclose(grasp.pose.translation, 0.5, atol=1e-9)
    assert np.all(grasp.extents >= 0.5 - 1e-9)


def test_grasp_box_moves_with_the_cloud(rng):
    points = box_surface((0.2, 0.1, 0.05))
    T = Pose(Rotation.random(random_state=rng).as_matrix(), rng.uniform(-1.0, 1.0, 3))
    before = fit_grasp_frame(cloud_of(points))
    after = fit_grasp_frame(cloud_of(T.apply(points)))
    np.testing.assert_allclose(after.extents, before.extents, atol=1e-9)
    np.testing.assert_allclose(after.pose.translation, T.apply(before.pose.translation), atol=1e-9)
    # axes agree up to sign
    alignment = after.pose.rotation.T @ T.rotation @ before.pose.rotation
    np.testing.assert_allclose(np.abs(alignment), np.eye(3), atol=1e-9)


def test_grasp_axes_face_positive_x_and_y(rng):
    points = box_surface((0.2, 0.1, 0.05), step=0.01)
    for _ in range(20):
        R = Rotation.random(random_state=rng).as_matrix()
        grasp = fit_grasp_frame(cloud_of(points @ R.T))
        axes = grasp.pose.rotation
        assert axes[0, 0] >= 0.0
        assert axes[1, 1] >= 0.0
        np.testing.assert_allclose(np.cross(axes[:, 0], axes[:, 1]), axes[:, 2], atol=1e-9)


def test_grasp_box_rejects_degenerate_clouds(rng):
    with pytest.raises(DegenerateCloud):
        fit_grasp_frame(cloud_of(rng.random((5, 3))))
    with pytest.raises(DegenerateCloud):
        fit_grasp_frame(cloud_of(np.outer(np.linspace(0.0, 1.0, 30), [1.0, 0.5, 0.2])))


@pytest.fixture
def frame(static_corner):
    return sim.render(static_corner, 0.0)


def _seed(shape, rows, cols) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    mask[rows, cols] = True
    return mask


def _keypoints(positions, descriptors, t, frame_id="camera") -> KeypointSet:
    return KeypointSet(positions, descriptors, np.zeros((len(positions), 2)), t, frame_id)


def _descriptors(rng, n) -> np.ndarray:
    d = rng.normal(size=(n, 256))
    return (d / np.linalg.norm(d, axis=1, keepdims=True)).astype(np.float32)


def test_replacing_a_duplicate_restores_the_original(frame):
    scene = initialize_scene(frame)
    original = spawn_object(scene, _seed(frame.shape, slice(5, 25), slice(5, 25)), frame)
    attached = dict(scene.get(original).attached_frames)
    scene.mark_lost(original)
    duplicate = spawn_object(scene, _seed(frame.shape, slice(30, 50), slice(30, 50)), frame)
    seg = SegmentationMap.filled(frame.shape)
    seg.labels[30:50, 30:50] = duplicate
    T = Pose.from_rotvec((0.0, 0.1, 0.0), (0.1, 0.0, 0.0))

    replace_duplicate(scene, duplicate, original, T, seg)

    assert duplicate not in scene.all_ids()
    assert original in scene.tracked and not scene.lost
    restored = scene.get(original)
    np.testing.assert_array_equal(restored.pose.matrix(), T.matrix())
    assert restored.attached_frames.keys() == attached.keys()
    for name, pose in attached.items():
        np.testing.assert_array_equal(restored.attached_frames[name].matrix(), pose.matrix())
    assert seg.pixel_count(original) == 400 and seg.pixel_count(duplicate) == 0
    assert scene.next_id == duplicate + 1


def test_replacing_needs_a_tracked_duplicate_and_a_lost_original(frame):
    scene = initialize_scene(frame)
    first = spawn_object(scene, _seed(frame.shape, slice(5, 25), slice(5, 25)), frame)
    with pytest.raises(UnknownId):
        replace_duplicate(scene, first, 99, Pose.identity())
    with pytest.raises(UnknownId):
        replace_duplicate(scene, 99, first, Pose.identity())


def test_grasp_frame_survives_redetection(frame):
    scene = initialize_scene(frame)
    original = spawn_object(scene, _seed(frame.shape, slice(5, 25), slice(5, 25)), frame)
    scene.get(original).cloud = cloud_of(box_surface((0.16, 0.06, 0.10)) + [0.0, 0.0, 1.0])
    grasp = attach_grasp_frame(scene, original)
    np.testing.assert_allclose(grasp.extents, [0.08, 0.05, 0.03], rtol=0.1)
    scene.mark_lost(original)
    duplicate = spawn_object(scene, _seed(frame.shape, slice(30, 50), slice(30, 50)), frame)

    replace_duplicate(scene, duplicate, original, Pose.from_rotvec((0.0, 0.3, 0.0), (0.05, 0.0, 0.0)))

    restored = scene.get(original)
    np.testing.assert_array_equal(restored.attached_frames[GRASP_FRAME].matrix(), grasp.pose.matrix())
    np.testing.assert_array_equal(restored.grasp_extents, grasp.extents)


def test_grasp_frame_of_an_unknown_object(frame):
    with pytest.raises(UnknownId):
        attach_grasp_frame(initialize_scene(frame), 7)


@pytest.fixture
def lost_scene(frame, rng):
    scene = initialize_scene(frame)
    object_id = spawn_object(scene, _seed(frame.shape, slice(5, 25), slice(5, 25)), frame)
    positions = rng.uniform(-0.1, 0.1, (60, 3)) + [0.0, 0.0, 1.0]
    descriptors = _descriptors(rng, 60)
    scene.get(object_id).append_keypoints(_keypoints(positions, descriptors, 0.5, f"object:{object_id}"))
    scene.mark_lost(object_id)
    new_id = spawn_object(scene, _seed(frame.shape, slice(30, 50), slice(30, 50)), frame)
    seg = SegmentationMap.filled(frame.shape)
    seg.labels[30:50, 30:50] = new_id
    return scene, object_id, new_id, seg, positions, descriptors


def test_redetection_finds_a_lost_model(lost_scene):
    scene, lost_id, new_id, seg, positions, descriptors = lost_scene
    T = Pose.from_rotvec((0.2, -0.1, 0.3), (0.05, 0.02, 0.1))
    segment = {new_id: _keypoints(T.apply(positions), descriptors, 1.0)}
    matches = redetect(seg, segment, scene)
    assert len(matches) == 1
    match = matches[0]
    assert (match.lost_id, match.segment_id) == (lost_id, new_id)
    np.testing.assert_allclose(match.pose.matrix(), T.matrix(), atol=1e-9)
    assert match.error < 1e-9 and match.inliers == 60

    again = redetect(seg, segment, scene)
    assert [(m.lost_id, m.segment_id) for m in again] == [(lost_id, new_id)]
    np.testing.assert_array_equal(again[0].pose.matrix(), match.pose.matrix())


def test_redetection_ignores_unrelated_segments(lost_scene, rng):
    scene, _, new_id, seg, _, _ = lost_scene
    stranger = {new_id: _keypoints(rng.uniform(-0.1, 0.1, (60, 3)), _descriptors(rng, 60), 1.0)}
    assert redetect(seg, stranger, scene) == []


def test_redetection_without_lost_models_is_a_no_op(frame, rng):
    scene = initialize_scene(frame)
    new_id = spawn_object(scene, _seed(frame.shape, slice(30, 50), slice(30, 50)), frame)
    seg = SegmentationMap.filled(frame.shape)
    seg.labels[30:50, 30:50] = new_id
    segment = {new_id: _keypoints(rng.random((20, 3)), _descriptors(rng, 20), 1.0)}
    assert redetect(seg, segment, scene) == []


def test_redetection_budget_advances_the_cursor(lost_scene, rng):
    scene, lost_id, new_id, seg, positions, descriptors = lost_scene
    lost = scene.lost[lost_id]
    for k in range(3):
        lost.keypoint_history.append(_keypoints(positions, descriptors, 0.6 + 0.1 * k, lost.frame_id))
    cursor = RedetectionCursor()
    segment = {new_id: _keypoints(rng.uniform(-0.1, 0.1, (30, 3)), _descriptors(rng, 30), 1.0)}

    redetect(seg, segment, scene, RedetectionParams(trial_budget=2), cursor=cursor)
    assert cursor.position == 2
    redetect(seg, segment, scene, RedetectionParams(trial_budget=3), cursor=cursor)
    assert cursor.position == 1
