import numpy as np
import pytest

from app.core.errors import EmptyFrame, EmptySegment, UnknownId
from app.models.params import ModelParams
from app.services.geometry import CameraIntrinsics, Pose
from app.services.world_model import (
    ENVIRONMENT_ID,
    NO_LABEL,
    KeypointSet,
    ObjectStatus,
    SegmentationMap,
    initial_segmentation,
    initialize_scene,
    keypoints_in_mask,
    register_frame_data,
    spawn_object,
)


def keypoints_at(pixels, frame, timestamp=None):
    pixels = np.asarray(pixels, dtype=np.float64)
    rows, cols = pixels[:, 1].astype(int), pixels[:, 0].astype(int)
    positions = frame.points[rows, cols]
    descriptors = np.eye(len(pixels), 8, dtype=np.float32)
    t = frame.timestamp if timestamp is None else timestamp
    return KeypointSet(positions, descriptors, pixels, t, "camera")


def test_initialize_scene_keeps_every_valid_pixel(make_frame, rng):
    depth = np.full((48, 64), 1.2)
    depth[rng.random(depth.shape) < 0.05] = 0.0
    frame = make_frame(depth)
    scene = initialize_scene(frame)
    assert set(scene.tracked) == {ENVIRONMENT_ID}
    assert scene.lost == {}
    environment = scene.tracked[ENVIRONMENT_ID]
    assert len(environment.cloud) == int((depth > 0).sum())
    np.testing.assert_array_equal(environment.pose.matrix(), np.eye(4))
    labels = initial_segmentation(frame).labels
    assert (labels[depth > 0] == ENVIRONMENT_ID).all()
    assert (labels[depth == 0] == NO_LABEL).all()


def test_initialize_scene_needs_valid_depth(make_frame):
    with pytest.raises(EmptyFrame):
        initialize_scene(make_frame(np.zeros((10, 10))))


def test_spawn_assigns_sequential_ids(make_frame):
    frame = make_frame(np.full((30, 40), 1.0))
    scene = initialize_scene(frame)
    left = np.zeros((30, 40), dtype=bool)
    left[5:15, 5:15] = True
    right = np.zeros((30, 40), dtype=bool)
    right[5:15, 25:35] = True
    first = spawn_object(scene, left, frame)
    second = spawn_object(scene, right, frame)
    assert (first, second) == (1, 2)
    assert scene.next_id == 3
    cloud = scene.tracked[first].cloud.positions
    seed_points = frame.points[left]
    assert len(cloud) == len(seed_points)
    np.testing.assert_allclose(cloud, seed_points)
    assert "segment_centre" in scene.tracked[first].attached_frames


def test_spawn_ids_never_reuse_lost_ids(make_frame):
    frame = make_frame(np.full((30, 40), 1.0))
    scene = initialize_scene(frame)
    mask = np.zeros((30, 40), dtype=bool)
    mask[:10, :10] = True
    first = spawn_object(scene, mask, frame)
    scene.mark_lost(first)
    second = spawn_object(scene, mask, frame)
    assert second not in scene.lost
    assert second == first + 1


def test_spawn_rejects_empty_segments(make_frame):
    depth = np.full((20, 20), 1.0)
    depth[:5, :5] = 0.0
    frame = make_frame(depth)
    scene = initialize_scene(frame)
    with pytest.raises(EmptySegment):
        spawn_object(scene, np.zeros((20, 20), dtype=bool), frame)
    invalid_only = np.zeros((20, 20), dtype=bool)
    invalid_only[:5, :5] = True
    with pytest.raises(EmptySegment):
        spawn_object(scene, invalid_only, frame)


def test_lost_and_restore_keep_sets_disjoint(make_frame):
    frame = make_frame(np.full((20, 20), 1.0))
    scene = initialize_scene(frame)
    object_id = spawn_object(scene, np.ones((20, 20), dtype=bool), frame)
    scene.mark_lost(object_id)
    assert object_id in scene.lost and object_id not in scene.tracked
    assert scene.get(object_id).status is ObjectStatus.LOST
    pose = Pose.from_rotvec([0.0, 0.1, 0.0], [0.1, 0.0, 0.0])
    restored = scene.restore(object_id, pose)
    assert restored.status is ObjectStatus.TRACKED
    assert restored.pose is pose
    scene.check_invariants()
    with pytest.raises(ValueError):
        scene.mark_lost(ENVIRONMENT_ID)
    with pytest.raises(UnknownId):
        scene.restore(object_id, pose)
    with pytest.raises(UnknownId):
        scene.get(99)


def test_register_identical_frame_keeps_cloud_size(make_frame):
    frame = make_frame(np.full((30, 40), 1.0))
    scene = initialize_scene(frame)
    environment = scene.tracked[ENVIRONMENT_ID]
    before = len(environment.cloud)
    seg = SegmentationMap.filled(frame.shape)
    register_frame_data(environment, frame, seg, Pose.identity())
    assert len(environment.cloud) == before
    assert environment.frames_registered == 2
    # the replaced points carry the newest stamp
    assert (environment.cloud.stamps == 1).all()


def test_cloud_holds_one_point_per_voxel(make_frame):
    # 0.5 mm pixel footprint at 1 m, so ten pixels per 5 mm voxel along each axis
    K = CameraIntrinsics(2000.0, 2000.0, 19.5, 14.5, 40, 30)
    frame = make_frame(np.full((30, 40), 1.0), K=K)
    scene = initialize_scene(frame)
    environment = scene.tracked[ENVIRONMENT_ID]
    assert len(environment.cloud) < 30 * 40
    shift = Pose(np.eye(3), [0.002, 0.001, 0.0])
    register_frame_data(
        environment, frame, SegmentationMap.filled(frame.shape), shift, params=ModelParams(carve_free_space=False)
    )
    cells = np.floor(environment.cloud.positions / ModelParams().voxel_size_m).astype(np.int64)
    assert len(np.unique(cells, axis=0)) == len(cells)
    assert (environment.cloud.stamps == 1).any()


def test_register_transforms_into_model_frame(make_frame):
    frame = make_frame(np.full((30, 40), 1.0))
    scene = initialize_scene(frame)
    environment = scene.tracked[ENVIRONMENT_ID]
    T = Pose(np.eye(3), [0.0, 0.0, -0.5])
    register_frame_data(environment, frame, SegmentationMap.filled(frame.shape), T, params=ModelParams(carve_free_space=False))
    fresh = environment.cloud.select(environment.cloud.stamps == 1)
    np.testing.assert_allclose(fresh.positions[:, 2], 1.5)


def test_register_empty_segment_is_a_no_op(make_frame):
    frame = make_frame(np.full((10, 10), 1.0))
    scene = initialize_scene(frame)
    environment = scene.tracked[ENVIRONMENT_ID]
    seg = SegmentationMap.filled(frame.shape, NO_LABEL)
    register_frame_data(environment, frame, seg, Pose.identity())
    assert environment.frames_registered == 1


def test_keypoint_history_grows_once_per_registered_frame(make_frame):
    frames = [make_frame(np.full((30, 40), 1.0), t=t) for t in (0.0, 0.1, 0.2)]
    scene = initialize_scene(frames[0], keypoints_at([[5, 5], [20, 10]], frames[0]))
    environment = scene.tracked[ENVIRONMENT_ID]
    assert len(environment.keypoint_history) == 1
    seg = SegmentationMap.filled(frames[0].shape)
    for frame in frames[1:]:
        register_frame_data(environment, frame, seg, Pose.identity(), keypoints_at([[5, 5], [30, 20]], frame))
    assert len(environment.keypoint_history) == 3
    # a frame without keypoints inside the segment adds no entry
    outside = SegmentationMap.filled(frames[0].shape)
    outside.labels[:, :] = NO_LABEL
    outside.labels[25:, 35:] = ENVIRONMENT_ID
    late = make_frame(np.full((30, 40), 1.0), t=0.3)
    register_frame_data(environment, late, outside, Pose.identity(), keypoints_at([[5, 5]], late))
    assert len(environment.keypoint_history) == 3


def test_keypoint_history_rejects_non_increasing_timestamps(make_frame):
    frame = make_frame(np.full((20, 20), 1.0), t=1.0)
    scene = initialize_scene(frame, keypoints_at([[3, 3]], frame))
    environment = scene.tracked[ENVIRONMENT_ID]
    assert not environment.append_keypoints(keypoints_at([[4, 4]], frame, timestamp=1.0))
    assert environment.append_keypoints(keypoints_at([[4, 4]], frame, timestamp=1.5))


def test_free_space_carving_removes_seen_through_points(make_frame):
    near = make_frame(np.full((30, 40), 1.0))
    scene = initialize_scene(near)
    environment = scene.tracked[ENVIRONMENT_ID]
    far = make_frame(np.full((30, 40), 2.0), t=0.1)
    register_frame_data(environment, far, SegmentationMap.filled(far.shape), Pose.identity())
    assert np.allclose(environment.cloud.positions[:, 2], 2.0)


def test_segmentation_remap_and_consistency(make_frame):
    frame = make_frame(np.full((10, 10), 1.0))
    scene = initialize_scene(frame)
    seg = SegmentationMap.filled((10, 10))
    seg.labels[:3, :3] = 7
    with pytest.raises(AssertionError):
        seg.check_against(scene)
    seg.remap(7, ENVIRONMENT_ID)
    seg.check_against(scene)
    assert seg.pixel_count(ENVIRONMENT_ID) == 100


def test_keypoints_in_mask(make_frame):
    frame = make_frame(np.full((20, 20), 1.0))
    keypoints = keypoints_at([[2, 2], [15, 15]], frame)
    mask = np.zeros((20, 20), dtype=bool)
    mask[:10, :10] = True
    inside = keypoints_in_mask(keypoints, mask)
    assert len(inside) == 1
    np.testing.assert_array_equal(inside.pixels, [[2.0, 2.0]])
    assert keypoints_in_mask(None, mask) is None
