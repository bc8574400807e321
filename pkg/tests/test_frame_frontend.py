import numpy as np
import pytest

from app.core.errors import DimensionMismatch, MalformedFile, ProviderFailure
from app.models.params import FrontendParams
from app.models.scene import BodySpec, CameraSpec, PoseScript, SceneScript
from app.services import sim
from app.services.frame_frontend import (
    FileKeypointProvider,
    KeypointHeatmap,
    SyntheticKeypointProvider,
    extract_keypoints,
    keypoint_file_name,
    non_maximum_suppression,
    read_keypoint_file,
    write_keypoint_file,
)


class StaticHeatmap:
    def __init__(self, response, dim=8):
        h, w = response.shape
        self.map = KeypointHeatmap(
            response=np.asarray(response, dtype=np.float32),
            descriptors=np.random.default_rng(0).standard_normal((h, w, dim)).astype(np.float32),
        )

    def heatmap(self, frame):
        return self.map


class Broken:
    def heatmap(self, frame):
        raise RuntimeError("network unavailable")


def test_single_peak_gives_one_keypoint(make_frame):
    frame = make_frame(np.full((150, 200), 1.0))
    response = np.zeros((150, 200))
    response[100, 100] = 0.9
    keypoints = extract_keypoints(frame, StaticHeatmap(response))
    assert len(keypoints) == 1
    np.testing.assert_array_equal(keypoints.pixels, [[100.0, 100.0]])
    np.testing.assert_allclose(keypoints.positions[0], frame.points[100, 100])


def test_adjacent_pixels_keep_the_stronger(make_frame):
    frame = make_frame(np.full((20, 20), 1.0))
    response = np.zeros((20, 20))
    response[10, 10] = 0.5
    response[10, 11] = 0.6
    keypoints = extract_keypoints(frame, StaticHeatmap(response))
    np.testing.assert_array_equal(keypoints.pixels, [[11.0, 10.0]])


def test_response_below_threshold_gives_nothing(make_frame):
    frame = make_frame(np.full((20, 20), 1.0))
    assert len(extract_keypoints(frame, StaticHeatmap(np.full((20, 20), 0.01)))) == 0


def test_invalid_depth_drops_keypoint(make_frame):
    depth = np.full((20, 20), 1.0)
    depth[5, 5] = 0.0
    response = np.zeros((20, 20))
    response[5, 5] = 0.9
    assert len(extract_keypoints(make_frame(depth), StaticHeatmap(response))) == 0


def test_nms_plateau_keeps_first_in_raster_order():
    response = np.zeros((5, 5))
    response[2, 2] = response[2, 3] = response[3, 2] = 0.7
    keep = non_maximum_suppression(response, 0.015)
    assert list(zip(*np.nonzero(keep))) == [(2, 2)]


def test_nms_keypoints_are_never_adjacent(rng):
    response = rng.random((60, 80))
    response[rng.random((60, 80)) < 0.3] = 0.5
    rows, cols = np.nonzero(non_maximum_suppression(response, 0.015))
    for i in range(len(rows)):
        chebyshev = np.maximum(np.abs(rows - rows[i]), np.abs(cols - cols[i]))
        chebyshev[i] = 99
        assert chebyshev.min() > 1


def test_provider_errors_are_wrapped(make_frame):
    with pytest.raises(ProviderFailure, match="network unavailable"):
        extract_keypoints(make_frame(np.ones((10, 10))), Broken())


def test_heatmap_size_must_match_frame(make_frame):
    with pytest.raises(DimensionMismatch):
        extract_keypoints(make_frame(np.ones((10, 10))), StaticHeatmap(np.zeros((10, 12))))


def test_synthetic_descriptors_are_stable_across_frames(static_corner):
    provider = sim.synthetic_provider(static_corner)
    first = extract_keypoints(sim.render(static_corner, 0.0), provider)
    second = extract_keypoints(sim.render(static_corner, static_corner.timestamps()[1]), provider)
    assert len(first) > 50
    np.testing.assert_array_equal(first.pixels, second.pixels)
    np.testing.assert_array_equal(first.descriptors, second.descriptors)
    np.testing.assert_allclose(np.linalg.norm(first.descriptors, axis=1), 1.0, atol=1e-6)


def test_distinct_sites_have_dissimilar_descriptors(static_corner):
    keypoints = extract_keypoints(sim.render(static_corner, 0.0), sim.synthetic_provider(static_corner))
    cosine = keypoints.descriptors @ keypoints.descriptors.T
    off_diagonal = cosine[~np.eye(len(cosine), dtype=bool)]
    assert np.mean(off_diagonal < 0.9) >= 0.99


def test_outlier_rate_corrupts_that_share_of_descriptors():
    wall = BodySpec(
        name="wall", shape="plane", size=(3.0, 3.0, 0.0), keypoint_spacing=0.01,
        trajectory=PoseScript(translation=(0.0, 0.0, 1.0)),
    )
    script = SceneScript(
        name="wall", bodies=[wall], duration=0.1,
        camera=CameraSpec(fx=130.0, fy=130.0, cx=79.5, cy=59.5, width=160, height=120),
    )
    frame = sim.render(script, 0.0)
    clean = SyntheticKeypointProvider(FrontendParams(), 0, script.keypoint_spacing()).heatmap(frame)
    noisy = SyntheticKeypointProvider(FrontendParams(outlier_rate=0.3), 0, script.keypoint_spacing()).heatmap(frame)
    assert len(clean.descriptors) >= 10_000
    np.testing.assert_array_equal(clean.pixels, noisy.pixels)
    corrupted = np.any(clean.descriptors != noisy.descriptors, axis=1).mean()
    assert abs(corrupted - 0.3) <= 0.02


def test_synthetic_provider_needs_ground_truth(make_frame):
    with pytest.raises(ProviderFailure):
        extract_keypoints(make_frame(np.ones((10, 10))), SyntheticKeypointProvider())


def _file_heatmap(h=5, w=6):
    rng = np.random.default_rng(3)
    return KeypointHeatmap(
        response=rng.random((h, w)).astype(np.float32),
        descriptors=rng.standard_normal((h, w, 256)).astype(np.float32),
    )


def test_keypoint_file_is_bit_exact(tmp_path):
    heatmap = _file_heatmap()
    path = tmp_path / "frame.mmkp"
    write_keypoint_file(path, heatmap)
    loaded = read_keypoint_file(path)
    assert loaded.response.tobytes() == heatmap.response.tobytes()
    assert loaded.descriptors.tobytes() == heatmap.descriptors.tobytes()


def test_truncated_keypoint_file(tmp_path):
    path = tmp_path / "frame.mmkp"
    write_keypoint_file(path, _file_heatmap())
    data = path.read_bytes()
    path.write_bytes(data[:-10])
    with pytest.raises(MalformedFile) as info:
        read_keypoint_file(path)
    assert info.value.offset == len(data) - 10


def test_keypoint_file_size_must_match_frame(tmp_path, make_frame):
    frame = make_frame(np.ones((5, 7)), t=0.5)
    write_keypoint_file(tmp_path / keypoint_file_name(0.5), _file_heatmap(5, 6))
    with pytest.raises(DimensionMismatch):
        FileKeypointProvider(tmp_path).heatmap(frame)


def test_missing_keypoint_file(tmp_path, make_frame):
    with pytest.raises(ProviderFailure):
        FileKeypointProvider(tmp_path).heatmap(make_frame(np.ones((5, 6))))
