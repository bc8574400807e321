"""Deterministic ray-cast renderer for scripted rigid-body scenes, with exact ground truth."""
from __future__ import annotations

import json
import logging
import math
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
from pydantic import ValidationError
from scipy import ndimage
from scipy.spatial.transform import Rotation

from ..core.errors import ConfigError, InputNotFound
from ..models.params import FrontendParams
from ..models.scene import BodySpec, PartSpec, PoseScript, SceneScript, TrajectorySegment
from . import formats
from .evaluation import Trajectory
from .frame_frontend import FramePair, SyntheticKeypointProvider, keypoint_file_name, write_keypoint_file
from .geometry import CameraIntrinsics, DepthImage, Pose, backproject_depth, pixel_grid, project_points

logger = logging.getLogger(__name__)

NO_BODY = -1
DEPTH_STEPS_PER_M = 1e4
FLOW_DEPTH_GATE_M = 0.01
TEXTURE_GRID = 32
_EPS = 1e-9


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Exact (pre-noise) scene state at one timestamp.

    `poses` map body to camera, `camera_pose` maps camera to world. Flow is
    on the current pixel grid: the previous pixel is `x - flow`.
    """

    timestamp: float
    labels: np.ndarray
    depth: np.ndarray
    body_coords: np.ndarray
    body_normals: np.ndarray
    poses: Dict[int, Pose]
    camera_pose: Pose
    flow: np.ndarray
    flow_valid: np.ndarray
    static_ids: frozenset

    def motion_labels(self) -> np.ndarray:
        """Body labels with every static body folded into the environment (0)."""
        labels = self.labels.copy()
        if self.static_ids:
            labels[np.isin(labels, list(self.static_ids))] = 0
        return labels


@dataclass(eq=False)
class _Hits:
    labels: np.ndarray
    depth: np.ndarray
    coords: np.ndarray
    normals: np.ndarray
    poses: Dict[int, Pose]


def _surfaces(body: BodySpec) -> List[Tuple[str, np.ndarray, Pose]]:
    if body.shape == "plane":
        return [("plane", np.array([body.size[0] / 2.0, body.size[1] / 2.0, 0.0]), Pose.identity())]
    if body.shape == "cuboid":
        return [("cuboid", np.array(body.size) / 2.0, Pose.identity())]
    return [("cuboid", np.array(part.size) / 2.0, part.pose()) for part in body.parts]


def _safe(d: np.ndarray) -> np.ndarray:
    return np.where(np.abs(d) < 1e-15, 1e-15, d)


def _intersect_cuboid(origin: np.ndarray, dirs: np.ndarray, half: np.ndarray):
    """Slab test against an axis-aligned box centred at the origin."""
    d = _safe(dirs)
    t1 = (-half - origin) / d
    t2 = (half - origin) / d
    t_min = np.minimum(t1, t2)
    t_max = np.maximum(t1, t2)
    axis = np.argmax(t_min, axis=1)
    rows = np.arange(len(dirs))
    t_near = t_min[rows, axis]
    t_far = t_max.min(axis=1)
    hit = (t_near <= t_far) & (t_near > _EPS)
    normals = np.zeros_like(dirs)
    normals[rows, axis] = -np.sign(d[rows, axis])
    return np.where(hit, t_near, np.inf), normals


def _intersect_plane(origin: np.ndarray, dirs: np.ndarray, half: np.ndarray):
    """Two-sided finite rectangle in the z = 0 plane."""
    dz = _safe(dirs[:, 2])
    t = -origin[2] / dz
    points = origin + t[:, None] * dirs
    hit = (t > _EPS) & (np.abs(points[:, 0]) <= half[0]) & (np.abs(points[:, 1]) <= half[1])
    normals = np.zeros_like(dirs)
    normals[:, 2] = -np.sign(dz)
    return np.where(hit, t, np.inf), normals


@lru_cache(maxsize=8)
def _camera_rays(K: CameraIntrinsics) -> np.ndarray:
    grid = pixel_grid(K.height, K.width).reshape(-1, 2)
    return np.column_stack([(grid[:, 0] - K.cx) / K.fx, (grid[:, 1] - K.cy) / K.fy, np.ones(len(grid))])


def _raycast(script: SceneScript, t: float, K: CameraIntrinsics) -> _Hits:
    rays = _camera_rays(K)
    n = len(rays)
    best = np.full(n, np.inf)
    labels = np.full(n, NO_BODY, dtype=np.int32)
    coords = np.full((n, 3), np.nan)
    normals = np.full((n, 3), np.nan)
    world_to_camera = script.camera_pose(t).inverse()
    poses: Dict[int, Pose] = {}

    for index, body in enumerate(script.bodies):
        if not body.present(t):
            continue
        body_id = script.body_id(index)
        body_to_camera = world_to_camera.compose(body.trajectory.pose_at(t))
        poses[body_id] = body_to_camera
        for shape, half, part_pose in _surfaces(body):
            part_to_camera = body_to_camera.compose(part_pose)
            R, offset = part_to_camera.rotation, part_to_camera.translation
            origin = -R.T @ offset
            dirs = rays @ R
            intersect = _intersect_plane if shape == "plane" else _intersect_cuboid
            depth, local_normals = intersect(origin, dirs, half)
            closer = depth < best
            if not closer.any():
                continue
            local = origin + depth[closer, None] * dirs[closer]
            best[closer] = depth[closer]
            labels[closer] = body_id
            coords[closer] = part_pose.apply(local)
            normals[closer] = part_pose.rotate(local_normals[closer])

    shape = K.shape
    depth = np.where(np.isfinite(best), best, 0.0)
    return _Hits(labels.reshape(shape), depth.reshape(shape), coords.reshape(shape + (3,)), normals.reshape(shape + (3,)), poses)


@lru_cache(maxsize=64)
def _noise_grids(seed: int) -> Tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0x7E47])
    shape = (TEXTURE_GRID,) * 3
    return rng.random(shape), rng.random(shape)


def _texture(coords: np.ndarray, body: BodySpec) -> np.ndarray:
    """Two octaves of trilinear value noise over body coordinates, in [0.2, 0.8]."""
    if body.flat_texture:
        return np.full(len(coords), 0.5)
    coarse, fine = _noise_grids(body.texture_seed)
    cells = (coords / body.texture_scale).T
    value = 0.65 * ndimage.map_coordinates(coarse, cells, order=1, mode="grid-wrap")
    value += 0.35 * ndimage.map_coordinates(fine, cells * 2.17, order=1, mode="grid-wrap")
    return 0.2 + 0.6 * value


def _shade(script: SceneScript, hits: _Hits) -> np.ndarray:
    intensity = np.zeros(hits.labels.shape)
    for index, body in enumerate(script.bodies):
        mask = hits.labels == script.body_id(index)
        if mask.any():
            intensity[mask] = _texture(hits.coords[mask], body)
    return np.round(intensity * 255.0) / 255.0


def _ground_truth_flow(curr: _Hits, prev: _Hits, K: CameraIntrinsics) -> Tuple[np.ndarray, np.ndarray]:
    h, w = curr.labels.shape
    flow = np.zeros((h, w, 2))
    valid = np.zeros((h, w), dtype=bool)
    grid = pixel_grid(h, w)
    points = backproject_depth(DepthImage(curr.depth), K)
    for body_id, pose in curr.poses.items():
        mask = curr.labels == body_id
        if body_id not in prev.poses or not mask.any():
            continue
        previous = prev.poses[body_id]
        here = grid[mask]
        if np.array_equal(previous.matrix(), pose.matrix()):
            pixels, z = here, curr.depth[mask]
        else:
            moved = previous.compose(pose.inverse()).apply(points[mask])
            pixels, z = project_points(moved, K)
            flow[mask] = here - pixels
        with np.errstate(invalid="ignore"):
            cols = np.rint(pixels[:, 0])
            rows = np.rint(pixels[:, 1])
            inside = (z > 0) & (cols >= 0) & (cols < w) & (rows >= 0) & (rows < h)
        ok = np.zeros(len(here), dtype=bool)
        r, c = rows[inside].astype(int), cols[inside].astype(int)
        ok[inside] = (prev.labels[r, c] == body_id) & (np.abs(prev.depth[r, c] - z[inside]) < FLOW_DEPTH_GATE_M)
        valid[mask] = ok
    return flow, valid


def render(script: SceneScript, t: float, seed: int = 0) -> FramePair:
    """Frame at time `t` with its ground truth attached."""
    if not (0.0 <= t <= script.duration + 1e-9):
        raise ValueError(f"t={t} lies outside the scene [0, {script.duration}]")
    K = script.camera.intrinsics()
    hits = _raycast(script, t, K)
    previous_t = script.previous_timestamp(t)
    if previous_t >= 0.0:
        flow, flow_valid = _ground_truth_flow(hits, _raycast(script, previous_t, K), K)
    else:
        flow, flow_valid = np.zeros(K.shape + (2,)), np.zeros(K.shape, dtype=bool)

    hit = hits.labels != NO_BODY
    depth = hits.depth.copy()
    sigma = script.noise.depth_sigma
    if sigma > 0:
        rng = np.random.default_rng([seed, int(round(t * 1e6))])
        depth[hit] += rng.normal(0.0, sigma, int(hit.sum()))
    depth = np.where(hit & (depth > 0), np.round(depth * DEPTH_STEPS_PER_M) / DEPTH_STEPS_PER_M, 0.0)

    truth = GroundTruth(
        timestamp=t,
        labels=hits.labels,
        depth=hits.depth,
        body_coords=hits.coords,
        body_normals=hits.normals,
        poses=hits.poses,
        camera_pose=script.camera_pose(t),
        flow=flow,
        flow_valid=flow_valid,
        static_ids=script.static_ids(),
    )
    return FramePair(_shade(script, hits), DepthImage(depth, t), t, K, ground_truth=truth)


def render_sequence(script: SceneScript, seed: int = 0) -> Iterator[FramePair]:
    for t in script.timestamps():
        yield render(script, t, seed)


def synthetic_provider(
    script: SceneScript, params: Optional[FrontendParams] = None, seed: int = 0
) -> SyntheticKeypointProvider:
    """Keypoint provider using the script's per-body spacing; noise is the larger of config and script."""
    params = params or FrontendParams()
    params = params.model_copy(update={
        "descriptor_noise": max(params.descriptor_noise, script.noise.descriptor_sigma),
        "outlier_rate": max(params.outlier_rate, script.noise.keypoint_outlier_rate),
    })
    return SyntheticKeypointProvider(params, seed, script.keypoint_spacing())


def ground_truth_trajectories(script: SceneScript) -> Dict[str, Trajectory]:
    """`camera` (camera to world) and `body_<id>` (body to world) over the frame timestamps."""
    times = script.timestamps()
    trajectories = {"camera": Trajectory.from_samples((t, script.camera_pose(t)) for t in times)}
    for index, body in enumerate(script.bodies):
        body_id = script.body_id(index)
        samples = [(t, body.trajectory.pose_at(t)) for t in times if body.present(t)]
        trajectories[f"body_{body_id}"] = Trajectory.from_samples(samples)
    return trajectories


def export_dataset(
    script: SceneScript,
    out_dir,
    seed: int = 0,
    keypoints: bool = True,
    params: Optional[FrontendParams] = None,
) -> Path:
    """Writes the scene in the dataset layout read by `formats.read_dataset`."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    (root / formats.ASSOCIATIONS_FILE).unlink(missing_ok=True)
    K = script.camera.intrinsics()
    formats.write_intrinsics(root / formats.INTRINSICS_FILE, K)
    provider = synthetic_provider(script, params, seed) if keypoints else None
    for frame in render_sequence(script, seed):
        formats.write_frame(root, frame)
        if provider is not None:
            write_keypoint_file(root / formats.KEYPOINT_DIR / keypoint_file_name(frame.timestamp), provider.heatmap(frame))
    for name, trajectory in ground_truth_trajectories(script).items():
        formats.write_tum(root / "groundtruth" / f"{name}.txt", trajectory)
    (root / "scene.json").write_text(script.model_dump_json(indent=2))
    logger.info(f"Exported scenario '{script.name}' ({script.frame_count} frames) to {root}")
    return root


def load_scene_script(path) -> SceneScript:
    """Reads a TOML (or JSON) scene script."""
    path = Path(path)
    if not path.is_file():
        raise InputNotFound(path, "scene script")
    try:
        if path.suffix == ".json":
            data = json.loads(path.read_text())
        else:
            with open(path, "rb") as f:
                data = tomllib.load(f)
        return SceneScript.model_validate(data)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
        raise ConfigError(f"could not parse scene script {path}: {e}") from e
    except ValidationError as e:
        first = e.errors()[0]
        location = ".".join(str(part) for part in first["loc"])
        raise ConfigError(f"invalid scene script {path} at '{location}': {first['msg']}") from e


# --- builtin scenarios ---

TABLE_ROTATION = np.array([[1.0, 0.0, 0.0], [0.0, -0.6, -0.8], [0.0, 0.8, -0.6]])
TABLE_CENTRE = np.array([0.0, 0.2, 0.75])
CONVEYOR_SPEED = 0.068
FAST_SPEED = 0.195


def _rotvec(matrix: np.ndarray) -> Tuple[float, float, float]:
    return tuple(float(v) for v in Rotation.from_matrix(matrix).as_rotvec())


def _on_table(x: float, y: float, height: float, yaw_deg: float = 0.0) -> Tuple[tuple, tuple]:
    """(translation, rotvec) of a body resting on the table, its z axis along the table normal."""
    rotation = TABLE_ROTATION @ Rotation.from_euler("z", yaw_deg, degrees=True).as_matrix()
    centre = TABLE_CENTRE + x * TABLE_ROTATION[:, 0] + y * TABLE_ROTATION[:, 1] + 0.5 * height * TABLE_ROTATION[:, 2]
    return tuple(float(v) for v in centre), _rotvec(rotation)


def _desk() -> List[BodySpec]:
    table = BodySpec(
        name="table", shape="plane", size=(1.6, 1.2, 0.0), texture_seed=11, texture_scale=0.015,
        keypoint_spacing=0.02,
        trajectory=PoseScript(translation=tuple(TABLE_CENTRE), rotvec=_rotvec(TABLE_ROTATION)),
    )
    wall = BodySpec(
        name="wall", shape="plane", size=(3.6, 2.7, 0.0), texture_seed=12, texture_scale=0.03,
        keypoint_spacing=0.04, trajectory=PoseScript(translation=(0.0, 0.0, 1.8)),
    )
    return [table, wall]


def _box(name: str, size, x: float, y: float, seed: int, segments: List[TrajectorySegment], **extra) -> BodySpec:
    translation, rotvec = _on_table(x, y, size[2])
    return BodySpec(
        name=name, shape="cuboid", size=tuple(size), texture_seed=seed, texture_scale=0.008,
        keypoint_spacing=0.015,
        trajectory=PoseScript(translation=translation, rotvec=rotvec, segments=segments), **extra,
    )


def _conveyor(orientation: str) -> SceneScript:
    size = (0.16, 0.06, 0.10) if orientation == "up" else (0.16, 0.10, 0.06)
    segments = [
        TrajectorySegment(duration=0.2),
        TrajectorySegment(duration=1.3, linear_velocity=(CONVEYOR_SPEED, 0.0, 0.0)),
    ]
    return SceneScript(
        name=f"conveyor_{orientation}",
        description=f"box standing {orientation} on a conveyor moving at 6.8 cm/s, static camera",
        bodies=_desk() + [_box("box", size, -0.1, 0.0, 21, segments)],
        duration=1.5,
    )


def _room_wall(name: str, translation, rotvec, size, seed: int) -> BodySpec:
    return BodySpec(
        name=name, shape="plane", size=(size[0], size[1], 0.0), texture_seed=seed, texture_scale=0.05,
        keypoint_spacing=0.10, trajectory=PoseScript(translation=translation, rotvec=rotvec),
    )


def _rotation() -> SceneScript:
    half_pi = math.pi / 2.0
    bodies = [
        _room_wall("front", (0.0, -0.1, 1.6), (0.0, 0.0, 0.0), (3.2, 2.4), 31),
        _room_wall("back", (0.0, -0.1, -1.6), (0.0, math.pi, 0.0), (3.2, 2.4), 32),
        _room_wall("right", (1.6, -0.1, 0.0), (0.0, -half_pi, 0.0), (3.2, 2.4), 33),
        _room_wall("left", (-1.6, -0.1, 0.0), (0.0, half_pi, 0.0), (3.2, 2.4), 34),
        _room_wall("floor", (0.0, 1.1, 0.0), (half_pi, 0.0, 0.0), (3.2, 3.2), 35),
        _room_wall("ceiling", (0.0, -1.3, 0.0), (-half_pi, 0.0, 0.0), (3.2, 3.2), 36),
    ]
    # 5 degrees per frame at 30 Hz for 36 frames
    yaw_rate = math.radians(5.0) * 30.0
    camera = PoseScript(segments=[TrajectorySegment(duration=1.2, angular_velocity=(0.0, yaw_rate, 0.0))])
    return SceneScript(
        name="rotation",
        description="camera yawing half a turn inside a textured room, 5 degrees per frame",
        bodies=bodies, camera_trajectory=camera, duration=1.2,
    )


def _manipulation() -> SceneScript:
    step = 0.375
    yaw = math.radians(15.0) / step
    shift = 0.05 / step
    camera = PoseScript(segments=[
        TrajectorySegment(duration=step, angular_velocity=(0.0, yaw, 0.0), linear_velocity=(shift, 0.0, 0.0)),
        TrajectorySegment(duration=step, angular_velocity=(0.0, -yaw, 0.0), linear_velocity=(-shift, 0.0, 0.0)),
        TrajectorySegment(duration=step, angular_velocity=(0.0, -yaw, 0.0), linear_velocity=(-shift, 0.0, 0.0)),
        TrajectorySegment(duration=step, angular_velocity=(0.0, yaw, 0.0), linear_velocity=(shift, 0.0, 0.0)),
    ])
    props = [
        _box("box_left", (0.12, 0.08, 0.10), -0.25, 0.1, 41, []),
        _box("box_right", (0.10, 0.10, 0.14), 0.22, -0.05, 42, []),
    ]
    return SceneScript(
        name="manipulation",
        description="camera alternating between view targets (+-15 degrees, +-5 cm) over a static desk",
        bodies=_desk() + props, camera_trajectory=camera, duration=1.5,
    )


def _redetect() -> SceneScript:
    size = (0.16, 0.06, 0.10)
    translation, rotvec = _on_table(-0.3, 0.0, size[2], yaw_deg=20.0)
    segments = [
        TrajectorySegment(duration=0.2),
        TrajectorySegment(duration=0.7, linear_velocity=(CONVEYOR_SPEED, 0.0, 0.0)),
        TrajectorySegment(duration=0.8),
        TrajectorySegment(
            duration=0.9, linear_velocity=(0.1, 0.0, 0.0), start_translation=translation, start_rotvec=rotvec
        ),
    ]
    box = _box("box", size, -0.1, 0.0, 21, segments, absent=[(0.9, 1.7)])
    return SceneScript(
        name="redetect",
        description="box taken off the conveyor for 0.8 s and placed back rotated, still moving",
        bodies=_desk() + [box], duration=2.6,
    )


def _conveyor_multi() -> SceneScript:
    slow = _box("box", (0.16, 0.06, 0.10), -0.25, 0.0, 21, [
        TrajectorySegment(duration=0.2),
        TrajectorySegment(duration=1.3, linear_velocity=(CONVEYOR_SPEED, 0.0, 0.0)),
    ])
    translation, rotvec = _on_table(0.05, 0.2, 0.06)
    mug = BodySpec(
        name="mug", shape="composite", texture_seed=22, texture_scale=0.008, keypoint_spacing=0.015,
        parts=[
            PartSpec(size=(0.10, 0.10, 0.06)),
            PartSpec(size=(0.03, 0.03, 0.05), translation=(0.0, 0.0, 0.055)),
        ],
        trajectory=PoseScript(translation=translation, rotvec=rotvec, segments=[
            TrajectorySegment(duration=0.2),
            TrajectorySegment(duration=0.5, linear_velocity=(FAST_SPEED, 0.0, 0.0)),
        ]),
    )
    return SceneScript(
        name="conveyor_multi",
        description="two objects on the conveyor: one at 6.8 cm/s, one at 19.5 cm/s that stops after 0.5 s",
        bodies=_desk() + [slow, mug], duration=1.5,
    )


def builtin_scenarios() -> Dict[str, SceneScript]:
    scripts = [
        _rotation(), _manipulation(), _conveyor("up"), _conveyor("down"), _redetect(), _conveyor_multi(),
    ]
    return {script.name: script for script in scripts}


def get_scenario(name: str) -> SceneScript:
    scenarios = builtin_scenarios()
    if name not in scenarios:
        raise ConfigError(f"unknown scenario '{name}' (choose from {', '.join(sorted(scenarios))})")
    return scenarios[name]


def resolve_scene(name_or_path: str) -> SceneScript:
    """A builtin scenario name or the path of a scene script file."""
    if name_or_path in builtin_scenarios():
        return get_scenario(name_or_path)
    path = Path(name_or_path)
    if path.suffix in (".toml", ".json") or path.exists():
        return load_scene_script(path)
    return get_scenario(name_or_path)
