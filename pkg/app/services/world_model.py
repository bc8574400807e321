"""The scene database: tracked and lost objects with their dense and sparse models."""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, List, Optional, Tuple

import numpy as np

from ..core.errors import EmptyFrame, EmptySegment, UnknownId
from ..models.params import ModelParams
from .geometry import Pose, project_points

if TYPE_CHECKING:
    from .frame_frontend import FramePair

logger = logging.getLogger(__name__)

ENVIRONMENT_ID = 0
NO_LABEL = -1


@dataclass(frozen=True, eq=False)
class Keypoint:
    position: np.ndarray
    descriptor: np.ndarray
    source_pixel: np.ndarray
    timestamp: float


@dataclass(eq=False)
class KeypointSet:
    """Keypoints stored column-wise; all positions share `frame_id`."""

    positions: np.ndarray
    descriptors: np.ndarray
    pixels: np.ndarray
    timestamp: float
    frame_id: str

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.descriptors = np.asarray(self.descriptors, dtype=np.float32)
        if self.descriptors.ndim != 2:
            self.descriptors = self.descriptors.reshape(len(self.positions), -1)
        self.pixels = np.asarray(self.pixels, dtype=np.float64).reshape(-1, 2)
        if not (len(self.positions) == len(self.descriptors) == len(self.pixels)):
            raise ValueError("keypoint columns have different lengths")

    @classmethod
    def empty(cls, timestamp: float, frame_id: str, descriptor_dim: int = 256) -> "KeypointSet":
        return cls(np.zeros((0, 3)), np.zeros((0, descriptor_dim), np.float32), np.zeros((0, 2)), timestamp, frame_id)

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def keypoints(self) -> List[Keypoint]:
        return [
            Keypoint(self.positions[i], self.descriptors[i], self.pixels[i], self.timestamp)
            for i in range(len(self))
        ]

    def subset(self, mask: np.ndarray) -> "KeypointSet":
        return KeypointSet(self.positions[mask], self.descriptors[mask], self.pixels[mask], self.timestamp, self.frame_id)

    def transformed(self, pose: Pose, frame_id: str) -> "KeypointSet":
        return KeypointSet(pose.apply(self.positions), self.descriptors, self.pixels, self.timestamp, frame_id)


@dataclass(eq=False)
class PointCloud:
    """Dense model points. Normals are unit length or NaN where unavailable."""

    positions: np.ndarray
    normals: np.ndarray
    intensity: np.ndarray
    frame_id: str
    stamps: Optional[np.ndarray] = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
        if self.stamps is None:
            self.stamps = np.zeros(len(self.positions), dtype=np.int64)
        if not (len(self.positions) == len(self.normals) == len(self.intensity) == len(self.stamps)):
            raise ValueError("point cloud columns have different lengths")

    @classmethod
    def empty(cls, frame_id: str) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), frame_id)

    def __len__(self) -> int:
        return len(self.positions)

    def has_normals(self) -> np.ndarray:
        return np.all(np.isfinite(self.normals), axis=1)

    def select(self, mask: np.ndarray) -> "PointCloud":
        return PointCloud(self.positions[mask], self.normals[mask], self.intensity[mask], self.frame_id, self.stamps[mask])

    def transformed(self, pose: Pose, frame_id: str) -> "PointCloud":
        return PointCloud(pose.apply(self.positions), pose.rotate(self.normals), self.intensity, frame_id, self.stamps)

    def concatenate(self, other: "PointCloud") -> "PointCloud":
        return PointCloud(
            np.vstack([self.positions, other.positions]),
            np.vstack([self.normals, other.normals]),
            np.concatenate([self.intensity, other.intensity]),
            self.frame_id,
            np.concatenate([self.stamps, other.stamps]),
        )


class ObjectStatus(str, enum.Enum):
    TRACKED = "tracked"
    LOST = "lost"


@dataclass(eq=False)
class ObjectModel:
    id: int
    pose: Pose
    cloud: PointCloud
    keypoint_history: List[KeypointSet] = field(default_factory=list)
    status: ObjectStatus = ObjectStatus.TRACKED
    pose_history: List[Tuple[float, Pose]] = field(default_factory=list)
    attached_frames: Dict[str, Pose] = field(default_factory=dict)
    frames_registered: int = 0
    grasp_extents: Optional[np.ndarray] = None

    @property
    def frame_id(self) -> str:
        return f"object:{self.id}"

    def record_pose(self, timestamp: float, pose: Pose) -> None:
        self.pose = pose
        if self.pose_history and timestamp <= self.pose_history[-1][0]:
            self.pose_history[-1] = (timestamp, pose)
        else:
            self.pose_history.append((timestamp, pose))

    def append_keypoints(self, keypoints: KeypointSet) -> bool:
        if len(keypoints) == 0:
            return False
        if self.keypoint_history and keypoints.timestamp <= self.keypoint_history[-1].timestamp:
            logger.debug(f"Object {self.id}: skipping keypoints at non-increasing t={keypoints.timestamp}")
            return False
        self.keypoint_history.append(keypoints)
        return True

    def recent_keypoints(self, window: Optional[int] = None) -> Optional[KeypointSet]:
        """Concatenation of the last `window` history entries (all of them when None)."""
        entries = self.keypoint_history if window is None else self.keypoint_history[-window:]
        entries = [entry for entry in entries if len(entry)]
        if not entries:
            return None
        return KeypointSet(
            np.vstack([e.positions for e in entries]),
            np.vstack([e.descriptors for e in entries]),
            np.vstack([e.pixels for e in entries]),
            entries[-1].timestamp,
            self.frame_id,
        )


@dataclass(eq=False)
class SceneSet:
    tracked: Dict[int, ObjectModel] = field(default_factory=dict)
    lost: Dict[int, ObjectModel] = field(default_factory=dict)
    next_id: int = 1

    def check_invariants(self) -> None:
        if set(self.tracked) & set(self.lost):
            raise AssertionError("tracked and lost ids overlap")
        if ENVIRONMENT_ID not in self.tracked:
            raise AssertionError("environment is not tracked")

    def get(self, object_id: int) -> ObjectModel:
        if object_id in self.tracked:
            return self.tracked[object_id]
        if object_id in self.lost:
            return self.lost[object_id]
        raise UnknownId(f"object {object_id} is neither tracked nor lost")

    def all_ids(self) -> set:
        return set(self.tracked) | set(self.lost)

    def mark_lost(self, object_id: int) -> None:
        if object_id == ENVIRONMENT_ID:
            raise ValueError("the environment cannot be lost")
        if object_id not in self.tracked:
            raise UnknownId(f"object {object_id} is not tracked")
        obj = self.tracked.pop(object_id)
        obj.status = ObjectStatus.LOST
        self.lost[object_id] = obj
        logger.info(f"Object {object_id} moved to the lost set")

    def restore(self, object_id: int, pose: Pose) -> ObjectModel:
        if object_id not in self.lost:
            raise UnknownId(f"object {object_id} is not lost")
        obj = self.lost.pop(object_id)
        obj.status = ObjectStatus.TRACKED
        obj.pose = pose
        self.tracked[object_id] = obj
        return obj

    def remove(self, object_id: int) -> ObjectModel:
        if object_id == ENVIRONMENT_ID:
            raise ValueError("the environment cannot be removed")
        if object_id in self.tracked:
            return self.tracked.pop(object_id)
        if object_id in self.lost:
            return self.lost.pop(object_id)
        raise UnknownId(f"object {object_id} does not exist")


@dataclass(eq=False)
class SegmentationMap:
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int32)

    @classmethod
    def filled(cls, shape: Tuple[int, int], label: int = ENVIRONMENT_ID) -> "SegmentationMap":
        return cls(np.full(shape, label, dtype=np.int32))

    def mask(self, object_id: int) -> np.ndarray:
        return self.labels == object_id

    def present_ids(self) -> set:
        ids = np.unique(self.labels)
        return {int(i) for i in ids if i != NO_LABEL}

    def pixel_count(self, object_id: int) -> int:
        return int(np.count_nonzero(self.labels == object_id))

    def remap(self, old_id: int, new_id: int) -> None:
        self.labels[self.labels == old_id] = new_id

    def check_against(self, scene: SceneSet) -> None:
        dangling = self.present_ids() - set(scene.tracked)
        if dangling:
            raise AssertionError(f"segmentation references untracked ids {sorted(dangling)}")


def _frame_cloud(frame: "FramePair", mask: np.ndarray, stamp: int, frame_id: str) -> PointCloud:
    """Back-projected points of `mask` (restricted to valid depth) in the camera frame."""
    mask = mask & frame.depth.valid_mask()
    stamps = np.full(int(mask.sum()), stamp, dtype=np.int64)
    return PointCloud(frame.points[mask], frame.normals[mask], frame.intensity[mask], frame_id, stamps)


def keypoints_in_mask(keypoints: Optional[KeypointSet], mask: np.ndarray) -> Optional[KeypointSet]:
    if keypoints is None or len(keypoints) == 0:
        return None
    h, w = mask.shape
    cols = np.clip(np.rint(keypoints.pixels[:, 0]).astype(int), 0, w - 1)
    rows = np.clip(np.rint(keypoints.pixels[:, 1]).astype(int), 0, h - 1)
    inside = mask[rows, cols]
    return keypoints.subset(inside)


def initialize_scene(
    first_frame: "FramePair",
    keypoints: Optional[KeypointSet] = None,
    params: Optional[ModelParams] = None,
) -> SceneSet:
    """The first frame defines the environment (object 0) and the world frame."""
    params = params or ModelParams()
    valid = first_frame.depth.valid_mask()
    if not valid.any():
        raise EmptyFrame("first frame has no valid depth")
    environment = ObjectModel(
        id=ENVIRONMENT_ID,
        pose=Pose.identity(),
        cloud=_one_per_voxel(_frame_cloud(first_frame, valid, 0, f"object:{ENVIRONMENT_ID}"), params.voxel_size_m),
    )
    environment.record_pose(first_frame.timestamp, Pose.identity())
    if keypoints is not None:
        environment.append_keypoints(keypoints.transformed(Pose.identity(), environment.frame_id))
    environment.frames_registered = 1
    logger.info(f"Initialised scene with {len(environment.cloud)} environment points")
    return SceneSet(tracked={ENVIRONMENT_ID: environment}, lost={}, next_id=1)


def initial_segmentation(first_frame: "FramePair") -> SegmentationMap:
    labels = np.where(first_frame.depth.valid_mask(), ENVIRONMENT_ID, NO_LABEL)
    return SegmentationMap(labels)


def spawn_object(
    scene: SceneSet,
    seed_pixels: np.ndarray,
    frame: "FramePair",
    keypoints: Optional[KeypointSet] = None,
    params: Optional[ModelParams] = None,
) -> int:
    """New object whose model frame is the current camera frame."""
    params = params or ModelParams()
    seed_pixels = np.asarray(seed_pixels, dtype=bool)
    if not seed_pixels.any():
        raise EmptySegment("seed segment is empty")
    if not (seed_pixels & frame.depth.valid_mask()).any():
        raise EmptySegment("seed segment has no valid depth")
    object_id = scene.next_id
    scene.next_id += 1
    obj = ObjectModel(
        id=object_id,
        pose=Pose.identity(),
        cloud=_one_per_voxel(_frame_cloud(frame, seed_pixels, 0, f"object:{object_id}"), params.voxel_size_m),
    )
    obj.record_pose(frame.timestamp, Pose.identity())
    seed_keypoints = keypoints_in_mask(keypoints, seed_pixels)
    if seed_keypoints is not None:
        obj.append_keypoints(seed_keypoints.transformed(Pose.identity(), obj.frame_id))
    centre = obj.cloud.positions.mean(axis=0)
    obj.attached_frames["segment_centre"] = Pose(np.eye(3), centre)
    obj.frames_registered = 1
    scene.tracked[object_id] = obj
    logger.info(f"Spawned object {object_id} from {int(seed_pixels.sum())} seed pixels")
    return object_id


def _voxel_keys(points: np.ndarray, voxel: float) -> np.ndarray:
    cells = np.floor(points / voxel).astype(np.int64) + (1 << 20)
    cells = np.clip(cells, 0, (1 << 21) - 1)
    return (cells[:, 0] << 42) | (cells[:, 1] << 21) | cells[:, 2]


def _one_per_voxel(cloud: PointCloud, voxel: float) -> PointCloud:
    _, first = np.unique(_voxel_keys(cloud.positions, voxel), return_index=True)
    if len(first) == len(cloud):
        return cloud
    keep = np.zeros(len(cloud), dtype=bool)
    keep[first] = True
    return cloud.select(keep)


def _carve(cloud: PointCloud, pose: Pose, frame: "FramePair", mask: np.ndarray, margin: float) -> PointCloud:
    """Drops model points seen through: in front of the observed surface inside the segment."""
    if len(cloud) == 0:
        return cloud
    K = frame.intrinsics
    camera_points = pose.apply(cloud.positions)
    pixels, z = project_points(camera_points, K)
    h, w = mask.shape
    with np.errstate(invalid="ignore"):
        cols = np.rint(pixels[:, 0])
        rows = np.rint(pixels[:, 1])
        visible = (z > 0) & (cols >= 0) & (cols < w) & (rows >= 0) & (rows < h)
    idx = np.flatnonzero(visible)
    r, c = rows[idx].astype(int), cols[idx].astype(int)
    observed = frame.depth.values[r, c]
    in_segment = mask[r, c] & (observed > 0)
    see_through = in_segment & (z[idx] < observed - margin)
    if not see_through.any():
        return cloud
    keep = np.ones(len(cloud), dtype=bool)
    keep[idx[see_through]] = False
    return cloud.select(keep)


def register_frame_data(
    obj: ObjectModel,
    frame: "FramePair",
    seg: SegmentationMap,
    T: Pose,
    keypoints: Optional[KeypointSet] = None,
    params: Optional[ModelParams] = None,
    carve_mask: Optional[np.ndarray] = None,
) -> ObjectModel:
    """Fuses the object's segment into its model frame. `T` maps model frame to camera.

    Free-space carving runs over `carve_mask` (the segment when omitted).
    """
    params = params or ModelParams()
    mask = seg.mask(obj.id) & frame.depth.valid_mask()
    if not mask.any():
        return obj
    stamp = obj.frames_registered
    to_model = T.inverse()
    cloud = obj.cloud
    if params.carve_free_space:
        carve_over = mask if carve_mask is None else (carve_mask & frame.depth.valid_mask())
        cloud = _carve(cloud, T, frame, carve_over, params.carve_margin_m)
    fresh = _frame_cloud(frame, mask, stamp, obj.frame_id).transformed(to_model, obj.frame_id)

    fresh = _one_per_voxel(fresh, params.voxel_size_m)
    # a voxel touched by this frame keeps only this frame's point
    occupied = _voxel_keys(fresh.positions, params.voxel_size_m)
    stale = np.isin(_voxel_keys(cloud.positions, params.voxel_size_m), occupied, assume_unique=False)
    merged = cloud.select(~stale).concatenate(fresh)

    if len(merged) > params.max_cloud_points:
        order = np.argsort(merged.stamps, kind="stable")
        evict = order[: len(merged) - params.max_cloud_points]
        keep = np.ones(len(merged), dtype=bool)
        keep[evict] = False
        merged = merged.select(keep)
        logger.debug(f"Object {obj.id}: evicted {len(evict)} oldest points")
    obj.cloud = merged

    segment_keypoints = keypoints_in_mask(keypoints, mask)
    if segment_keypoints is not None and len(segment_keypoints):
        obj.append_keypoints(segment_keypoints.transformed(to_model, obj.frame_id))
    obj.frames_registered += 1
    return obj
