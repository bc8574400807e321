"""Lost-object redetection, duplicate replacement and grasp reference frames."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..core.errors import DegenerateCloud, DegenerateConfiguration, InsufficientInliers, UnknownId
from ..models.params import RansacParams, RedetectionParams
from .geometry import Pose
from .sparse_estimator import match_keypoints, ransac_estimate
from .world_model import KeypointSet, PointCloud, SceneSet, SegmentationMap

logger = logging.getLogger(__name__)

GRASP_FRAME = "grasp"
MIN_GRASP_POINTS = 10
MIN_EXTENT_M = 1e-4
AXIS_TIE_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class GraspFrame:
    """Oriented bounding box; `pose` maps box coordinates into the object model frame."""

    pose: Pose
    extents: np.ndarray


@dataclass(frozen=True, eq=False)
class RedetectionMatch:
    lost_id: int
    segment_id: int
    pose: Pose
    error: float
    inliers: int


@dataclass
class RedetectionCursor:
    """Where the round-robin over (lost model, history entry) trials resumes next frame."""

    position: int = 0


def _trial_order(scene: SceneSet) -> List[Tuple[int, int]]:
    """(lost id, history index) pairs interleaved across lost models."""
    histories = {object_id: len(scene.lost[object_id].keypoint_history) for object_id in sorted(scene.lost)}
    longest = max(histories.values(), default=0)
    order = []
    for entry in range(longest):
        for object_id, length in histories.items():
            if entry < length:
                order.append((object_id, length - 1 - entry))
    return order


def redetect(
    seg: SegmentationMap,
    segment_keypoints: Dict[int, KeypointSet],
    scene: SceneSet,
    params: Optional[RedetectionParams] = None,
    ransac_params: Optional[RansacParams] = None,
    rng: Optional[np.random.Generator] = None,
    cursor: Optional[RedetectionCursor] = None,
) -> List[RedetectionMatch]:
    """Matches current segments against the keypoint histories of lost models.

    At most `trial_budget` (segment, history entry) RANSAC trials run per call;
    each segment resolves to the lost model with the lowest mean inlier error
    and each lost model to at most one segment.
    """
    params = params or RedetectionParams()
    ransac_params = ransac_params or RansacParams()
    rng = rng if rng is not None else np.random.default_rng(0)
    cursor = cursor or RedetectionCursor()
    segments = {sid: kps for sid, kps in segment_keypoints.items() if len(kps) and seg.pixel_count(sid) > 0}
    trials = _trial_order(scene)
    if not segments or not trials:
        return []

    start = cursor.position % len(trials)
    budget = params.trial_budget
    candidates: List[RedetectionMatch] = []
    done = 0
    for step in range(len(trials)):
        if budget <= 0:
            break
        lost_id, entry = trials[(start + step) % len(trials)]
        history = scene.lost[lost_id].keypoint_history[entry]
        for segment_id, keypoints in sorted(segments.items()):
            if budget <= 0:
                break
            budget -= 1
            corr = match_keypoints(history, keypoints)
            if len(corr) < params.min_matches:
                continue
            try:
                estimate = ransac_estimate(corr, ransac_params, rng)
            except (InsufficientInliers, DegenerateConfiguration):
                continue
            if estimate.mean_inlier_error < params.error_threshold and estimate.inlier_count >= params.min_matches:
                candidates.append(RedetectionMatch(
                    lost_id, segment_id, estimate.transform, estimate.mean_inlier_error, estimate.inlier_count
                ))
        else:
            done += 1
    cursor.position = (start + done) % len(trials)

    matches: List[RedetectionMatch] = []
    used_lost, used_segments = set(), set()
    for match in sorted(candidates, key=lambda c: (c.error, c.segment_id, c.lost_id)):
        if match.lost_id in used_lost or match.segment_id in used_segments:
            continue
        used_lost.add(match.lost_id)
        used_segments.add(match.segment_id)
        matches.append(match)
        logger.info(
            f"Segment {match.segment_id} matches lost object {match.lost_id} "
            f"(error {match.error * 1000:.2f} mm, {match.inliers} inliers)"
        )
    return matches


def replace_duplicate(
    scene: SceneSet,
    new_id: int,
    original_id: int,
    T: Pose,
    seg: Optional[SegmentationMap] = None,
) -> SceneSet:
    """Drops the freshly spawned duplicate and brings the original back with pose `T`."""
    if new_id not in scene.tracked:
        raise UnknownId(f"object {new_id} is not tracked")
    if original_id not in scene.lost:
        raise UnknownId(f"object {original_id} is not lost")
    scene.remove(new_id)
    scene.restore(original_id, T)
    if seg is not None:
        seg.remap(new_id, original_id)
    logger.info(f"Object {original_id} restored, duplicate {new_id} removed")
    return scene


def fit_grasp_frame(cloud: PointCloud) -> GraspFrame:
    """PCA-oriented bounding box of a model cloud.

    Axes are ordered by descending extent. The first axis points along +x and the
    second along +y (non-negative dot products); the third completes a right-handed
    frame. An axis orthogonal to its reference direction is signed by its largest
    component instead.
    """
    points = np.asarray(cloud.positions, dtype=np.float64)
    if len(points) < MIN_GRASP_POINTS:
        raise DegenerateCloud(f"need at least {MIN_GRASP_POINTS} points, got {len(points)}")
    centroid = points.mean(axis=0)
    centred = points - centroid
    eigenvalues, eigenvectors = np.linalg.eigh(centred.T @ centred / len(points))
    if eigenvalues[1] <= 1e-12 * max(eigenvalues[2], 1e-300):
        raise DegenerateCloud("cloud spans fewer than two dimensions")
    axes = eigenvectors[:, ::-1]
    local = centred @ axes
    low, high = local.min(axis=0), local.max(axis=0)
    half = (high - low) / 2.0
    order = np.argsort(-half, kind="stable")
    axes, low, high, half = axes[:, order], low[order], high[order], half[order]

    for k in range(2):
        axis = axes[:, k]
        lead = k if abs(axis[k]) > AXIS_TIE_TOL else int(np.argmax(np.abs(axis)))
        if axis[lead] < 0:
            axes[:, k] = -axis
            low[k], high[k] = -high[k], -low[k]
    third = np.cross(axes[:, 0], axes[:, 1])
    if np.dot(third, axes[:, 2]) < 0:
        low[2], high[2] = -high[2], -low[2]
    axes[:, 2] = third

    centre = centroid + axes @ ((low + high) / 2.0)
    return GraspFrame(Pose(axes, centre), np.maximum(half, MIN_EXTENT_M))


def attach_grasp_frame(scene: SceneSet, object_id: int) -> GraspFrame:
    obj = scene.get(object_id)
    grasp = fit_grasp_frame(obj.cloud)
    obj.attached_frames[GRASP_FRAME] = grasp.pose
    obj.grasp_extents = grasp.extents
    return grasp
