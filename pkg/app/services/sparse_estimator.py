"""Descriptor matching and RANSAC rigid alignment of 3D keypoints."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from scipy.spatial import cKDTree

from ..core.errors import DegenerateConfiguration, InsufficientInliers
from ..models.params import RansacParams
from .geometry import Pose, orthonormalize
from .world_model import KeypointSet

logger = logging.getLogger(__name__)

COLLINEAR_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class Correspondence:
    model_point: np.ndarray
    frame_point: np.ndarray
    model_pixel: np.ndarray
    frame_pixel: np.ndarray
    descriptor_distance: float


@dataclass(eq=False)
class Correspondences:
    """Matched keypoint pairs stored column-wise."""

    model_points: np.ndarray
    frame_points: np.ndarray
    model_pixels: np.ndarray
    frame_pixels: np.ndarray
    distances: np.ndarray
    model_index: np.ndarray
    frame_index: np.ndarray

    @classmethod
    def empty(cls) -> "Correspondences":
        z3, z2, z = np.zeros((0, 3)), np.zeros((0, 2)), np.zeros(0)
        return cls(z3, z3.copy(), z2, z2.copy(), z, np.zeros(0, np.int64), np.zeros(0, np.int64))

    def __len__(self) -> int:
        return len(self.model_points)

    def subset(self, mask) -> "Correspondences":
        return Correspondences(
            self.model_points[mask], self.frame_points[mask], self.model_pixels[mask],
            self.frame_pixels[mask], self.distances[mask], self.model_index[mask], self.frame_index[mask],
        )

    def items(self) -> List[Correspondence]:
        return [
            Correspondence(self.model_points[i], self.frame_points[i], self.model_pixels[i],
                           self.frame_pixels[i], float(self.distances[i]))
            for i in range(len(self))
        ]


@dataclass(eq=False)
class SparseEstimate:
    transform: Pose
    inliers: np.ndarray
    mean_inlier_error: float
    correspondences: Optional[Correspondences] = None

    @property
    def inlier_count(self) -> int:
        return int(np.count_nonzero(self.inliers))


def match_keypoints(model: KeypointSet, frame: KeypointSet) -> Correspondences:
    """Mutual nearest neighbours in descriptor space."""
    if len(model) == 0 or len(frame) == 0:
        return Correspondences.empty()
    model_descriptors = np.asarray(model.descriptors, dtype=np.float64)
    frame_descriptors = np.asarray(frame.descriptors, dtype=np.float64)
    to_frame, best_frame = cKDTree(frame_descriptors).query(model_descriptors, k=1)
    _, best_model = cKDTree(model_descriptors).query(frame_descriptors, k=1)
    model_index = np.flatnonzero(best_model[best_frame] == np.arange(len(model)))
    frame_index = best_frame[model_index]
    distances = to_frame[model_index]
    return Correspondences(
        model.positions[model_index],
        frame.positions[frame_index],
        model.pixels[model_index],
        frame.pixels[frame_index],
        distances,
        model_index,
        frame_index,
    )


def umeyama_solve(
    src: np.ndarray,
    dst: np.ndarray,
    weights: Optional[np.ndarray] = None,
    allow_degenerate: bool = False,
) -> Pose:
    """Least-squares rigid transform T with dst ~ T * src.

    With `allow_degenerate`, collinear or coincident points return one of the
    equally good solutions instead of raising.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if len(src) != len(dst):
        raise ValueError("point sets differ in length")
    if len(src) < (1 if allow_degenerate else 3):
        raise DegenerateConfiguration(f"need at least 3 correspondences, got {len(src)}")
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or w.sum() <= 0:
        raise DegenerateConfiguration("weights must be non-negative with a positive sum")
    w = w / w.sum()
    mu_src = w @ src
    mu_dst = w @ dst
    a = src - mu_src
    b = dst - mu_dst
    spread = np.linalg.svd(a * np.sqrt(w)[:, None], compute_uv=False)
    if not allow_degenerate and spread[1] <= COLLINEAR_TOL * max(1.0, spread[0]):
        raise DegenerateConfiguration("correspondences are collinear")
    cov = (b * w[:, None]).T @ a
    u, _, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(u) * np.linalg.det(vt))
    if d == 0:
        d = 1.0
    rotation = orthonormalize(u @ np.diag([1.0, 1.0, d]) @ vt)
    return Pose(rotation, mu_dst - rotation @ mu_src)


def _residuals(pose: Pose, corr: Correspondences) -> np.ndarray:
    return np.linalg.norm(pose.apply(corr.model_points) - corr.frame_points, axis=1)


def ransac_estimate(
    corr: Correspondences,
    params: Optional[RansacParams] = None,
    rng: Optional[np.random.Generator] = None,
) -> SparseEstimate:
    """Model-to-camera pose from 3D-3D matches; the best hypothesis is refit on its inliers."""
    params = params or RansacParams()
    if rng is None:
        rng = np.random.default_rng(params.seed if params.seed is not None else 0)
    n = len(corr)
    required = params.required_inliers(n)
    if n < max(params.sample_size, required):
        raise InsufficientInliers(f"{n} correspondences, need at least {max(params.sample_size, required)}")

    threshold = params.inlier_threshold_m
    best_inliers = None
    best_key = (0, np.inf)
    for _ in range(params.iterations):
        sample = rng.choice(n, size=params.sample_size, replace=False)
        try:
            hypothesis = umeyama_solve(corr.model_points[sample], corr.frame_points[sample])
        except DegenerateConfiguration:
            continue
        residuals = _residuals(hypothesis, corr)
        inliers = residuals <= threshold
        count = int(inliers.sum())
        if count == 0:
            continue
        key = (count, float(residuals[inliers].mean()))
        if key[0] > best_key[0] or (key[0] == best_key[0] and key[1] < best_key[1]):
            best_key, best_inliers = key, inliers

    if best_inliers is None or best_key[0] < required:
        raise InsufficientInliers(f"best hypothesis has {best_key[0]} inliers, need {required}")

    pose = umeyama_solve(corr.model_points[best_inliers], corr.frame_points[best_inliers])
    inliers = _residuals(pose, corr) <= threshold
    if inliers.sum() < required:
        inliers = best_inliers
    # the returned pose is the fit over exactly the returned inliers
    pose = umeyama_solve(corr.model_points[inliers], corr.frame_points[inliers])
    residuals = _residuals(pose, corr)
    mean_error = float(residuals[inliers].mean())
    logger.debug(f"RANSAC: {int(inliers.sum())}/{n} inliers, mean error {mean_error * 1000:.2f} mm")
    return SparseEstimate(pose, inliers, mean_error, corr)
