"""Trajectory and reconstruction metrics."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, List, Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

from ..core.errors import EmptyCloud, NoAssociations
from .geometry import Pose
from .sparse_estimator import umeyama_solve
from .world_model import PointCloud

logger = logging.getLogger(__name__)

ASSOCIATION_WINDOW_S = 0.02


@dataclass(eq=False)
class Trajectory:
    timestamps: np.ndarray
    poses: List[Pose]

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        if len(self.timestamps) != len(self.poses):
            raise ValueError("timestamps and poses differ in length")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")

    @classmethod
    def from_samples(cls, samples: Iterable[Tuple[float, Pose]]) -> "Trajectory":
        samples = list(samples)
        return cls(np.array([t for t, _ in samples]), [p for _, p in samples])

    def __len__(self) -> int:
        return len(self.poses)

    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)

    def transformed(self, T: Pose) -> "Trajectory":
        return Trajectory(self.timestamps.copy(), [T.compose(p) for p in self.poses])


def associate(
    estimated: Trajectory, truth: Trajectory, max_dt: float = ASSOCIATION_WINDOW_S
) -> List[Tuple[int, int]]:
    """Nearest-timestamp pairs within `max_dt`, each sample used at most once."""
    if len(estimated) == 0 or len(truth) == 0:
        return []
    candidates = []
    for i, t in enumerate(estimated.timestamps):
        j = int(np.searchsorted(truth.timestamps, t))
        for k in (j - 1, j):
            if 0 <= k < len(truth):
                dt = abs(truth.timestamps[k] - t)
                if dt <= max_dt:
                    candidates.append((dt, i, k))
    candidates.sort()
    used_est, used_gt, pairs = set(), set(), []
    for _, i, k in candidates:
        if i in used_est or k in used_gt:
            continue
        used_est.add(i)
        used_gt.add(k)
        pairs.append((i, k))
    return sorted(pairs)


def _pairs_or_raise(estimated: Trajectory, truth: Trajectory, minimum: int = 2) -> List[Tuple[int, int]]:
    pairs = associate(estimated, truth)
    if len(pairs) < minimum:
        raise NoAssociations(f"only {len(pairs)} timestamps associate between the trajectories")
    return pairs


def align_trajectories(estimated: Trajectory, truth: Trajectory) -> Pose:
    """SE(3) transform (no scale) taking estimated positions onto the truth."""
    pairs = _pairs_or_raise(estimated, truth)
    est = np.array([estimated.poses[i].translation for i, _ in pairs])
    gt = np.array([truth.poses[k].translation for _, k in pairs])
    return umeyama_solve(est, gt, allow_degenerate=True)


def ate_errors(estimated: Trajectory, truth: Trajectory) -> np.ndarray:
    pairs = _pairs_or_raise(estimated, truth)
    alignment = align_trajectories(estimated, truth)
    est = alignment.apply(np.array([estimated.poses[i].translation for i, _ in pairs]))
    gt = np.array([truth.poses[k].translation for _, k in pairs])
    return np.linalg.norm(est - gt, axis=1)


def ate_rmse(estimated: Trajectory, truth: Trajectory) -> float:
    errors = ate_errors(estimated, truth)
    return float(np.sqrt(np.mean(errors**2)))


def rpe_rmse(estimated: Trajectory, truth: Trajectory, delta: float = 1.0) -> Tuple[float, float]:
    """(translational m/s, rotational deg/s) RMSE over pose pairs `delta` seconds apart."""
    pairs = _pairs_or_raise(estimated, truth)
    gt_times = np.array([truth.timestamps[k] for _, k in pairs])
    trans, rot = [], []
    for a, (i, k) in enumerate(pairs):
        b = int(np.searchsorted(gt_times, gt_times[a] + delta - 1e-9))
        if b >= len(pairs):
            break
        j, l = pairs[b]
        span = truth.timestamps[l] - truth.timestamps[k]
        if span <= 0:
            continue
        gt_rel = truth.poses[k].inverse().compose(truth.poses[l])
        est_rel = estimated.poses[i].inverse().compose(estimated.poses[j])
        error = gt_rel.inverse().compose(est_rel)
        trans.append(np.linalg.norm(error.translation) / span)
        rot.append(np.degrees(error.rotation_angle()) / span)
    if not trans:
        raise NoAssociations(f"no associated pose pairs are {delta} s apart")
    return float(np.sqrt(np.mean(np.square(trans)))), float(np.sqrt(np.mean(np.square(rot))))


def reconstruction_error(
    estimated: PointCloud, reference: PointCloud
) -> Tuple[float, float, np.ndarray]:
    """Distance from every estimated point to its nearest reference point: (mean, std, distances)."""
    if len(estimated) == 0 or len(reference) == 0:
        raise EmptyCloud("reconstruction error needs two non-empty clouds")
    distances, _ = cKDTree(reference.positions).query(estimated.positions, k=1)
    return float(distances.mean()), float(distances.std()), distances


def subsample(cloud: PointCloud, max_points: Optional[int], rng_seed: int = 0) -> PointCloud:
    if max_points is None or len(cloud) <= max_points:
        return cloud
    idx = np.sort(np.random.default_rng(rng_seed).choice(len(cloud), size=max_points, replace=False))
    return cloud.select(idx)
