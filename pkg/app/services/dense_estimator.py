"""Point-to-plane ICP over projective associations, started from the sparse pose."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from ..core.errors import NoAssociations
from ..models.params import IcpParams
from .frame_frontend import FramePair
from .geometry import CameraIntrinsics, Pose, project_points
from .world_model import PointCloud

logger = logging.getLogger(__name__)

MAX_BACKTRACKS = 10


@dataclass(eq=False)
class Associations:
    model_index: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    model_points: np.ndarray
    model_normals: np.ndarray
    frame_points: np.ndarray

    def __len__(self) -> int:
        return len(self.model_index)


@dataclass(eq=False)
class IcpResult:
    transform: Pose
    final_residual_rms: float
    per_pixel_residual: np.ndarray
    iterations_used: int
    converged: bool
    rms_history: List[float] = field(default_factory=list)
    # RMS after each accepted step, on that iteration's associations
    rms_after_step: List[float] = field(default_factory=list)


def projective_associate(
    model_cloud: PointCloud,
    model_pose: Pose,
    frame_points: np.ndarray,
    K: CameraIntrinsics,
    params: Optional[IcpParams] = None,
    mask: Optional[np.ndarray] = None,
) -> Associations:
    """Pairs each visible model point with the frame point at the pixel it projects to.

    `frame_points` is the (H, W, 3) back-projected grid on the same pixel
    lattice as `K`. Where several model points hit a pixel the closest to the
    camera wins.
    """
    params = params or IcpParams()
    h, w = frame_points.shape[:2]
    has_normal = model_cloud.has_normals()
    idx = np.flatnonzero(has_normal)
    camera_points = model_pose.apply(model_cloud.positions[idx])
    camera_normals = model_pose.rotate(model_cloud.normals[idx])
    pixels, z = project_points(camera_points, K)
    with np.errstate(invalid="ignore"):
        cols = np.rint(pixels[:, 0])
        rows = np.rint(pixels[:, 1])
        inside = (z > 0) & (cols >= 0) & (cols < w) & (rows >= 0) & (rows < h)
    idx, camera_points, camera_normals, z = idx[inside], camera_points[inside], camera_normals[inside], z[inside]
    rows, cols = rows[inside].astype(np.int64), cols[inside].astype(np.int64)

    flat = rows * w + cols
    order = np.lexsort((z, flat))
    _, first = np.unique(flat[order], return_index=True)
    keep = order[first]
    idx, camera_points, camera_normals = idx[keep], camera_points[keep], camera_normals[keep]
    rows, cols = rows[keep], cols[keep]

    targets = frame_points[rows, cols]
    ok = np.all(np.isfinite(targets), axis=1)
    if mask is not None:
        ok &= mask[rows, cols]
    with np.errstate(invalid="ignore"):
        distance = np.linalg.norm(camera_points - targets, axis=1)
        ray = -camera_points / np.linalg.norm(camera_points, axis=1, keepdims=True)
        cos_angle = np.sum(camera_normals * ray, axis=1)
    ok &= distance <= params.max_correspondence_dist
    ok &= cos_angle >= np.cos(params.max_normal_angle)

    sel = np.flatnonzero(ok)
    return Associations(
        model_index=idx[sel],
        rows=rows[sel],
        cols=cols[sel],
        model_points=model_cloud.positions[idx[sel]],
        model_normals=model_cloud.normals[idx[sel]],
        frame_points=targets[sel],
    )


def point_to_plane_residual(inverse_pose: Pose, assoc: Associations) -> np.ndarray:
    """n . (P^-1 q - m) in the model frame."""
    u = inverse_pose.apply(assoc.frame_points)
    return np.sum(assoc.model_normals * (u - assoc.model_points), axis=1)


def point_to_plane_jacobian(inverse_pose: Pose, assoc: Associations) -> np.ndarray:
    """d residual / d twist for the left update P^-1 <- exp(twist) P^-1; columns (omega, v)."""
    u = inverse_pose.apply(assoc.frame_points)
    return np.hstack([np.cross(u, assoc.model_normals), assoc.model_normals])


def _weights(residual: np.ndarray, params: IcpParams) -> np.ndarray:
    if not params.robust:
        return np.ones_like(residual)
    a = np.abs(residual)
    return np.where(a <= params.huber_delta, 1.0, params.huber_delta / np.maximum(a, 1e-12))


def _cost(residual: np.ndarray, params: IcpParams) -> float:
    """Objective minimised by the weighted Gauss-Newton step: Huber when robust, else least squares."""
    a = np.abs(residual)
    if not params.robust:
        return float(0.5 * np.sum(a**2))
    delta = params.huber_delta
    return float(np.sum(np.where(a <= delta, 0.5 * a**2, delta * (a - 0.5 * delta))))


def _frustum_cull(cloud: PointCloud, pose: Pose, K: CameraIntrinsics, margin: float = 0.25) -> PointCloud:
    """Keeps points projecting near the image under `pose`."""
    pixels, z = project_points(pose.apply(cloud.positions), K)
    with np.errstate(invalid="ignore"):
        near = (
            (z > 0)
            & (pixels[:, 0] >= -margin * K.width) & (pixels[:, 0] < (1 + margin) * K.width)
            & (pixels[:, 1] >= -margin * K.height) & (pixels[:, 1] < (1 + margin) * K.height)
        )
    return cloud if near.all() else cloud.select(near)


def _pyramid_strides(n_points: int, params: IcpParams) -> List[int]:
    if n_points < params.pyramid_min_points:
        return [1]
    return [2 ** level for level in reversed(range(params.pyramid_levels))]


def icp_refine(
    model_cloud: PointCloud,
    T_init: Pose,
    frame: FramePair,
    params: Optional[IcpParams] = None,
    mask: Optional[np.ndarray] = None,
) -> IcpResult:
    """Gauss-Newton point-to-plane refinement; returns T_icp* with final pose T_init . T_icp*."""
    params = params or IcpParams()
    K = frame.intrinsics
    model_cloud = _frustum_cull(model_cloud, T_init, K)
    inverse_pose = T_init.inverse()
    rms_history: List[float] = []
    rms_after: List[float] = []
    iterations = 0
    converged = False
    first = True

    for stride in _pyramid_strides(len(model_cloud), params):
        level_points = frame.points[::stride, ::stride]
        level_K = K if stride == 1 else K.scaled(stride)
        level_mask = None if mask is None else mask[::stride, ::stride]
        level_cloud = model_cloud if stride == 1 else model_cloud.select(slice(None, None, stride * stride))
        converged = False
        for _ in range(params.max_iterations):
            assoc = projective_associate(level_cloud, inverse_pose.inverse(), level_points, level_K, params, level_mask)
            if len(assoc) < 6:
                if first:
                    raise NoAssociations(f"only {len(assoc)} model points associate with the frame")
                break
            first = False
            residual = point_to_plane_residual(inverse_pose, assoc)
            J = point_to_plane_jacobian(inverse_pose, assoc)
            wts = _weights(residual, params)
            rms_history.append(float(np.sqrt(np.mean(residual**2))))
            H = J.T @ (J * wts[:, None])
            g = J.T @ (wts * residual)
            try:
                delta = -np.linalg.solve(H, g)
            except np.linalg.LinAlgError:
                delta = -np.linalg.lstsq(H, g, rcond=None)[0]
            cost = _cost(residual, params)
            for _ in range(MAX_BACKTRACKS):
                candidate = Pose.exp(delta).compose(inverse_pose)
                trial = point_to_plane_residual(candidate, assoc)
                if _cost(trial, params) <= cost:
                    break
                delta = 0.5 * delta
            else:
                # no descent along the step
                converged = True
                break
            inverse_pose = candidate
            rms_after.append(float(np.sqrt(np.mean(trial**2))))
            iterations += 1
            if np.linalg.norm(delta) < params.convergence_eps:
                converged = True
                break

    final_pose = inverse_pose.inverse()
    assoc = projective_associate(model_cloud, final_pose, frame.points, K, params, mask)
    per_pixel = np.full(frame.shape, np.nan)
    if len(assoc):
        residual = point_to_plane_residual(inverse_pose, assoc)
        per_pixel[assoc.rows, assoc.cols] = residual
        rms = float(np.sqrt(np.mean(residual**2)))
    else:
        rms = float("inf")
    T_icp = T_init.inverse().compose(final_pose)
    logger.debug(f"ICP: {iterations} iterations, rms {rms * 1000:.2f} mm, converged={converged}")
    return IcpResult(T_icp, rms, per_pixel, iterations, converged, rms_history, rms_after)


def compose_final(T_init: Pose, T_icp_star: Pose) -> Pose:
    return T_init.compose(T_icp_star)


def residual_grid(
    model_cloud: PointCloud,
    pose: Pose,
    frame: FramePair,
    params: Optional[IcpParams] = None,
) -> np.ndarray:
    """Per-pixel point-to-plane residual of a model at a fixed pose (no optimisation)."""
    params = params or IcpParams()
    grid = np.full(frame.shape, np.nan)
    if len(model_cloud) == 0:
        return grid
    assoc = projective_associate(model_cloud, pose, frame.points, frame.intrinsics, params)
    if len(assoc):
        grid[assoc.rows, assoc.cols] = point_to_plane_residual(pose.inverse(), assoc)
    return grid
