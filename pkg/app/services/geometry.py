"""Rigid transforms, the pinhole camera and the rigid warp field.

Pixel coordinates are continuous `(x, y)` = (column, row); integer values hit
pixel centres. Depth images use 0 or NaN for invalid measurements.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from ..core.errors import BehindCamera, InvalidDepth, NonPositiveDepth

ORTHONORMAL_TOL = 1e-9
_REORTHONORMALIZE_TOL = 1e-12


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.float64, copy=True)
    array.setflags(write=False)
    return array


def orthonormalize(rotation: np.ndarray) -> np.ndarray:
    """Nearest proper rotation in the Frobenius sense."""
    u, _, vt = np.linalg.svd(rotation)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


@dataclass(frozen=True, eq=False)
class Pose:
    """SE(3) element mapping points of a source frame into a target frame."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=np.float64)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if rotation.shape != (3, 3) or translation.shape != (3,):
            raise ValueError("Pose needs a 3x3 rotation and a 3-vector translation")
        if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(translation))):
            raise ValueError("Pose entries must be finite")
        deviation = np.linalg.norm(rotation @ rotation.T - np.eye(3))
        if deviation > ORTHONORMAL_TOL or np.linalg.det(rotation) <= 0:
            raise ValueError(f"rotation is not a proper orthonormal matrix (deviation {deviation:.2e})")
        object.__setattr__(self, "rotation", _frozen(rotation))
        object.__setattr__(self, "translation", _frozen(translation))

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "Pose":
        matrix = np.asarray(matrix, dtype=np.float64)
        return cls(matrix[:3, :3], matrix[:3, 3])

    @classmethod
    def from_quaternion(cls, translation, quaternion_xyzw) -> "Pose":
        rotation = Rotation.from_quat(np.asarray(quaternion_xyzw, dtype=np.float64)).as_matrix()
        return cls(orthonormalize(rotation), translation)

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(Rotation.from_rotvec(np.asarray(rotvec, dtype=np.float64)).as_matrix(), translation)

    @classmethod
    def exp(cls, twist: np.ndarray) -> "Pose":
        """Exponential map of a twist `(omega, v)` (rotation first)."""
        twist = np.asarray(twist, dtype=np.float64)
        omega, v = twist[:3], twist[3:]
        theta = float(np.linalg.norm(omega))
        wx = skew(omega)
        if theta < 1e-8:
            rotation = np.eye(3) + wx + 0.5 * wx @ wx
            left_jacobian = np.eye(3) + 0.5 * wx + wx @ wx / 6.0
        else:
            rotation = Rotation.from_rotvec(omega).as_matrix()
            a = (1.0 - np.cos(theta)) / theta**2
            b = (theta - np.sin(theta)) / theta**3
            left_jacobian = np.eye(3) + a * wx + b * wx @ wx
        return cls(orthonormalize(rotation), left_jacobian @ v)

    def log(self) -> np.ndarray:
        omega = Rotation.from_matrix(self.rotation).as_rotvec()
        theta = float(np.linalg.norm(omega))
        wx = skew(omega)
        if theta < 1e-8:
            inv_left = np.eye(3) - 0.5 * wx + wx @ wx / 12.0
        else:
            half = 0.5 * theta
            coeff = (1.0 - half * np.cos(half) / np.sin(half)) / theta**2
            inv_left = np.eye(3) - 0.5 * wx + coeff * wx @ wx
        return np.concatenate([omega, inv_left @ self.translation])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def quaternion(self) -> np.ndarray:
        """Scalar-last unit quaternion (x, y, z, w)."""
        return Rotation.from_matrix(self.rotation).as_quat()

    def compose(self, other: "Pose") -> "Pose":
        """`self ∘ other`: apply `other` first, then `self`."""
        rotation = self.rotation @ other.rotation
        if np.linalg.norm(rotation @ rotation.T - np.eye(3)) > _REORTHONORMALIZE_TOL:
            rotation = orthonormalize(rotation)
        return Pose(rotation, self.rotation @ other.translation + self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transforms a 3-vector or an (N, 3) array of points."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def rotate(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T

    def rotation_angle(self) -> float:
        cos = np.clip((np.trace(self.rotation) - 1.0) / 2.0, -1.0, 1.0)
        return float(np.arccos(cos))

    def distance_to(self, other: "Pose") -> Tuple[float, float]:
        """(translation error in m, rotation error in rad) between two poses."""
        delta = self.inverse() @ other
        return float(np.linalg.norm(self.translation - other.translation)), delta.rotation_angle()


def compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def inverse(pose: Pose) -> Pose:
    return pose.inverse()


def apply(pose: Pose, points: np.ndarray) -> np.ndarray:
    return pose.apply(points)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, stride: int) -> "CameraIntrinsics":
        """Intrinsics of the image subsampled by `stride` (pixel i of the result is pixel i*stride)."""
        return CameraIntrinsics(
            fx=self.fx / stride,
            fy=self.fy / stride,
            cx=self.cx / stride,
            cy=self.cy / stride,
            width=(self.width + stride - 1) // stride,
            height=(self.height + stride - 1) // stride,
        )

    @property
    def shape(self) -> Tuple[int, int]:
        return self.height, self.width


@dataclass(frozen=True, eq=False)
class DepthImage:
    values: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True)
        if values.ndim != 2:
            raise ValueError("depth image must be a 2D grid")
        valid = np.isfinite(values) & (values > 0)
        values[~valid] = 0.0
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    def valid_mask(self) -> np.ndarray:
        return self.values > 0

    def sample(self, x: np.ndarray) -> float:
        """Nearest-neighbour depth at continuous pixel `x`; 0 outside the image."""
        col, row = int(np.rint(x[0])), int(np.rint(x[1]))
        h, w = self.values.shape
        if not (0 <= row < h and 0 <= col < w):
            return 0.0
        return float(self.values[row, col])


def project_points(points: np.ndarray, K: CameraIntrinsics) -> Tuple[np.ndarray, np.ndarray]:
    """Unchecked vectorised projection; callers mask z <= 0 themselves."""
    points = np.asarray(points, dtype=np.float64)
    z = points[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * points[..., 0] / z + K.cx
        v = K.fy * points[..., 1] / z + K.cy
    return np.stack([u, v], axis=-1), z


def project(p: np.ndarray, K: CameraIntrinsics) -> Tuple[np.ndarray, float]:
    p = np.asarray(p, dtype=np.float64)
    if not p[2] > 0:
        raise NonPositiveDepth(f"cannot project point with z={p[2]}")
    pixel, z = project_points(p, K)
    return pixel, float(z)


def backproject(x: np.ndarray, d: float, K: CameraIntrinsics) -> np.ndarray:
    if not (np.isfinite(d) and d > 0):
        raise InvalidDepth(f"invalid depth {d}")
    return backproject_pixels(np.asarray(x, dtype=np.float64)[None, :], np.array([d]), K)[0]


def backproject_pixels(pixels: np.ndarray, depths: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=np.float64)
    depths = np.asarray(depths, dtype=np.float64)
    x = (pixels[:, 0] - K.cx) * depths / K.fx
    y = (pixels[:, 1] - K.cy) * depths / K.fy
    return np.stack([x, y, depths], axis=1)


def pixel_grid(height: int, width: int) -> np.ndarray:
    """(H, W, 2) array of (x, y) pixel coordinates."""
    rows, cols = np.mgrid[0:height, 0:width]
    return np.stack([cols, rows], axis=-1).astype(np.float64)


def backproject_depth(depth: DepthImage, K: CameraIntrinsics) -> np.ndarray:
    """(H, W, 3) camera-frame points; invalid pixels hold NaN."""
    values = depth.values
    h, w = values.shape
    grid = pixel_grid(h, w)
    with np.errstate(invalid="ignore"):
        z = np.where(values > 0, values, np.nan)
    x = (grid[..., 0] - K.cx) * z / K.fx
    y = (grid[..., 1] - K.cy) * z / K.fy
    return np.stack([x, y, z], axis=-1)


def warp(x: np.ndarray, T: Pose, D: DepthImage, K: CameraIntrinsics) -> np.ndarray:
    """Rigid warp field: back-project through D, move by T, re-project."""
    d = D.sample(x)
    if not d > 0:
        raise InvalidDepth(f"no valid depth at pixel {tuple(np.round(x, 3))}")
    moved = T.apply(backproject(x, d, K))
    if moved[2] <= 0:
        raise BehindCamera(f"warped point has z={moved[2]:.4f}")
    pixel, _ = project(moved, K)
    return pixel


def warp_depth(D: DepthImage, T: Pose, K: CameraIntrinsics) -> Tuple[np.ndarray, np.ndarray]:
    """Dense warp of every valid pixel; returns ((H, W, 2) pixels, validity mask)."""
    points = backproject_depth(D, K)
    moved = points @ T.rotation.T + T.translation
    pixels, z = project_points(moved, K)
    valid = np.isfinite(z) & (z > 0)
    return pixels, valid


def estimate_normals(points: np.ndarray, max_depth_jump: float = 0.05) -> np.ndarray:
    """Per-pixel normals of an (H, W, 3) back-projected grid by central differences.

    Normals face the camera. Border pixels, pixels with an invalid neighbour and
    pixels straddling a depth discontinuity get NaN.
    """
    h, w, _ = points.shape
    normals = np.full((h, w, 3), np.nan)
    if h < 3 or w < 3:
        return normals
    centre = points[1:-1, 1:-1]
    left, right = points[1:-1, :-2], points[1:-1, 2:]
    up, down = points[:-2, 1:-1], points[2:, 1:-1]
    dx = right - left
    dy = down - up
    n = np.cross(dx, dy)
    with np.errstate(invalid="ignore", divide="ignore"):
        norm = np.linalg.norm(n, axis=-1, keepdims=True)
        n = n / norm
        jump = np.maximum.reduce([
            np.abs(left[..., 2] - centre[..., 2]),
            np.abs(right[..., 2] - centre[..., 2]),
            np.abs(up[..., 2] - centre[..., 2]),
            np.abs(down[..., 2] - centre[..., 2]),
        ])
        facing = np.sum(n * centre, axis=-1) > 0
    n[facing] *= -1.0
    ok = np.all(np.isfinite(n), axis=-1) & (norm[..., 0] > 0) & (jump < max_depth_jump)
    n[~ok] = np.nan
    normals[1:-1, 1:-1] = n
    return normals
