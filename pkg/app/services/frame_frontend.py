"""Frame ingestion and keypoint extraction behind pluggable providers."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Any, Optional, Protocol

import numpy as np
from scipy import ndimage

from ..core.errors import DimensionMismatch, MalformedFile, MultiMotionError, ProviderFailure
from ..models.params import FrontendParams
from .geometry import CameraIntrinsics, DepthImage, backproject_depth, estimate_normals
from .world_model import KeypointSet

logger = logging.getLogger(__name__)

KEYPOINT_FILE_MAGIC = b"MMKP1"
KEYPOINT_FILE_DESCRIPTOR_DIM = 256
RESPONSE_FLOOR = 1e-3


@dataclass(frozen=True, eq=False)
class FramePair:
    """Registered intensity/depth pair. `ground_truth` is only set for simulated frames."""

    intensity: np.ndarray
    depth: DepthImage
    timestamp: float
    intrinsics: CameraIntrinsics
    ground_truth: Optional[Any] = None

    def __post_init__(self):
        intensity = np.asarray(self.intensity, dtype=np.float64)
        if intensity.shape != self.depth.shape:
            raise DimensionMismatch(
                f"intensity {intensity.shape} and depth {self.depth.shape} differ in size"
            )
        if intensity.shape != self.intrinsics.shape:
            raise DimensionMismatch(
                f"image size {intensity.shape} does not match intrinsics {self.intrinsics.shape}"
            )
        intensity.setflags(write=False)
        object.__setattr__(self, "intensity", intensity)

    @property
    def shape(self):
        return self.intensity.shape

    @cached_property
    def points(self) -> np.ndarray:
        """(H, W, 3) camera-frame points, NaN at invalid depth."""
        return backproject_depth(self.depth, self.intrinsics)

    @cached_property
    def normals(self) -> np.ndarray:
        return estimate_normals(self.points)


@dataclass(frozen=True, eq=False)
class KeypointHeatmap:
    """Per-pixel keypoint response with descriptors.

    Descriptors are either dense `(H, W, D)` or sparse `(N, D)` rows for the
    sorted flat pixel indices in `pixels`, which then cover every pixel whose
    response is positive.
    """

    response: np.ndarray
    descriptors: np.ndarray
    pixels: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.response.shape

    @property
    def descriptor_dim(self) -> int:
        return int(self.descriptors.shape[-1])

    def describe(self, flat_index: np.ndarray) -> np.ndarray:
        flat_index = np.asarray(flat_index, dtype=np.int64)
        if self.pixels is None:
            return self.descriptors.reshape(-1, self.descriptor_dim)[flat_index]
        pos = np.searchsorted(self.pixels, flat_index)
        pos = np.clip(pos, 0, max(len(self.pixels) - 1, 0))
        if len(self.pixels) == 0 or np.any(self.pixels[pos] != flat_index):
            raise ProviderFailure("heatmap has no descriptor for a responding pixel")
        return self.descriptors[pos]

    def dense_descriptors(self) -> np.ndarray:
        if self.pixels is None:
            return self.descriptors
        h, w = self.shape
        dense = np.zeros((h * w, self.descriptor_dim), dtype=np.float32)
        dense[self.pixels] = self.descriptors
        return dense.reshape(h, w, self.descriptor_dim)


class KeypointProvider(Protocol):
    def heatmap(self, frame: FramePair) -> KeypointHeatmap: ...


def non_maximum_suppression(response: np.ndarray, threshold: float) -> np.ndarray:
    """3x3 max-pool suppression; on plateaus the first pixel in raster order wins."""
    pooled = ndimage.maximum_filter(response, size=3, mode="constant", cval=-np.inf)
    keep = (response == pooled) & (response > threshold)
    padded = np.pad(keep, 1, constant_values=False)
    earlier = (
        padded[1:-1, :-2]      # left
        | padded[:-2, :-2]     # up-left
        | padded[:-2, 1:-1]    # up
        | padded[:-2, 2:]      # up-right
    )
    return keep & ~earlier


def extract_keypoints(
    frame: FramePair,
    provider: KeypointProvider,
    threshold: float = 0.015,
) -> KeypointSet:
    try:
        heatmap = provider.heatmap(frame)
    except MultiMotionError:
        raise
    except Exception as e:
        raise ProviderFailure(f"keypoint provider failed at t={frame.timestamp}: {e}") from e
    if heatmap.shape != frame.shape:
        raise DimensionMismatch(f"heatmap {heatmap.shape} does not match frame {frame.shape}")

    keep = non_maximum_suppression(heatmap.response, threshold) & frame.depth.valid_mask()
    rows, cols = np.nonzero(keep)
    flat = rows * frame.shape[1] + cols
    descriptors = heatmap.describe(flat).astype(np.float32)
    positions = frame.points[rows, cols]
    pixels = np.stack([cols, rows], axis=1).astype(np.float64)
    logger.debug(f"Extracted {len(rows)} keypoints at t={frame.timestamp:.3f}")
    return KeypointSet(positions, descriptors, pixels, frame.timestamp, f"camera@{frame.timestamp:.6f}")


def _unit_rows(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    return vectors / np.where(norms > 0, norms, 1.0)


def site_descriptor(body_id: int, face: int, site: np.ndarray, dim: int) -> np.ndarray:
    """Deterministic unit descriptor of a physical surface site."""
    entropy = [int(body_id) + 1, int(face)] + [int(v) + (1 << 30) for v in site]
    rng = np.random.default_rng(np.random.SeedSequence(entropy))
    vector = rng.standard_normal(dim)
    return (vector / np.linalg.norm(vector)).astype(np.float32)


class SyntheticKeypointProvider:
    """Keypoints on a per-body lattice of surface sites, described by a hash of the site.

    The same physical site produces the same descriptor in every frame unless
    descriptor noise or outliers are configured.
    """

    def __init__(self, params: FrontendParams | None = None, seed: int = 0, spacing_by_body=None):
        self.params = params or FrontendParams()
        self.seed = seed
        self.spacing_by_body = dict(spacing_by_body or {})

    def _spacing(self, labels: np.ndarray) -> np.ndarray:
        spacing = np.full(labels.shape, self.params.keypoint_spacing_m)
        for body_id, value in self.spacing_by_body.items():
            spacing[labels == body_id] = value
        return spacing

    def heatmap(self, frame: FramePair) -> KeypointHeatmap:
        gt = frame.ground_truth
        if gt is None:
            raise ProviderFailure("synthetic keypoints need a simulated frame with ground truth")
        h, w = frame.shape
        labels = gt.labels
        valid = labels >= 0
        spacing = self._spacing(labels)[valid]
        coords = gt.body_coords[valid]
        normals = gt.body_normals[valid]

        cells = np.rint(coords / spacing[:, None])
        offset = coords - cells * spacing[:, None]
        tangential = offset - np.sum(offset * normals, axis=1, keepdims=True) * normals
        metres_per_pixel = frame.depth.values[valid] / frame.intrinsics.fx
        sigma = 0.6 * np.maximum(metres_per_pixel, 1e-6)
        response_valid = 0.9 * np.exp(-np.sum(tangential**2, axis=1) / (2.0 * sigma**2))
        response_valid[response_valid < RESPONSE_FLOOR] = 0.0

        response = np.zeros((h, w), dtype=np.float32)
        response[valid] = response_valid

        flat_valid = np.flatnonzero(valid.reshape(-1))
        responding = response_valid > 0
        flat = flat_valid[responding]
        face = np.argmax(np.abs(normals[responding]), axis=1) * 2 + (
            np.take_along_axis(normals[responding], np.argmax(np.abs(normals[responding]), axis=1)[:, None], 1)[:, 0] < 0
        )
        keys = np.column_stack([labels[valid][responding], face, cells[responding].astype(np.int64)])
        unique_keys, inverse = np.unique(keys, axis=0, return_inverse=True)
        dim = self.params.descriptor_dim
        table = np.stack([site_descriptor(k[0], k[1], k[2:], dim) for k in unique_keys]) if len(unique_keys) else np.zeros((0, dim), np.float32)
        descriptors = table[inverse.reshape(-1)].astype(np.float64)

        rng = np.random.default_rng([self.seed, int(round(frame.timestamp * 1e6))])
        if self.params.descriptor_noise > 0 and len(descriptors):
            descriptors = descriptors + rng.normal(0.0, self.params.descriptor_noise, descriptors.shape)
        if self.params.outlier_rate > 0 and len(descriptors):
            corrupt = rng.random(len(descriptors)) < self.params.outlier_rate
            descriptors[corrupt] = rng.standard_normal((int(corrupt.sum()), dim))
        descriptors = _unit_rows(descriptors).astype(np.float32)
        return KeypointHeatmap(response=response, descriptors=descriptors, pixels=flat)


def write_keypoint_file(path, heatmap: KeypointHeatmap) -> None:
    """`MMKP1 W H` header line, float32 response grid, float32 descriptor grid (row-major)."""
    h, w = heatmap.shape
    descriptors = heatmap.dense_descriptors().astype("<f4")
    if descriptors.shape[-1] != KEYPOINT_FILE_DESCRIPTOR_DIM:
        raise DimensionMismatch(
            f"keypoint files carry {KEYPOINT_FILE_DESCRIPTOR_DIM}-D descriptors, got {descriptors.shape[-1]}"
        )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(KEYPOINT_FILE_MAGIC + f" {w} {h}\n".encode("ascii"))
        f.write(np.ascontiguousarray(heatmap.response, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(descriptors).tobytes())


def read_keypoint_file(path, expected_shape=None) -> KeypointHeatmap:
    path = Path(path)
    data = path.read_bytes()
    newline = data.find(b"\n", 0, 64)
    if newline < 0:
        raise MalformedFile(path, 0, "missing header line")
    fields = data[:newline].split()
    if len(fields) != 3 or fields[0] != KEYPOINT_FILE_MAGIC:
        raise MalformedFile(path, 0, f"bad header {data[:newline]!r}")
    try:
        w, h = int(fields[1]), int(fields[2])
    except ValueError:
        raise MalformedFile(path, len(fields[0]) + 1, "non-integer image size")
    if w <= 0 or h <= 0:
        raise MalformedFile(path, len(fields[0]) + 1, "non-positive image size")
    if expected_shape is not None and (h, w) != tuple(expected_shape):
        raise DimensionMismatch(f"{path}: keypoint grid {h}x{w} does not match frame {expected_shape}")
    offset = newline + 1
    response_bytes = 4 * w * h
    descriptor_bytes = response_bytes * KEYPOINT_FILE_DESCRIPTOR_DIM
    if len(data) < offset + response_bytes:
        raise MalformedFile(path, len(data), f"response grid truncated (expected {response_bytes} bytes)")
    if len(data) != offset + response_bytes + descriptor_bytes:
        raise MalformedFile(
            path, len(data),
            f"descriptor grid has {len(data) - offset - response_bytes} bytes, expected {descriptor_bytes}",
        )
    response = np.frombuffer(data, dtype="<f4", count=w * h, offset=offset).reshape(h, w).copy()
    descriptors = np.frombuffer(
        data, dtype="<f4", count=w * h * KEYPOINT_FILE_DESCRIPTOR_DIM, offset=offset + response_bytes
    ).reshape(h, w, KEYPOINT_FILE_DESCRIPTOR_DIM).copy()
    return KeypointHeatmap(response=response, descriptors=descriptors)


def keypoint_file_name(timestamp: float) -> str:
    return f"{timestamp:.6f}.mmkp"


class FileKeypointProvider:
    """Reads precomputed heatmaps from `<directory>/<timestamp>.mmkp`."""

    def __init__(self, directory):
        self.directory = Path(directory)

    def heatmap(self, frame: FramePair) -> KeypointHeatmap:
        path = self.directory / keypoint_file_name(frame.timestamp)
        if not path.is_file():
            raise ProviderFailure(f"no keypoint file for t={frame.timestamp:.6f} at {path}")
        return read_keypoint_file(path, expected_shape=frame.shape)
