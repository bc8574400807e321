"""On-disk formats: datasets, TUM trajectories, ASCII PLY clouds, keypoint histories."""
from __future__ import annotations

import logging
import struct
from pathlib import Path
from typing import Iterator, List, Optional, Tuple

import cv2
import numpy as np

from ..core.errors import DimensionMismatch, InputNotFound, MalformedFile
from .evaluation import Trajectory
from .frame_frontend import FramePair
from .geometry import CameraIntrinsics, DepthImage, Pose
from .world_model import NO_LABEL, KeypointSet, PointCloud, SegmentationMap

logger = logging.getLogger(__name__)

DEPTH_SCALE = 10000.0
NO_LABEL_PIXEL = 255
INTRINSICS_FILE = "intrinsics.txt"
ASSOCIATIONS_FILE = "associations.txt"
KEYPOINT_DIR = "keypoints"
_HISTORY_HEADER = struct.Struct("<dI")


def _require(path: Path, what: str) -> Path:
    if not path.is_file():
        raise InputNotFound(path, what)
    return path


# --- intrinsics ---

def write_intrinsics(path, K: CameraIntrinsics) -> None:
    Path(path).write_text(f"{K.fx!r} {K.fy!r} {K.cx!r} {K.cy!r} {K.width} {K.height}\n")


def read_intrinsics(path) -> CameraIntrinsics:
    path = _require(Path(path), "intrinsics file")
    text = path.read_text()
    fields = text.split()
    if len(fields) != 6:
        raise MalformedFile(path, 0, f"expected 'fx fy cx cy width height', got {len(fields)} fields")
    try:
        fx, fy, cx, cy = (float(v) for v in fields[:4])
        width, height = int(fields[4]), int(fields[5])
        return CameraIntrinsics(fx, fy, cx, cy, width, height)
    except ValueError as e:
        raise MalformedFile(path, 0, str(e)) from e


# --- TUM trajectories ---

def format_tum_line(timestamp: float, pose: Pose) -> str:
    t = pose.translation
    q = pose.quaternion()
    return f"{timestamp:.6f} {t[0]:.9f} {t[1]:.9f} {t[2]:.9f} {q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}"


def write_tum(path, trajectory: Trajectory) -> None:
    lines = [format_tum_line(t, p) for t, p in zip(trajectory.timestamps, trajectory.poses)]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("".join(line + "\n" for line in lines))


def parse_tum(text: str, source="<text>") -> Trajectory:
    samples: List[Tuple[float, Pose]] = []
    offset = 0
    for line in text.splitlines(keepends=True):
        stripped = line.strip()
        if stripped and not stripped.startswith("#"):
            fields = stripped.split()
            if len(fields) != 8:
                raise MalformedFile(source, offset, f"TUM line has {len(fields)} fields, expected 8")
            try:
                values = [float(v) for v in fields]
                pose = Pose.from_quaternion(values[1:4], values[4:8])
            except ValueError as e:
                raise MalformedFile(source, offset, str(e)) from e
            samples.append((values[0], pose))
        offset += len(line.encode("utf-8"))
    try:
        return Trajectory.from_samples(samples)
    except ValueError as e:
        raise MalformedFile(source, offset, str(e)) from e


def read_tum(path) -> Trajectory:
    path = _require(Path(path), "trajectory file")
    return parse_tum(path.read_text(), path)


# --- PLY ---

def write_ply(path, cloud: PointCloud) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = (
        "ply\nformat ascii 1.0\n"
        f"element vertex {len(cloud)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property float nx\nproperty float ny\nproperty float nz\n"
        "property float intensity\nend_header\n"
    )
    normals = np.nan_to_num(cloud.normals, nan=0.0)
    table = np.column_stack([cloud.positions, normals, cloud.intensity])
    with open(path, "w") as f:
        f.write(header)
        np.savetxt(f, table, fmt="%.6f")


def parse_ply(text: str, source="<text>") -> PointCloud:
    lines = text.splitlines(keepends=True)
    offset = 0
    count = None
    properties: List[str] = []
    body_start = None
    if not lines or lines[0].strip() != "ply":
        raise MalformedFile(source, 0, "missing 'ply' magic")
    for index, line in enumerate(lines):
        stripped = line.strip()
        if stripped.startswith("format") and stripped != "format ascii 1.0":
            raise MalformedFile(source, offset, f"unsupported format '{stripped}'")
        if stripped.startswith("element vertex"):
            count = int(stripped.split()[-1])
        elif stripped.startswith("property"):
            properties.append(stripped.split()[-1])
        elif stripped == "end_header":
            body_start = index + 1
            offset += len(line.encode("utf-8"))
            break
        offset += len(line.encode("utf-8"))
    if body_start is None or count is None:
        raise MalformedFile(source, offset, "incomplete header")
    for name in ("x", "y", "z"):
        if name not in properties:
            raise MalformedFile(source, 0, f"vertex property '{name}' missing")
    rows = []
    for line in lines[body_start:body_start + count]:
        fields = line.split()
        if len(fields) != len(properties):
            raise MalformedFile(source, offset, f"vertex row has {len(fields)} values, expected {len(properties)}")
        try:
            rows.append([float(v) for v in fields])
        except ValueError as e:
            raise MalformedFile(source, offset, str(e)) from e
        offset += len(line.encode("utf-8"))
    if len(rows) != count:
        raise MalformedFile(source, offset, f"expected {count} vertices, found {len(rows)}")
    table = np.array(rows, dtype=np.float64).reshape(count, len(properties))
    column = {name: table[:, i] for i, name in enumerate(properties)}
    positions = np.column_stack([column["x"], column["y"], column["z"]])
    if all(name in column for name in ("nx", "ny", "nz")):
        normals = np.column_stack([column["nx"], column["ny"], column["nz"]])
        normals[np.linalg.norm(normals, axis=1) == 0] = np.nan
    else:
        normals = np.full((count, 3), np.nan)
    intensity = column.get("intensity", np.zeros(count))
    return PointCloud(positions, normals, intensity, "ply")


def read_ply(path) -> PointCloud:
    path = _require(Path(path), "PLY file")
    return parse_ply(path.read_text(), path)


# --- keypoint histories ---

def write_keypoint_history(path, history: List[KeypointSet]) -> None:
    """Per entry: timestamp (f64), n (u32), then n rows of 3 + D float32 values."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        for entry in history:
            f.write(_HISTORY_HEADER.pack(entry.timestamp, len(entry)))
            rows = np.hstack([entry.positions.astype("<f4"), entry.descriptors.astype("<f4")])
            f.write(np.ascontiguousarray(rows, dtype="<f4").tobytes())


def read_keypoint_history(path, descriptor_dim: int = 256, frame_id: str = "model") -> List[KeypointSet]:
    path = _require(Path(path), "keypoint history")
    data = path.read_bytes()
    history = []
    offset = 0
    row = 4 * (3 + descriptor_dim)
    while offset < len(data):
        if offset + _HISTORY_HEADER.size > len(data):
            raise MalformedFile(path, offset, "truncated entry header")
        timestamp, n = _HISTORY_HEADER.unpack_from(data, offset)
        offset += _HISTORY_HEADER.size
        if offset + n * row > len(data):
            raise MalformedFile(path, offset, f"entry at t={timestamp} truncated")
        rows = np.frombuffer(data, dtype="<f4", count=n * (3 + descriptor_dim), offset=offset).reshape(n, -1)
        offset += n * row
        history.append(KeypointSet(rows[:, :3], rows[:, 3:], np.zeros((n, 2)), timestamp, frame_id))
    return history


# --- segmentation images ---

def segmentation_image(seg: SegmentationMap) -> np.ndarray:
    labels = seg.labels
    image = np.where(labels == NO_LABEL, NO_LABEL_PIXEL, np.clip(labels, 0, NO_LABEL_PIXEL - 1))
    return image.astype(np.uint8)


def write_segmentation(path, seg: SegmentationMap) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    cv2.imwrite(str(path), segmentation_image(seg))


def read_segmentation(path) -> SegmentationMap:
    path = _require(Path(path), "segmentation image")
    image = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    labels = image.astype(np.int32)
    labels[image == NO_LABEL_PIXEL] = NO_LABEL
    return SegmentationMap(labels)


# --- datasets ---

def frame_file_name(timestamp: float) -> str:
    return f"{timestamp:.6f}.png"


def write_frame(dataset_dir, frame: FramePair) -> None:
    root = Path(dataset_dir)
    (root / "rgb").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    name = frame_file_name(frame.timestamp)
    intensity = np.clip(np.rint(frame.intensity * 255.0), 0, 255).astype(np.uint8)
    depth = np.clip(np.rint(frame.depth.values * DEPTH_SCALE), 0, np.iinfo(np.uint16).max).astype(np.uint16)
    cv2.imwrite(str(root / "rgb" / name), intensity)
    cv2.imwrite(str(root / "depth" / name), depth)
    with open(root / ASSOCIATIONS_FILE, "a") as f:
        f.write(f"{frame.timestamp:.6f} rgb/{name} {frame.timestamp:.6f} depth/{name}\n")


def _read_image(path: Path, flags: int) -> np.ndarray:
    _require(path, "image")
    image = cv2.imread(str(path), flags)
    if image is None:
        raise MalformedFile(path, 0, "not a readable image")
    return image


def read_dataset(dataset_dir) -> Iterator[FramePair]:
    """Frames listed in `associations.txt`, in file order."""
    root = Path(dataset_dir)
    if not root.is_dir():
        raise InputNotFound(root, "dataset directory")
    K = read_intrinsics(root / INTRINSICS_FILE)
    associations = _require(root / ASSOCIATIONS_FILE, "associations file")
    offset = 0
    entries = []
    for line in associations.read_text().splitlines(keepends=True):
        fields = line.split()
        if fields and not fields[0].startswith("#"):
            if len(fields) != 4:
                raise MalformedFile(associations, offset, "expected 't_rgb rgb_path t_depth depth_path'")
            entries.append((float(fields[0]), fields[1], fields[3]))
        offset += len(line.encode("utf-8"))
    logger.info(f"Dataset {root}: {len(entries)} frames")
    return _iter_frames(root, K, entries)


def _iter_frames(root: Path, K: CameraIntrinsics, entries) -> Iterator[FramePair]:
    for timestamp, rgb_name, depth_name in entries:
        rgb = _read_image(root / rgb_name, cv2.IMREAD_UNCHANGED)
        if rgb.ndim == 3:
            rgb = cv2.cvtColor(rgb, cv2.COLOR_BGR2GRAY)
        intensity = rgb.astype(np.float64) / 255.0
        raw_depth = _read_image(root / depth_name, cv2.IMREAD_UNCHANGED)
        if raw_depth.dtype != np.uint16:
            raise MalformedFile(root / depth_name, 0, f"depth must be 16-bit, got {raw_depth.dtype}")
        depth = raw_depth.astype(np.float64) / DEPTH_SCALE
        if intensity.shape != K.shape or depth.shape != K.shape:
            raise DimensionMismatch(f"frame {timestamp:.6f} does not match intrinsics size {K.shape}")
        yield FramePair(intensity, DepthImage(depth, timestamp), timestamp, K)


def dataset_keypoint_dir(dataset_dir) -> Optional[Path]:
    path = Path(dataset_dir) / KEYPOINT_DIR
    return path if path.is_dir() else None
