import math
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator
from scipy.spatial.transform import Rotation

from ..services.geometry import CameraIntrinsics, Pose
from .params import SimNoise

Vector3 = Tuple[float, float, float]


class TrajectorySegment(BaseModel):
    """Constant twist held for `duration` seconds.

    `angular_velocity` is in world axes and rotates the body about its own
    origin. The optional start fields teleport the body when the segment begins.
    """

    duration: float = Field(..., gt=0)
    angular_velocity: Vector3 = (0.0, 0.0, 0.0)
    linear_velocity: Vector3 = (0.0, 0.0, 0.0)
    start_translation: Optional[Vector3] = None
    start_rotvec: Optional[Vector3] = None

    def is_still(self) -> bool:
        return (
            not any(self.angular_velocity)
            and not any(self.linear_velocity)
            and self.start_translation is None
            and self.start_rotvec is None
        )


class PoseScript(BaseModel):
    translation: Vector3 = (0.0, 0.0, 0.0)
    rotvec: Vector3 = (0.0, 0.0, 0.0)
    segments: List[TrajectorySegment] = Field(default_factory=list)

    def pose_at(self, t: float) -> Pose:
        rotation = Rotation.from_rotvec(self.rotvec).as_matrix()
        translation = np.array(self.translation, dtype=np.float64)
        elapsed = 0.0
        for segment in self.segments:
            if t < elapsed:
                break
            if segment.start_translation is not None:
                translation = np.array(segment.start_translation, dtype=np.float64)
            if segment.start_rotvec is not None:
                rotation = Rotation.from_rotvec(segment.start_rotvec).as_matrix()
            tau = min(t - elapsed, segment.duration)
            if any(segment.angular_velocity):
                rotation = Rotation.from_rotvec(np.array(segment.angular_velocity) * tau).as_matrix() @ rotation
            if any(segment.linear_velocity):
                translation = translation + np.array(segment.linear_velocity) * tau
            elapsed += segment.duration
        return Pose(rotation, translation)

    def is_static(self) -> bool:
        return all(segment.is_still() for segment in self.segments)


class PartSpec(BaseModel):
    """Cuboid part of a composite body, placed in the body frame."""

    size: Vector3
    translation: Vector3 = (0.0, 0.0, 0.0)
    rotvec: Vector3 = (0.0, 0.0, 0.0)

    @model_validator(mode="after")
    def _positive(self):
        if min(self.size) <= 0:
            raise ValueError("part sizes must be positive")
        return self

    def pose(self) -> Pose:
        return Pose.from_rotvec(self.rotvec, self.translation)


class BodySpec(BaseModel):
    name: str
    shape: Literal["cuboid", "plane", "composite"] = "cuboid"
    size: Vector3 = (0.1, 0.1, 0.1)
    parts: List[PartSpec] = Field(default_factory=list)
    texture_seed: int = 0
    texture_scale: float = Field(0.01, gt=0, description="Metres per texture cell")
    flat_texture: bool = False
    keypoint_spacing: Optional[float] = Field(None, gt=0)
    trajectory: PoseScript = Field(default_factory=PoseScript)
    absent: List[Tuple[float, float]] = Field(default_factory=list, description="[start, end) intervals")

    @model_validator(mode="after")
    def _check_shape(self):
        if self.shape == "composite" and not self.parts:
            raise ValueError(f"composite body '{self.name}' has no parts")
        needed = 2 if self.shape == "plane" else 3
        if self.shape != "composite" and min(self.size[:needed]) <= 0:
            raise ValueError(f"body '{self.name}' has a non-positive size")
        return self

    def present(self, t: float) -> bool:
        return not any(start <= t < end for start, end in self.absent)


class CameraSpec(BaseModel):
    fx: float = Field(525.0, gt=0)
    fy: float = Field(525.0, gt=0)
    cx: float = 319.5
    cy: float = 239.5
    width: int = Field(640, gt=0)
    height: int = Field(480, gt=0)

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy, self.width, self.height)


class SceneScript(BaseModel):
    name: str
    description: str = ""
    bodies: List[BodySpec]
    camera: CameraSpec = Field(default_factory=CameraSpec)
    camera_trajectory: PoseScript = Field(default_factory=PoseScript)
    frame_rate: float = Field(30.0, gt=0)
    duration: float = Field(..., gt=0)
    noise: SimNoise = Field(default_factory=SimNoise)

    @model_validator(mode="after")
    def _finite(self):
        if not (math.isfinite(self.frame_rate) and math.isfinite(self.duration)):
            raise ValueError("frame rate and duration must be finite")
        return self

    @staticmethod
    def body_id(index: int) -> int:
        return index + 1

    def timestamps(self) -> List[float]:
        count = int(math.floor(self.duration * self.frame_rate + 1e-9)) + 1
        return [round(i / self.frame_rate, 6) for i in range(count)]

    @property
    def frame_count(self) -> int:
        return len(self.timestamps())

    def previous_timestamp(self, t: float) -> float:
        return round(t - 1.0 / self.frame_rate, 6)

    def camera_pose(self, t: float) -> Pose:
        """Camera to world."""
        return self.camera_trajectory.pose_at(t)

    def body_pose(self, body_id: int, t: float) -> Pose:
        """Body to world."""
        return self.bodies[body_id - 1].trajectory.pose_at(t)

    def static_ids(self) -> frozenset:
        return frozenset(self.body_id(i) for i, body in enumerate(self.bodies) if body.trajectory.is_static())

    def keypoint_spacing(self) -> Dict[int, float]:
        return {
            self.body_id(i): body.keypoint_spacing
            for i, body in enumerate(self.bodies)
            if body.keypoint_spacing is not None
        }


class ScenarioSummary(BaseModel):
    name: str
    description: str
    frame_count: int
    duration: float
    frame_rate: float
    body_count: int
    moving_bodies: List[str]

    @classmethod
    def of(cls, script: SceneScript) -> "ScenarioSummary":
        static = script.static_ids()
        return cls(
            name=script.name,
            description=script.description,
            frame_count=script.frame_count,
            duration=script.duration,
            frame_rate=script.frame_rate,
            body_count=len(script.bodies),
            moving_bodies=[b.name for i, b in enumerate(script.bodies) if script.body_id(i) not in static],
        )
