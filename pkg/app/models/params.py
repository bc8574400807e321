import math
from typing import Literal, Optional

from pydantic import BaseModel, Field, model_validator


class RansacParams(BaseModel):
    iterations: int = Field(256, ge=1, description="Number of minimal-sample hypotheses")
    sample_size: int = Field(3, ge=3, description="Correspondences per minimal sample")
    inlier_threshold_m: float = Field(0.01, gt=0, description="3D inlier distance (m)")
    min_inliers: Optional[int] = Field(
        None, ge=3, description="Fixed inlier floor; None means max(5, 10% of correspondences)"
    )
    seed: Optional[int] = Field(None, description="RNG seed; None falls back to the run seed")

    def required_inliers(self, n_correspondences: int) -> int:
        if self.min_inliers is not None:
            return self.min_inliers
        return max(5, int(math.ceil(0.1 * n_correspondences)))


class IcpParams(BaseModel):
    max_iterations: int = Field(20, ge=1)
    convergence_eps: float = Field(1e-6, gt=0, description="Twist norm below which ICP stops")
    max_correspondence_dist: float = Field(0.10, gt=0, description="Association gate (m)")
    max_normal_angle: float = Field(math.radians(60.0), gt=0, le=math.pi)
    robust: bool = Field(True, description="Huber weighting of the point-to-plane residual")
    huber_delta: float = Field(0.03, gt=0, description="Huber threshold (m)")
    pyramid_levels: int = Field(3, ge=1, description="Levels used for large clouds")
    pyramid_min_points: int = Field(10_000, ge=1, description="Clouds below this use one level")


class CrfParams(BaseModel):
    spatial_sigma: float = Field(20.0, gt=0, description="Pixels")
    flow_sigma: float = Field(3.0, gt=0, description="Pixels")
    pairwise_weight: float = Field(10.0, ge=0)
    mean_field_iterations: int = Field(5, ge=1)
    outlier_unary: float = Field(50.0, gt=0, description="Constant cost of the new-motion label (px^2/s)")
    min_segment_px: int = Field(300, ge=1)
    static_flow_threshold: float = Field(1.0, gt=0, description="Pixels per frame")
    keypoint_radius_px: float = Field(80.0, gt=0, description="Nearest-keypoint cap for densification")
    dense_residual_scale_m: float = Field(0.01, gt=0)
    downsample: int = Field(4, ge=1, description="Inference grid stride; sigmas are in full-resolution pixels")


class RedetectionParams(BaseModel):
    error_threshold: float = Field(0.01, gt=0, description="Mean inlier residual bound (m)")
    min_matches: int = Field(8, ge=3)
    trial_budget: int = Field(32, ge=1, description="(segment, history entry) trials per frame")
    candidate_age_frames: int = Field(10, ge=1, description="Objects younger than this are checked against the lost set")


class FrontendParams(BaseModel):
    keypoint_provider: Literal["auto", "synthetic", "file"] = Field(
        "auto", description="auto: synthetic for simulator input, file for datasets"
    )
    flow_provider: Literal["block_matching", "ground_truth"] = "block_matching"
    response_threshold: float = Field(0.015, ge=0)
    descriptor_dim: int = Field(256, ge=8)
    descriptor_noise: float = Field(0.0, ge=0)
    outlier_rate: float = Field(0.0, ge=0, le=1)
    keypoint_spacing_m: float = Field(0.02, gt=0, description="Synthetic keypoint lattice pitch")
    block_size: int = Field(8, ge=2)
    search_radius: int = Field(8, ge=1)
    flow_levels: int = Field(3, ge=1)


class ModelParams(BaseModel):
    voxel_size_m: float = Field(0.005, gt=0)
    max_cloud_points: int = Field(2_000_000, ge=1)
    history_window: int = Field(5, ge=1, description="History entries searched while tracking")
    carve_free_space: bool = True
    carve_margin_m: float = Field(0.03, gt=0)
    grasp_after_frames: int = Field(5, ge=1, description="Registered frames before a grasp box is attached")


class SimNoise(BaseModel):
    depth_sigma: float = Field(0.0, ge=0, description="Gaussian depth noise (m)")
    descriptor_sigma: float = Field(0.0, ge=0)
    keypoint_outlier_rate: float = Field(0.0, ge=0, le=1)

    @model_validator(mode="after")
    def _finite(self):
        for value in (self.depth_sigma, self.descriptor_sigma, self.keypoint_outlier_rate):
            if not math.isfinite(value):
                raise ValueError("noise parameters must be finite")
        return self
