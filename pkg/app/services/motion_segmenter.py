"""Dense motion segmentation with a fully connected CRF over position and flow.

Labels are the tracked models plus one "new motion" label whose unary is the
constant `outlier_unary`. Inference runs mean-field updates on a grid
subsampled by `crf.downsample`; the final labels come from one full-resolution
update using the converged messages.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from ..core.errors import DimensionMismatch
from ..models.params import CrfParams
from .geometry import CameraIntrinsics, Pose, project_points
from .optical_flow import FlowField
from .world_model import ENVIRONMENT_ID, NO_LABEL, SceneSet, SegmentationMap

logger = logging.getLogger(__name__)

OUTLIER_LABEL = -2
KEYPOINT_COST_CAP = 1e4
MAX_TAPS_PER_AXIS = 15


@dataclass(eq=False)
class KeypointCosts:
    """Drift cost of every tracked keypoint under every model, (N, M) in px^2/s."""

    pixels: np.ndarray
    costs: np.ndarray
    label_ids: List[int]

    def __len__(self) -> int:
        return len(self.pixels)


@dataclass(eq=False)
class UnaryField:
    costs: np.ndarray
    label_ids: List[int]
    valid: np.ndarray

    @property
    def shape(self):
        return self.costs.shape[:2]


@dataclass(eq=False)
class MeanFieldResult:
    labels: np.ndarray
    marginals: np.ndarray
    label_ids: List[int]
    free_energy: List[float] = field(default_factory=list)
    marginal_history: List[np.ndarray] = field(default_factory=list)

    def label_map(self) -> np.ndarray:
        """Labels as object ids; the new-motion label stays OUTLIER_LABEL."""
        return np.asarray(self.label_ids, dtype=np.int32)[self.labels]


@dataclass(eq=False)
class SegmentResolution:
    segmentation: SegmentationMap
    spawn_masks: List[np.ndarray]
    lost_ids: List[int]


def keypoint_drift_unary(
    prev_pixels: np.ndarray,
    curr_points: np.ndarray,
    curr_pixels: np.ndarray,
    motions: Dict[int, Pose],
    K: CameraIntrinsics,
    dt: float,
) -> KeypointCosts:
    """Reprojection drift of frame-to-frame keypoint tracks.

    `motions[m]` moves points rigidly attached to model m from the previous
    camera frame into the current one; the cost is the squared distance between
    the observed previous pixel and the current point carried back by it,
    divided by `dt`.
    """
    if not dt > 0:
        raise ValueError(f"time step must be positive, got {dt}")
    prev_pixels = np.asarray(prev_pixels, dtype=np.float64).reshape(-1, 2)
    curr_points = np.asarray(curr_points, dtype=np.float64).reshape(-1, 3)
    label_ids = list(motions)
    costs = np.empty((len(prev_pixels), len(label_ids)))
    for column, label in enumerate(label_ids):
        predicted, z = project_points(motions[label].inverse().apply(curr_points), K)
        with np.errstate(invalid="ignore"):
            drift = np.sum((prev_pixels - predicted) ** 2, axis=1) / dt
            drift = np.where(z > 0, drift, KEYPOINT_COST_CAP)
        costs[:, column] = np.minimum(np.nan_to_num(drift, nan=KEYPOINT_COST_CAP), KEYPOINT_COST_CAP)
    return KeypointCosts(np.asarray(curr_pixels, dtype=np.float64).reshape(-1, 2), costs, label_ids)


def dense_residual_cost(residual: np.ndarray, params: CrfParams) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        cost = (residual / params.dense_residual_scale_m) ** 2
    cost = np.minimum(cost, params.outlier_unary)
    return np.where(np.isfinite(cost), cost, params.outlier_unary)


def densify_unary(
    keypoint_costs: KeypointCosts,
    flow: FlowField,
    dense_residuals: Dict[int, np.ndarray],
    params: Optional[CrfParams] = None,
    valid: Optional[np.ndarray] = None,
) -> UnaryField:
    """Per-pixel unary: w * nearest-keypoint drift + (1 - w) * dense residual cost.

    w = min(1, |d|^2 / static_flow_threshold^2) from the flow at the pixel and
    is 0 where flow is invalid or no keypoint lies within `keypoint_radius_px`.
    """
    params = params or CrfParams()
    h, w = flow.shape
    label_ids = list(keypoint_costs.label_ids)
    if set(dense_residuals) != set(label_ids):
        raise ValueError("keypoint costs and dense residuals cover different models")
    for label, grid in dense_residuals.items():
        if grid.shape != (h, w):
            raise DimensionMismatch(f"residual grid of model {label} is {grid.shape}, flow is {(h, w)}")
    if valid is None:
        valid = np.ones((h, w), dtype=bool)
    elif valid.shape != (h, w):
        raise DimensionMismatch(f"validity mask {valid.shape} does not match flow {(h, w)}")

    magnitude2 = np.sum(flow.displacement**2, axis=-1)
    weight = np.where(flow.validity, np.minimum(1.0, magnitude2 / params.static_flow_threshold**2), 0.0)

    n_models = len(label_ids)
    keypoint_term = np.zeros((h, w, n_models))
    need = (weight > 0) & valid
    if len(keypoint_costs) and n_models and need.any():
        rows, cols = np.nonzero(need)
        tree = cKDTree(keypoint_costs.pixels)
        _, nearest = tree.query(np.column_stack([cols, rows]), k=1, distance_upper_bound=params.keypoint_radius_px)
        found = nearest < len(keypoint_costs)
        keypoint_term[rows[found], cols[found]] = keypoint_costs.costs[nearest[found]]
        no_keypoint = np.zeros((h, w), dtype=bool)
        no_keypoint[rows[~found], cols[~found]] = True
        weight = np.where(no_keypoint, 0.0, weight)
    else:
        weight = np.zeros_like(weight)

    costs = np.empty((h, w, n_models + 1))
    for column, label in enumerate(label_ids):
        dense = dense_residual_cost(dense_residuals[label], params)
        costs[..., column] = weight * keypoint_term[..., column] + (1.0 - weight) * dense
    costs[..., n_models] = params.outlier_unary
    costs[~valid] = 0.0
    return UnaryField(costs, label_ids + [OUTLIER_LABEL], valid)


class PairwiseKernel:
    """Truncated Gaussian over (pixel, flow) features on a subsampled grid.

    Weights are normalised by the spatial Gaussian's area and scaled by the
    number of full-resolution pixels each tap stands for, so the total
    neighbourhood weight is close to one regardless of the grid stride.
    """

    def __init__(self, displacement: np.ndarray, params: CrfParams, stride: int = 1):
        h, w = displacement.shape[:2]
        self.shape = (h, w)
        sigma_s, sigma_f = params.spatial_sigma, params.flow_sigma
        radius = max(1, int(math.ceil(3.0 * sigma_s / stride)))
        step = max(1, int(math.ceil((2 * radius + 1) / MAX_TAPS_PER_AXIS)))
        taps = range(-(radius // step) * step, radius + 1, step)
        area = (stride * step) ** 2 / (2.0 * math.pi * sigma_s**2)
        self.offsets = []
        self.weights = []
        for dy in taps:
            for dx in taps:
                if (dx == 0 and dy == 0) or dx * dx + dy * dy > radius * radius:
                    continue
                dist2 = (dx * dx + dy * dy) * stride * stride
                weight = np.zeros((h, w))
                ys, yd = self._span(dy, h)
                xs, xd = self._span(dx, w)
                diff = displacement[yd, xd] - displacement[ys, xs]
                weight[ys, xs] = area * np.exp(
                    -dist2 / (2.0 * sigma_s**2) - np.sum(diff**2, axis=-1) / (2.0 * sigma_f**2)
                )
                self.offsets.append((dy, dx))
                self.weights.append(weight)
        self.total = np.sum(self.weights, axis=0) if self.weights else np.zeros((h, w))

    @staticmethod
    def _span(offset: int, size: int):
        """(target slice, source slice) pairing pixel i with neighbour i + offset."""
        if offset >= 0:
            return slice(0, size - offset), slice(offset, size)
        return slice(-offset, size), slice(0, size + offset)

    def message(self, Q: np.ndarray) -> np.ndarray:
        """m_il = sum_j k_ij Q_jl."""
        h, w = self.shape
        m = np.zeros_like(Q)
        for (dy, dx), weight in zip(self.offsets, self.weights):
            ys, yd = self._span(dy, h)
            xs, xd = self._span(dx, w)
            m[ys, xs] += weight[ys, xs, None] * Q[yd, xd]
        return m

    def dense_matrix(self) -> np.ndarray:
        """Explicit (N, N) kernel for small grids."""
        h, w = self.shape
        n = h * w
        k = np.zeros((n, n))
        for (dy, dx), weight in zip(self.offsets, self.weights):
            for r in range(h):
                for c in range(w):
                    rr, cc = r + dy, c + dx
                    if 0 <= rr < h and 0 <= cc < w:
                        k[r * w + c, rr * w + cc] = weight[r, c]
        return k


def _softmax_neg(energy: np.ndarray) -> np.ndarray:
    shifted = energy - energy.min(axis=-1, keepdims=True)
    q = np.exp(-shifted)
    return q / q.sum(axis=-1, keepdims=True)


def free_energy(Q: np.ndarray, unary: np.ndarray, kernel_total: np.ndarray, message: np.ndarray, weight: float) -> float:
    """Expected CRF energy under Q minus its entropy."""
    with np.errstate(divide="ignore", invalid="ignore"):
        entropy_term = np.where(Q > 0, Q * np.log(Q), 0.0).sum()
    pairwise = 0.5 * weight * np.sum(Q * (kernel_total[..., None] - message))
    return float(np.sum(Q * unary) + pairwise + entropy_term)


def crf_energy(labels: np.ndarray, unary: np.ndarray, kernel_matrix: np.ndarray, weight: float) -> float:
    """Energy of one labelling: unary plus Potts pairwise over all pixel pairs."""
    flat_labels = labels.reshape(-1)
    flat_unary = unary.reshape(len(flat_labels), -1)
    data = flat_unary[np.arange(len(flat_labels)), flat_labels].sum()
    disagree = flat_labels[:, None] != flat_labels[None, :]
    return float(data + 0.5 * weight * np.sum(kernel_matrix * disagree))


def _mean_field(unary: np.ndarray, kernel: PairwiseKernel, params: CrfParams, record: bool):
    weight = params.pairwise_weight
    Q = _softmax_neg(unary)
    m = kernel.message(Q)
    energy = free_energy(Q, unary, kernel.total, m, weight)
    energies = [energy]
    history = [Q.copy()] if record else []
    for _ in range(params.mean_field_iterations):
        Q_new = _softmax_neg(unary - weight * m)
        m_new = kernel.message(Q_new)
        step = 1.0
        for _ in range(12):
            Q_try = Q + step * (Q_new - Q)
            m_try = m + step * (m_new - m)
            energy_try = free_energy(Q_try, unary, kernel.total, m_try, weight)
            if energy_try <= energy + 1e-12 * max(1.0, abs(energy)):
                Q, m, energy = Q_try, m_try, energy_try
                break
            step *= 0.5
        energies.append(energy)
        if record:
            history.append(Q.copy())
    return Q, m, energies, history


def mean_field_infer(
    unary: UnaryField,
    flow: FlowField,
    params: Optional[CrfParams] = None,
    record: bool = False,
) -> MeanFieldResult:
    params = params or CrfParams()
    if unary.shape != flow.shape:
        raise DimensionMismatch(f"unary grid {unary.shape} does not match flow {flow.shape}")
    costs = unary.costs
    if not np.all(np.isfinite(costs)):
        raise ValueError("unary costs must be finite")
    h, w = unary.shape

    if params.pairwise_weight == 0:
        marginals = _softmax_neg(costs)
        return MeanFieldResult(np.argmin(costs, axis=-1), marginals, list(unary.label_ids), [],
                               [marginals] if record else [])

    stride = params.downsample
    displacement = np.where(flow.validity[..., None], flow.displacement, 0.0)
    kernel = PairwiseKernel(displacement[::stride, ::stride], params, stride)
    Q, m, energies, history = _mean_field(costs[::stride, ::stride], kernel, params, record)

    if stride > 1:
        m = np.repeat(np.repeat(m, stride, axis=0), stride, axis=1)[:h, :w]
    marginals = _softmax_neg(costs - params.pairwise_weight * m)
    labels = np.argmax(marginals, axis=-1)
    logger.debug(f"Mean field: free energy {energies[0]:.2f} -> {energies[-1]:.2f}")
    return MeanFieldResult(labels, marginals, list(unary.label_ids), energies, history)


def resolve_segments(
    labels: np.ndarray,
    scene: SceneSet,
    params: Optional[CrfParams] = None,
    valid: Optional[np.ndarray] = None,
    failed_ids: Optional[Set[int]] = None,
) -> SegmentResolution:
    """Turns an id label map (new motion = OUTLIER_LABEL) into scene actions.

    Outlier regions of at least `min_segment_px` become spawn requests and
    smaller ones are left unlabelled. Tracked objects with a failed estimate
    or a segment below `min_segment_px` are reported lost; the environment
    never is.
    """
    params = params or CrfParams()
    failed_ids = set(failed_ids or ())
    labels = np.array(labels, dtype=np.int32, copy=True)
    if valid is not None:
        labels[~valid] = NO_LABEL

    outlier = labels == OUTLIER_LABEL
    labels[outlier] = NO_LABEL
    spawn_masks: List[np.ndarray] = []
    if outlier.any():
        components, count = ndimage.label(outlier, structure=np.ones((3, 3), dtype=bool))
        sizes = np.bincount(components.reshape(-1), minlength=count + 1)
        for component in np.flatnonzero(sizes >= params.min_segment_px):
            if component == 0:
                continue
            spawn_masks.append(components == component)

    lost_ids: List[int] = []
    for object_id in sorted(scene.tracked):
        if object_id == ENVIRONMENT_ID:
            continue
        if object_id in failed_ids or np.count_nonzero(labels == object_id) < params.min_segment_px:
            lost_ids.append(object_id)
            labels[labels == object_id] = NO_LABEL
    unknown = ~np.isin(labels, list(scene.tracked) + [NO_LABEL])
    labels[unknown] = NO_LABEL
    return SegmentResolution(SegmentationMap(labels), spawn_masks, lost_ids)