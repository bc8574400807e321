"""Per-frame orchestration: estimation, segmentation, modelling and redetection."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from ..core.config import PipelineConfig
from ..core.errors import (
    ConfigError,
    DegenerateCloud,
    DegenerateConfiguration,
    EmptySegment,
    InsufficientInliers,
    NoAssociations,
)
from ..models.report import MetricRow, ObjectReport, RunSummary
from ..models.scene import SceneScript
from . import formats, sim
from .dense_estimator import IcpResult, compose_final, icp_refine, residual_grid
from .evaluation import Trajectory, ate_errors, reconstruction_error, rpe_rmse, subsample
from .frame_frontend import (
    FileKeypointProvider,
    FramePair,
    KeypointProvider,
    SyntheticKeypointProvider,
    extract_keypoints,
)
from .geometry import Pose
from .model_manager import GRASP_FRAME, RedetectionCursor, attach_grasp_frame, redetect, replace_duplicate
from .motion_segmenter import densify_unary, keypoint_drift_unary, mean_field_infer, resolve_segments
from .optical_flow import BlockMatchingFlow, FlowProvider, GroundTruthFlow, compute_flow
from .sparse_estimator import match_keypoints, ransac_estimate
from .world_model import (
    ENVIRONMENT_ID,
    KeypointSet,
    PointCloud,
    SceneSet,
    SegmentationMap,
    initial_segmentation,
    initialize_scene,
    keypoints_in_mask,
    register_frame_data,
    spawn_object,
)

logger = logging.getLogger(__name__)

PHASES = ("ESTIMATION", "SEGMENTATION", "MODELLING", "REDETECTION")
SEGMENT_CENTRE = "segment_centre"
_ESTIMATION_ERRORS = (InsufficientInliers, DegenerateConfiguration, NoAssociations)


class EventLog:
    """Line-oriented `timestamp PHASE detail` record of a run."""

    def __init__(self):
        self.lines: List[str] = []

    def add(self, timestamp: float, phase: str, detail: str) -> None:
        line = f"{timestamp:.6f} {phase} {detail}"
        self.lines.append(line)
        logger.debug(line)

    def write(self, path) -> None:
        Path(path).write_text("".join(line + "\n" for line in self.lines))


@dataclass(eq=False)
class FrameOutput:
    timestamp: float
    segmentation: Optional[SegmentationMap]
    dropped: bool = False
    spawned: List[Tuple[int, np.ndarray]] = field(default_factory=list)
    lost: List[int] = field(default_factory=list)
    redetected: List[Tuple[int, int]] = field(default_factory=list)


@dataclass(eq=False)
class _Estimate:
    pose: Pose
    icp: Optional[IcpResult] = None
    inliers: int = 0


class Tracker:
    """Holds the scene across frames; `process_frame` advances it by one frame."""

    def __init__(self, config: PipelineConfig, keypoints: KeypointProvider, flow: FlowProvider):
        self.config = config
        self.keypoint_provider = keypoints
        self.flow_provider = flow
        self.scene: Optional[SceneSet] = None
        self.segmentation: Optional[SegmentationMap] = None
        self.events = EventLog()
        self.cursor = RedetectionCursor()
        self.frame_index = 0
        self.dropped_frames = 0
        self.spawn_frame: Dict[int, int] = {}
        self.redetections: Dict[int, int] = {}
        self._prev_frame: Optional[FramePair] = None
        self._prev_keypoints: Optional[KeypointSet] = None

    def _rng(self, *keys: int) -> np.random.Generator:
        return np.random.default_rng([self.config.ransac_seed(), self.frame_index, *keys])

    def process_frame(self, frame: FramePair) -> FrameOutput:
        keypoints = extract_keypoints(frame, self.keypoint_provider, self.config.frontend.response_threshold)
        if self.scene is None:
            return self._initialize(frame, keypoints)
        output = self._track(frame, keypoints)
        self.frame_index += 1
        return output

    def _initialize(self, frame: FramePair, keypoints: KeypointSet) -> FrameOutput:
        self.scene = initialize_scene(frame, keypoints, self.config.modelling)
        self.segmentation = initial_segmentation(frame)
        self.events.add(frame.timestamp, "INIT", f"environment points={len(self.scene.tracked[ENVIRONMENT_ID].cloud)}")
        self._prev_frame, self._prev_keypoints = frame, keypoints
        self.frame_index = 1
        return FrameOutput(frame.timestamp, self.segmentation)

    # --- estimation ---

    def _estimate(self, object_id: int, frame: FramePair, keypoints: KeypointSet) -> _Estimate:
        obj = self.scene.tracked[object_id]
        mode = self.config.estimation_mode
        inliers = 0
        if mode == "dense":
            T_init = obj.pose
        else:
            try:
                model = obj.recent_keypoints(self.config.modelling.history_window)
                if model is None:
                    raise InsufficientInliers(f"object {object_id} has no keypoint history")
                sparse = ransac_estimate(match_keypoints(model, keypoints), self.config.ransac, self._rng(object_id))
                T_init, inliers = sparse.transform, sparse.inlier_count
            except _ESTIMATION_ERRORS:
                if object_id != ENVIRONMENT_ID:
                    raise
                self.events.add(frame.timestamp, "ESTIMATION", "object=0 sparse failed, icp from previous pose")
                T_init = obj.pose
                mode = "sparse+dense"
            if mode == "sparse":
                return _Estimate(T_init, None, inliers)
        try:
            icp = icp_refine(obj.cloud, T_init, frame, self.config.icp)
        except NoAssociations:
            if inliers == 0:
                raise
            return _Estimate(T_init, None, inliers)
        return _Estimate(compose_final(T_init, icp.transform), icp, inliers)

    # --- per frame ---

    def _track(self, frame: FramePair, keypoints: KeypointSet) -> FrameOutput:
        scene, t = self.scene, frame.timestamp
        previous_poses = {object_id: obj.pose for object_id, obj in scene.tracked.items()}

        estimates: Dict[int, _Estimate] = {}
        failed = set()
        for object_id in sorted(scene.tracked):
            try:
                estimate = self._estimate(object_id, frame, keypoints)
            except _ESTIMATION_ERRORS as e:
                if object_id == ENVIRONMENT_ID:
                    self.events.add(t, "ESTIMATION", f"object=0 failed ({e}); frame dropped")
                    logger.warning(f"Dropping frame t={t:.6f}: environment estimate failed: {e}")
                    self.dropped_frames += 1
                    return FrameOutput(t, None, dropped=True)
                failed.add(object_id)
                self.events.add(t, "ESTIMATION", f"object={object_id} failed ({e})")
                continue
            estimates[object_id] = estimate
            rms = estimate.icp.final_residual_rms if estimate.icp is not None else float("nan")
            self.events.add(t, "ESTIMATION", f"object={object_id} inliers={estimate.inliers} icp_rms={rms:.6f}")

        seg = self._segment(frame, keypoints, estimates, previous_poses, failed)
        output = FrameOutput(t, None, lost=list(seg.lost_ids))
        segmentation = self._model(frame, keypoints, estimates, seg, output)
        self._redetect(frame, keypoints, segmentation, output)

        scene.check_invariants()
        segmentation.check_against(scene)
        self.segmentation = segmentation
        output.segmentation = segmentation
        self._prev_frame, self._prev_keypoints = frame, keypoints
        logger.info(
            f"t={t:.3f}: tracked {sorted(scene.tracked)} lost {sorted(scene.lost)} "
            f"spawned {len(output.spawned)} redetected {len(output.redetected)}"
        )
        return output

    def _segment(self, frame, keypoints, estimates, previous_poses, failed):
        t, crf = frame.timestamp, self.config.crf
        prev = self._prev_frame
        flow = compute_flow(prev, frame, self.flow_provider)
        tracks = match_keypoints(self._prev_keypoints, keypoints)
        motions = {
            object_id: estimate.pose.compose(previous_poses[object_id].inverse())
            for object_id, estimate in sorted(estimates.items())
        }
        costs = keypoint_drift_unary(
            tracks.model_pixels, tracks.frame_points, tracks.frame_pixels, motions,
            frame.intrinsics, frame.timestamp - prev.timestamp,
        )
        residuals = {}
        for object_id, estimate in estimates.items():
            if estimate.icp is not None:
                residuals[object_id] = estimate.icp.per_pixel_residual
            else:
                residuals[object_id] = residual_grid(self.scene.tracked[object_id].cloud, estimate.pose, frame, self.config.icp)
        valid = frame.depth.valid_mask()
        unary = densify_unary(costs, flow, residuals, crf, valid)
        result = mean_field_infer(unary, flow, crf)
        resolution = resolve_segments(result.label_map(), self.scene, crf, valid, failed)
        self.events.add(
            t, "SEGMENTATION",
            f"tracks={len(tracks)} labels={result.label_ids} spawn={len(resolution.spawn_masks)} lost={resolution.lost_ids}",
        )
        return resolution

    def _model(self, frame, keypoints, estimates, resolution, output: FrameOutput) -> SegmentationMap:
        scene, t = self.scene, frame.timestamp
        for object_id in resolution.lost_ids:
            scene.mark_lost(object_id)
            self.events.add(t, "MODELLING", f"object={object_id} lost")
        seg = resolution.segmentation
        valid = frame.depth.valid_mask()
        for object_id in sorted(scene.tracked):
            obj = scene.tracked[object_id]
            pose = estimates[object_id].pose
            obj.record_pose(t, pose)
            carve = None
            if object_id == ENVIRONMENT_ID:
                others = [i for i in scene.tracked if i != ENVIRONMENT_ID]
                carve = valid & ~np.isin(seg.labels, others)
            register_frame_data(obj, frame, seg, pose, keypoints, self.config.modelling, carve_mask=carve)
            if (
                object_id != ENVIRONMENT_ID
                and GRASP_FRAME not in obj.attached_frames
                and obj.frames_registered >= self.config.modelling.grasp_after_frames
            ):
                try:
                    grasp = attach_grasp_frame(scene, object_id)
                    self.events.add(t, "MODELLING", f"object={object_id} grasp extents={np.round(grasp.extents, 4).tolist()}")
                except DegenerateCloud as e:
                    logger.debug(f"Object {object_id}: no grasp frame yet ({e})")
        for mask in resolution.spawn_masks:
            try:
                new_id = spawn_object(scene, mask, frame, keypoints, self.config.modelling)
            except EmptySegment:
                continue
            seg.labels[mask & valid] = new_id
            self.spawn_frame[new_id] = self.frame_index
            output.spawned.append((new_id, mask))
            self.events.add(t, "MODELLING", f"object={new_id} spawned pixels={int(mask.sum())}")
        self.events.add(t, "MODELLING", f"tracked={sorted(scene.tracked)} lost={sorted(scene.lost)}")
        return seg

    def _redetect(self, frame, keypoints, seg: SegmentationMap, output: FrameOutput) -> None:
        scene, t = self.scene, frame.timestamp
        age = self.config.redetect.candidate_age_frames
        young = [
            object_id for object_id in sorted(scene.tracked)
            if object_id != ENVIRONMENT_ID and self.frame_index - self.spawn_frame.get(object_id, -age) < age
        ]
        if not scene.lost or not young:
            self.events.add(t, "REDETECTION", f"skipped lost={len(scene.lost)} candidates={len(young)}")
            return
        segment_keypoints = {}
        for object_id in young:
            inside = keypoints_in_mask(keypoints, seg.mask(object_id))
            if inside is not None and len(inside):
                segment_keypoints[object_id] = inside
        matches = redetect(
            seg, segment_keypoints, scene, self.config.redetect, self.config.ransac, self._rng(-1), self.cursor
        )
        for match in matches:
            replace_duplicate(scene, match.segment_id, match.lost_id, match.pose, seg)
            scene.tracked[match.lost_id].record_pose(t, match.pose)
            self.spawn_frame.pop(match.segment_id, None)
            self.redetections[match.segment_id] = match.lost_id
            output.redetected.append((match.segment_id, match.lost_id))
            self.events.add(
                t, "REDETECTION",
                f"object={match.lost_id} restored from={match.segment_id} error={match.error:.6f} inliers={match.inliers}",
            )
        if not matches:
            self.events.add(t, "REDETECTION", f"no match lost={sorted(scene.lost)} candidates={young}")


# --- sources ---

@dataclass(eq=False)
class FrameSource:
    name: str
    frames: Iterable[FramePair]
    keypoints: KeypointProvider
    flow: FlowProvider
    script: Optional[SceneScript] = None


def _flow_provider(config: PipelineConfig) -> FlowProvider:
    fp = config.frontend
    if fp.flow_provider == "ground_truth":
        return GroundTruthFlow()
    return BlockMatchingFlow(fp.block_size, fp.search_radius, fp.flow_levels)


def open_simulation(config: PipelineConfig, script: SceneScript) -> FrameSource:
    if config.frontend.keypoint_provider == "file":
        raise ConfigError("frontend.keypoint_provider 'file' needs a dataset input")
    provider = sim.synthetic_provider(script, config.frontend, config.seed)
    return FrameSource(f"sim:{script.name}", sim.render_sequence(script, config.seed), provider, _flow_provider(config), script)


def open_dataset(config: PipelineConfig, dataset_dir) -> FrameSource:
    frames = formats.read_dataset(dataset_dir)
    choice = config.frontend.keypoint_provider
    if choice == "synthetic":
        provider: KeypointProvider = SyntheticKeypointProvider(config.frontend, config.seed)
    else:
        directory = formats.dataset_keypoint_dir(dataset_dir)
        if directory is None:
            raise ConfigError(f"dataset {dataset_dir} has no '{formats.KEYPOINT_DIR}' directory of keypoint files")
        provider = FileKeypointProvider(directory)
    return FrameSource(f"dataset:{dataset_dir}", frames, provider, _flow_provider(config))


# --- outputs ---

def _env_poses(scene: SceneSet) -> Dict[float, Pose]:
    return dict(scene.tracked[ENVIRONMENT_ID].pose_history)


def camera_trajectory(scene: SceneSet) -> Trajectory:
    """Camera to environment (world) frame."""
    return Trajectory.from_samples((t, pose.inverse()) for t, pose in scene.tracked[ENVIRONMENT_ID].pose_history)


def object_centre_trajectory(scene: SceneSet, object_id: int) -> Trajectory:
    """Segment-centre frame of an object expressed in the environment frame."""
    obj = scene.get(object_id)
    env = _env_poses(scene)
    centre = obj.attached_frames.get(SEGMENT_CENTRE, Pose.identity())
    samples = [
        (t, env[t].inverse().compose(pose).compose(centre))
        for t, pose in obj.pose_history if t in env
    ]
    return Trajectory.from_samples(samples)


def _write_grasp(path: Path, obj) -> None:
    pose = obj.attached_frames[GRASP_FRAME]
    extents = " ".join(f"{v:.6f}" for v in obj.grasp_extents)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(f"{formats.format_tum_line(0.0, pose)}\nextents {extents}\n")


def write_outputs(tracker: Tracker, out_dir: Path) -> None:
    scene = tracker.scene
    formats.write_tum(out_dir / "trajectories" / "camera.txt", camera_trajectory(scene))
    for object_id in sorted(scene.all_ids()):
        obj = scene.get(object_id)
        formats.write_ply(out_dir / "models" / f"object_{object_id}.ply", obj.cloud)
        formats.write_keypoint_history(out_dir / "keypoints" / f"object_{object_id}.bin", obj.keypoint_history)
        if object_id == ENVIRONMENT_ID:
            continue
        formats.write_tum(out_dir / "trajectories" / f"object_{object_id}.txt", object_centre_trajectory(scene, object_id))
        if GRASP_FRAME in obj.attached_frames and obj.grasp_extents is not None:
            _write_grasp(out_dir / "grasp" / f"object_{object_id}.txt", obj)
    tracker.events.write(out_dir / "events.log")


# --- ground-truth reports ---

@dataclass(eq=False)
class _TruthRecorder:
    """Ground truth collected while a simulated run is in progress."""

    script: SceneScript
    first_camera: Optional[Pose] = None
    static_points: List[np.ndarray] = field(default_factory=list)
    object_bodies: Dict[int, Tuple[int, np.ndarray]] = field(default_factory=dict)
    max_points: int = 200_000

    def observe(self, frame: FramePair, output: FrameOutput, scene: SceneSet) -> None:
        gt = frame.ground_truth
        if gt is None:
            return
        if self.first_camera is None:
            self.first_camera = gt.camera_pose
        to_env = self.first_camera.inverse().compose(gt.camera_pose)
        static = np.isin(gt.labels, list(gt.static_ids)) & (gt.depth > 0)
        static[1::2, :] = False
        static[:, 1::2] = False
        rows, cols = np.nonzero(static)
        K = frame.intrinsics
        z = gt.depth[rows, cols]
        points = np.column_stack([(cols - K.cx) * z / K.fx, (rows - K.cy) * z / K.fy, z])
        self.static_points.append(to_env.apply(points))

        motion = gt.motion_labels()
        for new_id, mask in output.spawned:
            ids, counts = np.unique(motion[mask & (motion > 0)], return_counts=True)
            if not len(ids):
                continue
            body_id = int(ids[np.argmax(counts)])
            centre_camera = scene.get(new_id).attached_frames[SEGMENT_CENTRE].translation
            centre_body = gt.poses[body_id].inverse().apply(centre_camera)
            self.object_bodies[new_id] = (body_id, centre_body)
        for duplicate, original in output.redetected:
            self.object_bodies.pop(duplicate, None)

    def truth_centre(self, object_id: int, timestamps: Iterable[float]) -> Trajectory:
        body_id, centre = self.object_bodies[object_id]
        env_from_world = self.first_camera.inverse()
        samples = [
            (t, env_from_world.compose(self.script.body_pose(body_id, t)).compose(Pose(np.eye(3), centre)))
            for t in timestamps
        ]
        return Trajectory.from_samples(samples)

    def truth_camera(self, timestamps: Iterable[float]) -> Trajectory:
        env_from_world = self.first_camera.inverse()
        return Trajectory.from_samples((t, env_from_world.compose(self.script.camera_pose(t))) for t in timestamps)

    def reference_cloud(self):
        positions = np.vstack(self.static_points) if self.static_points else np.zeros((0, 3))
        cloud = PointCloud(positions, np.full(positions.shape, np.nan), np.zeros(len(positions)), "truth")
        return subsample(cloud, self.max_points, 0)


def _ate_row(metric: str, estimated: Trajectory, truth: Trajectory) -> MetricRow:
    errors = ate_errors(estimated, truth)
    return MetricRow(metric=metric, value=float(np.sqrt(np.mean(errors**2))), stddev=float(errors.std()))


def evaluate_run(tracker: Tracker, truth: _TruthRecorder) -> List[MetricRow]:
    scene = tracker.scene
    rows: List[MetricRow] = []
    camera = camera_trajectory(scene)
    try:
        rows.append(_ate_row("camera_ate_m", camera, truth.truth_camera(camera.timestamps)))
        span = camera.timestamps[-1] - camera.timestamps[0]
        translational, rotational = rpe_rmse(camera, truth.truth_camera(camera.timestamps), min(1.0, span / 2.0))
        rows.append(MetricRow(metric="camera_rpe_m_per_s", value=translational))
        rows.append(MetricRow(metric="camera_rpe_deg_per_s", value=rotational))
    except NoAssociations as e:
        logger.warning(f"Camera metrics skipped: {e}")
    for object_id in sorted(truth.object_bodies):
        if object_id not in scene.all_ids():
            continue
        estimated = object_centre_trajectory(scene, object_id)
        try:
            rows.append(_ate_row(f"object_{object_id}_centre_ate_m", estimated, truth.truth_centre(object_id, estimated.timestamps)))
        except NoAssociations as e:
            logger.info(f"Object {object_id} centre ATE skipped: {e}")
    reference = truth.reference_cloud()
    environment = subsample(scene.tracked[ENVIRONMENT_ID].cloud, 50_000, 0)
    if len(reference) and len(environment):
        mean, std, _ = reconstruction_error(environment, reference)
        rows.append(MetricRow(metric="environment_reconstruction_m", value=mean, stddev=std))
    return rows


# --- run ---

def run(config: PipelineConfig, source: FrameSource, out_dir=None) -> RunSummary:
    """Runs the whole sequence and writes every artifact under `out_dir`."""
    out_dir = Path(out_dir or config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tracker = Tracker(config, source.keypoints, source.flow)
    truth = _TruthRecorder(source.script) if source.script is not None else None
    frames = 0
    logger.info(f"Run on {source.name} ({config.estimation_mode}), writing to {out_dir}")
    for frame in source.frames:
        output = tracker.process_frame(frame)
        frames += 1
        if output.dropped:
            continue
        formats.write_segmentation(out_dir / "segmentation" / formats.frame_file_name(frame.timestamp), output.segmentation)
        if truth is not None:
            truth.observe(frame, output, tracker.scene)
    if tracker.scene is None:
        raise ConfigError(f"input {source.name} contains no frames")

    write_outputs(tracker, out_dir)
    metrics = evaluate_run(tracker, truth) if truth is not None else []
    if metrics:
        lines = ["metric,value,stddev"] + [row.csv() for row in metrics]
        (out_dir / "metrics.csv").write_text("\n".join(lines) + "\n")

    scene = tracker.scene
    objects = []
    for object_id in sorted(scene.all_ids()):
        obj = scene.get(object_id)
        body = truth.object_bodies.get(object_id) if truth is not None else None
        objects.append(ObjectReport(
            id=object_id,
            status=obj.status.value,
            first_seen=obj.pose_history[0][0] if obj.pose_history else 0.0,
            last_seen=obj.pose_history[-1][0] if obj.pose_history else 0.0,
            points=len(obj.cloud),
            keypoint_entries=len(obj.keypoint_history),
            ground_truth_body=body[0] if body is not None else None,
        ))
    summary = RunSummary(
        source=source.name,
        output_dir=str(out_dir),
        frames=frames,
        dropped_frames=tracker.dropped_frames,
        objects=objects,
        metrics=metrics,
        redetections=tracker.redetections,
    )
    (out_dir / "summary.json").write_text(json.dumps(summary.model_dump(mode="json"), indent=2, sort_keys=True) + "\n")
    logger.info(f"Run finished: {frames} frames, {len(scene.tracked)} tracked, {len(scene.lost)} lost")
    return summary
