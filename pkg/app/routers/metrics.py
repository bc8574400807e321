import numpy as np
from fastapi import APIRouter

from ..core.errors import MultiMotionError
from ..models.api import CloudPair, TrajectoryPair
from ..models.report import MetricRow
from ..services import evaluation, formats
from ..utils.dependencies import engine_error

router = APIRouter()


@router.post("/ate", response_model=MetricRow)
async def absolute_trajectory_error(pair: TrajectoryPair):
    """ATE RMSE after rigid alignment; stddev of the per-pose errors."""
    try:
        errors = evaluation.ate_errors(
            formats.parse_tum(pair.estimated, "estimated"), formats.parse_tum(pair.truth, "truth")
        )
    except MultiMotionError as e:
        raise engine_error(e)
    return MetricRow(metric="ate_rmse_m", value=float(np.sqrt(np.mean(errors**2))), stddev=float(errors.std()))


@router.post("/rpe", response_model=list[MetricRow])
async def relative_pose_error(pair: TrajectoryPair):
    try:
        translational, rotational = evaluation.rpe_rmse(
            formats.parse_tum(pair.estimated, "estimated"), formats.parse_tum(pair.truth, "truth"), pair.delta
        )
    except MultiMotionError as e:
        raise engine_error(e)
    return [
        MetricRow(metric="rpe_trans_m_per_s", value=translational),
        MetricRow(metric="rpe_rot_deg_per_s", value=rotational),
    ]


@router.post("/recon", response_model=MetricRow)
async def reconstruction(pair: CloudPair):
    try:
        mean, std, _ = evaluation.reconstruction_error(
            formats.parse_ply(pair.estimated, "estimated"), formats.parse_ply(pair.truth, "truth")
        )
    except MultiMotionError as e:
        raise engine_error(e)
    return MetricRow(metric="recon_mean_m", value=mean, stddev=std)
