import logging

from celery.result import AsyncResult
from fastapi import APIRouter, HTTPException, status

from ..celery_app import celery_app
from ..listeners.run_worker import run_pipeline_task
from ..core.config import settings
from ..models.api import RunAccepted, RunRequest, RunStatus
from ..utils.dependencies import validate_scenario_name_sync

logger = logging.getLogger(__name__)

router = APIRouter()


@router.post("/", response_model=RunAccepted, status_code=status.HTTP_202_ACCEPTED)
async def create_run(request: RunRequest):
    """Validates a run request and queues it on the tracking worker."""
    if request.scenario is not None:
        validate_scenario_name_sync(request.scenario)
    payload = request.model_dump()
    if payload["output_dir"] is None:
        source = request.scenario or "dataset"
        payload["output_dir"] = f"{settings.OUTPUT_ROOT}/{source}-seed{request.seed}"
    task = run_pipeline_task.delay(payload)
    logger.info(f"Queued run {task.id} for {request.scenario or request.dataset}")
    return RunAccepted(task_id=task.id)


@router.get("/{task_id}", response_model=RunStatus)
async def read_run(task_id: str):
    """Celery state of a run; the summary once it has finished."""
    if not task_id:
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail="Task id must be non-empty")
    result = AsyncResult(task_id, app=celery_app)
    if result.state == "SUCCESS":
        return RunStatus(task_id=task_id, state=result.state, summary=result.result)
    if result.state == "FAILURE":
        return RunStatus(task_id=task_id, state=result.state, error=str(result.result))
    return RunStatus(task_id=task_id, state=result.state)
