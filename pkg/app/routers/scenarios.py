from typing import List

from fastapi import APIRouter, Depends, status

from ..listeners.run_worker import export_scenario_task
from ..models.api import ExportRequest, RunAccepted
from ..models.scene import ScenarioSummary, SceneScript
from ..services.sim import builtin_scenarios
from ..utils.dependencies import validate_scenario_name

router = APIRouter()


@router.get("/", response_model=List[ScenarioSummary])
async def list_scenarios():
    """Lists the builtin simulator scenarios."""
    return [ScenarioSummary.of(script) for script in builtin_scenarios().values()]


@router.get("/{name}", response_model=ScenarioSummary)
async def read_scenario(script: SceneScript = Depends(validate_scenario_name)):
    return ScenarioSummary.of(script)


@router.get("/{name}/script", response_model=SceneScript)
async def read_scenario_script(script: SceneScript = Depends(validate_scenario_name)):
    """Full scene script, usable as a template for custom scenes."""
    return script


@router.post("/{name}/export", response_model=RunAccepted, status_code=status.HTTP_202_ACCEPTED)
async def export_scenario(request: ExportRequest, script: SceneScript = Depends(validate_scenario_name)):
    """Queues a dataset export of the scenario on the tracking worker."""
    task = export_scenario_task.delay(script.name, request.out_dir, request.seed)
    return RunAccepted(task_id=task.id)
