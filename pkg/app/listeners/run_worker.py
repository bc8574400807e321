import logging
from typing import Any, Dict

from app.celery_app import celery_app
from app.core.config import load_pipeline_config
from app.core.logging_setup import setup_logging
from app.models.api import RunRequest
from app.services import pipeline, sim

setup_logging()
logger = logging.getLogger(__name__)


def execute_run(payload: Dict[str, Any]) -> Dict[str, Any]:
    """Runs one tracking request synchronously and returns the summary as JSON data."""
    request = RunRequest.model_validate(payload)
    overrides = dict(request.overrides)
    overrides["seed"] = request.seed
    overrides["estimation_mode"] = request.estimation_mode
    if request.output_dir is not None:
        overrides["output_dir"] = request.output_dir
    config = load_pipeline_config(None, overrides)
    if request.scenario is not None:
        source = pipeline.open_simulation(config, sim.get_scenario(request.scenario))
    else:
        source = pipeline.open_dataset(config, request.dataset)
    summary = pipeline.run(config, source)
    return summary.model_dump(mode="json")


@celery_app.task(name='app.listeners.run_worker.run_pipeline_task')
def run_pipeline_task(payload: Dict[str, Any]) -> Dict[str, Any]:
    """Celery task running one tracking request on the tracking queue."""
    logger.info(f"Starting tracking run for {payload.get('scenario') or payload.get('dataset')}")
    try:
        return execute_run(payload)
    except Exception as e:
        logger.error(f"Tracking run failed: {e}", exc_info=True)
        raise


@celery_app.task(name='app.listeners.run_worker.export_scenario_task')
def export_scenario_task(name: str, out_dir: str, seed: int = 0) -> str:
    script = sim.get_scenario(name)
    root = sim.export_dataset(script, out_dir, seed=seed)
    logger.info(f"Exported {script.frame_count} frames of '{name}' to {root}")
    return str(root)
