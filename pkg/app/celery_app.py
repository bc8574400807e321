from celery import Celery
from dotenv import load_dotenv

from .core.config import settings

# Load .env file if it exists (useful for local development outside Docker)
load_dotenv()

celery_app = Celery(
    'multimotion',
    broker=settings.CELERY_BROKER_URL,
    backend=settings.CELERY_BROKER_URL,
    include=[
        'app.listeners.run_worker',
    ]
)

celery_app.conf.update(
    task_serializer='json',
    accept_content=['json'],
    result_serializer='json',
    timezone='UTC',
    enable_utc=True,
    # Runs are long and CPU bound
    worker_prefetch_multiplier=1,
    task_acks_late=True,
    result_expires=7 * 24 * 3600,
)

celery_app.conf.task_routes = {
    'app.listeners.run_worker.run_pipeline_task': {'queue': 'tracking_queue'},
    'app.listeners.run_worker.export_scenario_task': {'queue': 'tracking_queue'},
}

if __name__ == '__main__':
    celery_app.start()
