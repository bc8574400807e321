import logging
from contextlib import asynccontextmanager

from fastapi import FastAPI

from .core.config import settings
from .core.logging_setup import setup_logging
from .routers import metrics, runs, scenarios

logger = logging.getLogger(__name__)


@asynccontextmanager
async def lifespan(app: FastAPI):
    setup_logging()
    logger.info(f"Starting {settings.PROJECT_NAME}, run outputs under {settings.OUTPUT_ROOT}")
    yield
    logger.info("Shutting down...")


app = FastAPI(title=settings.PROJECT_NAME, version="0.1.0", lifespan=lifespan)

app.include_router(scenarios.router, prefix="/api/v1/scenarios", tags=["Scenarios"])
app.include_router(runs.router, prefix="/api/v1/runs", tags=["Runs"])
app.include_router(metrics.router, prefix="/api/v1/metrics", tags=["Metrics"])


@app.get("/")
async def root():
    """Root endpoint providing basic info."""
    return {"message": f"Welcome to {settings.PROJECT_NAME} API"}
