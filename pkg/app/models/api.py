from typing import Any, Dict, Literal, Optional

from pydantic import BaseModel, Field, model_validator


class RunRequest(BaseModel):
    scenario: Optional[str] = Field(None, description="Builtin scenario name")
    dataset: Optional[str] = Field(None, description="Dataset directory visible to the worker")
    seed: int = 0
    estimation_mode: Literal["sparse+dense", "sparse", "dense"] = "sparse+dense"
    overrides: Dict[str, Any] = Field(default_factory=dict, description="Nested config overrides")
    output_dir: Optional[str] = None

    @model_validator(mode="after")
    def _one_source(self):
        if (self.scenario is None) == (self.dataset is None):
            raise ValueError("exactly one of 'scenario' and 'dataset' is required")
        return self


class RunAccepted(BaseModel):
    task_id: str


class RunStatus(BaseModel):
    task_id: str
    state: str
    summary: Optional[Dict[str, Any]] = None
    error: Optional[str] = None


class ExportRequest(BaseModel):
    out_dir: str
    seed: int = 0


class TrajectoryPair(BaseModel):
    estimated: str = Field(..., description="TUM trajectory text")
    truth: str = Field(..., description="TUM trajectory text")
    delta: float = Field(1.0, gt=0, description="RPE pose separation (s)")


class CloudPair(BaseModel):
    estimated: str = Field(..., description="ASCII PLY text")
    truth: str = Field(..., description="ASCII PLY text")
