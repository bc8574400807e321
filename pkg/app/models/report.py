from typing import Dict, List, Optional

from pydantic import BaseModel, Field


class MetricRow(BaseModel):
    metric: str
    value: float
    stddev: Optional[float] = None

    def csv(self) -> str:
        stddev = "" if self.stddev is None else f"{self.stddev:.9f}"
        return f"{self.metric},{self.value:.9f},{stddev}"


class ObjectReport(BaseModel):
    id: int
    status: str
    first_seen: float
    last_seen: float
    points: int
    keypoint_entries: int
    ground_truth_body: Optional[int] = None


class RunSummary(BaseModel):
    source: str
    output_dir: str
    frames: int
    dropped_frames: int = 0
    objects: List[ObjectReport] = Field(default_factory=list)
    metrics: List[MetricRow] = Field(default_factory=list)
    redetections: Dict[int, int] = Field(default_factory=dict, description="duplicate id -> restored id")
