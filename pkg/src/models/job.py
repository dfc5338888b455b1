from datetime import datetime
from enum import Enum
from typing import List, Optional

from pydantic import BaseModel, Field


class JobStatus(str, Enum):
    PENDING = "pending"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


class JobKind(str, Enum):
    TRAIN_TEMPLATE = "train-template"
    REFINE = "refine"


class TrainTemplateRequest(BaseModel):
    data_dir: Optional[str] = None
    output_dir: Optional[str] = None
    config_path: Optional[str] = None
    seed: Optional[int] = None
    views: Optional[int] = Field(None, gt=0)


class RefineRequest(BaseModel):
    identity: str
    checkpoint: Optional[str] = None
    data_dir: Optional[str] = None
    output_dir: Optional[str] = None
    config_path: Optional[str] = None
    seed: Optional[int] = None


class JobRecord(BaseModel):
    id: str
    kind: JobKind
    status: JobStatus = JobStatus.PENDING
    stage: Optional[int] = None
    step: int = 0
    last_loss: Optional[float] = None
    output_checkpoint: Optional[str] = None
    error_message: Optional[str] = None
    created_at: datetime = Field(default_factory=datetime.now)
    updated_at: datetime = Field(default_factory=datetime.now)


class JobList(BaseModel):
    jobs: List[JobRecord]
    total: int
