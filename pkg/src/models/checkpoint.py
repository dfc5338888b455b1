"""Header of the checkpoint container (the JSON part before the raw arrays)."""
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, Field

from src.models.config import LossWeights, ModelConfig, TrainConfig

CHECKPOINT_MAGIC = b"DEFORMSDF-CKPT\n"
CHECKPOINT_VERSION = 1


class ArrayEntry(BaseModel):
    name: str
    shape: List[int]
    offset: int  # bytes from the start of the array section
    nbytes: int


class CheckpointHeader(BaseModel):
    model_config = {"protected_namespaces": ()}

    format_version: int = CHECKPOINT_VERSION
    stage: Literal[1, 2]
    dtype: Literal["float64", "float32"] = "float64"
    step: int = Field(0, ge=0)
    identity_ids: List[str]
    code_dim: int
    alpha: float
    beta: float
    model: ModelConfig
    loss_weights: LossWeights
    train: Optional[TrainConfig] = None
    trainable_groups: List[str] = Field(default_factory=list)
    # identities and planned length of the run that wrote this checkpoint
    trained_identities: List[str] = Field(default_factory=list)
    total_steps: Optional[int] = Field(None, ge=0)
    optimizer_steps: Dict[str, float] = Field(default_factory=dict)
    arrays: List[ArrayEntry] = Field(default_factory=list)
