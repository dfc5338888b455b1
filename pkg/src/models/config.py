"""Run configuration schema (the JSON config file read by the CLI and jobs)."""
import json
from pathlib import Path
from typing import List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from src.utils.exceptions import ConfigurationError


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", protected_namespaces=())


class ModelConfig(StrictModel):
    """Network architecture of the field stack and the rendering network"""
    code_dim: int = Field(128, gt=0)
    hidden_width: int = Field(256, gt=0)
    deformation_layers: int = Field(4, ge=2)
    template_layers: int = Field(8, ge=2)
    displacement_layers: int = Field(4, ge=2)
    render_layers_stage1: int = Field(4, ge=2)
    render_layers_stage2: int = Field(6, ge=2)
    render_skip_layer: int = Field(3, ge=1)
    deformation_feature_dim: int = Field(192, gt=0)
    template_feature_dim: int = Field(64, gt=0)
    displacement_feature_dim: int = Field(64, gt=0)
    point_frequencies: int = Field(6, ge=0)
    view_frequencies: int = Field(4, ge=0)
    stage2_frequency_increase: int = Field(2, ge=0)
    softplus_beta: float = Field(100.0, gt=0)
    template_init_radius: float = Field(0.5, gt=0)
    code_init_std: float = Field(0.01, ge=0)
    beta_init: float = Field(0.1, gt=0)
    eikonal_space: Literal["observation", "template"] = "observation"
    render_point_space: Literal["observation", "template"] = "observation"
    detach_displacement_inputs: bool = False

    @model_validator(mode="after")
    def _check_render_layers(self):
        if self.render_layers_stage2 < self.render_layers_stage1:
            raise ValueError("render_layers_stage2 must not be smaller than render_layers_stage1")
        if not 0 < self.render_skip_layer < self.render_layers_stage2 - 1:
            raise ValueError("render_skip_layer must index an interior stage-2 rendering layer")
        return self


class LossWeights(StrictModel):
    """λ1..λ6 plus a separate slot for the latent code term"""
    color: float = Field(0.01, ge=0)
    deformation: float = Field(0.001, ge=0)
    deformation_gradient: float = Field(0.001, ge=0)
    eikonal: float = Field(0.001, ge=0)
    displacement: float = Field(0.001, ge=0)
    displacement_tv: float = Field(0.001, ge=0)
    code: float = Field(0.001, ge=0)


class TrainConfig(StrictModel):
    rays_per_step: int = Field(1024, gt=0)
    stage1_steps: int = Field(2000, gt=0)
    stage2_steps: int = Field(3000, gt=0)
    fit_steps: int = Field(1000, gt=0)
    lr0: float = Field(5e-4, gt=0)
    lr_final_factor: float = Field(0.1, gt=0)
    seed: int = 0
    n_coarse: int = Field(64, ge=2)
    n_fine: int = Field(64, ge=0)
    perturb: bool = True
    eikonal_uniform_fraction: float = Field(0.5, ge=0, le=1)
    regularizer_points: Optional[int] = Field(None, gt=0)
    loss_weights: LossWeights = Field(default_factory=LossWeights)
    views_per_identity: Optional[int] = Field(None, gt=0)
    held_out_views: int = Field(1, ge=0)
    background_color: List[float] = Field(default_factory=lambda: [1.0, 1.0, 1.0])
    freeze_template_stage2: bool = True
    finetune_deformation_stage2: bool = True
    finetune_shape_code_stage2: bool = True
    finetune_color_code_stage2: bool = True
    use_displacement: bool = True
    refine_unseen: bool = False
    checkpoint_every: int = Field(500, gt=0)
    log_every: int = Field(50, gt=0)
    dtype: Literal["float64", "float32"] = "float64"

    @field_validator("background_color")
    @classmethod
    def _check_background(cls, value):
        if len(value) != 3 or any(not 0.0 <= c <= 1.0 for c in value):
            raise ValueError("background_color must be three values in [0, 1]")
        return value

    @property
    def regularizer_count(self) -> int:
        return self.regularizer_points or self.rays_per_step


class MeshConfig(StrictModel):
    resolution: int = Field(128, ge=2)
    bound: float = Field(1.2, gt=0)
    batch_size: int = Field(65536, gt=0)


class MetricConfig(StrictModel):
    surface_samples: int = Field(30000, gt=0)
    psnr_cap: float = Field(99.0, gt=0)
    render_chunk: int = Field(256, gt=0)


class PathsConfig(StrictModel):
    data_dir: Optional[str] = None
    output_dir: Optional[str] = None


class Config(StrictModel):
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    mesh: MeshConfig = Field(default_factory=MeshConfig)
    metrics: MetricConfig = Field(default_factory=MetricConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)


def load_config(path: Optional[Union[str, Path]] = None) -> Config:
    """Load and validate a JSON config file; no path yields the defaults"""
    if path is None:
        return Config()
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"Config file not found: {path}")
    try:
        return Config.model_validate(json.loads(path.read_text(encoding="utf-8")))
    except (ValidationError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"Invalid config file {path}: {e}") from e
