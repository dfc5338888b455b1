"""The full head model: composed SDF, rendering network and density parameters."""
from typing import List, Optional, Sequence

import torch
import torch.nn as nn

from src.config.logging_config import get_logger
from src.models.config import ModelConfig
from src.neural.fields import ComposedSdf, assemble_features, normalize_gradient
from src.neural.renderer import DensityParams, RadianceField, SampleBatch
from src.utils.exceptions import ContractError

logger = get_logger(__name__)


class HeadModel(nn.Module):
    def __init__(self, config: ModelConfig, identity_ids: Sequence[str], stage: int = 1):
        super().__init__()
        if stage not in (1, 2):
            raise ContractError(f"Unknown stage: {stage}")
        self.config = config
        self.geometry = ComposedSdf(config, identity_ids, stage)
        self.radiance = RadianceField(config, stage)
        self.density = DensityParams(config.beta_init)

    @property
    def stage(self) -> int:
        return self.radiance.stage

    @property
    def codebook(self):
        return self.geometry.codebook

    @property
    def identity_ids(self) -> List[str]:
        return list(self.geometry.codebook.identity_ids)

    def _expand_codes(self, codes: torch.Tensor, index: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        z = codes[index]
        while z.dim() < like.dim():
            z = z.unsqueeze(-2)
        return z.expand(*like.shape[:-1], z.shape[-1])

    def shape_codes_for(self, index: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        return self._expand_codes(self.codebook.shape_codes, index, like)

    def color_codes_for(self, index: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        return self._expand_codes(self.codebook.color_codes, index, like)

    def _check_stage(self, stage: int):
        if stage != self.stage:
            raise ContractError(f"Stage-{stage} evaluation requested on a stage-{self.stage} model")

    def sdf_at(self, points: torch.Tensor, shape_index: torch.Tensor, stage: int) -> torch.Tensor:
        """Active SDF at points (N, S, 3) of rays whose identities are ``shape_index`` (N,)"""
        return self.geometry.sdf(points, self.shape_codes_for(shape_index, points), stage)

    def evaluate_samples(
        self,
        points: torch.Tensor,
        directions: torch.Tensor,
        shape_index: torch.Tensor,
        color_index: Optional[torch.Tensor] = None,
        stage: Optional[int] = None,
        create_graph: bool = True,
    ) -> SampleBatch:
        stage = self.stage if stage is None else stage
        self._check_stage(stage)
        color_index = shape_index if color_index is None else color_index
        z_s = self.shape_codes_for(shape_index, points)
        sample = self.geometry.evaluate_with_gradient(points, z_s, stage, create_graph=create_graph)
        normals, _ = normalize_gradient(sample.grad)
        features = assemble_features(sample, stage)
        x = sample.x if self.config.render_point_space == "observation" else sample.x + sample.d
        views = directions.unsqueeze(-2).expand_as(points) if directions.dim() < points.dim() else directions
        rgb = self.radiance(self.color_codes_for(color_index, points), x, views, features, normals)
        return SampleBatch(sdf=sample.s_hat, rgb=rgb, normals=normals, points=sample.x, fields=sample)

    def promote(self) -> "HeadModel":
        """
        Grow a stage-1 model into stage 2 in place: zero-initialised displacement
        network, wider-encoded and deeper rendering network. All stage-1
        parameters carry over unchanged.
        """
        if self.stage == 2:
            logger.warning("Model is already stage 2; promotion skipped")
            return self
        before = self.radiance.input_dim
        self.geometry.attach_displacement()
        self.radiance = self.radiance.grown()
        logger.info(f"Promoted model to stage 2 (rendering input {before} -> {self.radiance.input_dim})")
        return self

    def add_identity(self, identity: str) -> int:
        return self.codebook.add_identity(identity)

    def parameter_groups(self) -> dict:
        """Named parameter groups used to freeze/unfreeze parts of the model"""
        groups = {
            "shape_codes": [self.codebook.shape_codes],
            "color_codes": [self.codebook.color_codes],
            "deformation": list(self.geometry.deformation.parameters()),
            "template": list(self.geometry.template.parameters()),
            "radiance": list(self.radiance.parameters()),
            "density": list(self.density.parameters()),
        }
        if self.geometry.displacement is not None:
            groups["displacement"] = list(self.geometry.displacement.parameters())
        return groups

    def set_trainable(self, names: Sequence[str]) -> None:
        """Only the listed groups keep ``requires_grad``"""
        groups = self.parameter_groups()
        unknown = set(names) - set(groups)
        if unknown:
            raise ContractError(f"Unknown parameter groups: {sorted(unknown)}")
        for name, params in groups.items():
            for p in params:
                p.requires_grad_(name in names)
