"""
Geometry decomposition: per-identity codes, the deformation field that maps
observation space into template space, the shared template SDF, and the
stage-2 displacement refinement.

    (d, F_def) = f_def(PE(x) ⊕ z_s)
    (s, F_tem) = f_tem(PE(x + d))
    (δ, F_dis) = f_dis(PE(x) ⊕ F_tem ⊕ F_def)      stage 2 only
    ŝ = s + δ
"""
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn

from src.config.logging_config import get_logger
from src.models.config import ModelConfig
from src.neural.diffcore import (
    Activation,
    Mlp,
    MlpSpec,
    PositionalEncodingSpec,
    geometric_init,
    positional_encode,
    safe_norm,
    value_and_spatial_gradient,
)
from src.utils.exceptions import CapabilityError, ContractError, IdentityLookupError

logger = get_logger(__name__)


def hidden_widths(config: ModelConfig, num_layers: int) -> Tuple[int, ...]:
    return (config.hidden_width,) * (num_layers - 1)


class CodeBook(nn.Module):
    """Auto-decoder latent codes: one (shape, color) pair per identity"""

    def __init__(self, identity_ids: Sequence[str], code_dim: int, init_std: float = 0.01):
        super().__init__()
        if len(set(identity_ids)) != len(identity_ids):
            raise ContractError("Identity ids must be unique")
        self.identity_ids: List[str] = list(identity_ids)
        self.code_dim = code_dim
        self.shape_codes = nn.Parameter(torch.empty(len(identity_ids), code_dim))
        self.color_codes = nn.Parameter(torch.empty(len(identity_ids), code_dim))
        nn.init.normal_(self.shape_codes, 0.0, init_std)
        nn.init.normal_(self.color_codes, 0.0, init_std)

    def __len__(self) -> int:
        return len(self.identity_ids)

    def __contains__(self, identity: str) -> bool:
        return identity in self.identity_ids

    def index(self, identity: str) -> int:
        try:
            return self.identity_ids.index(identity)
        except ValueError:
            raise IdentityLookupError(f"Unknown identity: {identity}") from None

    def indices(self, identities: Sequence[str]) -> torch.Tensor:
        return torch.tensor([self.index(i) for i in identities], dtype=torch.long)

    def shape_code(self, identity: str) -> torch.Tensor:
        return self.shape_codes[self.index(identity)]

    def color_code(self, identity: str) -> torch.Tensor:
        return self.color_codes[self.index(identity)]

    def add_identity(self, identity: str) -> int:
        """Register a new identity with zero-initialised codes; returns its index"""
        if identity in self.identity_ids:
            raise ContractError(f"Identity already registered: {identity}")
        zeros = torch.zeros(1, self.code_dim, dtype=self.shape_codes.dtype)
        self.shape_codes = nn.Parameter(torch.cat([self.shape_codes.detach(), zeros]))
        self.color_codes = nn.Parameter(torch.cat([self.color_codes.detach(), zeros]))
        self.identity_ids.append(identity)
        logger.info(f"Registered identity {identity} at index {len(self.identity_ids) - 1}")
        return len(self.identity_ids) - 1


class DeformationField(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.encoding = PositionalEncodingSpec(config.point_frequencies)
        self.feature_dim = config.deformation_feature_dim
        widths = (
            (self.encoding.output_dim(3) + config.code_dim,)
            + hidden_widths(config, config.deformation_layers)
            + (3 + self.feature_dim,)
        )
        self.mlp = Mlp(
            MlpSpec(widths, activation=Activation.SOFTPLUS, softplus_beta=config.softplus_beta),
            zero_init_last=True,
        )

    def forward(self, x: torch.Tensor, z_s: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        out = self.mlp(torch.cat([positional_encode(x, self.encoding), z_s], dim=-1))
        return out[..., :3], out[..., 3:]


class TemplateField(nn.Module):
    """Identity-independent SDF; initialised to a sphere"""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.encoding = PositionalEncodingSpec(config.point_frequencies)
        self.feature_dim = config.template_feature_dim
        widths = (
            (self.encoding.output_dim(3),)
            + hidden_widths(config, config.template_layers)
            + (1 + self.feature_dim,)
        )
        self.mlp = Mlp(MlpSpec(widths, activation=Activation.SOFTPLUS, softplus_beta=config.softplus_beta))
        geometric_init(self.mlp, config.template_init_radius)

    def forward(self, y: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        out = self.mlp(positional_encode(y, self.encoding))
        return out[..., 0], out[..., 1:]


class DisplacementField(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.encoding = PositionalEncodingSpec(config.point_frequencies + config.stage2_frequency_increase)
        self.feature_dim = config.displacement_feature_dim
        widths = (
            (self.encoding.output_dim(3) + config.template_feature_dim + config.deformation_feature_dim,)
            + hidden_widths(config, config.displacement_layers)
            + (1 + self.feature_dim,)
        )
        self.mlp = Mlp(
            MlpSpec(widths, activation=Activation.SOFTPLUS, softplus_beta=config.softplus_beta),
            zero_init_last=True,
        )

    def forward(self, x: torch.Tensor, f_tem: torch.Tensor, f_def: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        out = self.mlp(torch.cat([positional_encode(x, self.encoding), f_tem, f_def], dim=-1))
        return out[..., 0], out[..., 1:]


@dataclass
class FieldSample:
    """Field values at query points; ``grad`` is ∇ₓ of the active SDF when requested"""
    x: torch.Tensor
    d: torch.Tensor
    s: torch.Tensor
    f_def: torch.Tensor
    f_tem: torch.Tensor
    delta: Optional[torch.Tensor] = None
    f_dis: Optional[torch.Tensor] = None
    grad: Optional[torch.Tensor] = None

    @property
    def s_hat(self) -> torch.Tensor:
        return self.s if self.delta is None else self.s + self.delta

    @property
    def stage(self) -> int:
        return 1 if self.delta is None else 2


def assemble_features(sample: FieldSample, stage: int) -> torch.Tensor:
    """Stage 1: F_def ⊕ F_tem. Stage 2: F_def ⊕ F_tem ⊕ F_dis."""
    if stage == 1:
        return torch.cat([sample.f_def, sample.f_tem], dim=-1)
    if sample.f_dis is None:
        raise ContractError("Stage-2 features need F_dis; the sample came from a stage-1 evaluation")
    return torch.cat([sample.f_def, sample.f_tem, sample.f_dis], dim=-1)


def normalize_gradient(grad: torch.Tensor, eps: float = 1e-12) -> Tuple[torch.Tensor, torch.Tensor]:
    """Unit normals and a degeneracy mask; degenerate gradients are returned unnormalised"""
    norm = safe_norm(grad)
    degenerate = norm <= eps
    scale = torch.where(degenerate, torch.ones_like(norm), norm)
    return grad / scale.unsqueeze(-1), degenerate


def surface_normal(
    sdf_fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, create_graph: bool = False
) -> Tuple[torch.Tensor, torch.Tensor]:
    _, grad = value_and_spatial_gradient(sdf_fn, x, create_graph=create_graph)
    return normalize_gradient(grad)


class ComposedSdf(nn.Module):
    """Code book + deformation + template (+ displacement in stage 2)"""

    def __init__(self, config: ModelConfig, identity_ids: Sequence[str], stage: int = 1):
        super().__init__()
        self.config = config
        self.codebook = CodeBook(identity_ids, config.code_dim, config.code_init_std)
        self.deformation = DeformationField(config)
        self.template = TemplateField(config)
        self.displacement: Optional[DisplacementField] = DisplacementField(config) if stage == 2 else None

    @property
    def stage(self) -> int:
        return 1 if self.displacement is None else 2

    def attach_displacement(self) -> None:
        if self.displacement is None:
            self.displacement = DisplacementField(self.config)

    def deform(self, x: torch.Tensor, z_s: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.deformation(x, z_s)

    def template_sdf(self, y: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.template(y)

    def base_sdf(self, x: torch.Tensor, z_s: torch.Tensor) -> FieldSample:
        d, f_def = self.deformation(x, z_s)
        s, f_tem = self.template(x + d)
        return FieldSample(x=x, d=d, s=s, f_def=f_def, f_tem=f_tem)

    def refined_sdf(self, x: torch.Tensor, z_s: torch.Tensor) -> FieldSample:
        if self.displacement is None:
            raise CapabilityError("refined_sdf needs a stage-2 model with a displacement network")
        sample = self.base_sdf(x, z_s)
        f_tem, f_def = sample.f_tem, sample.f_def
        if self.config.detach_displacement_inputs:
            f_tem, f_def = f_tem.detach(), f_def.detach()
        sample.delta, sample.f_dis = self.displacement(x, f_tem, f_def)
        return sample

    def evaluate(self, x: torch.Tensor, z_s: torch.Tensor, stage: int) -> FieldSample:
        if stage not in (1, 2):
            raise ContractError(f"Unknown stage: {stage}")
        return self.base_sdf(x, z_s) if stage == 1 else self.refined_sdf(x, z_s)

    def evaluate_with_gradient(
        self, x: torch.Tensor, z_s: torch.Tensor, stage: int, create_graph: bool = True
    ) -> FieldSample:
        """Evaluate and attach ∇ₓ of s (stage 1) or ŝ (stage 2) through the full composition"""
        holder = {}

        def active_sdf(points: torch.Tensor) -> torch.Tensor:
            holder["sample"] = self.evaluate(points, z_s, stage)
            return holder["sample"].s_hat

        _, grad = value_and_spatial_gradient(active_sdf, x, create_graph=create_graph)
        sample = holder["sample"]
        sample.grad = grad
        return sample

    def sdf(self, x: torch.Tensor, z_s: torch.Tensor, stage: int) -> torch.Tensor:
        return self.evaluate(x, z_s, stage).s_hat

    def normal(self, x: torch.Tensor, z_s: torch.Tensor, stage: int) -> Tuple[torch.Tensor, torch.Tensor]:
        """Unit normal of the active surface in observation space plus a degeneracy flag"""
        return surface_normal(lambda p: self.sdf(p, z_s, stage), x)
