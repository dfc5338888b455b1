"""
Training objectives.

Reduction convention: means over batch elements, sums over vector components
inside norms. Each term is returned already multiplied by its weight.
"""
import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import torch

from src.config.logging_config import get_logger
from src.models.config import LossWeights
from src.neural.diffcore import safe_norm
from src.utils.exceptions import DataError, NumericFailure

logger = get_logger(__name__)

CSV_COLUMNS = ("step", "lr", "col", "def", "eik", "dis", "cod", "total")


def _zero(like: Optional[torch.Tensor] = None) -> torch.Tensor:
    if like is not None:
        return like.new_zeros(())
    return torch.zeros(())


def color_loss(pred: torch.Tensor, target: torch.Tensor, weight: float) -> torch.Tensor:
    """λ1 · mean over rays of Σ_channels |C − C_gt|"""
    if pred.shape != target.shape:
        raise DataError(f"Color batches differ in shape: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if pred.shape[0] == 0:
        logger.warning("Empty ray batch; color loss is zero")
        return _zero(pred)
    return weight * (pred - target).abs().sum(dim=-1).mean()


def deformation_loss(d: torch.Tensor, jacobian: torch.Tensor, weight_offset: float, weight_gradient: float) -> torch.Tensor:
    """λ2 · mean ‖d‖ + λ3 · mean ‖J_d‖_F"""
    if d.numel() == 0:
        return _zero(d)
    offset = safe_norm(d).mean()
    frobenius = safe_norm(jacobian.reshape(*jacobian.shape[:-2], -1)).mean()
    return weight_offset * offset + weight_gradient * frobenius


def eikonal_loss(grad_s: torch.Tensor, weight: float) -> torch.Tensor:
    """λ4 · mean (‖∇s‖ − 1)²"""
    if grad_s.numel() == 0:
        return _zero(grad_s)
    return weight * ((safe_norm(grad_s) - 1.0) ** 2).mean()


def displacement_loss(
    delta: Optional[torch.Tensor], grad_delta: Optional[torch.Tensor], weight: float, weight_tv: float
) -> torch.Tensor:
    """λ5 · mean |δ| + λ6 · mean ‖∇δ‖₁; zero when the model has no displacement"""
    if delta is None or grad_delta is None:
        return _zero()
    if delta.numel() == 0:
        return _zero(delta)
    return weight * delta.abs().mean() + weight_tv * grad_delta.abs().sum(dim=-1).mean()


def code_loss(z_s: torch.Tensor, z_c: torch.Tensor, weight: float) -> torch.Tensor:
    """λ · mean over identities of (‖z_s‖ + ‖z_c‖)"""
    if z_s.shape[0] == 0:
        return _zero(z_s)
    return weight * (safe_norm(z_s) + safe_norm(z_c)).mean()


@dataclass
class LossBreakdown:
    col: torch.Tensor
    def_: torch.Tensor
    eik: torch.Tensor
    dis: torch.Tensor
    cod: torch.Tensor
    total: torch.Tensor = field(init=False)

    def __post_init__(self):
        self.total = total_loss(self)

    def components(self) -> dict:
        return {"col": self.col, "def": self.def_, "eik": self.eik, "dis": self.dis, "cod": self.cod}

    def as_row(self, step: int, lr: float) -> dict:
        row = {"step": step, "lr": lr}
        row.update({k: float(v.detach()) for k, v in self.components().items()})
        row["total"] = float(self.total.detach())
        return row


def total_loss(breakdown: LossBreakdown) -> torch.Tensor:
    components = breakdown.components()
    bad = [name for name, value in components.items() if not bool(torch.isfinite(value).all())]
    if bad:
        raise NumericFailure(f"Non-finite loss components: {', '.join(bad)}")
    dtype = components["col"].dtype
    return sum((v.to(dtype) for v in components.values()), torch.zeros((), dtype=dtype))


@dataclass
class RegularizerProbe:
    """Spatial quantities at the regularizer probe points"""
    d: torch.Tensor  # (P, 3)
    jacobian_d: torch.Tensor  # (P, 3, 3)
    grad_s: torch.Tensor  # (P, 3)
    delta: Optional[torch.Tensor] = None  # (P,)
    grad_delta: Optional[torch.Tensor] = None  # (P, 3)


def _grad(output: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    return torch.autograd.grad(
        output, x, grad_outputs=torch.ones_like(output), create_graph=True, retain_graph=True
    )[0]


def probe_regularizers(model, points: torch.Tensor, shape_index: torch.Tensor, stage: int) -> RegularizerProbe:
    """
    Evaluate d, J_d, ∇s and (stage 2) δ, ∇δ at ``points`` (P, 3); every
    derivative stays on the tape.

    ∇s is taken in observation space through the deformation, or with respect
    to the template point x + d when ``eikonal_space`` is "template".
    """
    geometry = model.geometry
    x = points.detach().requires_grad_(True)
    z_s = model.shape_codes_for(shape_index, x)
    with torch.enable_grad():
        sample = geometry.evaluate(x, z_s, stage)
        jacobian = torch.stack([_grad(sample.d[..., k], x) for k in range(3)], dim=-2)
        if model.config.eikonal_space == "template":
            y = (x + sample.d).detach().requires_grad_(True)
            s_template, _ = geometry.template_sdf(y)
            grad_s = _grad(s_template, y)
        else:
            grad_s = _grad(sample.s, x)
        grad_delta = _grad(sample.delta, x) if sample.delta is not None else None
    return RegularizerProbe(d=sample.d, jacobian_d=jacobian, grad_s=grad_s, delta=sample.delta, grad_delta=grad_delta)


def compute_loss_breakdown(
    model,
    pred_color: torch.Tensor,
    gt_color: torch.Tensor,
    probe: RegularizerProbe,
    identity_index: torch.Tensor,
    weights: LossWeights,
    stage: int,
) -> LossBreakdown:
    """All five weighted terms for one step; stage 1 leaves the displacement term at zero"""
    unique = torch.unique(identity_index)
    dis = (
        displacement_loss(probe.delta, probe.grad_delta, weights.displacement, weights.displacement_tv)
        if stage == 2
        else _zero(pred_color)
    )
    return LossBreakdown(
        col=color_loss(pred_color, gt_color, weights.color),
        def_=deformation_loss(probe.d, probe.jacobian_d, weights.deformation, weights.deformation_gradient),
        eik=eikonal_loss(probe.grad_s, weights.eikonal),
        dis=dis.to(pred_color.dtype),
        cod=code_loss(model.codebook.shape_codes[unique], model.codebook.color_codes[unique], weights.code),
    )


class LossLog:
    """Per-step loss CSV (step, lr, col, def, eik, dis, cod, total)"""

    def __init__(self, path: Union[str, Path], append: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fresh = not (append and self.path.exists())
        self._file = open(self.path, "w" if fresh else "a", newline="", encoding="utf-8")
        self._writer = csv.DictWriter(self._file, fieldnames=CSV_COLUMNS)
        if fresh:
            self._writer.writeheader()

    def write(self, step: int, lr: float, breakdown: LossBreakdown) -> None:
        self._writer.writerow(breakdown.as_row(step, lr))
        self._file.flush()

    def close(self) -> None:
        self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_loss_log(path: Union[str, Path]) -> list:
    with open(path, newline="", encoding="utf-8") as f:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(f)]
