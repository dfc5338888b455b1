"""
Finite-difference check of every loss term on a toy model.

Each term is evaluated on a fixed batch (fixed rays, samples and regularizer points), its
parameter gradient is taken with autograd, and parameter entries are compared
with central differences: one entry from every parameter tensor plus a random
draw weighted by tensor size. Terms that differentiate through a spatial
gradient are second order and get the looser tolerance.

An entry whose autograd gradient is exactly zero while the finite difference
is not is reported as unreached; that is a broken tape (a stray ``detach``),
not a rounding problem, and fails the check whatever its relative error.
"""
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import torch

from src.config.logging_config import get_logger
from src.models.config import ModelConfig
from src.models.metrics import GradcheckReport, GradcheckTerm
from src.neural.diffcore import backward, configure_precision
from src.neural.losses import (
    code_loss,
    color_loss,
    deformation_loss,
    displacement_loss,
    eikonal_loss,
    probe_regularizers,
)
from src.neural.model import HeadModel
from src.neural.renderer import Camera, generate_rays, render_rays
from src.utils.exceptions import UsageError

logger = get_logger(__name__)

STEP_SIZE = 1e-5
FIRST_ORDER_TOLERANCE = 1e-5
SECOND_ORDER_TOLERANCE = 1e-4
ABSOLUTE_FLOOR = 1e-4

LossFn = Callable[[], torch.Tensor]


@dataclass
class GradientCheck:
    max_rel_error: float
    checked: int
    unreached: List[str]


def toy_model_config() -> ModelConfig:
    return ModelConfig(
        code_dim=4,
        hidden_width=8,
        deformation_layers=2,
        template_layers=3,
        displacement_layers=2,
        render_layers_stage1=2,
        render_layers_stage2=3,
        render_skip_layer=1,
        deformation_feature_dim=4,
        template_feature_dim=4,
        displacement_feature_dim=4,
        point_frequencies=2,
        view_frequencies=1,
        stage2_frequency_increase=1,
        softplus_beta=10.0,
    )


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), ABSOLUTE_FLOOR)


def _entries(
    named: Sequence[Tuple[str, torch.nn.Parameter]], samples: int, generator: torch.Generator
) -> List[Tuple[int, int]]:
    """One random entry of every tensor, then ``samples`` more drawn proportionally to tensor size"""
    picks = [(i, int(torch.randint(p.numel(), (1,), generator=generator))) for i, (_, p) in enumerate(named)]
    sizes = torch.tensor([p.numel() for _, p in named], dtype=torch.float64)
    for _ in range(samples):
        which = int(torch.multinomial(sizes, 1, generator=generator))
        picks.append((which, int(torch.randint(named[which][1].numel(), (1,), generator=generator))))
    return picks


def check_gradient(
    loss_fn: LossFn,
    named_parameters: Sequence[Tuple[str, torch.nn.Parameter]],
    generator: torch.Generator,
    samples: int = 12,
    step_size: float = STEP_SIZE,
) -> GradientCheck:
    """Max relative error between autograd and central differences over parameter entries"""
    named = [(name, p) for name, p in named_parameters if p.requires_grad]
    if not named:
        return GradientCheck(max_rel_error=0.0, checked=0, unreached=[])
    grads = backward(loss_fn(), [p for _, p in named])

    worst, checked, unreached = 0.0, 0, []
    for which, entry in _entries(named, samples, generator):
        name, param = named[which]
        flat = param.data.view(-1)
        original = float(flat[entry])
        with torch.no_grad():
            flat[entry] = original + step_size
            plus = float(loss_fn())
            flat[entry] = original - step_size
            minus = float(loss_fn())
            flat[entry] = original
        numeric = (plus - minus) / (2.0 * step_size)
        analytic = float(grads[which].view(-1)[entry])
        if max(abs(analytic), abs(numeric)) < ABSOLUTE_FLOOR:
            continue
        if analytic == 0.0 and name not in unreached:
            unreached.append(name)
        worst = max(worst, relative_error(analytic, numeric))
        checked += 1
    return GradientCheck(max_rel_error=worst, checked=checked, unreached=unreached)


class GradcheckService:
    def __init__(self, config: Optional[ModelConfig] = None, seed: int = 0, samples: int = 12):
        self.config = config or toy_model_config()
        self.seed = seed
        self.samples = samples

    def build_model(self) -> HeadModel:
        torch.manual_seed(self.seed)
        model = HeadModel(self.config, ["a", "b"], stage=1).promote()
        with torch.no_grad():
            # move off the zero-initialised heads, where |·| and ‖·‖ are not differentiable
            for p in model.parameters():
                p.add_(0.1 * torch.randn_like(p))
        return model

    def loss_terms(self, model: HeadModel, generator: torch.Generator) -> Dict[str, Tuple[LossFn, int]]:
        """Every loss term on a fixed toy batch, with its derivative order in the parameters"""
        camera = Camera([[8.0, 0.0, 4.0], [0.0, 8.0, 4.0], [0.0, 0.0, 1.0]],
                        [[1, 0, 0, 0], [0, -1, 0, 0], [0, 0, -1, 3.0], [0, 0, 0, 1]], 8, 8)
        rays = generate_rays(camera, [[2, 3], [4, 4], [5, 2], [3, 6]])
        shape_index = torch.tensor([0, 1, 0, 1])
        target = torch.rand(4, 3, generator=generator, dtype=torch.float64)
        points = torch.rand(6, 3, generator=generator, dtype=torch.float64) * 2.0 - 1.0
        point_index = torch.tensor([0, 1, 0, 1, 0, 1])

        def regularizers():
            return probe_regularizers(model, points, point_index, 2)

        def render_color() -> torch.Tensor:
            out = render_rays(model, rays, shape_index, 2, None, n_coarse=6, n_fine=0, perturb=False,
                              background=[1.0, 1.0, 1.0])
            return color_loss(out.output.color, target, 1.0)

        def deformation_offset() -> torch.Tensor:
            r = regularizers()
            return deformation_loss(r.d, r.jacobian_d, 1.0, 0.0)

        def deformation_gradient() -> torch.Tensor:
            r = regularizers()
            return deformation_loss(r.d, r.jacobian_d, 0.0, 1.0)

        def displacement() -> torch.Tensor:
            r = regularizers()
            return displacement_loss(r.delta, r.grad_delta, 1.0, 0.0)

        def displacement_tv() -> torch.Tensor:
            r = regularizers()
            return displacement_loss(r.delta, r.grad_delta, 0.0, 1.0)

        return {
            # the rendering network reads normals, so color differentiates through ∇ₓs
            "color": (render_color, 2),
            "deformation": (deformation_offset, 1),
            "deformation_gradient": (deformation_gradient, 2),
            "eikonal": (lambda: eikonal_loss(regularizers().grad_s, 1.0), 2),
            "displacement": (displacement, 1),
            "displacement_tv": (displacement_tv, 2),
            "code": (lambda: code_loss(model.codebook.shape_codes, model.codebook.color_codes, 1.0), 1),
        }

    def run(self, terms: Optional[Sequence[str]] = None) -> GradcheckReport:
        configure_precision("float64")
        model = self.build_model()
        generator = torch.Generator().manual_seed(self.seed)
        available = self.loss_terms(model, generator)
        names = list(terms) if terms is not None else list(available)
        unknown = [name for name in names if name not in available]
        if unknown:
            raise UsageError(f"Unknown loss terms {unknown}; expected some of {list(available)}")

        results = []
        for name in names:
            fn, order = available[name]
            tolerance = FIRST_ORDER_TOLERANCE if order == 1 else SECOND_ORDER_TOLERANCE
            outcome = check_gradient(fn, list(model.named_parameters()), generator, self.samples)
            results.append(GradcheckTerm(
                name=name,
                order=order,
                tolerance=tolerance,
                checked=outcome.checked,
                max_rel_error=outcome.max_rel_error,
                unreached=outcome.unreached,
            ))
            logger.info(f"gradcheck {name} (order {order}): max relative error {outcome.max_rel_error:.3e} "
                        f"over {outcome.checked} entries")
            if outcome.unreached:
                logger.warning(f"gradcheck {name}: no autograd gradient reaches {', '.join(outcome.unreached)}")

        def worst(order: int) -> float:
            return max((t.max_rel_error for t in results if t.order == order), default=0.0)

        return GradcheckReport(
            step_size=STEP_SIZE,
            tolerance=FIRST_ORDER_TOLERANCE,
            second_order_tolerance=SECOND_ORDER_TOLERANCE,
            terms=results,
            max_rel_error=max((t.max_rel_error for t in results), default=0.0),
            first_order_max_rel_error=worst(1),
            second_order_max_rel_error=worst(2),
            passed=all(t.passed for t in results),
        )
