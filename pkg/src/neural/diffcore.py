"""
Autodiff plumbing shared by every network in the field stack.

Tensors are torch tensors (float64 while training), the tape is torch's
autograd graph and the optimiser is torch's Adam. This module adds what the
field stack needs on top: positional encoding, a configurable MLP with input
skips, scalar-only backward, spatial gradients that stay on the tape, and the
exponential learning-rate schedule.
"""
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from src.config.logging_config import get_logger
from src.utils.exceptions import ConfigurationError, UsageError

logger = get_logger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def configure_precision(dtype: str = "float64") -> torch.dtype:
    """Select the dtype of newly created tensors and parameters"""
    torch_dtype = {"float64": torch.float64, "float32": torch.float32}.get(dtype)
    if torch_dtype is None:
        raise ConfigurationError(f"Unsupported precision: {dtype}")
    torch.set_default_dtype(torch_dtype)
    return torch_dtype


# ---------------------------------------------------------------------------
# Positional encoding
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PositionalEncodingSpec:
    num_frequencies: int
    include_input: bool = True

    def __post_init__(self):
        if self.num_frequencies < 0:
            raise ConfigurationError("num_frequencies must be non-negative")

    def output_dim(self, input_dim: int) -> int:
        return input_dim * (2 * self.num_frequencies + (1 if self.include_input else 0))


def positional_encode(x: torch.Tensor, spec: PositionalEncodingSpec) -> torch.Tensor:
    """[x, sin(2^0 πx), cos(2^0 πx), ..., sin(2^(L-1) πx), cos(2^(L-1) πx)] along the last axis"""
    parts = [x] if spec.include_input else []
    for k in range(spec.num_frequencies):
        freq = (2.0 ** k) * math.pi
        parts.append(torch.sin(freq * x))
        parts.append(torch.cos(freq * x))
    if not parts:
        return x[..., :0]
    return torch.cat(parts, dim=-1)


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------

class Activation(str, Enum):
    SOFTPLUS = "softplus"
    RELU = "relu"


@dataclass(frozen=True)
class MlpSpec:
    """``layer_widths`` = (input, hidden..., output); one affine map per consecutive pair"""
    layer_widths: Tuple[int, ...]
    skip_layers: FrozenSet[int] = field(default_factory=frozenset)
    activation: Activation = Activation.SOFTPLUS
    softplus_beta: float = 100.0

    def __post_init__(self):
        if len(self.layer_widths) < 2 or any(w <= 0 for w in self.layer_widths):
            raise ConfigurationError(f"Invalid layer widths: {self.layer_widths}")
        for index in self.skip_layers:
            if not 0 < index < self.num_layers:
                raise ConfigurationError(f"Skip layer {index} is not an interior layer of {self.num_layers}")

    @property
    def num_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def output_dim(self) -> int:
        return self.layer_widths[-1]

    @property
    def hidden_width(self) -> int:
        return self.layer_widths[1] if self.num_layers > 1 else 0

    def layer_in_dim(self, index: int) -> int:
        width = self.layer_widths[index]
        return width + self.input_dim if index in self.skip_layers else width


class Mlp(nn.Module):
    """Affine layers with hidden activations; skip layers see concat(hidden, raw input)"""

    def __init__(self, spec: MlpSpec, zero_init_last: bool = False):
        super().__init__()
        self.spec = spec
        self.layers = nn.ModuleList(
            nn.Linear(spec.layer_in_dim(i), spec.layer_widths[i + 1]) for i in range(spec.num_layers)
        )
        if spec.activation == Activation.SOFTPLUS:
            self.activation = nn.Softplus(beta=spec.softplus_beta)
        else:
            self.activation = nn.ReLU()
        if zero_init_last:
            nn.init.zeros_(self.layers[-1].weight)
            nn.init.zeros_(self.layers[-1].bias)

    def forward(self, inputs: torch.Tensor) -> torch.Tensor:
        return mlp_forward(self, inputs)


def mlp_forward(mlp: Mlp, inputs: torch.Tensor) -> torch.Tensor:
    spec = mlp.spec
    if inputs.shape[-1] != spec.input_dim:
        raise ConfigurationError(f"MLP expects input dim {spec.input_dim}, got {inputs.shape[-1]}")
    h = inputs
    last = spec.num_layers - 1
    for index, layer in enumerate(mlp.layers):
        if index in spec.skip_layers:
            h = torch.cat([h, inputs], dim=-1)
        h = layer(h)
        if index < last:
            h = mlp.activation(h)
    return h


def geometric_init(mlp: Mlp, radius: float, coord_dim: int = 3, output_row: int = 0):
    """
    Initialise an SDF MLP so that output ``output_row`` approximates ‖x‖ - radius.

    Assumes the first ``coord_dim`` input columns are the raw coordinates; the
    remaining (encoded) columns start at zero.
    """
    spec = mlp.spec
    last = spec.num_layers - 1
    with torch.no_grad():
        for index, layer in enumerate(mlp.layers):
            out_dim = layer.weight.shape[0]
            if index == last:
                in_dim = layer.weight.shape[1]
                layer.weight[output_row].normal_(math.sqrt(math.pi) / math.sqrt(in_dim), 1e-4)
                layer.bias[output_row] = -radius
            elif index == 0:
                nn.init.zeros_(layer.bias)
                nn.init.zeros_(layer.weight)
                layer.weight[:, :coord_dim].normal_(0.0, math.sqrt(2) / math.sqrt(out_dim))
            else:
                nn.init.zeros_(layer.bias)
                nn.init.normal_(layer.weight, 0.0, math.sqrt(2) / math.sqrt(out_dim))
                if index in spec.skip_layers and spec.input_dim > coord_dim:
                    nn.init.zeros_(layer.weight[:, -(spec.input_dim - coord_dim):])


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

def backward(loss: torch.Tensor, parameters: Iterable[torch.Tensor]) -> List[torch.Tensor]:
    """
    Fill ``.grad`` of every parameter with ∂loss/∂param.

    Parameters the loss does not reach get an explicit zero gradient rather than
    ``None``.
    """
    if loss.numel() != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    params = [p for p in parameters if p.requires_grad]
    grads = torch.autograd.grad(loss.reshape(()), params, allow_unused=True)
    out = []
    for p, g in zip(params, grads):
        g = torch.zeros_like(p) if g is None else g.detach()
        p.grad = g
        out.append(g)
    return out


def value_and_spatial_gradient(
    field_fn: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    create_graph: bool = True,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Evaluate a scalar field and ∇ₓ of it.

    With ``create_graph`` the gradient stays on the tape, so losses on it
    propagate to parameters exactly (gradients of gradients).
    """
    if not x.requires_grad:
        x = x.detach().requires_grad_(True)
    with torch.enable_grad():
        value = field_fn(x)
        grad = torch.autograd.grad(
            value,
            x,
            grad_outputs=torch.ones_like(value),
            create_graph=create_graph,
            retain_graph=True,
        )[0]
    return value, grad


def spatial_gradient(
    field_fn: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    create_graph: bool = True,
) -> torch.Tensor:
    return value_and_spatial_gradient(field_fn, x, create_graph)[1]


def spatial_jacobian(
    field_fn: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    create_graph: bool = True,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Value (..., K) and Jacobian (..., K, D) of a vector field, one backward pass per component"""
    if not x.requires_grad:
        x = x.detach().requires_grad_(True)
    with torch.enable_grad():
        value = field_fn(x)
        rows = []
        for k in range(value.shape[-1]):
            component = value[..., k]
            rows.append(torch.autograd.grad(
                component,
                x,
                grad_outputs=torch.ones_like(component),
                create_graph=create_graph,
                retain_graph=True,
            )[0])
    return value, torch.stack(rows, dim=-2)


def safe_norm(v: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Euclidean norm whose gradient at the origin is zero instead of NaN"""
    sq = (v * v).sum(dim=dim)
    positive = sq > 0
    return torch.where(positive, torch.sqrt(torch.where(positive, sq, torch.ones_like(sq))), torch.zeros_like(sq))


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------

def make_adam(parameters: Iterable[torch.Tensor], lr: float) -> torch.optim.Adam:
    params = [p for p in parameters if p.requires_grad]
    if not params:
        raise ConfigurationError("No trainable parameters for the optimiser")
    return torch.optim.Adam(params, lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)


def adam_step(optimizer: torch.optim.Optimizer, lr: float) -> None:
    """Apply one bias-corrected Adam update at learning rate ``lr``"""
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()


def lr_schedule(step: int, total_steps: int, lr0: float, final_factor: float) -> float:
    """lr0 · final_factor^(step / total_steps)"""
    if lr0 <= 0:
        raise ConfigurationError("lr0 must be positive")
    if total_steps == 0:
        return lr0
    return lr0 * final_factor ** (step / total_steps)


def named_trainable(module: nn.Module) -> List[Tuple[str, nn.Parameter]]:
    return [(name, p) for name, p in module.named_parameters() if p.requires_grad]


def optimizer_state_by_name(
    optimizer: torch.optim.Optimizer, named_params: Sequence[Tuple[str, nn.Parameter]]
) -> dict:
    """Adam moments keyed by parameter name, for checkpointing"""
    state = {}
    for name, p in named_params:
        entry = optimizer.state.get(p)
        if not entry:
            continue
        state[name] = {
            "step": float(entry["step"]),
            "exp_avg": entry["exp_avg"].detach().clone(),
            "exp_avg_sq": entry["exp_avg_sq"].detach().clone(),
        }
    return state


def restore_optimizer_state(
    optimizer: torch.optim.Optimizer,
    named_params: Sequence[Tuple[str, nn.Parameter]],
    state: Optional[dict],
) -> None:
    if not state:
        return
    for name, p in named_params:
        entry = state.get(name)
        if entry is None:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(entry["step"], dtype=_scalar_dtype()),
            "exp_avg": entry["exp_avg"].to(p.dtype).clone(),
            "exp_avg_sq": entry["exp_avg_sq"].to(p.dtype).clone(),
        }


def _scalar_dtype() -> torch.dtype:
    # matches the dtype torch.optim.Adam uses for its step counter
    return torch.float64 if torch.get_default_dtype() == torch.float64 else torch.float32
