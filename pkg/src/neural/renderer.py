"""
Volume rendering of the composed SDF: pinhole rays, stratified plus importance
sampling, the Laplace-CDF density transform, the rendering network and
transmittance compositing.

Camera convention: pixel (u, v) = (column, row), pixel centres at (u + ½, v + ½),
camera looks down +z with +y pointing down the image (OpenCV), camera-to-world
pose maps camera coordinates into scene units.
"""
import math
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from src.config.logging_config import get_logger
from src.models.config import ModelConfig
from src.neural.diffcore import Activation, Mlp, MlpSpec, PositionalEncodingSpec, positional_encode
from src.utils.exceptions import ContractError, DataError

logger = get_logger(__name__)

BOUNDING_RADIUS = 1.5
MISS_INTERVAL = 1e-3

ArrayLike = Union[np.ndarray, torch.Tensor, Sequence]


@dataclass
class Camera:
    intrinsics: torch.Tensor  # (3, 3) pixels
    cam_to_world: torch.Tensor  # (4, 4) scene units
    width: int
    height: int

    def __post_init__(self):
        self.intrinsics = torch.as_tensor(np.asarray(self.intrinsics, dtype=np.float64)).to(torch.get_default_dtype())
        self.cam_to_world = torch.as_tensor(np.asarray(self.cam_to_world, dtype=np.float64)).to(torch.get_default_dtype())
        k = self.intrinsics
        if k.shape != (3, 3) or self.cam_to_world.shape != (4, 4):
            raise DataError("Camera needs a 3x3 intrinsics and a 4x4 camera-to-world matrix")
        if k[1, 0] != 0 or k[2, 0] != 0 or k[2, 1] != 0 or k[2, 2] != 1:
            raise DataError("Intrinsics must be upper triangular with K[2,2] = 1")
        if k[0, 0] <= 0 or k[1, 1] <= 0:
            raise DataError("Focal lengths must be positive")
        rotation = self.rotation
        if not torch.allclose(rotation.T @ rotation, torch.eye(3, dtype=rotation.dtype), atol=1e-6):
            raise DataError("Camera rotation is not orthonormal")
        if torch.det(rotation) <= 0:
            raise DataError("Camera rotation must have det = +1")
        if self.width <= 0 or self.height <= 0:
            raise DataError("Image size must be positive")

    @property
    def rotation(self) -> torch.Tensor:
        return self.cam_to_world[:3, :3]

    @property
    def center(self) -> torch.Tensor:
        return self.cam_to_world[:3, 3]

    def all_pixels(self) -> torch.Tensor:
        """Every pixel in row-major order as (u, v)"""
        v, u = torch.meshgrid(torch.arange(self.height), torch.arange(self.width), indexing="ij")
        return torch.stack([u.reshape(-1), v.reshape(-1)], dim=-1)


@dataclass
class RayBundle:
    origins: torch.Tensor  # (N, 3)
    directions: torch.Tensor  # (N, 3) unit
    near: torch.Tensor  # (N,)
    far: torch.Tensor  # (N,)
    hit: torch.Tensor  # (N,) bool, ray meets the bounding sphere

    def __len__(self) -> int:
        return self.origins.shape[0]

    def at(self, t: torch.Tensor) -> torch.Tensor:
        """Points o + t v for t of shape (N, S)"""
        return self.origins[:, None, :] + t[..., None] * self.directions[:, None, :]

    def select(self, index) -> "RayBundle":
        return RayBundle(self.origins[index], self.directions[index], self.near[index], self.far[index], self.hit[index])


def bounding_interval(origins: torch.Tensor, directions: torch.Tensor, radius: float = BOUNDING_RADIUS):
    """near/far of each ray against a sphere at the origin; misses get a tiny interval at closest approach"""
    b = (origins * directions).sum(-1)
    c = (origins * origins).sum(-1) - radius * radius
    disc = b * b - c
    hit = disc > 0
    root = torch.sqrt(torch.clamp(disc, min=0.0))
    near = torch.clamp(-b - root, min=0.0)
    far = -b + root
    closest = torch.clamp(-b, min=0.0)
    hit = hit & (far > near)
    near = torch.where(hit, near, closest)
    far = torch.where(hit, far, closest + MISS_INTERVAL)
    return near, far, hit


def generate_rays(camera: Camera, pixels: ArrayLike, radius: float = BOUNDING_RADIUS) -> RayBundle:
    """Rays through pixel centres; ``pixels`` holds (u, v) = (column, row) pairs"""
    pixels = torch.as_tensor(np.asarray(pixels), dtype=torch.get_default_dtype()).reshape(-1, 2)
    u, v = pixels[:, 0], pixels[:, 1]
    if bool(((u < 0) | (u >= camera.width) | (v < 0) | (v >= camera.height)).any()):
        raise DataError(f"Pixel coordinates outside the {camera.width}x{camera.height} image")
    homogeneous = torch.stack([u + 0.5, v + 0.5, torch.ones_like(u)], dim=-1)
    dirs_cam = torch.linalg.solve(camera.intrinsics, homogeneous.T).T
    dirs = dirs_cam @ camera.rotation.T
    dirs = dirs / torch.linalg.norm(dirs, dim=-1, keepdim=True)
    origins = camera.center.expand_as(dirs).clone()
    near, far, hit = bounding_interval(origins, dirs, radius)
    return RayBundle(origins, dirs, near, far, hit)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def stratified_samples(
    rays: RayBundle, n_samples: int, generator: Optional[torch.Generator] = None, perturb: bool = True
) -> torch.Tensor:
    if n_samples < 2:
        raise ContractError("At least two coarse samples per ray are needed")
    steps = torch.linspace(0.0, 1.0, n_samples)
    t = rays.near[:, None] + (rays.far - rays.near)[:, None] * steps[None, :]
    if perturb:
        mids = 0.5 * (t[:, 1:] + t[:, :-1])
        upper = torch.cat([mids, t[:, -1:]], dim=-1)
        lower = torch.cat([t[:, :1], mids], dim=-1)
        jitter = torch.rand(t.shape, generator=generator, dtype=t.dtype)
        t = lower + (upper - lower) * jitter
    return t


def sample_pdf(
    bins: torch.Tensor, weights: torch.Tensor, n_samples: int,
    generator: Optional[torch.Generator] = None, deterministic: bool = False,
) -> torch.Tensor:
    """Inverse-CDF samples of the piecewise-constant density ``weights`` over ``bins`` (N, S+1)"""
    weights = weights + 1e-5
    pdf = weights / weights.sum(-1, keepdim=True)
    cdf = torch.cumsum(pdf, -1)
    cdf = torch.cat([torch.zeros_like(cdf[..., :1]), cdf], -1)
    if deterministic:
        u = torch.linspace(0.5 / n_samples, 1.0 - 0.5 / n_samples, n_samples, dtype=bins.dtype)
        u = u.expand(list(cdf.shape[:-1]) + [n_samples]).contiguous()
    else:
        u = torch.rand(list(cdf.shape[:-1]) + [n_samples], generator=generator, dtype=bins.dtype)

    inds = torch.searchsorted(cdf, u, right=True)
    below = torch.clamp(inds - 1, min=0)
    above = torch.clamp(inds, max=cdf.shape[-1] - 1)
    inds_g = torch.stack([below, above], -1)

    matched = [inds_g.shape[0], inds_g.shape[1], cdf.shape[-1]]
    cdf_g = torch.gather(cdf.unsqueeze(1).expand(matched), 2, inds_g)
    bins_g = torch.gather(bins.unsqueeze(1).expand(matched), 2, inds_g)

    denom = cdf_g[..., 1] - cdf_g[..., 0]
    denom = torch.where(denom < 1e-5, torch.ones_like(denom), denom)
    frac = (u - cdf_g[..., 0]) / denom
    return bins_g[..., 0] + frac * (bins_g[..., 1] - bins_g[..., 0])


def sample_along_ray(
    rays: RayBundle,
    n_coarse: int,
    n_fine: int,
    generator: Optional[torch.Generator] = None,
    weights_fn=None,
    perturb: bool = True,
) -> torch.Tensor:
    """
    Strictly increasing sample depths in [near, far]: stratified coarse
    samples, then (if ``n_fine`` > 0 and ``weights_fn`` is given) one importance
    round drawn in proportion to the compositing weights of the coarse samples.
    """
    t = stratified_samples(rays, n_coarse, generator, perturb)
    if n_fine <= 0 or weights_fn is None:
        return t
    with torch.no_grad():
        weights = weights_fn(t)
        bins = torch.cat([t, rays.far[:, None]], dim=-1)
        fine = sample_pdf(bins, weights, n_fine, generator, deterministic=not perturb)
        # leave room below far for separating ties
        ceiling = rays.far - (n_coarse + n_fine) * tie_gap(rays.near, rays.far)
        fine = torch.minimum(torch.maximum(fine, rays.near[:, None]), ceiling[:, None])
        t, _ = torch.sort(torch.cat([t, fine], dim=-1), dim=-1)
        return separate_ties(t, rays.near, rays.far)


def tie_gap(near: torch.Tensor, far: torch.Tensor) -> torch.Tensor:
    """Smallest spacing kept between merged samples of one ray"""
    return torch.maximum((far - near) * 1e-9, 16 * torch.finfo(far.dtype).eps * (far.abs() + 1.0))


def separate_ties(t: torch.Tensor, near: torch.Tensor, far: torch.Tensor) -> torch.Tensor:
    """
    Make sorted rows strictly increasing by pushing repeated depths apart by
    ``tie_gap``. Rows without repeats are returned untouched.
    """
    tied = (t[:, 1:] <= t[:, :-1]).any(dim=-1)
    if not bool(tied.any()):
        return t
    gap = tie_gap(near, far)[:, None]
    index = torch.arange(t.shape[-1], dtype=t.dtype)
    spread = index * gap + torch.cummax(t - index * gap, dim=-1).values
    spread = torch.minimum(spread, far[:, None])
    return torch.where(tied[:, None], spread, t)


# ---------------------------------------------------------------------------
# Density and radiance
# ---------------------------------------------------------------------------

def laplace_cdf(t: torch.Tensor, beta) -> torch.Tensor:
    """Zero-mean Laplace CDF with scale β"""
    e = torch.exp(-t.abs() / beta)
    return torch.where(t <= 0, 0.5 * e, 1.0 - 0.5 * e)


def s_density(s: torch.Tensor, alpha, beta) -> torch.Tensor:
    """σ = α Φ_β(−s)"""
    return alpha * laplace_cdf(-s, beta)


class DensityParams(nn.Module):
    """α and β stored as logs so both stay positive"""

    def __init__(self, beta_init: float = 0.1, alpha_init: Optional[float] = None):
        super().__init__()
        alpha_init = 1.0 / beta_init if alpha_init is None else alpha_init
        self.log_alpha = nn.Parameter(torch.tensor(math.log(alpha_init)))
        self.log_beta = nn.Parameter(torch.tensor(math.log(beta_init)))

    @property
    def alpha(self) -> torch.Tensor:
        return torch.exp(self.log_alpha)

    @property
    def beta(self) -> torch.Tensor:
        return torch.exp(self.log_beta)

    def forward(self, s: torch.Tensor) -> torch.Tensor:
        return s_density(s, self.alpha, self.beta)


class RadianceField(nn.Module):
    """f_ren(z_c, x, v, features, n) with a sigmoid head"""

    def __init__(self, config: ModelConfig, stage: int = 1):
        super().__init__()
        self.config = config
        self.stage = stage
        bump = config.stage2_frequency_increase if stage == 2 else 0
        self.point_encoding = PositionalEncodingSpec(config.point_frequencies + bump)
        self.view_encoding = PositionalEncodingSpec(config.view_frequencies + bump)
        self.feature_dim = config.deformation_feature_dim + config.template_feature_dim
        if stage == 2:
            self.feature_dim += config.displacement_feature_dim
        num_layers = config.render_layers_stage1 if stage == 1 else config.render_layers_stage2
        widths = (self.input_dim,) + (config.hidden_width,) * (num_layers - 1) + (3,)
        skips = frozenset({config.render_skip_layer}) if stage == 2 else frozenset()
        self.mlp = Mlp(MlpSpec(widths, skip_layers=skips, activation=Activation.RELU))

    @property
    def segments(self) -> Tuple[int, int, int, int, int]:
        """Widths of the input blocks: PE(x), PE(v), z_c, features, n"""
        return (
            self.point_encoding.output_dim(3),
            self.view_encoding.output_dim(3),
            self.config.code_dim,
            self.feature_dim,
            3,
        )

    @property
    def input_dim(self) -> int:
        return sum(self.segments)

    def forward(
        self, z_c: torch.Tensor, x: torch.Tensor, v: torch.Tensor, features: torch.Tensor, n: torch.Tensor
    ) -> torch.Tensor:
        if features.shape[-1] != self.feature_dim:
            raise ContractError(
                f"Stage-{self.stage} rendering expects {self.feature_dim} feature dims, got {features.shape[-1]}"
            )
        inputs = torch.cat(
            [positional_encode(x, self.point_encoding), positional_encode(v, self.view_encoding), z_c, features, n],
            dim=-1,
        )
        return torch.sigmoid(self.mlp(inputs))

    def grown(self) -> "RadianceField":
        """
        Stage-2 copy of a stage-1 network with identical radiance.

        Old input columns move to their new offsets, new frequency bands and
        F_dis columns start at zero, inserted layers are identities on the
        (non-negative) ReLU features and zero on the skip input.
        """
        if self.stage != 1:
            raise ContractError("Only a stage-1 rendering network can be grown")
        new = RadianceField(self.config, stage=2)
        old_layers, new_layers = self.mlp.layers, new.mlp.layers
        k1, k2 = len(old_layers), len(new_layers)
        width = self.config.hidden_width

        column_map = []
        old_offset = new_offset = 0
        for old_len, new_len in zip(self.segments, new.segments):
            column_map.append((old_offset, new_offset, old_len))
            old_offset += old_len
            new_offset += new_len

        with torch.no_grad():
            for layer in new_layers:
                layer.weight.zero_()
                layer.bias.zero_()
            for i in range(k1 - 1):
                src, dst = old_layers[i], new_layers[i]
                dst.bias.copy_(src.bias)
                if i == 0:
                    for old_start, new_start, length in column_map:
                        dst.weight[:, new_start:new_start + length] = src.weight[:, old_start:old_start + length]
                else:
                    dst.weight[:, :src.weight.shape[1]] = src.weight
            for i in range(k1 - 1, k2 - 1):
                new_layers[i].weight[:, :width] = torch.eye(width)
            new_layers[-1].weight.copy_(old_layers[-1].weight)
            new_layers[-1].bias.copy_(old_layers[-1].bias)
        return new


# ---------------------------------------------------------------------------
# Compositing
# ---------------------------------------------------------------------------

@dataclass
class RenderOutput:
    color: torch.Tensor  # (N, 3)
    weights: torch.Tensor  # (N, S)
    transmittance: torch.Tensor  # (N, S)
    t: torch.Tensor  # (N, S)
    opacity: torch.Tensor  # (N,)
    normal_map: Optional[torch.Tensor] = None


def composite(
    sigma: torch.Tensor,
    rgb: torch.Tensor,
    t: torch.Tensor,
    far: torch.Tensor,
    background: Optional[torch.Tensor] = None,
) -> RenderOutput:
    """
    u_i = t_{i+1} − t_i (last: far − t_n), T_i = exp(−Σ_{j<i} σ_j u_j),
    w_i = T_i (1 − exp(−σ_i u_i)), C = Σ w_i c_i (+ (1 − Σw) · background).
    """
    if t.shape[-1] > 1 and bool((t[..., 1:] < t[..., :-1]).any()):
        raise DataError("Sample depths must be sorted along each ray")
    far = torch.as_tensor(far, dtype=t.dtype).expand(t.shape[:-1])
    deltas = torch.cat([t[..., 1:] - t[..., :-1], (far - t[..., -1]).unsqueeze(-1)], dim=-1)
    deltas = torch.clamp(deltas, min=0.0)
    optical = sigma * deltas
    accumulated = torch.cumsum(optical, dim=-1)
    accumulated = torch.cat([torch.zeros_like(accumulated[..., :1]), accumulated[..., :-1]], dim=-1)
    transmittance = torch.exp(-accumulated)
    weights = transmittance * (1.0 - torch.exp(-optical))
    color = (weights.unsqueeze(-1) * rgb).sum(dim=-2)
    opacity = weights.sum(dim=-1)
    if background is not None:
        color = color + (1.0 - opacity).unsqueeze(-1) * torch.as_tensor(background, dtype=color.dtype)
    return RenderOutput(color=color, weights=weights, transmittance=transmittance, t=t, opacity=opacity)


# ---------------------------------------------------------------------------
# Full pipeline
# ---------------------------------------------------------------------------

@dataclass
class SampleBatch:
    sdf: torch.Tensor  # (N, S) active SDF (s or ŝ)
    rgb: torch.Tensor  # (N, S, 3)
    normals: torch.Tensor  # (N, S, 3) unit normals of the active surface
    points: torch.Tensor  # (N, S, 3)
    fields: Optional[object] = None  # FieldSample of the evaluation, when the model exposes one


class RadianceModel(Protocol):
    """What the renderer needs from a model"""
    density: DensityParams

    def sdf_at(self, points: torch.Tensor, shape_index: torch.Tensor, stage: int) -> torch.Tensor: ...

    def evaluate_samples(
        self,
        points: torch.Tensor,
        directions: torch.Tensor,
        shape_index: torch.Tensor,
        color_index: torch.Tensor,
        stage: int,
        create_graph: bool = True,
    ) -> SampleBatch: ...


@dataclass
class RenderResult:
    output: RenderOutput
    samples: SampleBatch


def render_rays(
    model: RadianceModel,
    rays: RayBundle,
    shape_index: torch.Tensor,
    stage: int,
    generator: Optional[torch.Generator] = None,
    n_coarse: int = 64,
    n_fine: int = 64,
    perturb: bool = True,
    background: Optional[Sequence[float]] = None,
    color_index: Optional[torch.Tensor] = None,
    create_graph: bool = True,
) -> RenderResult:
    """ray → samples → fields → S-density on s/ŝ → radiance with n_b/n_f → composite"""
    color_index = shape_index if color_index is None else color_index
    alpha, beta = model.density.alpha, model.density.beta

    def coarse_weights(t: torch.Tensor) -> torch.Tensor:
        sdf = model.sdf_at(rays.at(t), shape_index, stage)
        return composite(s_density(sdf, alpha, beta), torch.zeros(t.shape + (3,), dtype=t.dtype), t, rays.far).weights

    t = sample_along_ray(rays, n_coarse, n_fine, generator, coarse_weights, perturb)
    samples = model.evaluate_samples(rays.at(t), rays.directions, shape_index, color_index, stage, create_graph)
    sigma = s_density(samples.sdf, alpha, beta)
    background_t = None if background is None else torch.as_tensor(background, dtype=t.dtype)
    output = composite(sigma, samples.rgb, t, rays.far, background_t)
    output.normal_map = (output.weights.unsqueeze(-1) * samples.normals).sum(dim=-2)
    return RenderResult(output=output, samples=samples)


def render_pixel(
    camera: Camera,
    pixel: Tuple[int, int],
    model: RadianceModel,
    shape_index: int,
    stage: int,
    generator: Optional[torch.Generator] = None,
    **kwargs,
) -> Tuple[torch.Tensor, RenderOutput]:
    rays = generate_rays(camera, [pixel])
    result = render_rays(model, rays, torch.tensor([shape_index]), stage, generator, **kwargs)
    return result.output.color[0], result.output
