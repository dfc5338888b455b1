"""Full-image rendering of a trained model (color, normals, opacity)."""
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from src.config.logging_config import get_logger
from src.models.config import TrainConfig
from src.neural.renderer import Camera, generate_rays, render_rays
from src.utils.exceptions import CapabilityError
from src.utils.image_utils import normal_map_to_image

logger = get_logger(__name__)


@dataclass
class RenderedImage:
    color: np.ndarray  # (H, W, 3)
    normals: np.ndarray  # (H, W, 3) in [-1, 1]
    opacity: np.ndarray  # (H, W)

    @property
    def normal_image(self) -> np.ndarray:
        return normal_map_to_image(self.normals)


class RenderService:
    """Deterministic (jitter-free) rendering in ray chunks"""

    def __init__(self, train: Optional[TrainConfig] = None, chunk: int = 256):
        self.train = train or TrainConfig()
        self.chunk = chunk

    def render(
        self,
        model,
        camera: Camera,
        identity: str,
        color_identity: Optional[str] = None,
        stage: Optional[int] = None,
        background: Optional[Sequence[float]] = None,
    ) -> RenderedImage:
        stage = model.stage if stage is None else stage
        background = self.train.background_color if background is None else background
        shape_index = model.codebook.index(identity)
        color_index = model.codebook.index(color_identity or identity)
        rays = generate_rays(camera, camera.all_pixels())
        colors, normals, opacity = [], [], []
        try:
            for start in range(0, len(rays), self.chunk):
                chunk = rays.select(slice(start, start + self.chunk))
                n = len(chunk)
                result = render_rays(
                    model,
                    chunk,
                    torch.full((n,), shape_index, dtype=torch.long),
                    stage,
                    generator=None,
                    n_coarse=self.train.n_coarse,
                    n_fine=self.train.n_fine,
                    perturb=False,
                    background=background,
                    color_index=torch.full((n,), color_index, dtype=torch.long),
                    create_graph=False,
                )
                colors.append(result.output.color.detach())
                normals.append(result.output.normal_map.detach())
                opacity.append(result.output.opacity.detach())
        except Exception as e:
            logger.error(f"Error rendering {identity} (color {color_identity or identity}): {e}")
            raise
        h, w = camera.height, camera.width
        return RenderedImage(
            color=torch.cat(colors).reshape(h, w, 3).cpu().numpy(),
            normals=torch.cat(normals).reshape(h, w, 3).cpu().numpy(),
            opacity=torch.cat(opacity).reshape(h, w).cpu().numpy(),
        )


def color_transfer_render(
    geometry_id: str,
    color_id: str,
    camera: Camera,
    model,
    render_service: Optional[RenderService] = None,
    background: Optional[Sequence[float]] = None,
) -> RenderedImage:
    """Geometry and features from ``geometry_id``'s shape code, radiance from ``color_id``'s color code"""
    if model.stage < 2:
        raise CapabilityError("Color transfer needs a stage-2 model")
    service = render_service or RenderService()
    return service.render(model, camera, geometry_id, color_identity=color_id, background=background)
