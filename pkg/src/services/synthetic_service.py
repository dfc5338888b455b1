"""
Synthetic heads with ground truth.

Every identity is the shared base ellipsoid stretched per axis, plus a small
high-frequency bump field and a smoothly varying albedo. Images are rendered
by sphere tracing with Lambertian shading through the same camera model the
learned renderer uses; ground-truth meshes come from marching cubes on the
analytic field.
"""
import math
from pathlib import Path
from typing import Callable, List, Optional, Tuple, Union

import numpy as np
import torch

from src.config.logging_config import get_logger
from src.models.manifest import DatasetManifest, IdentityRecord, IdentityShape, SceneSpec, ViewRecord
from src.neural.diffcore import value_and_spatial_gradient
from src.neural.renderer import Camera, generate_rays
from src.services.dataset_service import write_manifest
from src.services.mesh_service import marching_cubes, sample_grid, write_obj
from src.utils.image_utils import save_array, save_mask, save_png

logger = get_logger(__name__)

LIGHT_DIRECTION = (0.3, 0.5, 1.0)
AMBIENT = 0.3
MESH_BOUND = 1.2

SdfFn = Callable[[torch.Tensor], torch.Tensor]


class AnalyticHead:
    """1-Lipschitz SDF lower bound and albedo of one synthetic identity"""

    def __init__(self, scene: SceneSpec, shape: IdentityShape):
        self.shape = shape
        self.radii = torch.tensor([r * s for r, s in zip(scene.base_radii, shape.radius_scale)])
        self.phase = torch.tensor(shape.bump_phase)
        self.albedo_base = torch.tensor(shape.albedo)
        self.lipschitz = 1.0 + shape.bump_amplitude * shape.bump_frequency * math.sqrt(3.0)

    def bump(self, p: torch.Tensor) -> torch.Tensor:
        waves = torch.sin(self.shape.bump_frequency * p + self.phase.to(p.dtype))
        return self.shape.bump_amplitude * waves.prod(dim=-1)

    def sdf(self, p: torch.Tensor) -> torch.Tensor:
        radii = self.radii.to(p.dtype)
        ellipsoid = (torch.linalg.norm(p / radii, dim=-1) - 1.0) * radii.min()
        return (ellipsoid + self.bump(p)) / self.lipschitz

    def albedo(self, p: torch.Tensor) -> torch.Tensor:
        f = self.shape.albedo_frequency
        variation = self.shape.albedo_variation * torch.sin(f * p[..., 0]) * torch.cos(f * p[..., 1])
        return torch.clamp(self.albedo_base.to(p.dtype) + variation.unsqueeze(-1), 0.0, 1.0)


def sphere_trace(
    sdf_fn: SdfFn,
    origins: torch.Tensor,
    directions: torch.Tensor,
    near: Union[float, torch.Tensor] = 0.0,
    far: Union[float, torch.Tensor] = 10.0,
    max_steps: int = 256,
    eps: float = 1e-6,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """March t += sdf(o + t v) until |sdf| < eps (hit) or t > far (miss); returns hit mask, t and points"""
    n = origins.shape[0]
    t = torch.as_tensor(near, dtype=origins.dtype).expand(n).clone()
    far = torch.as_tensor(far, dtype=origins.dtype).expand(n)
    hit = torch.zeros(n, dtype=torch.bool)
    active = torch.ones(n, dtype=torch.bool)
    with torch.no_grad():
        for _ in range(max_steps):
            if not bool(active.any()):
                break
            points = origins[active] + t[active, None] * directions[active]
            d = sdf_fn(points)
            idx = active.nonzero(as_tuple=True)[0]
            converged = d.abs() < eps
            hit[idx[converged]] = True
            t[idx[~converged]] += d[~converged]
            escaped = t[idx] > far[idx]
            active[idx[converged | escaped]] = False
    hit &= t <= far
    return hit, t, origins + t[:, None] * directions


def look_at(center: np.ndarray, target: np.ndarray = np.zeros(3), up: np.ndarray = np.array([0.0, 1.0, 0.0])) -> np.ndarray:
    """Camera-to-world pose with columns [right, down, forward]"""
    forward = target - center
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, up)
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = right, down, forward, center
    return pose


def frontal_arc_poses(scene: SceneSpec, n_views: int, rng: np.random.Generator) -> List[np.ndarray]:
    """Random views over ±azimuth_range / ±elevation_range degrees around the +z face direction"""
    poses = []
    for _ in range(n_views):
        azimuth = math.radians(rng.uniform(-scene.azimuth_range, scene.azimuth_range))
        elevation = math.radians(rng.uniform(-scene.elevation_range, scene.elevation_range))
        center = scene.camera_distance * np.array([
            math.cos(elevation) * math.sin(azimuth),
            math.sin(elevation),
            math.cos(elevation) * math.cos(azimuth),
        ])
        poses.append(look_at(center))
    return poses


def intrinsics_for(scene: SceneSpec, size: int) -> np.ndarray:
    focal = scene.focal_scale * size
    return np.array([[focal, 0.0, size / 2.0], [0.0, focal, size / 2.0], [0.0, 0.0, 1.0]])


def render_analytic(head: AnalyticHead, camera: Camera, background) -> Tuple[np.ndarray, np.ndarray]:
    """Lambertian sphere-traced image (H, W, 3) and its foreground mask"""
    rays = generate_rays(camera, camera.all_pixels())
    hit, _, points = sphere_trace(head.sdf, rays.origins, rays.directions, rays.near, rays.far)
    color = torch.as_tensor(background, dtype=points.dtype).expand(len(rays), 3).clone()
    if bool(hit.any()):
        surface = points[hit]
        _, grad = value_and_spatial_gradient(head.sdf, surface, create_graph=False)
        normals = grad / torch.linalg.norm(grad, dim=-1, keepdim=True)
        light = torch.tensor(LIGHT_DIRECTION, dtype=points.dtype)
        light = light / torch.linalg.norm(light)
        shade = AMBIENT + (1.0 - AMBIENT) * torch.clamp((normals * light).sum(-1), min=0.0)
        color[hit] = (head.albedo(surface) * shade.unsqueeze(-1)).detach()
    shape = (camera.height, camera.width)
    return color.reshape(*shape, 3).numpy(), hit.reshape(shape).numpy()


def default_identities(n_identities: int, n_held_out: int, rng: np.random.Generator) -> List[IdentityShape]:
    shapes = []
    for i in range(n_identities + n_held_out):
        shapes.append(IdentityShape(
            id=f"id{i:02d}",
            radius_scale=tuple(float(v) for v in rng.uniform(0.9, 1.1, size=3)),
            bump_amplitude=float(rng.uniform(0.015, 0.03)),
            bump_frequency=float(rng.uniform(8.0, 12.0)),
            bump_phase=tuple(float(v) for v in rng.uniform(0.0, 2.0 * math.pi, size=3)),
            albedo=tuple(float(v) for v in rng.uniform(0.25, 0.9, size=3)),
            albedo_variation=float(rng.uniform(0.03, 0.1)),
            held_out=i >= n_identities,
        ))
    return shapes


def generate_synthetic(
    out_dir: Union[str, Path],
    scene: Optional[SceneSpec] = None,
    n_identities: int = 3,
    n_views: int = 8,
    image_size: int = 64,
    seed: int = 0,
    n_held_out: int = 0,
    mesh_resolution: int = 64,
    write_arrays: bool = False,
) -> DatasetManifest:
    """Write images, masks, ground-truth meshes and the manifest under ``out_dir``"""
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    scene = scene or SceneSpec()
    if not scene.identities:
        scene = scene.model_copy(update={"identities": default_identities(n_identities, n_held_out, rng)})
        scene = SceneSpec.model_validate(scene.model_dump())
    scene = scene.model_copy(update={"image_size": image_size})
    intrinsics = intrinsics_for(scene, image_size)

    records = []
    for shape in scene.identities:
        head = AnalyticHead(scene, shape)
        views = []
        for index, pose in enumerate(frontal_arc_poses(scene, n_views, rng)):
            camera = Camera(intrinsics, pose, image_size, image_size)
            image, mask = render_analytic(head, camera, scene.background_color)
            stem = f"{shape.id}/view_{index:02d}"
            save_png(image, out_dir / "images" / f"{stem}.png")
            save_mask(mask, out_dir / "masks" / f"{stem}.png")
            array = None
            if write_arrays:
                save_array(image, out_dir / "arrays" / f"{stem}.npy")
                array = f"arrays/{stem}.npy"
            views.append(ViewRecord(
                image=f"images/{stem}.png",
                mask=f"masks/{stem}.png",
                array=array,
                intrinsics=intrinsics.tolist(),
                cam_to_world=pose.tolist(),
            ))
        grid = sample_grid(head.sdf, mesh_resolution, (-MESH_BOUND,) * 3, (MESH_BOUND,) * 3)
        write_obj(marching_cubes(grid), out_dir / "meshes" / f"{shape.id}.obj")
        records.append(IdentityRecord(
            id=shape.id, views=views, gt_mesh=f"meshes/{shape.id}.obj", held_out=shape.held_out
        ))
        logger.info(f"Generated identity {shape.id}: {n_views} views at {image_size}x{image_size}")

    manifest = DatasetManifest(
        background_color=list(scene.background_color),
        crop_box=scene.crop_box,
        identities=records,
    )
    write_manifest(manifest, out_dir)
    (out_dir / "scene.json").write_text(scene.model_dump_json(indent=2), encoding="utf-8")
    manifest._root = out_dir
    return manifest


def load_scene(path: Union[str, Path]) -> SceneSpec:
    return SceneSpec.model_validate_json(Path(path).read_text(encoding="utf-8"))
