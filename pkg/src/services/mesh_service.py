"""Zero level-set extraction, cropping and OBJ exchange."""
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, Tuple, Union

import mcubes
import numpy as np
import torch
import trimesh

from src.config.logging_config import get_logger
from src.models.config import MeshConfig
from src.utils.exceptions import ConfigurationError, DataError

logger = get_logger(__name__)

Vec3 = Union[Sequence[float], np.ndarray]


@dataclass
class VoxelGrid:
    values: np.ndarray  # (rx, ry, rz) values at the grid nodes
    bounds_min: np.ndarray
    bounds_max: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.bounds_min = np.asarray(self.bounds_min, dtype=np.float64).reshape(3)
        self.bounds_max = np.asarray(self.bounds_max, dtype=np.float64).reshape(3)
        if self.values.ndim != 3 or min(self.values.shape) < 2:
            raise ConfigurationError(f"Voxel grid needs at least 2 nodes per axis, got {self.values.shape}")
        if np.any(self.bounds_min >= self.bounds_max):
            raise ConfigurationError("Voxel grid bounds must satisfy min < max")

    @property
    def resolution(self) -> Tuple[int, int, int]:
        return tuple(self.values.shape)

    @property
    def voxel_size(self) -> np.ndarray:
        return (self.bounds_max - self.bounds_min) / (np.asarray(self.resolution) - 1)

    def index_to_world(self, ijk: np.ndarray) -> np.ndarray:
        return ijk * self.voxel_size + self.bounds_min


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise DataError("Face indices out of range")

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def face_cross(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_cross(), axis=-1)

    def face_normals(self) -> np.ndarray:
        cross = self.face_cross()
        norm = np.linalg.norm(cross, axis=-1, keepdims=True)
        return cross / np.where(norm > 0, norm, 1.0)

    def face_centroids(self) -> np.ndarray:
        return self.vertices[self.faces].mean(axis=1)


def sample_grid(
    sdf_fn: Callable[[torch.Tensor], torch.Tensor],
    resolution: Union[int, Sequence[int]],
    bounds_min: Vec3,
    bounds_max: Vec3,
    batch_size: int = 65536,
) -> VoxelGrid:
    """Evaluate ``sdf_fn`` on every node of a regular grid, in batches"""
    res = (resolution,) * 3 if isinstance(resolution, int) else tuple(resolution)
    if len(res) != 3 or min(res) < 2:
        raise ConfigurationError(f"Grid resolution must be at least 2 per axis, got {res}")
    lo = np.asarray(bounds_min, dtype=np.float64)
    hi = np.asarray(bounds_max, dtype=np.float64)
    axes = [np.linspace(lo[k], hi[k], res[k]) for k in range(3)]
    xx, yy, zz = np.meshgrid(*axes, indexing="ij")
    points = torch.as_tensor(np.stack([xx, yy, zz], axis=-1).reshape(-1, 3), dtype=torch.get_default_dtype())
    values = np.empty(points.shape[0], dtype=np.float64)
    with torch.no_grad():
        for start in range(0, points.shape[0], batch_size):
            chunk = points[start:start + batch_size]
            values[start:start + len(chunk)] = sdf_fn(chunk).detach().cpu().numpy().reshape(-1)
    return VoxelGrid(values.reshape(res), lo, hi)


def clean_mesh(mesh: TriangleMesh, min_area: float = 1e-14) -> TriangleMesh:
    """Drop zero-area and index-degenerate faces, then unreferenced vertices"""
    if mesh.is_empty:
        return TriangleMesh.empty()
    f = mesh.faces
    distinct = (f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2])
    keep = distinct & (mesh.face_areas() > min_area)
    return _reindex(mesh.vertices, f[keep])


def _reindex(vertices: np.ndarray, faces: np.ndarray) -> TriangleMesh:
    if len(faces) == 0:
        return TriangleMesh.empty()
    used, inverse = np.unique(faces.reshape(-1), return_inverse=True)
    return TriangleMesh(vertices[used], inverse.reshape(-1, 3))


def orient_outward(mesh: TriangleMesh, grid: VoxelGrid) -> TriangleMesh:
    """Flip all faces when most face normals oppose the direction in which the field increases"""
    if mesh.is_empty:
        return mesh
    gradient = np.stack(np.gradient(grid.values, *grid.voxel_size), axis=-1)
    ijk = np.rint((mesh.face_centroids() - grid.bounds_min) / grid.voxel_size).astype(np.int64)
    ijk = np.clip(ijk, 0, np.asarray(grid.resolution) - 1)
    g = gradient[ijk[:, 0], ijk[:, 1], ijk[:, 2]]
    agreement = np.sign((mesh.face_normals() * g).sum(axis=-1))
    if agreement.sum() < 0:
        return TriangleMesh(mesh.vertices, mesh.faces[:, ::-1].copy())
    return mesh


def marching_cubes(grid: VoxelGrid, iso: float = 0.0) -> TriangleMesh:
    """Iso-surface of ``grid`` in world coordinates, normals pointing toward increasing values"""
    if grid.values.min() > iso or grid.values.max() < iso:
        logger.warning(f"Grid does not straddle iso={iso}; returning an empty mesh")
        return TriangleMesh.empty()
    vertices, faces = mcubes.marching_cubes(grid.values, iso)
    if len(faces) == 0:
        logger.warning("Marching cubes produced no faces")
        return TriangleMesh.empty()
    mesh = TriangleMesh(grid.index_to_world(np.asarray(vertices, dtype=np.float64)), faces)
    mesh = clean_mesh(mesh)
    return orient_outward(mesh, grid)


def crop_mesh(mesh: TriangleMesh, box_min: Vec3, box_max: Vec3) -> TriangleMesh:
    """Keep faces whose three vertices all lie inside the box; vertices are reindexed"""
    lo = np.asarray(box_min, dtype=np.float64)
    hi = np.asarray(box_max, dtype=np.float64)
    if np.any(lo >= hi):
        raise ConfigurationError("Crop box must satisfy min < max")
    if mesh.is_empty:
        return TriangleMesh.empty()
    inside = np.all((mesh.vertices >= lo) & (mesh.vertices <= hi), axis=-1)
    return _reindex(mesh.vertices, mesh.faces[inside[mesh.faces].all(axis=-1)])


def write_obj(mesh: TriangleMesh, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if mesh.is_empty:
        path.write_text("# empty mesh\n", encoding="utf-8")
        return path
    tm = trimesh.Trimesh(vertices=mesh.vertices, faces=mesh.faces, process=False)
    path.write_text(trimesh.exchange.obj.export_obj(tm, include_normals=False, include_texture=False, digits=12), encoding="utf-8")
    return path


def read_obj(path: Union[str, Path]) -> TriangleMesh:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Mesh not found: {path}")
    if not any(line.startswith("f ") for line in path.read_text(encoding="utf-8").splitlines()):
        return TriangleMesh.empty()
    loaded = trimesh.load(path, file_type="obj", process=False, force="mesh")
    if not isinstance(loaded, trimesh.Trimesh) or len(loaded.faces) == 0:
        return TriangleMesh.empty()
    return TriangleMesh(np.asarray(loaded.vertices), np.asarray(loaded.faces))


class MeshService:
    def __init__(self, config: Optional[MeshConfig] = None):
        self.config = config or MeshConfig()

    def extract(self, sdf_fn: Callable[[torch.Tensor], torch.Tensor], resolution: Optional[int] = None) -> TriangleMesh:
        res = resolution or self.config.resolution
        bound = self.config.bound
        grid = sample_grid(sdf_fn, res, (-bound,) * 3, (bound,) * 3, self.config.batch_size)
        mesh = marching_cubes(grid)
        logger.info(f"Extracted mesh at {res}^3: {len(mesh.vertices)} vertices, {len(mesh.faces)} faces")
        return mesh

    def extract_identity(self, model, identity: str, stage: Optional[int] = None,
                         resolution: Optional[int] = None) -> TriangleMesh:
        """Mesh of the active SDF of one identity"""
        stage = model.stage if stage is None else stage
        try:
            z_s = model.codebook.shape_code(identity).detach()

            def sdf_fn(points: torch.Tensor) -> torch.Tensor:
                return model.geometry.sdf(points, z_s.expand(points.shape[0], -1), stage)

            return self.extract(sdf_fn, resolution)
        except Exception as e:
            logger.error(f"Error extracting mesh for {identity}: {e}")
            raise
