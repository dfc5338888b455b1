"""
Dataset manifest loading and the in-memory training set.

A dataset directory holds ``manifest.json`` plus the images it references by
relative path. Cameras are stored row-major: 3x3 intrinsics in pixels and a
4x4 camera-to-world pose in scene units.
"""
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import torch
from pydantic import ValidationError

from src.config.logging_config import get_logger
from src.models.config import TrainConfig
from src.models.manifest import DatasetManifest, IdentityRecord, ViewRecord
from src.neural.renderer import Camera
from src.utils.exceptions import DataError
from src.utils.image_utils import image_size, load_array, load_mask, load_png

logger = get_logger(__name__)

MANIFEST_NAME = "manifest.json"
ORTHONORMAL_TOLERANCE = 1e-8


def _manifest_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path / MANIFEST_NAME if path.is_dir() else path


def normalize_pose(pose: Sequence[Sequence[float]], label: str) -> List[List[float]]:
    """Re-orthonormalise the rotation of a camera-to-world pose, rejecting anything beyond tolerance"""
    matrix = np.asarray(pose, dtype=np.float64)
    if not np.all(np.isfinite(matrix)):
        raise DataError(f"{label}: camera pose contains non-finite values")
    if not np.allclose(matrix[3], [0.0, 0.0, 0.0, 1.0]):
        raise DataError(f"{label}: last row of the camera pose must be [0, 0, 0, 1]")
    rotation = matrix[:3, :3]
    if np.abs(rotation.T @ rotation - np.eye(3)).max() > ORTHONORMAL_TOLERANCE:
        raise DataError(f"{label}: camera rotation is not orthonormal")
    if np.linalg.det(rotation) <= 0:
        raise DataError(f"{label}: camera rotation has det = -1 (reflection)")
    u, _, vt = np.linalg.svd(rotation)
    matrix[:3, :3] = u @ vt
    return matrix.tolist()


def load_dataset(path: Union[str, Path]) -> DatasetManifest:
    """Validate a manifest: readable JSON, decodable images, valid cameras, consistent image sizes"""
    manifest_path = _manifest_path(path)
    if not manifest_path.is_file():
        raise DataError(f"Manifest not found: {manifest_path}")
    try:
        manifest = DatasetManifest.model_validate(json.loads(manifest_path.read_text(encoding="utf-8")))
    except (ValidationError, json.JSONDecodeError) as e:
        raise DataError(f"Invalid manifest {manifest_path}: {e}") from e
    manifest._root = manifest_path.parent

    for record in manifest.identities:
        if not record.views:
            raise DataError(f"Identity {record.id} has no views")
        sizes = set()
        for index, view in enumerate(record.views):
            label = f"{record.id} view {index}"
            view.cam_to_world = normalize_pose(view.cam_to_world, label)
            size = image_size(manifest.resolve(view.image))
            try:
                camera_from_view(view, size)
            except DataError as e:
                raise DataError(f"{label}: {e}") from e
            sizes.add(size)
            if view.mask is not None and not manifest.resolve(view.mask).is_file():
                raise DataError(f"{label}: mask not found: {manifest.resolve(view.mask)}")
            if view.array is not None and not manifest.resolve(view.array).is_file():
                raise DataError(f"{label}: image array not found: {manifest.resolve(view.array)}")
        if len(sizes) != 1:
            raise DataError(f"Identity {record.id} mixes image sizes {sorted(sizes)}")
    logger.info(f"Loaded dataset {manifest_path} with {len(manifest.identities)} identities")
    return manifest


def write_manifest(manifest: DatasetManifest, path: Union[str, Path]) -> Path:
    manifest_path = _manifest_path(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    manifest_path.write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    return manifest_path


def camera_from_view(view: ViewRecord, size) -> Camera:
    width, height = size
    return Camera(np.asarray(view.intrinsics), np.asarray(view.cam_to_world), width, height)


@dataclass
class ViewData:
    identity: str
    view_index: int
    camera: Camera
    image: torch.Tensor  # (H, W, 3)
    mask: Optional[np.ndarray] = None  # (H, W) bool

    @property
    def pixel_count(self) -> int:
        return self.camera.width * self.camera.height


def load_view(manifest: DatasetManifest, record: IdentityRecord, index: int) -> ViewData:
    """Decode one view; the float array is preferred over the 8-bit PNG when the manifest lists one"""
    view = record.views[index]
    if view.array:
        image = load_array(manifest.resolve(view.array), image_size(manifest.resolve(view.image)))
    else:
        image = load_png(manifest.resolve(view.image))
    mask = load_mask(manifest.resolve(view.mask)) if view.mask else None
    camera = camera_from_view(view, (image.shape[1], image.shape[0]))
    return ViewData(record.id, index, camera, torch.as_tensor(image, dtype=torch.get_default_dtype()), mask)


def split_views(
    record: IdentityRecord, held_out_views: int, views_per_identity: Optional[int], seed: int
) -> Dict[str, List[int]]:
    """
    The last ``held_out_views`` views are held out for novel-view PSNR. Training
    uses the rest, or a seeded random subset of ``views_per_identity`` of them.
    """
    total = len(record.views)
    held = min(held_out_views, max(total - 1, 0))
    train = list(range(total - held))
    if views_per_identity is not None and views_per_identity < len(train):
        rng = np.random.default_rng([seed, sum(ord(c) for c in record.id)])
        train = sorted(int(i) for i in rng.choice(train, size=views_per_identity, replace=False))
    return {"train": train, "held_out": list(range(total - held, total))}


class TrainingSet:
    """Decoded training views of a set of identities; never mutated after construction"""

    def __init__(self, manifest: DatasetManifest, identities: Sequence[str], config: TrainConfig):
        if not identities:
            raise DataError("No identities selected for training")
        self.manifest = manifest
        self.identities: List[str] = list(identities)
        self.views: Dict[str, List[ViewData]] = {}
        self.held_out: Dict[str, List[ViewData]] = {}
        for identity in self.identities:
            record = manifest.identity(identity)
            split = split_views(record, config.held_out_views, config.views_per_identity, config.seed)
            self.views[identity] = [load_view(manifest, record, i) for i in split["train"]]
            self.held_out[identity] = [load_view(manifest, record, i) for i in split["held_out"]]
            if not self.views[identity]:
                raise DataError(f"Identity {identity} has no training views")
        logger.info(
            f"Training set: {len(self.identities)} identities, "
            f"{sum(len(v) for v in self.views.values())} training views"
        )

    def __len__(self) -> int:
        return len(self.identities)

    @property
    def background(self) -> List[float]:
        return list(self.manifest.background_color)
