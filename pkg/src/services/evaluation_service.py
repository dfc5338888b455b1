"""Chamfer distance, masked PSNR and the per-identity metrics report."""
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from sklearn.neighbors import KDTree

from src.config.logging_config import get_logger
from src.models.config import MeshConfig, MetricConfig, TrainConfig
from src.models.manifest import DatasetManifest
from src.models.metrics import IdentityMetrics, MetricsReport
from src.services.dataset_service import load_view, split_views
from src.services.mesh_service import MeshService, TriangleMesh, crop_mesh, read_obj
from src.services.render_service import RenderService
from src.utils.exceptions import DataError

logger = get_logger(__name__)


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)

    def __len__(self) -> int:
        return len(self.points)


def sample_surface_points(mesh: TriangleMesh, n: int, rng: np.random.Generator) -> PointCloud:
    """Area-weighted uniform samples: a face drawn by area, then a uniform barycentric point on it"""
    if mesh.is_empty:
        raise DataError("Cannot sample points from an empty mesh")
    if n == 0:
        return PointCloud(np.zeros((0, 3)))
    areas = mesh.face_areas()
    faces = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a, b, c = (mesh.vertices[mesh.faces[faces, k]] for k in range(3))
    points = (1.0 - r1)[:, None] * a + (r1 * (1.0 - r2))[:, None] * b + (r1 * r2)[:, None] * c
    return PointCloud(points)


def _directed_mean_squared(source: np.ndarray, target: np.ndarray) -> float:
    _, index = KDTree(target).query(source, k=1)
    nearest = target[index[:, 0]]
    return float(((source - nearest) ** 2).sum(axis=-1).mean())


def chamfer_distance(a: PointCloud, b: PointCloud) -> float:
    """mean_a min_b ‖a − b‖² + mean_b min_a ‖b − a‖²"""
    if len(a) == 0 or len(b) == 0:
        raise DataError("Chamfer distance needs two non-empty point clouds")
    return _directed_mean_squared(a.points, b.points) + _directed_mean_squared(b.points, a.points)


def psnr(image: np.ndarray, gt_image: np.ndarray, mask: Optional[np.ndarray] = None, cap: float = 99.0) -> float:
    """10 log10(1 / MSE) over the masked pixels (all channels), capped"""
    image = np.asarray(image, dtype=np.float64)
    gt_image = np.asarray(gt_image, dtype=np.float64)
    if image.shape != gt_image.shape:
        raise DataError(f"Image shapes differ: {image.shape} vs {gt_image.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise DataError("PSNR mask selects no pixels")
        image, gt_image = image[mask], gt_image[mask]
    mse = float(((image - gt_image) ** 2).mean())
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * np.log10(1.0 / mse))


class EvaluationService:
    def __init__(
        self,
        train: Optional[TrainConfig] = None,
        mesh: Optional[MeshConfig] = None,
        metrics: Optional[MetricConfig] = None,
    ):
        self.train = train or TrainConfig()
        self.metrics = metrics or MetricConfig()
        self.mesh_service = MeshService(mesh)
        self.render_service = RenderService(self.train, self.metrics.render_chunk)

    def chamfer_to_ground_truth(
        self, predicted: TriangleMesh, manifest: DatasetManifest, identity: str, rng: np.random.Generator
    ) -> Optional[float]:
        record = manifest.identity(identity)
        if record.gt_mesh is None:
            return None
        gt = read_obj(manifest.resolve(record.gt_mesh))
        if manifest.crop_box is not None:
            box = manifest.crop_box
            predicted, gt = crop_mesh(predicted, box.min, box.max), crop_mesh(gt, box.min, box.max)
        if predicted.is_empty or gt.is_empty:
            logger.warning(f"Empty mesh for {identity} after cropping; Chamfer skipped")
            return None
        n = self.metrics.surface_samples
        return chamfer_distance(sample_surface_points(predicted, n, rng), sample_surface_points(gt, n, rng))

    def view_psnr(self, model, manifest: DatasetManifest, identity: str, view_indices: Sequence[int],
                  stage: int) -> Optional[float]:
        """Mean masked PSNR over views; None when there are no views"""
        if not view_indices:
            return None
        record = manifest.identity(identity)
        values = []
        for index in view_indices:
            view = load_view(manifest, record, index)
            rendered = self.render_service.render(model, view.camera, identity, stage=stage,
                                                  background=manifest.background_color)
            values.append(psnr(rendered.color, view.image.cpu().numpy(), view.mask, cap=self.metrics.psnr_cap))
        return float(np.mean(values))

    def evaluate(
        self,
        model,
        manifest: DatasetManifest,
        identities: Optional[Sequence[str]] = None,
        stage: Optional[int] = None,
        seed: int = 0,
        with_psnr: bool = True,
    ) -> MetricsReport:
        stage = model.stage if stage is None else stage
        identities = list(identities) if identities is not None else [
            i for i in manifest.training_identity_ids if i in model.codebook
        ]
        rows: List[IdentityMetrics] = []
        for position, identity in enumerate(identities):
            try:
                rng = np.random.default_rng([seed, position])
                mesh = self.mesh_service.extract_identity(model, identity, stage)
                cd = self.chamfer_to_ground_truth(mesh, manifest, identity, rng) if not mesh.is_empty else None
                record = manifest.identity(identity)
                split = split_views(record, self.train.held_out_views, self.train.views_per_identity, self.train.seed)
                row = IdentityMetrics(
                    identity=identity,
                    views=len(split["train"]),
                    cd=cd,
                    psnr_train=self.view_psnr(model, manifest, identity, split["train"], stage) if with_psnr else None,
                    psnr_novel=self.view_psnr(model, manifest, identity, split["held_out"], stage) if with_psnr else None,
                )
                rows.append(row)
                logger.info(f"Metrics for {identity}: {row.model_dump()}")
            except Exception as e:
                logger.error(f"Error evaluating {identity}: {e}")
                raise
        return MetricsReport(stage=stage, identities=rows, aggregate=aggregate_metrics(rows))


def aggregate_metrics(rows: Sequence[IdentityMetrics]) -> IdentityMetrics:
    def mean(values):
        values = [v for v in values if v is not None]
        return float(np.mean(values)) if values else None

    return IdentityMetrics(
        identity="all",
        views=sum(r.views for r in rows),
        cd=mean(r.cd for r in rows),
        psnr_train=mean(r.psnr_train for r in rows),
        psnr_novel=mean(r.psnr_novel for r in rows),
    )
