from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import torch
from tqdm import tqdm

from src.config.logging_config import get_logger
from src.models.config import Config
from src.models.manifest import DatasetManifest
from src.neural.diffcore import (
    adam_step,
    backward,
    configure_precision,
    lr_schedule,
    make_adam,
    named_trainable,
    restore_optimizer_state,
)
from src.neural.losses import LossBreakdown, LossLog, compute_loss_breakdown, probe_regularizers
from src.neural.model import HeadModel
from src.neural.renderer import BOUNDING_RADIUS, RayBundle, generate_rays, render_rays
from src.services.checkpoint_service import CheckpointService, LoadedCheckpoint
from src.services.dataset_service import TrainingSet
from src.utils.exceptions import ContractError, DataError, NumericFailure, UsageError

logger = get_logger(__name__)

STAGE1_GROUPS = ("shape_codes", "color_codes", "deformation", "template", "radiance", "density")

StepCallback = Callable[[int, int, float], None]


@dataclass
class RayBatch:
    identity_position: torch.Tensor  # (N,) index into the sampled identity list
    view: torch.Tensor  # (N,)
    pixel: torch.Tensor  # (N, 2) as (u, v)
    rays: RayBundle
    gt_color: torch.Tensor  # (N, 3)

    def __len__(self) -> int:
        return self.identity_position.shape[0]


@dataclass
class TrainResult:
    model: HeadModel
    checkpoint: Path
    stage: int
    losses: List[float] = field(default_factory=list)
    color_losses: List[float] = field(default_factory=list)

    @property
    def initial_loss(self) -> float:
        return self.losses[0] if self.losses else float("nan")

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")


def step_generator(seed: int, step: int) -> torch.Generator:
    """Random stream of one training step, derived only from (seed, step)"""
    return torch.Generator().manual_seed((seed * 1_000_003 + step) % (2 ** 63))


def sample_ray_batch(
    dataset: TrainingSet, identities: Sequence[str], n: int, generator: torch.Generator
) -> RayBatch:
    """Draw ``n`` rays uniformly over identity, then view, then pixel"""
    identities = list(identities)
    if not identities or any(not dataset.views.get(i) for i in identities):
        raise DataError("Cannot sample rays from an empty dataset")
    view_counts = torch.tensor([len(dataset.views[i]) for i in identities])

    identity_position = torch.randint(len(identities), (n,), generator=generator)
    view = (torch.rand(n, generator=generator, dtype=torch.float64) * view_counts[identity_position]).long()
    view = torch.minimum(view, view_counts[identity_position] - 1)
    pixel_draw = torch.rand(n, generator=generator, dtype=torch.float64)

    dtype = torch.get_default_dtype()
    origins = torch.empty(n, 3, dtype=dtype)
    directions = torch.empty(n, 3, dtype=dtype)
    near = torch.empty(n, dtype=dtype)
    far = torch.empty(n, dtype=dtype)
    hit = torch.empty(n, dtype=torch.bool)
    gt_color = torch.empty(n, 3, dtype=dtype)
    pixel = torch.empty(n, 2, dtype=torch.long)

    keys = identity_position * (int(view_counts.max()) + 1) + view
    for key in torch.unique(keys).tolist():
        rows = (keys == key).nonzero(as_tuple=True)[0]
        data = dataset.views[identities[int(identity_position[rows[0]])]][int(view[rows[0]])]
        w, h = data.camera.width, data.camera.height
        flat = torch.minimum((pixel_draw[rows] * (w * h)).long(), torch.tensor(w * h - 1))
        uv = torch.stack([flat % w, flat // w], dim=-1)
        rays = generate_rays(data.camera, uv)
        origins[rows], directions[rows], near[rows], far[rows], hit[rows] = (
            rays.origins, rays.directions, rays.near, rays.far, rays.hit
        )
        gt_color[rows] = data.image[uv[:, 1], uv[:, 0]].to(dtype)
        pixel[rows] = uv
    return RayBatch(identity_position, view, pixel, RayBundle(origins, directions, near, far, hit), gt_color)


def uniform_ball(n: int, radius: float, generator: torch.Generator) -> torch.Tensor:
    direction = torch.randn(n, 3, generator=generator, dtype=torch.get_default_dtype())
    direction = direction / torch.linalg.norm(direction, dim=-1, keepdim=True).clamp_min(1e-12)
    r = radius * torch.rand(n, 1, generator=generator, dtype=direction.dtype) ** (1.0 / 3.0)
    return direction * r


class Trainer:
    """Two-stage coarse-to-fine training.

    Flow:
    - Stage 1 fits template, deformation, rendering network, codes and density
      jointly over every training identity.
    - Promotion grows the model to stage 2 (displacement network, deeper and
      wider-encoded rendering network) without changing its output.
    - Stage 2 refines one identity with the template frozen by default.
    - Unseen identities get zero codes and are fitted against the frozen template.
    """

    def __init__(
        self,
        config: Config,
        output_dir: Union[str, Path],
        checkpoint_service: Optional[CheckpointService] = None,
        progress: bool = True,
        on_step: Optional[StepCallback] = None,
    ):
        self.config = config
        self.train = config.train
        self.output_dir = Path(output_dir)
        self.checkpoints = checkpoint_service or CheckpointService()
        self.progress = progress
        self.on_step = on_step
        configure_precision(self.train.dtype)

    @property
    def checkpoint_dir(self) -> Path:
        return self.output_dir / "checkpoints"

    @property
    def log_dir(self) -> Path:
        return self.output_dir / "logs"

    # ------------------------------------------------------------------
    # One optimisation step
    # ------------------------------------------------------------------

    def compute_step_loss(
        self, model: HeadModel, dataset: TrainingSet, identities: Sequence[str], stage: int, step: int
    ) -> LossBreakdown:
        generator = step_generator(self.train.seed, step)
        batch = sample_ray_batch(dataset, identities, self.train.rays_per_step, generator)
        codebook_index = model.codebook.indices(identities)
        shape_index = codebook_index[batch.identity_position]
        result = render_rays(
            model,
            batch.rays,
            shape_index,
            stage,
            generator,
            n_coarse=self.train.n_coarse,
            n_fine=self.train.n_fine,
            perturb=self.train.perturb,
            background=dataset.background,
        )

        count = self.train.regularizer_count
        n_uniform = int(round(count * self.train.eikonal_uniform_fraction))
        n_ray = count - n_uniform
        uniform_points = uniform_ball(n_uniform, BOUNDING_RADIUS, generator)
        uniform_index = codebook_index[torch.randint(len(identities), (n_uniform,), generator=generator)]
        samples = result.samples.points.detach()
        flat = samples.reshape(-1, 3)
        pick = torch.randint(flat.shape[0], (n_ray,), generator=generator)
        ray_index = shape_index.unsqueeze(-1).expand(samples.shape[:-1]).reshape(-1)[pick]
        probe_points = torch.cat([uniform_points, flat[pick]], dim=0)
        probe_index = torch.cat([uniform_index, ray_index], dim=0)
        probe = probe_regularizers(model, probe_points, probe_index, stage)

        return compute_loss_breakdown(
            model, result.output.color, batch.gt_color, probe, shape_index, self.train.loss_weights, stage
        )

    # ------------------------------------------------------------------
    # Stage loop
    # ------------------------------------------------------------------

    def run_stage(
        self,
        model: HeadModel,
        dataset: TrainingSet,
        identities: Sequence[str],
        stage: int,
        total_steps: int,
        trainable: Sequence[str],
        checkpoint_path: Path,
        log_path: Path,
        start_step: int = 0,
        optimizer_state: Optional[Dict[str, dict]] = None,
        stop_step: Optional[int] = None,
    ) -> TrainResult:
        model.set_trainable(trainable)
        named = named_trainable(model)
        optimizer = make_adam([p for _, p in named], self.train.lr0)
        restore_optimizer_state(optimizer, named, optimizer_state)
        stop_step = total_steps if stop_step is None else min(stop_step, total_steps)
        result = TrainResult(model=model, checkpoint=checkpoint_path, stage=stage)
        last_good = checkpoint_path.with_name(checkpoint_path.stem + ".last_good.ckpt")

        logger.info(
            f"Stage {stage}: steps {start_step}..{stop_step} of {total_steps}, "
            f"{len(identities)} identities, training {', '.join(trainable)}"
        )
        with LossLog(log_path, append=start_step > 0) as loss_log:
            for step in tqdm(range(start_step, stop_step), desc=f"stage {stage}", disable=not self.progress):
                lr = lr_schedule(step, total_steps, self.train.lr0, self.train.lr_final_factor)
                try:
                    breakdown = self.compute_step_loss(model, dataset, identities, stage, step)
                except NumericFailure as e:
                    logger.error(f"Stage {stage} step {step}: {e}; writing last good checkpoint {last_good}")
                    self._save(last_good, model, step, optimizer, trainable, identities, total_steps)
                    raise
                optimizer.zero_grad(set_to_none=True)
                backward(breakdown.total, [p for _, p in named])
                adam_step(optimizer, lr)

                total = float(breakdown.total.detach())
                result.losses.append(total)
                result.color_losses.append(float(breakdown.col.detach()))
                loss_log.write(step, lr, breakdown)
                if step % self.train.log_every == 0:
                    logger.info(f"Stage {stage} step {step}: total {total:.6f} (col {result.color_losses[-1]:.6f})")
                if self.on_step is not None:
                    self.on_step(stage, step + 1, total)
                if (step + 1) % self.train.checkpoint_every == 0 and step + 1 < stop_step:
                    self._save(checkpoint_path, model, step + 1, optimizer, trainable, identities, total_steps)

        self._save(checkpoint_path, model, stop_step, optimizer, trainable, identities, total_steps)
        return result

    def _save(self, path: Path, model: HeadModel, step: int, optimizer, trainable: Sequence[str],
              identities: Sequence[str], total_steps: int) -> None:
        self.checkpoints.save(
            path,
            model,
            self.train.loss_weights,
            step=step,
            train=self.train,
            optimizer=optimizer,
            trainable_groups=trainable,
            dtype=self.train.dtype,
            trained_identities=identities,
            total_steps=total_steps,
        )

    # ------------------------------------------------------------------
    # Stages
    # ------------------------------------------------------------------

    def train_stage1(self, manifest: DatasetManifest, identities: Optional[Sequence[str]] = None,
                     stop_step: Optional[int] = None) -> TrainResult:
        identities = list(identities or manifest.training_identity_ids)
        dataset = TrainingSet(manifest, identities, self.train)
        torch.manual_seed(self.train.seed)
        model = HeadModel(self.config.model, identities, stage=1)
        return self.run_stage(
            model,
            dataset,
            identities,
            stage=1,
            total_steps=self.train.stage1_steps,
            trainable=STAGE1_GROUPS,
            checkpoint_path=self.checkpoint_dir / "stage1.ckpt",
            log_path=self.log_dir / "stage1_loss.csv",
            stop_step=stop_step,
        )

    def promote_to_stage2(self, model: HeadModel) -> HeadModel:
        torch.manual_seed(self.train.seed + 1)
        return model.promote()

    def stage2_groups(self, model: HeadModel) -> List[str]:
        groups = ["radiance", "density"]
        if self.train.use_displacement:
            groups.append("displacement")
        if self.train.finetune_deformation_stage2:
            groups.append("deformation")
        if self.train.finetune_shape_code_stage2:
            groups.append("shape_codes")
        if self.train.finetune_color_code_stage2:
            groups.append("color_codes")
        if not self.train.freeze_template_stage2:
            groups.append("template")
        return groups

    def train_stage2(self, identity: str, checkpoint: Union[str, Path, LoadedCheckpoint],
                     manifest: DatasetManifest, stop_step: Optional[int] = None) -> TrainResult:
        loaded = checkpoint if isinstance(checkpoint, LoadedCheckpoint) else self.checkpoints.load(checkpoint)
        model = loaded.model
        model.codebook.index(identity)
        if model.stage == 1:
            self.promote_to_stage2(model)
        dataset = TrainingSet(manifest, [identity], self.train)
        return self.run_stage(
            model,
            dataset,
            [identity],
            stage=2,
            total_steps=self.train.stage2_steps,
            trainable=self.stage2_groups(model),
            checkpoint_path=self.checkpoint_dir / f"stage2_{identity}.ckpt",
            log_path=self.log_dir / f"stage2_{identity}_loss.csv",
            stop_step=stop_step,
        )

    def fit_unseen_identity(self, identity: str, manifest: DatasetManifest,
                            template_checkpoint: Union[str, Path, LoadedCheckpoint]) -> TrainResult:
        """Zero codes for a new identity; codes and deformation are fitted, the template stays fixed"""
        loaded = (template_checkpoint if isinstance(template_checkpoint, LoadedCheckpoint)
                  else self.checkpoints.load(template_checkpoint))
        model = loaded.model
        if model.stage != 1:
            raise ContractError("Unseen identities are fitted against a stage-1 template checkpoint")
        record = manifest.identity(identity)
        if not record.views:
            raise DataError(f"Identity {identity} has no posed views")
        model.add_identity(identity)
        dataset = TrainingSet(manifest, [identity], self.train)
        result = self.run_stage(
            model,
            dataset,
            [identity],
            stage=1,
            total_steps=self.train.fit_steps,
            trainable=("shape_codes", "color_codes", "deformation"),
            checkpoint_path=self.checkpoint_dir / f"fit_{identity}.ckpt",
            log_path=self.log_dir / f"fit_{identity}_loss.csv",
        )
        if not self.train.refine_unseen:
            return result
        refined = self.train_stage2(identity, LoadedCheckpoint(model, loaded.header), manifest)
        refined.losses = result.losses + refined.losses
        refined.color_losses = result.color_losses + refined.color_losses
        return refined

    def resume(self, checkpoint: Union[str, Path], manifest: DatasetManifest,
               identities: Optional[Sequence[str]] = None, stop_step: Optional[int] = None) -> TrainResult:
        """Continue a run from a checkpoint that carries optimizer state.

        The identities and step count come from the checkpoint header; asking for
        other identities than the ones the run was optimising is a UsageError.
        """
        path = Path(checkpoint)
        loaded = self.checkpoints.load(path)
        model = loaded.model
        header = loaded.header
        recorded = list(header.trained_identities) or [
            i for i in manifest.training_identity_ids if i in model.codebook
        ]
        if identities and list(identities) != recorded:
            raise UsageError(
                f"Checkpoint {path} was trained on {', '.join(recorded)}; "
                f"cannot resume it on {', '.join(identities)}"
            )
        identities = recorded
        if header.total_steps is not None:
            total = header.total_steps
        else:
            total = self.train.stage1_steps if loaded.stage == 1 else self.train.stage2_steps
        dataset = TrainingSet(manifest, identities, self.train)
        log_path = self.log_dir / f"{path.stem}_loss.csv"
        return self.run_stage(
            model,
            dataset,
            identities,
            stage=loaded.stage,
            total_steps=total,
            trainable=loaded.header.trainable_groups or STAGE1_GROUPS,
            checkpoint_path=path,
            log_path=log_path,
            start_step=loaded.step,
            optimizer_state=loaded.optimizer_state,
            stop_step=stop_step,
        )
