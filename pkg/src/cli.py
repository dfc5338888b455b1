"""
Command line entry point: ``python -m src.cli <subcommand> [flags]``.

Every subcommand reads the run configuration (``--config``), honours
``--seed`` and writes under ``--out``. Exit codes: 0 success, 1 usage or
configuration error, 2 data error, 3 numeric failure.
"""
import argparse
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from src.config.logging_config import get_logger, setup_logging
from src.config.settings import settings
from src.models.config import Config, load_config
from src.models.manifest import DatasetManifest
from src.models.metrics import MetricsReport
from src.neural.diffcore import configure_precision
from src.neural.renderer import Camera
from src.services.checkpoint_service import CheckpointService, LoadedCheckpoint
from src.services.dataset_service import load_dataset, load_view
from src.services.evaluation_service import EvaluationService, aggregate_metrics
from src.services.gradcheck_service import GradcheckService
from src.services.mesh_service import MeshService, write_obj
from src.services.render_service import RenderService, color_transfer_render
from src.services.synthetic_service import generate_synthetic
from src.utils.env_utils import configure_torch
from src.utils.exceptions import CapabilityError, DataError, DeformSdfError, UsageError
from src.utils.image_utils import save_png

logger = get_logger(__name__)

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


class CliParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _identity_list(value: str) -> List[str]:
    return [item.strip() for item in value.split(",") if item.strip()]


def build_parser() -> CliParser:
    common = CliParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON")
    common.add_argument("--out", default=settings.output_dir, help="output directory")
    common.add_argument("--seed", type=int, help="overrides the configured seed")
    common.add_argument("--log-level", type=str.upper, choices=LOG_LEVELS, help="overrides LOG_LEVEL")

    data = CliParser(add_help=False)
    data.add_argument("--data", help="dataset directory (default <out>/dataset)")

    model = CliParser(add_help=False)
    model.add_argument("--checkpoint", help="checkpoint to read")
    model.add_argument("--stage", type=int, choices=(1, 2))

    parser = CliParser(prog="deformsdf", description="Deformable-template neural SDF reconstruction")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=CliParser)

    synth = sub.add_parser("synth", parents=[common], help="generate the synthetic desk dataset")
    synth.add_argument("--identities", type=int, default=3, help="number of training identities")
    synth.add_argument("--held-out", type=int, default=0, help="extra identities flagged for unseen fitting")
    synth.add_argument("--views", type=int, default=8)
    synth.add_argument("--size", type=int, default=64, help="image width and height")
    synth.add_argument("--resolution", type=int, default=64, help="ground-truth mesh grid resolution")
    synth.add_argument("--arrays", action="store_true", help="also write float .npy images")

    train = sub.add_parser("train-template", parents=[common, data], help="stage-1 training")
    train.add_argument("--identities", type=_identity_list)
    train.add_argument("--views", type=int)
    train.add_argument("--checkpoint", help="resume from this checkpoint")

    refine = sub.add_parser("refine", parents=[common, data], help="stage-2 refinement of one identity")
    refine.add_argument("identity")
    refine.add_argument("--views", type=int)
    refine.add_argument("--checkpoint", help="stage-1 checkpoint (default <out>/checkpoints/stage1.ckpt)")

    fit = sub.add_parser("fit-unseen", parents=[common, data], help="fit identities absent from training")
    fit.add_argument("--identities", type=_identity_list, help="default: identities flagged held_out")
    fit.add_argument("--views", type=int)
    fit.add_argument("--checkpoint", help="stage-1 template checkpoint")

    mesh = sub.add_parser("extract-mesh", parents=[common, model], help="marching cubes of one identity")
    mesh.add_argument("identity")
    mesh.add_argument("--resolution", type=int)

    render = sub.add_parser("render", parents=[common, data, model], help="render one identity")
    render.add_argument("identity")
    render.add_argument("view", help="manifest view index or a camera JSON file")

    evaluate = sub.add_parser("eval", parents=[common, data, model], help="Chamfer distance and PSNR")
    evaluate.add_argument("--identities", type=_identity_list)
    evaluate.add_argument("--resolution", type=int)
    evaluate.add_argument("--views", type=int)
    evaluate.add_argument("--no-psnr", action="store_true")

    transfer = sub.add_parser("transfer-color", parents=[common, data], help="stage-2 color transfer render")
    transfer.add_argument("--checkpoint", help="stage-2 checkpoint (default that of the geometry identity)")
    transfer.add_argument("geometry_identity")
    transfer.add_argument("color_identity")
    transfer.add_argument("--view", default="0")

    export = sub.add_parser("export", parents=[common], help="rewrite a checkpoint at another precision")
    export.add_argument("--checkpoint", help="source checkpoint (default <out>/checkpoints/stage1.ckpt)")
    export.add_argument("--precision", choices=("float32", "float64"), default="float32")

    sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every loss term")
    return parser


# ----------------------------------------------------------------------
# Helpers
# ----------------------------------------------------------------------


def resolve_config(args) -> Config:
    config = load_config(args.config or settings.config_path)
    train_updates = {}
    if args.seed is not None:
        train_updates["seed"] = args.seed
    if getattr(args, "views", None) is not None and args.command != "synth":
        train_updates["views_per_identity"] = args.views
    updates = {}
    if train_updates:
        updates["train"] = config.train.model_copy(update=train_updates)
    if getattr(args, "resolution", None) is not None and args.command != "synth":
        updates["mesh"] = config.mesh.model_copy(update={"resolution": args.resolution})
    return config.model_copy(update=updates) if updates else config


def data_dir(args, config: Config) -> Path:
    if getattr(args, "data", None):
        return Path(args.data)
    if config.paths.data_dir:
        return Path(config.paths.data_dir)
    return Path(args.out) / "dataset"


def checkpoint_for(args, identity: Optional[str] = None) -> Path:
    """--checkpoint, else the identity's stage-2 or fitted checkpoint, else the stage-1 template"""
    if getattr(args, "checkpoint", None):
        return Path(args.checkpoint)
    directory = Path(args.out) / "checkpoints"
    if identity is not None and getattr(args, "stage", None) != 1:
        for name in (f"stage2_{identity}.ckpt", f"fit_{identity}.ckpt"):
            if (directory / name).is_file():
                return directory / name
    return directory / "stage1.ckpt"


def load_model(path: Path, stage: Optional[int]) -> LoadedCheckpoint:
    loaded = CheckpointService().load(path)
    if stage is not None and stage > loaded.stage:
        raise CapabilityError(f"Stage-{stage} output requested from stage-{loaded.stage} checkpoint {path}")
    return loaded


def camera_for(manifest: DatasetManifest, identity: str, view: str) -> tuple:
    """(camera, label) from a manifest view index or a camera JSON file"""
    if view.isdigit():
        record = manifest.identity(identity)
        index = int(view)
        if index >= len(record.views):
            raise UsageError(f"Identity {identity} has {len(record.views)} views; view {index} requested")
        return load_view(manifest, record, index).camera, f"view{index:02d}"
    path = Path(view)
    if not path.is_file():
        raise DataError(f"Camera file not found: {path}")
    try:
        spec = json.loads(path.read_text(encoding="utf-8"))
        camera = Camera(np.asarray(spec["intrinsics"]), np.asarray(spec["cam_to_world"]),
                        int(spec["width"]), int(spec["height"]))
    except (KeyError, ValueError, TypeError) as e:
        raise DataError(f"Invalid camera file {path}: {e}") from e
    return camera, path.stem


def _write_json(payload: str, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(payload, encoding="utf-8")
    return path


# ----------------------------------------------------------------------
# Subcommands
# ----------------------------------------------------------------------


def cmd_synth(args, config: Config) -> int:
    seed = config.train.seed if args.seed is None else args.seed
    out = Path(args.out) / "dataset"
    manifest = generate_synthetic(
        out,
        n_identities=args.identities,
        n_views=args.views,
        image_size=args.size,
        seed=seed,
        n_held_out=args.held_out,
        mesh_resolution=args.resolution,
        write_arrays=args.arrays,
    )
    print(f"Wrote {len(manifest.identities)} identities to {out}")
    return 0


def cmd_train_template(args, config: Config) -> int:
    from src.backgroundworker.trainer import Trainer

    manifest = load_dataset(data_dir(args, config))
    trainer = Trainer(config, args.out)
    if args.checkpoint:
        result = trainer.resume(args.checkpoint, manifest, args.identities)
    else:
        result = trainer.train_stage1(manifest, args.identities)
    print(f"Stage 1: loss {result.initial_loss:.6f} -> {result.final_loss:.6f}; checkpoint {result.checkpoint}")
    return 0


def cmd_refine(args, config: Config) -> int:
    from src.backgroundworker.trainer import Trainer

    manifest = load_dataset(data_dir(args, config))
    trainer = Trainer(config, args.out)
    checkpoint = args.checkpoint or Path(args.out) / "checkpoints" / "stage1.ckpt"
    result = trainer.train_stage2(args.identity, checkpoint, manifest)
    print(f"Stage 2 {args.identity}: loss {result.initial_loss:.6f} -> {result.final_loss:.6f}; "
          f"checkpoint {result.checkpoint}")
    return 0


def cmd_fit_unseen(args, config: Config) -> int:
    from src.backgroundworker.trainer import Trainer

    manifest = load_dataset(data_dir(args, config))
    identities = args.identities or [r.id for r in manifest.identities if r.held_out]
    if not identities:
        raise UsageError("No identities to fit: pass --identities or flag identities as held_out")
    trainer = Trainer(config, args.out)
    checkpoint = args.checkpoint or Path(args.out) / "checkpoints" / "stage1.ckpt"
    for identity in identities:
        result = trainer.fit_unseen_identity(identity, manifest, checkpoint)
        print(f"Fitted {identity}: loss {result.initial_loss:.6f} -> {result.final_loss:.6f}; "
              f"checkpoint {result.checkpoint}")
    return 0


def cmd_extract_mesh(args, config: Config) -> int:
    loaded = load_model(checkpoint_for(args, args.identity), args.stage)
    stage = args.stage or loaded.stage
    mesh = MeshService(config.mesh).extract_identity(loaded.model, args.identity, stage)
    path = write_obj(mesh, Path(args.out) / "meshes" / f"{args.identity}_stage{stage}.obj")
    print(f"Wrote {path} ({len(mesh.vertices)} vertices, {len(mesh.faces)} faces)")
    return 0


def cmd_render(args, config: Config) -> int:
    loaded = load_model(checkpoint_for(args, args.identity), args.stage)
    manifest = load_dataset(data_dir(args, config))
    camera, label = camera_for(manifest, args.identity, args.view)
    rendered = RenderService(config.train, config.metrics.render_chunk).render(
        loaded.model, camera, args.identity, stage=args.stage, background=manifest.background_color
    )
    stem = Path(args.out) / "renders" / f"{args.identity}_{label}_stage{args.stage or loaded.stage}"
    save_png(rendered.color, stem.with_suffix(".png"))
    save_png(rendered.normal_image, stem.with_name(stem.name + "_normals.png"))
    print(f"Wrote {stem}.png")
    return 0


def cmd_eval(args, config: Config) -> int:
    manifest = load_dataset(data_dir(args, config))
    stage = args.stage or 1
    identities = args.identities or manifest.training_identity_ids
    service = EvaluationService(config.train, config.mesh, config.metrics)

    by_checkpoint: Dict[Path, List[str]] = {}
    for identity in identities:
        by_checkpoint.setdefault(checkpoint_for(args, identity if stage == 2 else None), []).append(identity)
    rows = []
    for path, group in by_checkpoint.items():
        loaded = load_model(path, stage)
        report = service.evaluate(loaded.model, manifest, group, stage=stage, seed=config.train.seed,
                                  with_psnr=not args.no_psnr)
        rows.extend(report.identities)
    report = MetricsReport(stage=stage, identities=rows, aggregate=aggregate_metrics(rows))
    path = _write_json(report.model_dump_json(indent=2), Path(args.out) / f"metrics_stage{stage}.json")
    for row in rows + [report.aggregate]:
        print(f"{row.identity}: CD {row.cd}  PSNR train {row.psnr_train}  PSNR novel {row.psnr_novel}")
    print(f"Wrote {path}")
    return 0


def cmd_transfer_color(args, config: Config) -> int:
    loaded = load_model(checkpoint_for(args, args.geometry_identity), 2)
    for identity in (args.geometry_identity, args.color_identity):
        loaded.model.codebook.index(identity)
    manifest = load_dataset(data_dir(args, config))
    camera, label = camera_for(manifest, args.geometry_identity, args.view)
    rendered = color_transfer_render(
        args.geometry_identity, args.color_identity, camera, loaded.model,
        RenderService(config.train, config.metrics.render_chunk), background=manifest.background_color,
    )
    path = save_png(rendered.color, Path(args.out) / "renders" /
                    f"transfer_{args.geometry_identity}_{args.color_identity}_{label}.png")
    print(f"Wrote {path}")
    return 0


def cmd_export(args, config: Config) -> int:
    source = checkpoint_for(args)
    target = Path(args.out) / "checkpoints" / f"{source.stem}.{args.precision}.ckpt"
    CheckpointService().export(source, target, precision=args.precision)
    print(f"Wrote {target}")
    return 0


def cmd_gradcheck(args, config: Config) -> int:
    report = GradcheckService(seed=config.train.seed).run()
    path = _write_json(report.model_dump_json(indent=2), Path(args.out) / "gradcheck.json")
    print(f"max relative error {report.first_order_max_rel_error:.3e} first order, "
          f"{report.second_order_max_rel_error:.3e} second order "
          f"({'passed' if report.passed else 'FAILED'}); wrote {path}")
    for term in report.terms:
        if term.unreached:
            print(f"  {term.name}: no gradient reaches {', '.join(term.unreached)}")
    return 0 if report.passed else 3


COMMANDS = {
    "synth": cmd_synth,
    "train-template": cmd_train_template,
    "refine": cmd_refine,
    "fit-unseen": cmd_fit_unseen,
    "extract-mesh": cmd_extract_mesh,
    "render": cmd_render,
    "eval": cmd_eval,
    "transfer-color": cmd_transfer_color,
    "export": cmd_export,
    "gradcheck": cmd_gradcheck,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        setup_logging(log_file=str(out / "logs" / "cli.log"), log_level=args.log_level)
        config = resolve_config(args)
        configure_torch(settings.torch_threads)
        configure_precision(config.train.dtype)
        return COMMANDS[args.command](args, config)
    except DeformSdfError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
