import io
from functools import lru_cache
from pathlib import Path
from typing import Optional

from fastapi import APIRouter, HTTPException, Query
from fastapi.responses import Response
from PIL import Image

from src.config.logging_config import get_logger
from src.config.settings import settings
from src.services.checkpoint_service import CheckpointService, LoadedCheckpoint
from src.services.dataset_service import load_dataset, load_view
from src.services.render_service import RenderService
from src.utils.exceptions import DataError, DeformSdfError, IdentityLookupError, UsageError
from src.utils.image_utils import to_uint8

logger = get_logger(__name__)

router = APIRouter()


def _checkpoint_path(checkpoint: Optional[str]) -> Path:
    return Path(checkpoint) if checkpoint else Path(settings.checkpoint_dir) / "stage1.ckpt"


@lru_cache(maxsize=4)
def _load(path: str, mtime: float) -> LoadedCheckpoint:
    return CheckpointService().load(path)


def load_checkpoint(checkpoint: Optional[str]) -> LoadedCheckpoint:
    path = _checkpoint_path(checkpoint)
    if not path.is_file():
        raise HTTPException(status_code=404, detail=f"Checkpoint not found: {path}")
    try:
        return _load(str(path), path.stat().st_mtime)
    except DataError as e:
        raise HTTPException(status_code=400, detail=str(e))


@router.get("/identities")
def list_identities(checkpoint: Optional[str] = None):
    """Identities registered in a checkpoint's code book"""
    loaded = load_checkpoint(checkpoint)
    return {
        "checkpoint": str(_checkpoint_path(checkpoint)),
        "stage": loaded.stage,
        "step": loaded.step,
        "identities": loaded.model.identity_ids,
        "total": len(loaded.model.identity_ids),
    }


@router.get("/identities/{identity}/render")
def render_identity(
    identity: str,
    view: int = Query(0, ge=0),
    color_identity: Optional[str] = None,
    checkpoint: Optional[str] = None,
    data_dir: Optional[str] = None,
):
    """PNG of ``identity`` seen from one of its manifest views, optionally with another identity's color code"""
    loaded = load_checkpoint(checkpoint)
    model = loaded.model
    for name in (identity, color_identity):
        if name is not None and name not in model.codebook:
            raise HTTPException(status_code=404, detail=f"Identity {name} not found")
    try:
        manifest = load_dataset(data_dir or settings.data_dir)
        record = manifest.identity(identity)
        if view >= len(record.views):
            raise UsageError(f"Identity {identity} has {len(record.views)} views; view {view} requested")
        camera = load_view(manifest, record, view).camera
        rendered = RenderService().render(
            model, camera, identity, color_identity=color_identity, background=manifest.background_color
        )
    except IdentityLookupError as e:
        raise HTTPException(status_code=404, detail=str(e))
    except (DataError, UsageError) as e:
        raise HTTPException(status_code=400, detail=str(e))
    except DeformSdfError as e:
        logger.error(f"Error rendering {identity}: {e}")
        raise HTTPException(status_code=500, detail=str(e))

    buffer = io.BytesIO()
    Image.fromarray(to_uint8(rendered.color)).save(buffer, format="PNG")
    return Response(content=buffer.getvalue(), media_type="image/png")
