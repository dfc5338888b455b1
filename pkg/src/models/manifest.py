"""Dataset manifest and synthetic scene schemas."""
from pathlib import Path
from typing import List, Optional, Tuple

from pydantic import Field, PrivateAttr, field_validator, model_validator

from src.models.config import StrictModel
from src.utils.exceptions import IdentityLookupError

MANIFEST_VERSION = 1


class CropBox(StrictModel):
    min: Tuple[float, float, float]
    max: Tuple[float, float, float]

    @model_validator(mode="after")
    def _check_bounds(self):
        if any(lo >= hi for lo, hi in zip(self.min, self.max)):
            raise ValueError("crop box min must be below max on every axis")
        return self


class ViewRecord(StrictModel):
    image: str
    intrinsics: List[List[float]]
    cam_to_world: List[List[float]]
    mask: Optional[str] = None
    array: Optional[str] = None

    @field_validator("intrinsics")
    @classmethod
    def _check_intrinsics(cls, value):
        if len(value) != 3 or any(len(row) != 3 for row in value):
            raise ValueError("intrinsics must be a 3x3 matrix")
        return value

    @field_validator("cam_to_world")
    @classmethod
    def _check_pose(cls, value):
        if len(value) != 4 or any(len(row) != 4 for row in value):
            raise ValueError("cam_to_world must be a 4x4 matrix")
        return value


class IdentityRecord(StrictModel):
    id: str
    views: List[ViewRecord]
    gt_mesh: Optional[str] = None
    held_out: bool = False


class DatasetManifest(StrictModel):
    format_version: int = MANIFEST_VERSION
    scene_scale: str = "heads normalised to the unit ball; cameras in the same units"
    background_color: List[float] = Field(default_factory=lambda: [1.0, 1.0, 1.0])
    crop_box: Optional[CropBox] = None
    identities: List[IdentityRecord]

    _root: Optional[Path] = PrivateAttr(None)

    @property
    def root(self) -> Optional[Path]:
        """Directory the relative paths resolve against (set by the loader)"""
        return self._root

    def resolve(self, relative: str) -> Path:
        return (self._root or Path(".")) / relative

    @model_validator(mode="after")
    def _check_unique(self):
        ids = [record.id for record in self.identities]
        if len(set(ids)) != len(ids):
            raise ValueError("identity ids must be unique")
        return self

    def identity(self, identity_id: str) -> IdentityRecord:
        for record in self.identities:
            if record.id == identity_id:
                return record
        raise IdentityLookupError(f"Unknown identity: {identity_id}")

    @property
    def identity_ids(self) -> List[str]:
        return [record.id for record in self.identities]

    @property
    def training_identity_ids(self) -> List[str]:
        return [record.id for record in self.identities if not record.held_out]


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------

class IdentityShape(StrictModel):
    """Per-identity analytic head: stretched base ellipsoid plus a bump field and albedo"""
    id: str
    radius_scale: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    bump_amplitude: float = Field(0.02, ge=0)
    bump_frequency: float = Field(8.0, gt=0)
    bump_phase: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    albedo: Tuple[float, float, float] = (0.8, 0.6, 0.5)
    albedo_variation: float = Field(0.1, ge=0)
    albedo_frequency: float = Field(3.0, gt=0)
    held_out: bool = False


class SceneSpec(StrictModel):
    base_radii: Tuple[float, float, float] = (0.45, 0.55, 0.45)
    background_color: List[float] = Field(default_factory=lambda: [1.0, 1.0, 1.0])
    image_size: int = Field(64, gt=1)
    focal_scale: float = Field(1.8, gt=0)  # focal length in units of the image width
    camera_distance: float = Field(3.0, gt=1.5)
    azimuth_range: float = 60.0
    elevation_range: float = 15.0
    crop_box: CropBox = Field(default_factory=lambda: CropBox(min=(-1.0, -1.0, 0.0), max=(1.0, 1.0, 1.0)))
    identities: List[IdentityShape] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_bumps(self):
        for shape in self.identities:
            min_radius = min(r * s for r, s in zip(self.base_radii, shape.radius_scale))
            if shape.bump_amplitude >= 0.2 * min_radius:
                raise ValueError(
                    f"bump amplitude of {shape.id} must stay below 0.2 x its smallest radius ({min_radius:.3f})"
                )
        return self
