"""PNG and float-array image helpers (values in [0, 1], shape (H, W, 3))."""
from pathlib import Path
from typing import Optional, Union

import numpy as np
from PIL import Image

from src.utils.exceptions import DataError

PathLike = Union[str, Path]


def to_uint8(image: np.ndarray) -> np.ndarray:
    """round(255 · c) after clamping to [0, 1]"""
    return np.rint(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(image: np.ndarray, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path, format="PNG")
    return path


def save_mask(mask: np.ndarray, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(mask, dtype=bool).astype(np.uint8) * 255).save(path, format="PNG")
    return path


def load_png(path: PathLike) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Image not found: {path}")
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as e:
        raise DataError(f"Cannot decode image {path}: {e}") from e


def load_mask(path: PathLike) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Mask not found: {path}")
    with Image.open(path) as img:
        return np.asarray(img.convert("L")) > 127


def image_size(path: PathLike) -> tuple:
    """(width, height) without decoding the pixels"""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Image not found: {path}")
    try:
        with Image.open(path) as img:
            return img.size
    except OSError as e:
        raise DataError(f"Cannot decode image {path}: {e}") from e


def save_array(image: np.ndarray, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.save(path, np.asarray(image, dtype=np.float32))
    return path


def load_array(path: PathLike, size: Optional[tuple] = None) -> np.ndarray:
    """Float image written by ``save_array``, as float64 (H, W, 3); ``size`` is the expected (width, height)"""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Image array not found: {path}")
    try:
        image = np.load(path, allow_pickle=False).astype(np.float64)
    except (OSError, ValueError) as e:
        raise DataError(f"Cannot read image array {path}: {e}") from e
    if image.ndim != 3 or image.shape[-1] != 3:
        raise DataError(f"Image array {path} has shape {image.shape}, expected (H, W, 3)")
    if size is not None and (image.shape[1], image.shape[0]) != tuple(size):
        raise DataError(f"Image array {path} is {image.shape[1]}x{image.shape[0]}, its PNG is {size[0]}x{size[1]}")
    return image


def normal_map_to_image(normals: np.ndarray) -> np.ndarray:
    """Map unit normals from [-1, 1] to [0, 1]"""
    return 0.5 * (np.asarray(normals) + 1.0)
