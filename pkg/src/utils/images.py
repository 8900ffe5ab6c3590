import logging
from pathlib import Path
from typing import Tuple, Union

import numpy as np
from PIL import Image

from src.classes.errors import ShapeError, ValidationError

logger = logging.getLogger('MultiID')

PathLike = Union[str, Path]


def as_rgb(image) -> np.ndarray:
    """
    Normalize an image to a float64 (H, W, 3) array in [0, 1].

    Accepts PIL images, uint8 arrays and float arrays already in [0, 1].
    Grayscale inputs are broadcast to three channels.
    """
    if isinstance(image, Image.Image):
        image = np.asarray(image.convert('RGB'))
    array = np.asarray(image)
    if array.dtype == np.uint8:
        array = array.astype(np.float64) / 255.0
    else:
        array = array.astype(np.float64)
    if array.ndim == 2:
        array = np.repeat(array[:, :, None], 3, axis=2)
    if array.ndim != 3 or array.shape[2] not in (3, 4) or array.shape[0] == 0 or array.shape[1] == 0:
        raise ShapeError(f"expected an (H, W, 3) image, got shape {array.shape}")
    array = array[:, :, :3]
    if not np.all(np.isfinite(array)):
        raise ValidationError("image contains NaN or infinite values", "E_NON_FINITE")
    return np.clip(array, 0.0, 1.0)


def to_uint8(image) -> np.ndarray:
    return np.round(as_rgb(image) * 255.0).astype(np.uint8)


def resize(image, size: Tuple[int, int]) -> np.ndarray:
    """Bilinear resize to ``size`` = (height, width)."""
    h, w = size
    pil = Image.fromarray(to_uint8(image))
    return as_rgb(pil.resize((w, h), Image.BILINEAR))


def crop(image, box) -> np.ndarray:
    """Crop a normalized box out of an image, keeping at least one pixel per side."""
    array = as_rgb(image)
    h, w = array.shape[:2]
    x0 = min(int(np.floor(box.x0 * w)), w - 1)
    y0 = min(int(np.floor(box.y0 * h)), h - 1)
    x1 = max(int(np.ceil(box.x1 * w)), x0 + 1)
    y1 = max(int(np.ceil(box.y1 * h)), y0 + 1)
    return array[y0:y1, x0:x1]


def load_image(path: PathLike) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"image file not found: {path}", "E_IMAGE_MISSING")
    with Image.open(path) as pil:
        return as_rgb(pil)


def save_image(image, path: PathLike) -> Path:
    """Write an 8-bit RGB PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path, format='PNG')
    logger.debug("Wrote image %s", path)
    return path
