"""Image helpers: float [0,1] RGB grids, PNG I/O, resizing and cropping."""
from pathlib import Path

import numpy as np
from PIL import Image
from skimage.transform import resize as _sk_resize

from .errors import DimensionError, IOFailure


def as_image(a, dtype=np.float32):
    a = np.asarray(a, dtype=dtype)
    if a.ndim != 3 or a.shape[2] != 3:
        raise DimensionError(f"expected an HxWx3 image, got shape {a.shape}")
    return a


def resize(image, shape):
    """Bilinear stretch-resize to ``(height, width)``; exact copy when the size
    already matches."""
    h, w = int(shape[0]), int(shape[1])
    image = np.asarray(image)
    if image.shape[:2] == (h, w):
        return image.copy()
    out = _sk_resize(image, (h, w) + image.shape[2:], order=1, mode="edge",
                     anti_aliasing=None, preserve_range=True)
    return out.astype(image.dtype, copy=False)


def crop(image, x, y, w, h):
    """Integer crop clamped to the image; raises if nothing remains."""
    ih, iw = image.shape[:2]
    x0, y0 = max(0, int(round(x))), max(0, int(round(y)))
    x1, y1 = min(iw, int(round(x + w))), min(ih, int(round(y + h)))
    if x1 <= x0 or y1 <= y0:
        raise DimensionError(f"crop ({x}, {y}, {w}, {h}) is empty inside a {iw}x{ih} image")
    return image[y0:y1, x0:x1]


def to_uint8(image):
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def read_image(path):
    path = Path(path)
    try:
        with Image.open(path) as im:
            data = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise IOFailure(f"cannot read image {path}: {exc}") from exc
    return (data.astype(np.float64) / 255.0).astype(np.float32)


def write_image(path, image):
    path = Path(path)
    try:
        Image.fromarray(to_uint8(image)).save(path, format="PNG")
    except OSError as exc:
        raise IOFailure(f"cannot write image {path}: {exc}") from exc
