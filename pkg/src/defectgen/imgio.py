"""PNG image and mask I/O.

Images are 8-bit grayscale or RGB lossless rasters on disk and
channels-first float64 arrays in [0, 1] in memory.  Masks are
single-channel files with 0/255 semantics, binarized at threshold 128
on load.
"""

import numpy as np
from PIL import Image

from .errors import DataError


def load_image(path) -> np.ndarray:
    """Read a grayscale or RGB raster into a (C, H, W) float64 array."""
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB" if im.mode in ("RGBA", "P", "CMYK") else "L")
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except OSError as e:
        raise DataError(f"cannot read image {path}: {e}") from e
    if arr.ndim == 2:
        return arr[None]
    return np.moveaxis(arr, -1, 0)


def save_image(path, image: np.ndarray) -> None:
    """Write a (C, H, W) float array as an 8-bit PNG, clipping to [0, 1]."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    if data.shape[0] == 1:
        Image.fromarray(data[0], mode="L").save(path)
    elif data.shape[0] == 3:
        Image.fromarray(np.moveaxis(data, 0, -1), mode="RGB").save(path)
    else:
        raise DataError(f"cannot save image with {data.shape[0]} channels")


def load_mask(path) -> np.ndarray:
    """Read a mask file and binarize at threshold 128."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float64)
    except OSError as e:
        raise DataError(f"cannot read mask {path}: {e}") from e
    return (arr >= 128.0).astype(np.float64)


def save_mask(path, mask: np.ndarray) -> None:
    """Write a binary mask as a single-channel 0/255 PNG."""
    data = (np.asarray(mask) > 0.5).astype(np.uint8) * 255
    Image.fromarray(data, mode="L").save(path)


def resize_nearest(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize of a (C, H, W) or (H, W) array to (H', W')."""
    h_new, w_new = size
    spatial = image.shape[-2:]
    ys = np.minimum((np.arange(h_new) * spatial[0] / h_new).astype(int), spatial[0] - 1)
    xs = np.minimum((np.arange(w_new) * spatial[1] / w_new).astype(int), spatial[1] - 1)
    return image[..., ys[:, None], xs[None, :]]
