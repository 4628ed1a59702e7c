"""Synthetic scenes and toy datasets for demos and tests.

Scenes are bright textured objects on a dark background, so the default
foreground extractor finds them.  Defects are small blobs pasted inside
the object.  Everything is reproducible from a seed.
"""

from pathlib import Path

import numpy as np
import scipy.ndimage as ndi

from .dataset import ANOMALY_DIR, MASK_DIR, NORMAL_DIR
from .imgio import save_image, save_mask


def make_texture(rng: np.random.Generator, size: int, smooth: float = 1.0,
                 lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    """Smooth non-repeating random texture in [lo, hi], shape (size, size)."""
    noise = rng.standard_normal((size, size))
    if smooth > 0:
        noise = ndi.gaussian_filter(noise, smooth)
    span = noise.max() - noise.min()
    if span == 0:
        return np.full((size, size), 0.5 * (lo + hi))
    return lo + (hi - lo) * (noise - noise.min()) / span


def make_object_scene(rng: np.random.Generator, size: int = 16,
                      object_frac: float = 0.6) -> tuple[np.ndarray, np.ndarray]:
    """Bright textured square object on a dark background.

    Returns (image (1, H, W), object support mask (H, W)).
    """
    side = max(3, int(round(size * object_frac)))
    y0 = (size - side) // 2
    x0 = (size - side) // 2
    img = make_texture(rng, size, smooth=1.0, lo=0.02, hi=0.15)
    obj = make_texture(rng, side, smooth=0.8, lo=0.55, hi=0.95)
    img[y0:y0 + side, x0:x0 + side] = obj
    support = np.zeros((size, size))
    support[y0:y0 + side, x0:x0 + side] = 1.0
    return img[None], support


def make_blob_mask(rng: np.random.Generator, size: int, radius: int = 2,
                   inside: np.ndarray | None = None) -> np.ndarray:
    """Disk-shaped defect mask of the given radius, centered at a random
    position (inside the support mask when provided)."""
    if inside is not None and inside.any():
        ys, xs = np.nonzero(inside)
        i = int(rng.integers(len(ys)))
        cy, cx = int(ys[i]), int(xs[i])
    else:
        cy = int(rng.integers(radius, size - radius))
        cx = int(rng.integers(radius, size - radius))
    yy, xx = np.mgrid[:size, :size]
    mask = ((yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2).astype(np.float64)
    if inside is not None:
        mask = mask * inside
        if not mask.any():
            mask[cy, cx] = 1.0
    return mask


def make_anomaly_scene(rng: np.random.Generator, size: int = 16,
                       radius: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Object scene with a dark blob defect; returns (image, defect mask)."""
    img, support = make_object_scene(rng, size)
    eroded = ndi.binary_erosion(support, iterations=radius + 1)
    mask = make_blob_mask(rng, size, radius=radius,
                          inside=eroded if eroded.any() else support)
    defect = make_texture(rng, size, smooth=0.5, lo=0.0, hi=0.35)
    img = img.copy()
    img[0] = np.where(mask == 1.0, defect, img[0])
    return img, mask


def build_toy_dataset(root, classes: tuple[str, ...] = ("widget",),
                      n_normal: int = 6, n_anomaly: int = 6,
                      size: int = 16, seed: int = 0) -> Path:
    """Write a small PNG dataset tree under ``root`` and return it."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    for cls in classes:
        base = root / cls
        for sub in (NORMAL_DIR, ANOMALY_DIR, MASK_DIR):
            (base / sub).mkdir(parents=True, exist_ok=True)
        for i in range(n_normal):
            img, _ = make_object_scene(rng, size)
            save_image(base / NORMAL_DIR / f"{i:03d}.png", img)
        for i in range(n_anomaly):
            img, mask = make_anomaly_scene(rng, size)
            save_image(base / ANOMALY_DIR / f"{i:03d}.png", img)
            save_mask(base / MASK_DIR / f"{i:03d}.png", mask)
    return root
