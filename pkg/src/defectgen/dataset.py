"""Dataset directory layout, validation, and mask augmentation.

Expected tree::

    root/
      <class>/
        normal/   *.png   defect-free images
        anomaly/  *.png   defect exemplars
        masks/    *.png   one mask per exemplar, same file stem

Every anomaly image must have exactly one mask with a matching stem and
matching dimensions.  Listings are sorted so downstream splits are
reproducible.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .imgio import load_image, load_mask, resize_nearest
from .trainer import AnomalyExemplar

NORMAL_DIR = "normal"
ANOMALY_DIR = "anomaly"
MASK_DIR = "masks"
_IMAGE_SUFFIXES = (".png",)


@dataclass(frozen=True)
class ClassLayout:
    name: str
    normal_paths: tuple[Path, ...]
    anomaly_pairs: tuple[tuple[Path, Path], ...]  # (image, mask), stem-sorted


@dataclass(frozen=True)
class DatasetLayout:
    root: Path
    classes: dict[str, ClassLayout]


def _list_images(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES)


def ingest(root) -> DatasetLayout:
    """Validate a dataset tree; every problem is named with its path."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    classes: dict[str, ClassLayout] = {}
    for class_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        normal_dir = class_dir / NORMAL_DIR
        anomaly_dir = class_dir / ANOMALY_DIR
        mask_dir = class_dir / MASK_DIR
        for d in (normal_dir, anomaly_dir, mask_dir):
            if not d.is_dir():
                raise DataError(f"class {class_dir.name}: missing subdirectory {d}")
        pairs = []
        for img_path in _list_images(anomaly_dir):
            mask_path = mask_dir / f"{img_path.stem}.png"
            if not mask_path.is_file():
                raise DataError(
                    f"anomaly image {img_path} has no mask (expected {mask_path})"
                )
            img = load_image(img_path)
            mask = load_mask(mask_path)
            if mask.shape != img.shape[1:]:
                raise DataError(
                    f"mask dims {mask.shape} of {mask_path} do not match image "
                    f"dims {img.shape[1:]} of {img_path}"
                )
            pairs.append((img_path, mask_path))
        classes[class_dir.name] = ClassLayout(
            name=class_dir.name,
            normal_paths=tuple(_list_images(normal_dir)),
            anomaly_pairs=tuple(pairs),
        )
    return DatasetLayout(root=root, classes=classes)


def get_class(layout: DatasetLayout, name: str) -> ClassLayout:
    if name not in layout.classes:
        raise DataError(f"class {name!r} not found under {layout.root}")
    return layout.classes[name]


def load_exemplars(cls: ClassLayout, image_size: int = 0) -> list[AnomalyExemplar]:
    """Load all anomaly pairs of a class, optionally resized to a square."""
    out = []
    for img_path, mask_path in cls.anomaly_pairs:
        img = load_image(img_path)
        mask = load_mask(mask_path)
        if image_size:
            img = resize_nearest(img, (image_size, image_size))
            mask = resize_nearest(mask, (image_size, image_size))
        out.append(AnomalyExemplar(image=img, mask=mask, label=cls.name))
    return out


def load_normals(cls: ClassLayout, image_size: int = 0) -> list[np.ndarray]:
    out = []
    for path in cls.normal_paths:
        img = load_image(path)
        if image_size:
            img = resize_nearest(img, (image_size, image_size))
        out.append(img)
    return out


def augment_mask(mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Independent 0.5-probability horizontal and vertical flips.

    Consumes exactly two uniform draws (horizontal first).
    """
    out = np.asarray(mask)
    if rng.random() < 0.5:
        out = out[:, ::-1]
    if rng.random() < 0.5:
        out = out[::-1, :]
    return np.ascontiguousarray(out)
