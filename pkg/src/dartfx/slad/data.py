# SPDX-FileCopyrightText: 2024-present kulnor <pascal.heus@gmail.com>
#
# SPDX-License-Identifier: MIT
"""Datasets: class-conditional synthetic textures and an image-folder loader."""
from __future__ import annotations

from dataclasses import dataclass
import logging
import os
from pathlib import Path
from typing import Iterator, Literal

import numpy as np
from PIL import Image, UnidentifiedImageError
from pydantic import BaseModel, Field

from .errors import DataError

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}


class DatasetDescriptor(BaseModel):
    """What to build (synthetic parameters or folder path) and, once built, what was built."""

    kind: Literal["synthetic", "image-folder"] = "synthetic"
    name: str | None = None
    path: str | None = None
    num_classes: int = Field(default=10, ge=2)
    per_class: int = Field(default=200, ge=1)
    test_per_class: int = Field(default=50, ge=0)
    image_size: int = Field(default=32, ge=1)
    val_fraction: float = Field(default=0.1, ge=0, lt=1)
    seed: int = 0
    # synthetic texture parameters
    noise: float = Field(default=0.5, ge=0)
    mean_shift: float = Field(default=0.08, ge=0)
    augment: list[str] = Field(default_factory=lambda: ["hflip"])
    # filled in once the data is materialized
    classes: list[str] = Field(default_factory=list)
    train_count: int | None = None
    val_count: int | None = None
    test_count: int | None = None
    skipped_files: int = 0

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.kind == "image-folder" and self.path:
            return Path(self.path).name
        return f"synthetic{self.num_classes}"


@dataclass
class Split:
    images: np.ndarray  # [N, H, W, C] float64
    labels: np.ndarray  # [N] int64

    def __len__(self):
        return int(self.labels.shape[0])

    def subset(self, indices) -> "Split":
        indices = np.asarray(indices, dtype=np.int64)
        return Split(self.images[indices], self.labels[indices])


@dataclass
class TaskData:
    descriptor: DatasetDescriptor
    train: Split
    val: Split
    test: Split


def carve_validation(split: Split, fraction: float, seed: int) -> tuple[Split, Split]:
    """Hold out ``fraction`` of ``split`` (at least one sample when fraction > 0) as validation."""
    count = len(split)
    n_val = int(round(count * fraction))
    if fraction > 0:
        n_val = max(1, min(n_val, count - 1))
    order = np.random.default_rng(seed).permutation(count)
    val_idx, train_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
    return split.subset(train_idx), split.subset(val_idx)


def _texture_params(num_classes: int, seed: int):
    rng = np.random.default_rng([seed, 7919])
    angles = np.pi * np.arange(num_classes) / num_classes
    frequencies = 2.0 + (np.arange(num_classes) % 3)
    colors = rng.normal(size=(num_classes, 3))
    colors /= np.linalg.norm(colors, axis=1, keepdims=True)
    tints = rng.normal(size=(num_classes, 3))
    tints /= np.linalg.norm(tints, axis=1, keepdims=True)
    return angles, frequencies, colors, tints


def _render(labels: np.ndarray, image_size: int, params, noise: float, mean_shift: float, rng: np.random.Generator) -> np.ndarray:
    angles, frequencies, colors, tints = params
    coords = (np.arange(image_size) + 0.5) / image_size
    v, u = np.meshgrid(coords, coords, indexing="ij")
    images = np.empty((labels.shape[0], image_size, image_size, 3))
    for i, label in enumerate(labels):
        phase = rng.uniform(0.0, 2.0 * np.pi)
        jitter = rng.normal(0.0, 0.1)
        theta = angles[label] + jitter
        wave = np.sin(2.0 * np.pi * frequencies[label] * (u * np.cos(theta) + v * np.sin(theta)) + phase)
        images[i] = wave[..., None] * colors[label] + mean_shift * tints[label]
        images[i] += rng.normal(0.0, noise, (image_size, image_size, 3))
    return images


def synth_dataset(classes: int = 10, per_class: int = 200, image_size: int = 32, seed: int = 0, test_per_class: int = 50,
                  noise: float = 0.5, mean_shift: float = 0.08, val_fraction: float = 0.1) -> TaskData:
    """Oriented sinusoidal textures with random phase, a weak class tint and pixel noise.

    Classes differ in frequency, orientation and colour of the texture; the random phase
    hides the texture from pixel-space centroids, which only see the faint tint.
    """
    if classes < 2:
        raise DataError("a dataset needs at least two classes", {"classes": classes})
    params = _texture_params(classes, seed)
    rng = np.random.default_rng(seed)
    train_labels = np.repeat(np.arange(classes), per_class)
    test_labels = np.repeat(np.arange(classes), test_per_class)
    pool = Split(_render(train_labels, image_size, params, noise, mean_shift, rng), train_labels)
    test = Split(_render(test_labels, image_size, params, noise, mean_shift, rng), test_labels)
    train, val = carve_validation(pool, val_fraction, seed)
    descriptor = DatasetDescriptor(
        kind="synthetic", num_classes=classes, per_class=per_class, test_per_class=test_per_class,
        image_size=image_size, val_fraction=val_fraction, seed=seed, noise=noise, mean_shift=mean_shift,
        classes=[f"class_{c:02d}" for c in range(classes)],
        train_count=len(train), val_count=len(val), test_count=len(test),
    )
    logging.info(f"Synthesized {classes} classes: train={len(train)} val={len(val)} test={len(test)}")
    return TaskData(descriptor, train, val, test)


def _list_images(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)


def _read_class_folders(root: Path, image_size: int, classes: list[str] | None = None,
                        allow_empty: bool = False) -> tuple[Split, list[str], int]:
    if classes is None:
        classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if len(classes) < 2:
        raise DataError(f"image folder {root} needs at least two class directories", {"found": len(classes)})
    images, labels, skipped = [], [], 0
    for label, name in enumerate(classes):
        folder = root / name
        files = _list_images(folder) if folder.is_dir() else []
        loaded = 0
        for file in files:
            try:
                with Image.open(file) as img:
                    img = img.convert("RGB").resize((image_size, image_size), Image.Resampling.BILINEAR)
                    images.append(np.asarray(img, dtype=np.float64) / 255.0)
            except (UnidentifiedImageError, OSError) as exc:
                logging.warning(f"Skipping unreadable image {file}: {exc}")
                skipped += 1
                continue
            labels.append(label)
            loaded += 1
        if loaded == 0 and not allow_empty:
            raise DataError(f"class '{name}' has no readable images", {"folder": str(folder)})
    stacked = np.stack(images) if images else np.zeros((0, image_size, image_size, 3))
    return Split(stacked, np.asarray(labels, dtype=np.int64)), classes, skipped


def load_image_folder(path: str | os.PathLike, image_size: int = 32, seed: int = 0, val_fraction: float = 0.1) -> TaskData:
    """Load ``path/<class>/<files>`` (or ``path/{train,val,test}/<class>/<files>``).

    Files are read in lexicographic order and resized to ``image_size``. A missing
    test or validation split is carved from train (test first), so the three splits stay disjoint.
    """
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"image folder not found: {root}")
    if (root / "train").is_dir():
        train, classes, skipped = _read_class_folders(root / "train", image_size)
        if (root / "test").is_dir():
            test, _, s = _read_class_folders(root / "test", image_size, classes, allow_empty=True)
            skipped += s
        else:
            train, test = carve_validation(train, val_fraction, seed + 1)
        if (root / "val").is_dir():
            val, _, s = _read_class_folders(root / "val", image_size, classes, allow_empty=True)
            skipped += s
        else:
            train, val = carve_validation(train, val_fraction, seed)
    else:
        pool, classes, skipped = _read_class_folders(root, image_size)
        train, test = carve_validation(pool, val_fraction, seed + 1)
        train, val = carve_validation(train, val_fraction, seed)
    descriptor = DatasetDescriptor(
        kind="image-folder", path=str(root), num_classes=len(classes), per_class=max(1, len(train) // len(classes)),
        image_size=image_size, val_fraction=val_fraction, seed=seed, classes=classes,
        train_count=len(train), val_count=len(val), test_count=len(test), skipped_files=skipped,
    )
    logging.info(f"Loaded {root}: {len(classes)} classes, train={len(train)} val={len(val)} test={len(test)}, skipped={skipped}")
    return TaskData(descriptor, train, val, test)


def load_dataset(descriptor: DatasetDescriptor) -> TaskData:
    if descriptor.kind == "image-folder":
        if not descriptor.path:
            raise DataError("image-folder datasets need a path")
        data = load_image_folder(descriptor.path, descriptor.image_size, descriptor.seed, descriptor.val_fraction)
    else:
        data = synth_dataset(descriptor.num_classes, descriptor.per_class, descriptor.image_size, descriptor.seed,
                             descriptor.test_per_class, descriptor.noise, descriptor.mean_shift, descriptor.val_fraction)
    data.descriptor.name = descriptor.name
    data.descriptor.augment = list(descriptor.augment)
    return data


def save_image_folder(data: TaskData, out_dir: str | os.PathLike) -> Path:
    """Write every split as ``out_dir/<split>/<class>/<index>.png`` (values mapped from [-2, 2] to 8 bits)."""
    root = Path(out_dir)
    for split_name, split in (("train", data.train), ("val", data.val), ("test", data.test)):
        for index, (image, label) in enumerate(zip(split.images, split.labels)):
            folder = root / split_name / data.descriptor.classes[label]
            folder.mkdir(parents=True, exist_ok=True)
            pixels = np.clip((image + 2.0) / 4.0 * 255.0, 0, 255).round().astype(np.uint8)
            Image.fromarray(pixels).save(folder / f"{index:06d}.png")
    return root


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    """The batch-order/augmentation stream of one epoch; every model trained on a run draws the same one."""
    return np.random.default_rng([seed, epoch, 104729])


def iterate_batches(split: Split, batch_size: int, rng: np.random.Generator | None = None, flip: bool = False) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(images, labels)`` batches, shuffled when ``rng`` is given, with random horizontal flips if ``flip``."""
    count = len(split)
    order = rng.permutation(count) if rng is not None else np.arange(count)
    flips = rng.random(count) < 0.5 if (flip and rng is not None) else np.zeros(count, dtype=bool)
    for start in range(0, count, batch_size):
        idx = order[start:start + batch_size]
        images = split.images[idx].copy()
        mask = flips[start:start + batch_size]
        if mask.any():
            images[mask] = images[mask][:, :, ::-1, :]
        yield images, split.labels[idx]


def nearest_centroid_accuracy(train: Split, test: Split) -> float:
    """Pixel-space nearest-centroid score, used as a headroom check for synthetic data."""
    classes = np.unique(train.labels)
    flat_train = train.images.reshape(len(train), -1)
    centroids = np.stack([flat_train[train.labels == c].mean(axis=0) for c in classes])
    flat_test = test.images.reshape(len(test), -1)
    distances = (flat_test**2).sum(axis=1)[:, None] - 2.0 * flat_test @ centroids.T + (centroids**2).sum(axis=1)[None, :]
    predictions = classes[np.argmin(distances, axis=1)]
    return float(np.mean(predictions == test.labels))
