"""CIFAR-10/100 binary ingestion, normalization and training augmentation.

Binary record layout (row-major R, G, B planes of a 32x32 image):
  CIFAR-10:  1 label byte + 3072 pixel bytes
  CIFAR-100: 1 coarse label byte + 1 fine label byte + 3072 pixel bytes
The fine label is used for CIFAR-100. Pixels scale to [0, 1] and are then
normalized per channel; the normalization constants default to statistics
computed from the training split.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigurationError, FormatError

IMAGE_SHAPE = (3, 32, 32)
PIXELS_PER_IMAGE = 3 * 32 * 32

VARIANTS = {
    "c10": {"label_bytes": 1, "num_classes": 10,
            "train_files": [f"data_batch_{i}.bin" for i in range(1, 6)],
            "test_files": ["test_batch.bin"]},
    "c100": {"label_bytes": 2, "num_classes": 100,
             "train_files": ["train.bin"],
             "test_files": ["test.bin"]},
}

DATA_DIR_ENV = "AUGSHUFFLENET_DATA"


class Sample(NamedTuple):
    image: np.ndarray  # (3, 32, 32) float32
    label: int


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, 32, 32) float32, normalized
    labels: np.ndarray  # (N,) int64
    mean: np.ndarray    # (3,) normalization constants on the [0, 1] scale
    std: np.ndarray

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n], self.mean, self.std)


def _variant(name: str) -> dict:
    try:
        return VARIANTS[name]
    except KeyError:
        raise ConfigurationError(f"unknown dataset variant {name!r}; use c10 or c100") from None


def read_cifar_file(path: str, variant: str) -> tuple[np.ndarray, np.ndarray]:
    """Parse one binary file into (labels, pixels uint8 (N, 3, 32, 32))."""
    spec = _variant(variant)
    record = spec["label_bytes"] + PIXELS_PER_IMAGE
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % record:
        raise FormatError(
            f"{path}: size {raw.size} is not a positive multiple of the "
            f"{record}-byte record length"
        )
    rows = raw.reshape(-1, record)
    labels = rows[:, spec["label_bytes"] - 1].astype(np.int64)  # fine label for c100
    pixels = rows[:, spec["label_bytes"]:].reshape(-1, *IMAGE_SHAPE)
    return labels, pixels


def write_cifar_file(path: str, labels: np.ndarray, pixels: np.ndarray,
                     variant: str, coarse_labels: np.ndarray | None = None) -> None:
    """Write records in the standard binary layout (synthetic-data generator)."""
    spec = _variant(variant)
    n = labels.shape[0]
    flat = pixels.reshape(n, PIXELS_PER_IMAGE).astype(np.uint8)
    cols = []
    if spec["label_bytes"] == 2:
        coarse = np.zeros(n, dtype=np.uint8) if coarse_labels is None else coarse_labels
        cols.append(coarse.reshape(n, 1).astype(np.uint8))
    cols.append(labels.reshape(n, 1).astype(np.uint8))
    cols.append(flat)
    np.concatenate(cols, axis=1).tofile(path)


def _read_split(data_dir: str, files: list[str], variant: str):
    labels, pixels = [], []
    for fname in files:
        path = os.path.join(data_dir, fname)
        if not os.path.exists(path):
            raise FormatError(f"missing dataset file {path}")
        lab, pix = read_cifar_file(path, variant)
        labels.append(lab)
        pixels.append(pix)
    return np.concatenate(labels), np.concatenate(pixels)


def normalize_images(pixels: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    scaled = pixels.astype(np.float32) / 255.0
    return (scaled - mean.reshape(1, 3, 1, 1)) / std.reshape(1, 3, 1, 1)


def load_cifar(data_dir: str, variant: str,
               normalization: tuple[np.ndarray, np.ndarray] | None = None
               ) -> tuple[Dataset, Dataset]:
    """Load (train, test) splits from the standard binary files in data_dir."""
    spec = _variant(variant)
    train_labels, train_pixels = _read_split(data_dir, spec["train_files"], variant)
    test_labels, test_pixels = _read_split(data_dir, spec["test_files"], variant)
    if normalization is None:
        scaled = train_pixels.astype(np.float32) / 255.0
        mean = scaled.mean(axis=(0, 2, 3))
        std = np.maximum(scaled.std(axis=(0, 2, 3)), 1e-3)
    else:
        mean, std = (np.asarray(v, dtype=np.float32) for v in normalization)
    train = Dataset(normalize_images(train_pixels, mean, std), train_labels, mean, std)
    test = Dataset(normalize_images(test_pixels, mean, std), test_labels, mean, std)
    return train, test


# ---------------------------------------------------------------------------
# augmentation: random horizontal flip + 4-pixel pad / random 32x32 crop
# ---------------------------------------------------------------------------

PAD = 4


def augment(s: Sample, rng: np.random.Generator) -> Sample:
    """Training augmentation; the label never changes.

    Draw order per sample: flip coin, row offset, column offset (both
    uniform over [0, 2*PAD]). Offset (PAD, PAD) with no flip is the
    identity transform. Padding value is 0 on the normalized scale.
    """
    image = s.image
    if rng.random() < 0.5:
        image = image[:, :, ::-1]
    oi = int(rng.integers(0, 2 * PAD + 1))
    oj = int(rng.integers(0, 2 * PAD + 1))
    c, h, w = image.shape
    padded = np.zeros((c, h + 2 * PAD, w + 2 * PAD), dtype=image.dtype)
    padded[:, PAD:PAD + h, PAD:PAD + w] = image
    return Sample(padded[:, oi:oi + h, oj:oj + w].copy(), s.label)


def augment_batch(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Apply ``augment`` sample by sample, in order, with one shared stream."""
    out = np.empty_like(images)
    for i in range(images.shape[0]):
        out[i] = augment(Sample(images[i], 0), rng).image
    return out


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    """Splittable per-epoch augmentation stream."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(epoch,)))


# ---------------------------------------------------------------------------
# synthetic data in the standard binary format (tests / offline demos)
# ---------------------------------------------------------------------------

def synthesize_class_images(n: int, num_classes: int, rng: np.random.Generator
                            ) -> tuple[np.ndarray, np.ndarray]:
    """Class-conditional images: per-class color/gradient template plus noise.

    Structured enough that a small model learns well above chance within a
    few epochs, which is what the toy training checks need.
    """
    labels = rng.integers(0, num_classes, size=n).astype(np.uint8)
    template_rng = np.random.default_rng(12345)
    base_colors = template_rng.integers(40, 216, size=(num_classes, 3))
    yy, xx = np.mgrid[0:32, 0:32].astype(np.float32) / 31.0
    gradients = np.stack([yy, xx, 1.0 - yy])
    phases = template_rng.uniform(0, 2 * np.pi, size=(num_classes, 3))
    images = np.empty((n, *IMAGE_SHAPE), dtype=np.uint8)
    for i, lab in enumerate(labels):
        color = base_colors[lab].reshape(3, 1, 1)
        wave = 40.0 * np.sin(6.0 * gradients + phases[lab].reshape(3, 1, 1))
        noise = rng.normal(0.0, 12.0, size=IMAGE_SHAPE)
        img = color + wave + noise
        images[i] = np.clip(img, 0, 255).astype(np.uint8)
    return labels, images


def write_synthetic_dataset(data_dir: str, variant: str, n_train: int, n_test: int,
                            seed: int = 0) -> None:
    """Create a synthetic dataset directory with the standard file names."""
    spec = _variant(variant)
    os.makedirs(data_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    train_labels, train_pixels = synthesize_class_images(n_train, spec["num_classes"], rng)
    test_labels, test_pixels = synthesize_class_images(n_test, spec["num_classes"], rng)
    train_files = spec["train_files"]
    if n_train < len(train_files):
        raise ConfigurationError(
            f"need at least {len(train_files)} training samples to fill the "
            f"standard {variant} file set"
        )
    label_chunks = np.array_split(train_labels, len(train_files))
    pixel_chunks = np.array_split(train_pixels, len(train_files))
    for fname, lab, pix in zip(train_files, label_chunks, pixel_chunks):
        write_cifar_file(os.path.join(data_dir, fname), lab, pix, variant)
    write_cifar_file(os.path.join(data_dir, spec["test_files"][0]),
                     test_labels, test_pixels, variant)
