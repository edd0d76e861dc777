"""Dataset ingestion, augmentation, and synthetic generators.

Readers are byte-faithful: parsing a file and writing it back reproduces
the original bytes exactly. Images are stored sample-major as
(B, H, W, C) float64 mapped to [0, 1]; flat-vector datasets use (B, d).
Standardization statistics are computed on the training split and carried
on the dataset so evaluation reuses them.

A small bundled copy of the UCI optical handwritten digits set (1797
samples of 8x8 grayscale, ten classes) ships with the package so training
demos and tests run fully offline; an upsampling helper lifts it to any
resolution.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .pedcc import generate_simplex_centroids

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073


class FormatError(ValueError):
    """A dataset file violates its binary format; the message names the offset."""


@dataclass
class Dataset:
    """Sample-major images (or flat vectors), labels, and split metadata."""

    images: np.ndarray  # (B, H, W, C) in [0, 1], or (B, d) flat
    labels: np.ndarray  # (B,)
    num_classes: int
    split: str = "train"
    mean: np.ndarray | None = None  # per-channel standardization stats
    std: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError("one label per sample required")
        if self.labels.size and int(self.labels.max()) >= self.num_classes:
            raise ValueError("label out of range for declared class count")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def is_image(self) -> bool:
        return self.images.ndim == 4


def _open_maybe_gzip(path, mode="rb"):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, mode)
    return open(path, mode)


def load_mnist_idx(image_path, label_path, num_classes: int = 10) -> Dataset:
    """Parse the IDX image/label pair bit-exactly.

    Images: big-endian magic 0x00000803, count, rows, cols, then raw bytes
    row-major. Labels: magic 0x00000801, count, then one byte per label.
    Transparently decompresses ``.gz`` files.
    """
    with _open_maybe_gzip(image_path) as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise FormatError(f"{image_path}: truncated header, file ends at offset {len(raw)}")
    magic, count, rows, cols = struct.unpack_from(">IIII", raw, 0)
    if magic != IDX_IMAGE_MAGIC:
        raise FormatError(
            f"{image_path}: bad magic 0x{magic:08x} at offset 0, expected 0x{IDX_IMAGE_MAGIC:08x}"
        )
    expected = 16 + count * rows * cols
    if len(raw) != expected:
        raise FormatError(f"{image_path}: file ends at offset {len(raw)}, expected {expected}")
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(count, rows, cols)

    with _open_maybe_gzip(label_path) as fh:
        raw_labels = fh.read()
    if len(raw_labels) < 8:
        raise FormatError(
            f"{label_path}: truncated header, file ends at offset {len(raw_labels)}"
        )
    magic, label_count = struct.unpack_from(">II", raw_labels, 0)
    if magic != IDX_LABEL_MAGIC:
        raise FormatError(
            f"{label_path}: bad magic 0x{magic:08x} at offset 0, expected 0x{IDX_LABEL_MAGIC:08x}"
        )
    if len(raw_labels) != 8 + label_count:
        raise FormatError(
            f"{label_path}: file ends at offset {len(raw_labels)}, expected {8 + label_count}"
        )
    if label_count != count:
        raise FormatError(f"{label_path}: {label_count} labels for {count} images")
    labels = np.frombuffer(raw_labels, dtype=np.uint8, offset=8)
    images = pixels[..., None].astype(np.float64) / 255.0
    return Dataset(images=images, labels=labels, num_classes=num_classes)


def write_mnist_idx(dataset: Dataset, image_path, label_path) -> None:
    """Inverse of :func:`load_mnist_idx`, byte-exact for datasets it produced."""
    images = np.round(dataset.images[..., 0] * 255.0).astype(np.uint8)
    count, rows, cols = images.shape
    with open(image_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, count, rows, cols))
        fh.write(images.tobytes(order="C"))
    with open(label_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABEL_MAGIC, count))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


def load_cifar10_bin(paths) -> Dataset:
    """Concatenate CIFAR-10 binary batch files.

    Each record is 3073 bytes: one label byte then 3072 channel-major
    pixels (1024 red, 1024 green, 1024 blue, each row-major 32x32).
    """
    if isinstance(paths, (str, Path)):
        paths = [paths]
    all_images, all_labels = [], []
    for path in paths:
        with _open_maybe_gzip(path) as fh:
            raw = fh.read()
        if len(raw) % CIFAR_RECORD_BYTES != 0:
            tail = len(raw) - (len(raw) // CIFAR_RECORD_BYTES) * CIFAR_RECORD_BYTES
            raise FormatError(
                f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD_BYTES}; "
                f"stray record starts at offset {len(raw) - tail}"
            )
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        labels = records[:, 0]
        bad = np.nonzero(labels > 9)[0]
        if bad.size:
            raise FormatError(
                f"{path}: label byte {labels[bad[0]]} > 9 at offset {bad[0] * CIFAR_RECORD_BYTES}"
            )
        pixels = records[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
        all_images.append(pixels.astype(np.float64) / 255.0)
        all_labels.append(labels)
    return Dataset(
        images=np.concatenate(all_images),
        labels=np.concatenate(all_labels),
        num_classes=10,
    )


def write_cifar10_bin(dataset: Dataset, path) -> None:
    """Inverse of :func:`load_cifar10_bin` for a single batch file."""
    pixels = np.round(dataset.images * 255.0).astype(np.uint8).transpose(0, 3, 1, 2)
    records = np.empty((len(dataset), CIFAR_RECORD_BYTES), dtype=np.uint8)
    records[:, 0] = dataset.labels.astype(np.uint8)
    records[:, 1:] = pixels.reshape(len(dataset), -1)
    with open(path, "wb") as fh:
        fh.write(records.tobytes(order="C"))


@dataclass(frozen=True)
class AugmentPolicy:
    """Pad-crop-flip policy applied to training images only."""

    pad: int = 4
    flip_prob: float = 0.5
    enabled: bool = True


def crop_flip(image: np.ndarray, offset_row: int, offset_col: int, flip: bool, pad: int = 4):
    """Deterministic core: zero-pad, crop at the given offset, optional flip."""
    h, w, _ = image.shape
    padded = np.pad(image, ((pad, pad), (pad, pad), (0, 0)))
    cropped = padded[offset_row : offset_row + h, offset_col : offset_col + w]
    return cropped[:, ::-1] if flip else cropped


def augment(image: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator):
    """Randomized pad/crop/flip; identity when the policy is disabled."""
    if not policy.enabled:
        return image
    offset_row = int(rng.integers(0, 2 * policy.pad + 1))
    offset_col = int(rng.integers(0, 2 * policy.pad + 1))
    flip = bool(rng.random() < policy.flip_prob)
    return crop_flip(image, offset_row, offset_col, flip, pad=policy.pad)


def synth_blobs(k: int, dim: int, per_class: int, spread: float, seed: int) -> Dataset:
    """Gaussian blobs at simplex vertices scaled by 4*spread, noise sigma=spread.

    The class means are a fixed function of (k, dim), so datasets drawn with
    different seeds sample the same distribution; the seed drives only the
    noise.
    """
    if k < 2:
        raise ValueError("need at least 2 classes")
    if spread <= 0:
        raise ValueError("spread must be positive")
    centroids = generate_simplex_centroids(k, dim, seed=0).points
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(k), per_class)
    vectors = 4.0 * spread * centroids[labels] + rng.normal(scale=spread, size=(k * per_class, dim))
    return Dataset(images=vectors, labels=labels, num_classes=k)


def load_digits8(upsample_to: int | None = None) -> Dataset:
    """Bundled UCI handwritten digits: 1797 grayscale 8x8 images, 10 classes.

    ``upsample_to`` bilinearly resizes to a square resolution, e.g. 28 to
    match a 784-input backbone.
    """
    with resources.files("podloss._datasets").joinpath("digits_8x8.csv.gz").open("rb") as fh:
        table = np.loadtxt(gzip.open(fh), delimiter=",")
    images = (table[:, :-1] / 16.0).reshape(-1, 8, 8, 1)
    labels = table[:, -1].astype(np.int64)
    if upsample_to is not None:
        images = bilinear_resize(images, (upsample_to, upsample_to))
    return Dataset(images=images, labels=labels, num_classes=10)


def bilinear_resize(images: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of (B, H, W, C) images with corner-aligned sampling."""
    b, h, w, c = images.shape
    ho, wo = out_hw
    rows = np.linspace(0.0, h - 1.0, ho)
    cols = np.linspace(0.0, w - 1.0, wo)
    r0 = np.floor(rows).astype(int)
    c0 = np.floor(cols).astype(int)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (rows - r0)[None, :, None, None]
    fc = (cols - c0)[None, None, :, None]
    top = images[:, r0][:, :, c0] * (1 - fc) + images[:, r0][:, :, c1] * fc
    bottom = images[:, r1][:, :, c0] * (1 - fc) + images[:, r1][:, :, c1] * fc
    return top * (1 - fr) + bottom * fr


def split_dataset(ds: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded shuffle-split into tagged train/test datasets."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    perm = np.random.default_rng(seed).permutation(len(ds))
    cut = int(round(train_fraction * len(ds)))
    train_idx, test_idx = perm[:cut], perm[cut:]
    train = replace(ds, images=ds.images[train_idx], labels=ds.labels[train_idx], split="train")
    test = replace(ds, images=ds.images[test_idx], labels=ds.labels[test_idx], split="test")
    return train, test


def subset_classes(ds: Dataset, classes) -> Dataset:
    """Keep only the listed classes, relabeled to 0..len(classes)-1."""
    classes = list(classes)
    mask = np.isin(ds.labels, classes)
    remap = {c: i for i, c in enumerate(classes)}
    labels = np.array([remap[int(l)] for l in ds.labels[mask]], dtype=np.int64)
    return replace(ds, images=ds.images[mask], labels=labels, num_classes=len(classes))


def compute_norm_stats(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std over a training split (flat data uses one channel)."""
    if ds.is_image:
        axes = (0, 1, 2)
    else:
        axes = (0, 1)
    mean = ds.images.mean(axis=axes)
    std = ds.images.std(axis=axes)
    return np.atleast_1d(mean), np.atleast_1d(np.maximum(std, 1e-8))


def with_norm_stats(ds: Dataset, mean, std) -> Dataset:
    return replace(ds, mean=np.asarray(mean), std=np.asarray(std))


def standardize(images: np.ndarray, mean, std) -> np.ndarray:
    """Apply train-split statistics; works for image and flat layouts."""
    if images.ndim == 4:
        return (images - mean) / std
    return (images - float(mean[0])) / float(std[0])


def dataset_checksum(ds: Dataset) -> str:
    """Stable content hash of the raw sample data (identity for manifests)."""
    import hashlib

    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(ds.images).tobytes())
    digest.update(np.ascontiguousarray(ds.labels).tobytes())
    return digest.hexdigest()


def find_mnist(root=None):
    """Locate MNIST IDX files under ``root`` (or $PODLOSS_MNIST_DIR, ./data/mnist).

    Returns a dict of the four paths or None when the files are absent.
    Accepts both raw and ``.gz`` file variants.
    """
    import os

    candidates = []
    if root is not None:
        candidates.append(Path(root))
    env = os.environ.get("PODLOSS_MNIST_DIR")
    if env:
        candidates.append(Path(env))
    candidates.append(Path("data/mnist"))
    names = {
        "train_images": "train-images-idx3-ubyte",
        "train_labels": "train-labels-idx1-ubyte",
        "test_images": "t10k-images-idx3-ubyte",
        "test_labels": "t10k-labels-idx1-ubyte",
    }
    for base in candidates:
        found = {}
        for key, stem in names.items():
            for suffix in ("", ".gz"):
                path = base / (stem + suffix)
                if path.exists():
                    found[key] = path
                    break
        if len(found) == len(names):
            return found
    return None
