"""CIFAR-10 ingestion and pretext dataset construction.

Pretext datasets are index tables over a source image array: each sample is
a ``(source_index, transform_label)`` pair and its pixels are produced on
demand by :func:`geossl.geometry.apply_transform_batch`. Regenerating is
cheap; storing 600k transformed images is not.
"""

import csv
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ConfigurationError, FormatError, IngestionError, InvalidArgumentError
from .geometry import TransformSet, apply_transform_batch, make_transform_set
from .validation import check_class_labels, check_images

log = logging.getLogger(__name__)

CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"
CIFAR_CLASSES = (
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
)
RECORD_BYTES = 1 + 32 * 32 * 3


class LabeledImage(NamedTuple):
    image: np.ndarray
    class_label: int


class PretextSample(NamedTuple):
    image: np.ndarray
    transform_label: int
    source_index: int


class PretextBatch(NamedTuple):
    images: np.ndarray
    labels: np.ndarray
    source_index: np.ndarray


@dataclass(frozen=True, eq=False)
class CifarSplit:
    """Images ``(N, 32, 32, 3)`` uint8 with their class labels.

    Behaves as a read-only sequence of :class:`LabeledImage`.
    """

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        images = check_images(self.images, allow_empty=True)
        labels = check_class_labels(self.labels, images.shape[0])
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.images.shape[0]

    def __getitem__(self, i):
        if isinstance(i, (slice, np.ndarray, list)):
            return CifarSplit(self.images[i], self.labels[i])
        return LabeledImage(self.images[i], int(self.labels[i]))

    def subset(self, n, seed=None):
        """First ``n`` items, or a seeded class-agnostic random sample of ``n``."""
        if n is None or n >= len(self):
            return self
        if seed is None:
            return self[:n]
        idx = np.sort(np.random.default_rng(seed).choice(len(self), size=n, replace=False))
        return self[idx]

    def class_counts(self, n_classes=10):
        return np.bincount(self.labels, minlength=n_classes)


def read_cifar_batch(path):
    """Read one CIFAR-10 binary batch file into ``(images, labels)``."""
    path = Path(path)
    if not path.is_file():
        raise IngestionError(path, "file not found")
    try:
        raw = np.fromfile(path, dtype=np.uint8)
    except OSError as exc:
        raise IngestionError(path, f"cannot read: {exc}") from exc
    if raw.size == 0:
        raise FormatError(path, "file is empty")
    if raw.size % RECORD_BYTES:
        raise FormatError(
            path,
            f"size {raw.size} is not a multiple of the {RECORD_BYTES}-byte record "
            f"(final record has {raw.size % RECORD_BYTES} bytes)",
        )
    records = raw.reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise FormatError(path, f"record {bad} has class label {labels[bad]} outside 0..9")
    # channel-planar (R plane, G plane, B plane; row-major) -> H x W x C
    images = records[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(images), labels


def write_cifar_batch(path, images, labels):
    """Write images and labels in the CIFAR-10 binary record format."""
    images = check_images(images)
    labels = check_class_labels(labels, images.shape[0])
    planar = images.transpose(0, 3, 1, 2).reshape(images.shape[0], -1)
    records = np.concatenate([labels.astype(np.uint8)[:, None], planar], axis=1)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    records.tofile(path)


def load_cifar10(directory):
    """Load the binary CIFAR-10 distribution found in ``directory``.

    Returns ``(train, test)`` as :class:`CifarSplit` objects.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise IngestionError(directory, "dataset directory not found")
    parts = [read_cifar_batch(directory / name) for name in CIFAR_TRAIN_FILES]
    train = CifarSplit(np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]))
    test = CifarSplit(*read_cifar_batch(directory / CIFAR_TEST_FILE))
    log.info("loaded CIFAR-10 from %s: %d train, %d test", directory, len(train), len(test))
    return train, test


def normalization_stats(images):
    """Per-channel mean and std of ``images`` on the [0, 1] scale."""
    images = check_images(images)
    mean = np.zeros(images.shape[-1])
    sq = np.zeros(images.shape[-1])
    # chunked to keep float64 copies of 50k images out of memory
    for start in range(0, images.shape[0], 4096):
        chunk = images[start:start + 4096].astype(np.float64) / 255.0
        mean += chunk.sum(axis=(0, 1, 2))
        sq += (chunk ** 2).sum(axis=(0, 1, 2))
    count = images.shape[0] * images.shape[1] * images.shape[2]
    mean /= count
    std = np.sqrt(np.maximum(sq / count - mean ** 2, 1e-12))
    return mean.astype(np.float32), std.astype(np.float32)


@dataclass(frozen=True, eq=False)
class PretextDataset:
    """Transformed copies of source images paired with transform labels.

    ``method`` is ``"separate"`` (every transform applied to every image) or
    ``"random"`` (``copies`` uniformly drawn transforms per image).
    """

    source_images: np.ndarray
    tset: TransformSet
    method: str
    seed: int
    source_index: np.ndarray
    transform_label: np.ndarray
    class_labels: np.ndarray = field(default=None)

    def __len__(self):
        return self.source_index.shape[0]

    @property
    def K(self):
        return self.tset.K

    @property
    def n_sources(self):
        return self.source_images.shape[0]

    def __getitem__(self, i):
        src = int(self.source_index[i])
        y = int(self.transform_label[i])
        img = apply_transform_batch(self.source_images[src][None], self.tset, [y])[0]
        return PretextSample(img, y, src)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def images(self, idx=None):
        """Materialise the transformed images for sample indices ``idx``."""
        if idx is None:
            idx = np.arange(len(self))
        idx = np.asarray(idx)
        return apply_transform_batch(
            self.source_images[self.source_index[idx]], self.tset, self.transform_label[idx]
        )

    def label_counts(self):
        return np.bincount(self.transform_label, minlength=self.K)


def _source_arrays(images):
    if isinstance(images, CifarSplit):
        return images.images, images.labels
    return check_images(images, allow_empty=True), None


def build_pretext_separate(images, tset):
    """Apply every member of ``tset`` to every image (source-major order)."""
    tset = make_transform_set(tset)
    src, classes = _source_arrays(images)
    n = src.shape[0]
    if n == 0:
        raise InvalidArgumentError("cannot build a pretext dataset from zero images")
    source_index = np.repeat(np.arange(n, dtype=np.int64), tset.K)
    labels = np.tile(np.arange(tset.K, dtype=np.int64), n)
    return PretextDataset(src, tset, "separate", 0, source_index, labels, classes)


def build_pretext_random(images, tset, copies, seed):
    """Make ``copies`` samples per image, each with a uniformly drawn transform."""
    tset = make_transform_set(tset)
    if isinstance(copies, bool) or not isinstance(copies, (int, np.integer)) or copies < 1:
        raise InvalidArgumentError(f"copies must be a positive integer, got {copies!r}")
    src, classes = _source_arrays(images)
    n = src.shape[0]
    if n == 0:
        raise InvalidArgumentError("cannot build a pretext dataset from zero images")
    rng = np.random.default_rng(seed)
    source_index = np.repeat(np.arange(n, dtype=np.int64), copies)
    labels = rng.integers(0, tset.K, size=n * copies, dtype=np.int64)
    return PretextDataset(src, tset, "random", int(seed), source_index, labels, classes)


def pretext_batches(ds, batch_size, epoch_seed, grouped=None):
    """Yield :class:`PretextBatch` objects covering ``ds`` once.

    In grouped mode (the default for method-1 datasets) every batch holds all
    ``K`` copies of ``batch_size // K`` source images, so the per-image loss
    average over transforms is taken inside one batch. Source order is
    shuffled with ``epoch_seed``. Flat mode shuffles samples individually.
    """
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be positive, got {batch_size}")
    if grouped is None:
        grouped = ds.method == "separate"
    rng = np.random.default_rng(epoch_seed)
    if grouped:
        if ds.method != "separate":
            raise ConfigurationError("grouped batching needs a dataset built with method 'separate'")
        if batch_size % ds.K:
            raise ConfigurationError(
                f"batch_size {batch_size} is not divisible by K={ds.K} in grouped mode"
            )
        per_batch = batch_size // ds.K
        order = rng.permutation(ds.n_sources)
        # method-1 layout is source-major: sample i*K + y is source i, label y
        for start in range(0, order.size, per_batch):
            srcs = order[start:start + per_batch]
            idx = (srcs[:, None] * ds.K + np.arange(ds.K)[None, :]).ravel()
            yield PretextBatch(ds.images(idx), ds.transform_label[idx], ds.source_index[idx])
    else:
        order = rng.permutation(len(ds))
        for start in range(0, order.size, batch_size):
            idx = order[start:start + batch_size]
            yield PretextBatch(ds.images(idx), ds.transform_label[idx], ds.source_index[idx])


def export_pretext(ds, out_dir, limit=None):
    """Write each sample as a PNG plus ``manifest.csv``; returns the manifest path.

    Manifest columns: sample_id, source_index, transform_label, class_label
    (empty when the sources carry no class labels).
    """
    from PIL import Image

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    n = len(ds) if limit is None else min(limit, len(ds))
    manifest = out_dir / "manifest.csv"
    tmp = manifest.with_suffix(".csv.tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "source_index", "transform_label", "class_label"])
        for start in range(0, n, 1024):
            idx = np.arange(start, min(start + 1024, n))
            imgs = ds.images(idx)
            for i, img in zip(idx, imgs):
                Image.fromarray(img).save(out_dir / "images" / f"{i:07d}.png")
                src = int(ds.source_index[i])
                cls = "" if ds.class_labels is None else int(ds.class_labels[src])
                writer.writerow([int(i), src, int(ds.transform_label[i]), cls])
    os.replace(tmp, manifest)
    return manifest


def read_manifest(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
