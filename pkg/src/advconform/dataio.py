"""Synthetic data generation, IDX file loading, and the three-way split.

Datasets are immutable bundles of a float64 feature matrix, integer labels,
and a class count. The split helper partitions sample indices into train,
calibration, and test sets by fractions (default 60/20/20).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "LabeledDataset",
    "SplitIndices",
    "IdxFormatError",
    "IdxConsistencyError",
    "IdxTruncatedError",
    "generate_gaussian_mixture",
    "split_dataset",
    "load_idx",
    "save_idx",
    "IDX_LABEL_MAGIC",
    "IDX_IMAGE_MAGIC",
]

IDX_LABEL_MAGIC = 0x00000801
IDX_IMAGE_MAGIC = 0x00000803


class IdxFormatError(ValueError):
    """Magic number or structural mismatch in an IDX file."""


class IdxConsistencyError(ValueError):
    """Image and label files disagree on sample count."""


class IdxTruncatedError(IOError):
    """IDX file ended before the declared payload was read."""


@dataclass(frozen=True)
class LabeledDataset:
    """Feature matrix (n_samples x n_features) with integer class labels."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {features.shape}")
        if features.shape[0] < 1:
            raise ValueError("dataset must contain at least one sample")
        if labels.shape != (features.shape[0],):
            raise ValueError(
                f"labels shape {labels.shape} does not match {features.shape[0]} samples"
            )
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError("labels must lie in [0, num_classes)")
        if not np.all(np.isfinite(features)):
            raise ValueError("features must be finite")
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class SplitIndices:
    """Disjoint train/calibration/test index lists covering 0..n_samples."""

    train: np.ndarray
    cal: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        parts = []
        for name in ("train", "cal", "test"):
            idx = np.asarray(getattr(self, name), dtype=np.int64)
            idx.setflags(write=False)
            object.__setattr__(self, name, idx)
            parts.append(idx)
        combined = np.concatenate(parts)
        n = combined.size
        if not np.array_equal(np.sort(combined), np.arange(n)):
            raise ValueError("splits must be disjoint and cover 0..n_samples")

    @property
    def n_samples(self) -> int:
        return self.train.size + self.cal.size + self.test.size


def _simplex_means(num_classes: int, dim: int, separation: float) -> np.ndarray:
    """Vertices of a regular simplex in R^dim with pairwise distance `separation`.

    The K centered basis vectors e_i - 1/K span a (K-1)-dimensional subspace;
    the Helmert rows give an explicit orthonormal basis of it, so the vertex
    coordinates are deterministic. Requires dim >= K - 1.
    """
    k = num_classes
    helmert = np.zeros((k - 1, k))
    for j in range(1, k):
        norm = np.sqrt(j * (j + 1))
        helmert[j - 1, :j] = 1.0 / norm
        helmert[j - 1, j] = -j / norm
    centered = np.eye(k) - 1.0 / k
    coords = centered @ helmert.T  # (k, k-1), pairwise distance sqrt(2)
    coords *= separation / np.sqrt(2.0)
    means = np.zeros((k, dim))
    means[:, : k - 1] = coords
    return means


def _circle_means(num_classes: int, separation: float) -> np.ndarray:
    """K points equally spaced on a circle with adjacent distance `separation`."""
    radius = separation / (2.0 * np.sin(np.pi / num_classes))
    angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def class_means(num_classes: int, dim: int, separation: float) -> np.ndarray:
    """Class mean layout: circle in 2-D, regular simplex when dim >= K - 1."""
    if dim == 2:
        return _circle_means(num_classes, separation)
    if dim >= num_classes - 1:
        return _simplex_means(num_classes, dim, separation)
    raise ValueError(
        f"cannot place {num_classes} means separated in {dim}-D; need dim >= K-1 or dim == 2"
    )


def generate_gaussian_mixture(
    num_classes: int,
    dim: int,
    n: int,
    class_separation: float,
    seed: int,
) -> LabeledDataset:
    """Sample a balanced Gaussian mixture with unit isotropic noise.

    Class means sit at distinct points pairwise (simplex) or adjacently
    (circle, 2-D) separated by ``class_separation``. Label counts are
    balanced to within one sample. Deterministic for a fixed seed.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if n < num_classes:
        raise ValueError("n must be >= num_classes")
    if not class_separation > 0:
        raise ValueError("class_separation must be > 0")
    means = class_means(num_classes, dim, class_separation)
    counts = np.full(num_classes, n // num_classes, dtype=np.int64)
    counts[: n % num_classes] += 1
    labels = np.repeat(np.arange(num_classes), counts)
    rng = np.random.default_rng(seed)
    rng.shuffle(labels)
    features = means[labels] + rng.standard_normal((n, dim))
    return LabeledDataset(features=features, labels=labels, num_classes=num_classes)


def split_dataset(
    ds: LabeledDataset,
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2),
    seed: int = 0,
) -> SplitIndices:
    """Randomly partition sample indices by `fractions` (train, cal, test).

    Sizes are floor(f_i * n); leftover samples go to train first, then cal.
    """
    fracs = tuple(float(f) for f in fractions)
    if len(fracs) != 3 or any(f <= 0 for f in fracs):
        raise ValueError("fractions must be three positive reals")
    if abs(sum(fracs) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fracs)!r}")
    n = ds.n_samples
    # the 1e-9 nudge keeps floor() from dropping a sample to float rounding
    sizes = [int(np.floor(f * n + 1e-9)) for f in fracs]
    leftover = n - sum(sizes)
    for i in range(leftover):
        sizes[min(i, 1)] += 1
    perm = np.random.default_rng(seed).permutation(n)
    train = perm[: sizes[0]]
    cal = perm[sizes[0] : sizes[0] + sizes[1]]
    test = perm[sizes[0] + sizes[1] :]
    return SplitIndices(train=train, cal=cal, test=test)


def _read_exact(f, nbytes: int, path) -> bytes:
    data = f.read(nbytes)
    if len(data) != nbytes:
        raise IdxTruncatedError(
            f"{path}: expected {nbytes} more bytes, got {len(data)}"
        )
    return data


def _read_be32(f, path) -> int:
    return struct.unpack(">i", _read_exact(f, 4, path))[0]


def load_idx(images_path, labels_path, num_classes: int | None = None) -> LabeledDataset:
    """Load an IDX image/label file pair (MNIST layout).

    Pixel bytes are scaled to [0, 1]; each image is flattened to one feature
    row. ``num_classes`` defaults to ``max(label) + 1`` (at least 2).
    """
    with open(labels_path, "rb") as f:
        magic = _read_be32(f, labels_path)
        if magic != IDX_LABEL_MAGIC:
            raise IdxFormatError(
                f"{labels_path}: bad label magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}"
            )
        n_labels = _read_be32(f, labels_path)
        labels = np.frombuffer(_read_exact(f, n_labels, labels_path), dtype=np.uint8)
    with open(images_path, "rb") as f:
        magic = _read_be32(f, images_path)
        if magic != IDX_IMAGE_MAGIC:
            raise IdxFormatError(
                f"{images_path}: bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}"
            )
        n_images = _read_be32(f, images_path)
        rows = _read_be32(f, images_path)
        cols = _read_be32(f, images_path)
        payload = _read_exact(f, n_images * rows * cols, images_path)
        pixels = np.frombuffer(payload, dtype=np.uint8)
    if n_images != n_labels:
        raise IdxConsistencyError(
            f"image count {n_images} does not match label count {n_labels}"
        )
    features = pixels.astype(np.float64).reshape(n_images, rows * cols) / 255.0
    if num_classes is None:
        num_classes = max(int(labels.max(initial=0)) + 1, 2)
    return LabeledDataset(
        features=features, labels=labels.astype(np.int64), num_classes=num_classes
    )


def save_idx(ds: LabeledDataset, images_path, labels_path) -> None:
    """Write a dataset as an IDX image/label pair.

    Features must already lie in [0, 1]; they are quantized to bytes, so a
    reload agrees with the original to within 1/255 per entry.
    """
    if ds.features.min() < 0.0 or ds.features.max() > 1.0:
        raise ValueError("IDX stores bytes; features must lie in [0, 1]")
    if ds.labels.max() > 255:
        raise ValueError("IDX labels are single bytes; labels must be < 256")
    n, d = ds.features.shape
    pixels = np.rint(ds.features * 255.0).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">iiii", IDX_IMAGE_MAGIC, n, 1, d))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">ii", IDX_LABEL_MAGIC, n))
        f.write(ds.labels.astype(np.uint8).tobytes())
