"""Labeled datasets: synthetic generators and an IDX (MNIST-style) reader/writer."""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataGenerationError(RuntimeError):
    pass


class IdxFormatError(ValueError):
    pass


class IdxConsistencyError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledDataset:
    """Features ``(n, m)`` and zero-based labels in ``range(k)``."""

    features: np.ndarray
    labels: np.ndarray
    k: int

    def __post_init__(self):
        x = np.ascontiguousarray(self.features, dtype=np.float64)
        y = np.ascontiguousarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError(f"features must be a non-empty (n, m) matrix, got {x.shape}")
        if y.shape != (x.shape[0],):
            raise ValueError(f"{x.shape[0]} feature rows but {y.shape} labels")
        if self.k < 1 or y.min() < 0 or y.max() >= self.k:
            raise ValueError(f"labels must lie in [0, {self.k})")
        if not np.all(np.isfinite(x)):
            raise ValueError("features must be finite")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def m(self) -> int:
        return self.features.shape[1]

    def take(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.k)

    def with_features(self, features: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(features, self.labels, self.k)


def make_blobs(seed, n: int, m: int, k: int, separation: float,
               max_retries: int = 1000) -> LabeledDataset:
    """``k`` unit-variance Gaussian clusters whose centers are pairwise >= ``separation`` apart.

    Labels cycle ``0, 1, ..., k-1`` so classes are balanced to within one sample.
    """
    if n < k or k < 1 or m < 1:
        raise ValueError("need n >= k >= 1 and m >= 1")
    if separation <= 0:
        raise ValueError("separation must be positive")
    rng = np.random.default_rng(seed)
    # a box this wide comfortably fits k points at the requested spacing
    half_width = separation * max(1.0, k ** (1.0 / m))
    centers = None
    for _ in range(max_retries):
        cand = rng.uniform(-half_width, half_width, size=(k, m))
        if all(np.linalg.norm(cand[i] - cand[j]) >= separation
               for i, j in itertools.combinations(range(k), 2)):
            centers = cand
            break
    if centers is None:
        raise DataGenerationError(
            f"could not place {k} centers {separation} apart in {max_retries} tries")
    labels = np.arange(n) % k
    features = centers[labels] + rng.standard_normal((n, m))
    return LabeledDataset(features, labels, k)


def make_moons(seed, n: int, noise: float) -> LabeledDataset:
    """Two interleaving unit half-circles, ``n // 2`` points each."""
    if n % 2 or n < 2:
        raise ValueError("make_moons needs an even n >= 2")
    if noise < 0:
        raise ValueError("noise must be non-negative")
    rng = np.random.default_rng(seed)
    half = n // 2
    t = rng.uniform(0.0, np.pi, size=half)
    s = rng.uniform(0.0, np.pi, size=half)
    upper = np.column_stack([np.cos(t), np.sin(t)])
    lower = np.column_stack([1.0 - np.cos(s), 0.5 - np.sin(s)])
    features = np.vstack([upper, lower])
    labels = np.repeat([0, 1], half)
    if noise > 0:
        features = features + noise * rng.standard_normal(features.shape)
    order = rng.permutation(n)
    return LabeledDataset(features[order], labels[order], 2)


def subsample(dataset: LabeledDataset, seed, n_keep: int) -> LabeledDataset:
    """Uniform selection without replacement; kept rows stay in source order."""
    if not 1 <= n_keep <= dataset.n:
        raise ValueError(f"n_keep must lie in [1, {dataset.n}], got {n_keep}")
    idx = np.sort(np.random.default_rng(seed).choice(dataset.n, size=n_keep, replace=False))
    return dataset.take(idx)


def split(dataset: LabeledDataset, seed, n_test: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Seeded disjoint (train, test) split."""
    if not 1 <= n_test < dataset.n:
        raise ValueError(f"n_test must lie in [1, {dataset.n - 1}]")
    perm = np.random.default_rng(seed).permutation(dataset.n)
    return dataset.take(np.sort(perm[n_test:])), dataset.take(np.sort(perm[:n_test]))


# ---------------------------------------------------------------------------
# IDX


def _read_idx(path, expected_magic: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise OSError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise OSError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims)) if dims else 0
    if len(raw) - header < count:
        raise OSError(f"{path}: truncated IDX payload ({len(raw) - header} of {count} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path, k: int = 10) -> LabeledDataset:
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxConsistencyError(
            f"{images.shape[0]} images but {labels.shape[0]} labels")
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    k = max(k, int(labels.max()) + 1) if labels.size else k
    return LabeledDataset(features, labels.astype(np.int64), k)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images ``(count, rows, cols)`` and labels ``(count,)`` as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.ndim != 3:
        raise ValueError("images must have shape (count, rows, cols)")
    with open(images_path, "wb") as f:
        f.write(struct.pack(">I", IDX_IMAGES_MAGIC))
        f.write(struct.pack(">3I", *images.shape))
        f.write(images.tobytes(order="C"))
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">I", IDX_LABELS_MAGIC))
        f.write(struct.pack(">I", labels.shape[0]))
        f.write(labels.tobytes())
