"""Labeled datasets: IDX loading, synthetic transfer pairs, splits and sampling."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_UBYTE = 0x08


class IdxFormatError(ValueError):
    """Malformed IDX file; ``offset`` is the byte position of the problem."""

    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path = str(path)
        self.offset = offset


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Immutable feature array with integer labels.

    ``features`` has shape ``(N, *feature_shape)``; ``labels`` has shape
    ``(N,)``. Arrays are copied and marked read-only on construction.
    """

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = ""

    def __post_init__(self):
        features = np.array(self.features, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.int64)
        if features.ndim < 2:
            raise ValueError("features need shape (N, *feature_shape)")
        if labels.shape != (features.shape[0],):
            raise ValueError(f"{features.shape[0]} feature rows but labels shape {labels.shape}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        features.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.labels.size

    @property
    def feature_shape(self) -> tuple[int, ...]:
        return self.features.shape[1:]

    def subset(self, indices, name: str | None = None) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.num_classes,
                              self.name if name is None else name)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabeledDataset):
            return NotImplemented
        return (self.num_classes == other.num_classes
                and self.features.shape == other.features.shape
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels))


def concat(a: LabeledDataset, b: LabeledDataset, name: str = "") -> LabeledDataset:
    if a.num_classes != b.num_classes or a.feature_shape != b.feature_shape:
        raise ValueError("cannot concatenate datasets with different classes or shapes")
    return LabeledDataset(np.concatenate([a.features, b.features]),
                          np.concatenate([a.labels, b.labels]), a.num_classes,
                          name or a.name)


@dataclass(frozen=True)
class SplitSet:
    train: LabeledDataset
    val: LabeledDataset
    test: LabeledDataset

    def __post_init__(self):
        parts = (self.train, self.val, self.test)
        if len({d.num_classes for d in parts}) != 1 or len({d.feature_shape for d in parts}) != 1:
            raise ValueError("split parts must share num_classes and feature shape")

    @property
    def num_classes(self) -> int:
        return self.train.num_classes


# IDX -----------------------------------------------------------------------

def _read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxFormatError(path, len(raw), "file shorter than the 4-byte magic number")
    zero, dtype, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0:
        raise IdxFormatError(path, 0, f"bad magic number 0x{raw[:4].hex()}")
    if dtype != IDX_UBYTE:
        raise IdxFormatError(path, 2, f"unsupported dtype byte 0x{dtype:02x} (only 0x08)")
    if ndim == 0:
        raise IdxFormatError(path, 3, "zero dimensions")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(path, len(raw), f"truncated header, expected {ndim} extents")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims, dtype=np.int64))
    payload = len(raw) - header
    if payload < expected:
        raise IdxFormatError(path, len(raw), f"truncated payload: {payload} of {expected} bytes")
    if payload > expected:
        raise IdxFormatError(path, header + expected, f"{payload - expected} trailing bytes")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(path_images, path_labels, num_classes: int | None = None,
             name: str = "") -> LabeledDataset:
    """Load an unsigned-byte IDX image/label pair; pixels are scaled to [0, 1]."""
    images = _read_idx(path_images)
    labels = _read_idx(path_labels)
    if images.ndim < 2:
        raise IdxFormatError(path_images, 3, "image file needs at least 2 dimensions")
    if labels.ndim != 1:
        raise IdxFormatError(path_labels, 3, f"label file has {labels.ndim} dimensions, expected 1")
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(path_labels, 4,
                             f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels")
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 1
    return LabeledDataset(images.astype(np.float64) / 255.0, labels.astype(np.int64),
                          num_classes, name or Path(path_images).name)


def _write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">HBB", 0, IDX_UBYTE, array.ndim)
    header += struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def write_idx(dataset: LabeledDataset, path_images, path_labels) -> None:
    """Write features (rounded from [0, 1] to bytes) and labels as IDX files."""
    pixels = np.clip(np.rint(dataset.features * 255.0), 0, 255)
    _write_idx(path_images, pixels)
    _write_idx(path_labels, dataset.labels)


# splitting and sampling ------------------------------------------------------

def split(dataset: LabeledDataset, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> SplitSet:
    """Stratified train/val/test split.

    Each class contributes ``floor(fraction * n_c)`` to a part plus at most one
    extra example, handed out by largest fractional remainder. Part sizes are
    ``round(fraction * N)``; when the fractions sum to 1 they are apportioned
    by largest remainder instead so that every example is assigned.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not 0 < np.sum(fractions) <= 1 + 1e-12:
        raise ValueError(f"fractions must be three non-negative values summing to (0, 1], got {fractions}")
    rng = np.random.default_rng(seed)
    n = len(dataset)
    counts = dataset.class_counts()
    active = sum(1 for f in fractions if f > 0)
    for c, nc in enumerate(counts):
        if 0 < nc < active:
            raise ValueError(f"class {c} has {nc} examples, fewer than the {active} requested splits")

    exact = np.outer(counts, fractions)
    alloc = np.floor(exact + 1e-9).astype(np.int64)
    remainder = exact - alloc
    if abs(sum(fractions) - 1.0) < 1e-9:
        # a full partition: apportion N by largest remainder so nothing is dropped
        totals = np.floor(np.array(fractions) * n + 1e-9).astype(np.int64)
        rest = np.array(fractions) * n - totals
        for s in np.lexsort((np.arange(3), -rest))[:n - totals.sum()]:
            totals[s] += 1
    else:
        totals = np.array([int(round(f * n)) for f in fractions])
    for s in range(3):
        order = np.lexsort((np.arange(dataset.num_classes), -remainder[:, s]))
        for c in order:
            if alloc[:, s].sum() >= totals[s]:
                break
            if alloc[c].sum() < counts[c] and remainder[c, s] > 1e-9:
                alloc[c, s] += 1
    if abs(sum(fractions) - 1.0) < 1e-9:
        # classes still short (the greedy pass can starve one) take their
        # missing examples from splits where they have a fractional share
        for c in range(dataset.num_classes):
            for s in np.lexsort((np.arange(3), -remainder[c])):
                if alloc[c].sum() >= counts[c]:
                    break
                if remainder[c, s] > 1e-9 and alloc[c, s] == np.floor(exact[c, s] + 1e-9):
                    alloc[c, s] += 1
    if np.any(alloc.sum(axis=1) > counts):
        raise ValueError("fractions over-allocate a class")

    parts: list[list[int]] = [[], [], []]
    for c in range(dataset.num_classes):
        members = rng.permutation(np.flatnonzero(dataset.labels == c))
        start = 0
        for s in range(3):
            parts[s].extend(members[start:start + alloc[c, s]])
            start += alloc[c, s]
    names = ("train", "val", "test")
    return SplitSet(*(dataset.subset(np.sort(np.array(p, dtype=np.int64)),
                                     f"{dataset.name}/{names[s]}")
                      for s, p in enumerate(parts)))


def subsample_indices(dataset: LabeledDataset, k: int, seed: int = 0,
                      exclude=None) -> np.ndarray:
    """Indices of exactly ``k`` random examples of every class, grouped by class.

    ``exclude`` is an optional index set that may not be drawn, so repeated
    calls can produce disjoint subsets.
    """
    if k < 1:
        raise ValueError("k must be positive")
    rng = np.random.default_rng(seed)
    banned = np.zeros(len(dataset), dtype=bool)
    if exclude is not None:
        banned[np.asarray(exclude, dtype=np.int64)] = True
    chosen = []
    for c in range(dataset.num_classes):
        pool = np.flatnonzero((dataset.labels == c) & ~banned)
        if pool.size < k:
            raise ValueError(f"class {c} has {pool.size} available examples, need {k}")
        chosen.append(rng.permutation(pool)[:k])
    return np.concatenate(chosen)


def subsample_per_class(dataset: LabeledDataset, k: int, seed: int = 0,
                        exclude=None) -> LabeledDataset:
    return dataset.subset(subsample_indices(dataset, k, seed, exclude), f"{dataset.name}/k{k}")


def sample_batch(dataset: LabeledDataset, size: int, rng: np.random.Generator):
    """Uniform draw with replacement; returns ``(features, labels)`` arrays."""
    if size < 1:
        raise ValueError("batch size must be at least 1")
    if len(dataset) == 0:
        raise ValueError(f"cannot sample from empty dataset {dataset.name!r}")
    idx = rng.integers(0, len(dataset), size=size)
    return dataset.features[idx], dataset.labels[idx]


# synthetic transfer pairs -------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Generator settings for a source/target pair with known class relevance.

    Each target class is a mixture of ``clusters_per_class`` Gaussian blobs.
    The i-th relevant source class reuses the blobs of target class
    ``i % num_target_classes``; irrelevant source classes are isotropic
    noise with random labels drawn among the irrelevant classes.
    """

    num_source_classes: int = 10
    num_target_classes: int = 5
    num_relevant: int = 5
    source_train_per_class: int = 200
    source_val_per_class: int = 20
    source_test_per_class: int = 20
    target_train_per_class: int = 10
    target_val_per_class: int = 40
    target_test_per_class: int = 100
    dim: int = 32
    clusters_per_class: int = 2
    separation: float = 3.0
    noise: float = 1.0
    irrelevant_scale: float = 3.0
    irrelevant_center: str = "origin"
    seed: int = 0

    def __post_init__(self):
        positive = ("num_source_classes", "num_target_classes", "num_relevant",
                    "source_train_per_class", "source_val_per_class", "source_test_per_class",
                    "target_train_per_class", "target_val_per_class", "target_test_per_class",
                    "dim", "clusters_per_class")
        for field_name in positive:
            if getattr(self, field_name) < 1:
                raise ValueError(f"{field_name} must be positive")
        if self.num_relevant > self.num_source_classes:
            raise ValueError("num_relevant cannot exceed num_source_classes")
        if self.irrelevant_center not in ("origin", "target"):
            raise ValueError("irrelevant_center must be 'origin' or 'target'")
        if self.noise < 0 or self.separation <= 0 or self.irrelevant_scale < 0:
            raise ValueError("noise/irrelevant_scale must be >= 0 and separation > 0")


def make_synthetic_transfer_pair(spec: SyntheticSpec):
    """Build ``(source_splits, target_splits, relevance_mask)`` from ``spec`` alone."""
    rng = np.random.default_rng(spec.seed)
    ct, cs, d, m = spec.num_target_classes, spec.num_source_classes, spec.dim, spec.clusters_per_class
    centers = rng.normal(size=(ct, m, d))
    centers *= spec.separation / np.linalg.norm(centers, axis=-1, keepdims=True)
    relevant = np.sort(rng.permutation(cs)[:spec.num_relevant])
    mask = np.zeros(cs, dtype=bool)
    mask[relevant] = True
    irrelevant = np.flatnonzero(~mask)

    def blobs(target_class, count):
        which = rng.integers(0, m, size=count)
        return centers[target_class, which] + spec.noise * rng.normal(size=(count, d))

    def source_part(per_class):
        feats, labels = [], []
        for i, c in enumerate(relevant):
            feats.append(blobs(i % ct, per_class))
            labels.append(np.full(per_class, c))
        n_noise = per_class * irrelevant.size
        if n_noise:
            noise = spec.irrelevant_scale * rng.normal(size=(n_noise, d))
            if spec.irrelevant_center == "target":
                noise += centers[rng.integers(0, ct, n_noise), rng.integers(0, m, n_noise)]
            feats.append(noise)
            # balanced label multiset, shuffled so labels carry no signal
            labels.append(rng.permutation(np.repeat(irrelevant, per_class)))
        return np.concatenate(feats), np.concatenate(labels)

    def target_part(per_class):
        feats = [blobs(t, per_class) for t in range(ct)]
        labels = [np.full(per_class, t) for t in range(ct)]
        return np.concatenate(feats), np.concatenate(labels)

    parts = {}
    for split_name in ("train", "val", "test"):
        x, y = source_part(getattr(spec, f"source_{split_name}_per_class"))
        parts["source", split_name] = LabeledDataset(x, y, cs, f"synthetic-source/{split_name}")
        x, y = target_part(getattr(spec, f"target_{split_name}_per_class"))
        parts["target", split_name] = LabeledDataset(x, y, ct, f"synthetic-target/{split_name}")
    source = SplitSet(parts["source", "train"], parts["source", "val"], parts["source", "test"])
    target = SplitSet(parts["target", "train"], parts["target", "val"], parts["target", "test"])
    return source, target, mask
