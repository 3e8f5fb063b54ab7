"""Datasets, IDX ingestion and non-i.i.d. client partitioning."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    pass


class IdxBadMagic(IdxError):
    pass


class IdxTruncated(IdxError):
    pass


class IdxCountMismatch(IdxError):
    pass


class PartitionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        x = np.ascontiguousarray(self.features, dtype=np.float64)
        y = np.ascontiguousarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise ValueError("features must be (n, f) and labels (n,)")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise ValueError("label outside [0, n_classes)")
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite feature")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return int(self.labels.size)

    @property
    def f(self) -> int:
        return int(self.features.shape[1])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.n_classes)


def synth_classification(n, f, C, class_sep, seed) -> Dataset:
    """Gaussian blobs: class means ~ class_sep * N(0, I), unit covariance."""
    if n < 2 * C:
        raise ValueError(f"need n >= 2*C, got n={n}, C={C}")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0x5E7,)))
    means = class_sep * rng.standard_normal((C, f))
    labels = rng.permutation(np.arange(n) % C)
    features = means[labels] + rng.standard_normal((n, f))
    return Dataset(features, labels, C)


def train_test_split(ds: Dataset, test_fraction, seed):
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0x7E57,)))
    perm = rng.permutation(ds.n)
    n_test = int(round(test_fraction * ds.n))
    return ds.subset(np.sort(perm[n_test:])), ds.subset(np.sort(perm[:n_test]))


def _read(path):
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def load_idx(images_path, labels_path, n_classes=None) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped); pixels scaled to [0, 1]."""
    img = _read(images_path)
    lab = _read(labels_path)
    if len(img) < 4 or len(lab) < 4:
        raise IdxTruncated("file shorter than its magic number")
    (img_magic,) = struct.unpack_from(">I", img)
    (lab_magic,) = struct.unpack_from(">I", lab)
    if img_magic != IDX_IMAGES_MAGIC:
        raise IdxBadMagic(f"{images_path}: magic {img_magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")
    if lab_magic != IDX_LABELS_MAGIC:
        raise IdxBadMagic(f"{labels_path}: magic {lab_magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")
    if len(img) < 16:
        raise IdxTruncated(f"{images_path}: truncated header")
    if len(lab) < 8:
        raise IdxTruncated(f"{labels_path}: truncated header")
    count, rows, cols = struct.unpack_from(">III", img, 4)
    (n_labels,) = struct.unpack_from(">I", lab, 4)
    if count != n_labels:
        raise IdxCountMismatch(f"{count} images but {n_labels} labels")
    if len(img) < 16 + count * rows * cols:
        raise IdxTruncated(f"{images_path}: expected {count * rows * cols} pixel bytes")
    if len(lab) < 8 + n_labels:
        raise IdxTruncated(f"{labels_path}: expected {n_labels} label bytes")
    pixels = np.frombuffer(img, dtype=np.uint8, count=count * rows * cols, offset=16)
    features = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    labels = np.frombuffer(lab, dtype=np.uint8, count=n_labels, offset=8).astype(np.int64)
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if labels.size else 1
    return Dataset(features, labels, n_classes)


def partition_shards(ds: Dataset, m, shards_per_client, seed, min_samples=1):
    """Label-sorted shards dealt to clients (McMahan-style non-i.i.d. split)."""
    if m > ds.n:
        raise PartitionError(f"{m} clients for {ds.n} samples")
    n_shards = m * shards_per_client
    if n_shards > ds.n:
        raise PartitionError(f"{n_shards} shards for {ds.n} samples")
    order = np.argsort(ds.labels, kind="stable")
    shards = np.array_split(order, n_shards)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0x5A4D,)))
    deal = rng.permutation(n_shards)
    parts = []
    for i in range(m):
        mine = deal[i * shards_per_client:(i + 1) * shards_per_client]
        parts.append(np.sort(np.concatenate([shards[s] for s in mine])))
    _check_min(parts, min_samples)
    return parts


def partition_dirichlet(ds: Dataset, m, beta, seed, min_samples=2):
    """Per-class Dirichlet(beta) split; starved clients take samples from the largest."""
    if not beta > 0:
        raise PartitionError(f"beta must be positive, got {beta}")
    if m * min_samples > ds.n:
        raise PartitionError(f"cannot give {m} clients {min_samples} samples from {ds.n}")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0xD1C,)))
    buckets = [[] for _ in range(m)]
    for c in range(ds.n_classes):
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        if idx.size == 0:
            continue
        props = rng.dirichlet(np.full(m, float(beta)))
        cuts = (np.cumsum(props)[:-1] * idx.size).astype(np.int64)
        for i, piece in enumerate(np.split(idx, cuts)):
            buckets[i].extend(piece.tolist())
    for i in range(m):
        while len(buckets[i]) < min_samples:
            donor = max(range(m), key=lambda j: (len(buckets[j]), -j))
            buckets[i].append(buckets[donor].pop())
    parts = [np.sort(np.asarray(b, dtype=np.int64)) for b in buckets]
    _check_min(parts, min_samples)
    return parts


def _check_min(parts, min_samples):
    for i, p in enumerate(parts):
        if p.size < max(min_samples, 1):
            raise PartitionError(f"client {i} holds {p.size} samples (< {max(min_samples, 1)})")


def label_histograms(ds: Dataset, parts):
    return np.stack([np.bincount(ds.labels[p], minlength=ds.n_classes) for p in parts])


def mean_pairwise_tv(ds: Dataset, parts) -> float:
    """Mean total-variation distance between client label distributions."""
    h = label_histograms(ds, parts).astype(np.float64)
    h /= h.sum(axis=1, keepdims=True)
    m = h.shape[0]
    if m < 2:
        return 0.0
    tv = 0.5 * np.abs(h[:, None, :] - h[None, :, :]).sum(axis=2)
    return float(tv[np.triu_indices(m, 1)].mean())
