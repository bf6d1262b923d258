"""Datasets and label-skewed partitioning across devices."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DataConfigError(ValueError):
    pass


@dataclass
class Dataset:
    x: np.ndarray          # (n, d) float64
    y: np.ndarray          # (n,) int64
    n_classes: int

    def __len__(self) -> int:
        return int(self.y.shape[0])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx], self.n_classes)


@dataclass
class ShardedDataset:
    """Per-device index sets into a parent dataset.

    ``shard_classes[s]`` is the class of shard ``s`` and ``device_shards[k]``
    lists the shards device ``k`` holds.
    """
    parent: Dataset
    indices: dict[int, np.ndarray]
    shard_classes: np.ndarray
    device_shards: dict[int, list[int]]
    shards_per_device: int
    shard_members: list[np.ndarray] = field(default_factory=list)

    @property
    def n_classes(self) -> int:
        return self.parent.n_classes

    def sizes(self) -> dict[int, int]:
        return {k: int(v.size) for k, v in self.indices.items()}

    def local(self, k: int) -> Dataset:
        return self.parent.subset(self.indices[k])

    def classes_of(self, k: int) -> set[int]:
        return {int(c) for c in np.unique(self.parent.y[self.indices[k]])}


def _shards_per_class(n_shards: int, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    counts = np.full(n_classes, n_shards // n_classes)
    extra = n_shards % n_classes
    if extra:
        counts[rng.permutation(n_classes)[:extra]] += 1
    return counts


def _split_by_class(labels: np.ndarray, counts: np.ndarray, rng: np.random.Generator):
    """Shuffle each class and cut it into ``counts[c]`` nearly equal shards."""
    shard_classes, members = [], []
    for c, m in enumerate(counts):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        for part in np.array_split(idx, m):
            shard_classes.append(c)
            members.append(np.sort(part))
    return np.array(shard_classes, dtype=np.int64), members


def partition_non_iid(dataset: Dataset, K: int, shards_per_device: int,
                      rng: np.random.Generator) -> ShardedDataset:
    """Label-sorted sharding: every class is cut into shards and each device gets
    ``shards_per_device`` of them at random.

    With K * shards_per_device not a multiple of the class count, the leftover
    shards go to randomly chosen classes, so shard sizes differ by class.
    A single device receives the whole dataset.
    """
    if K < 1 or shards_per_device < 1:
        raise DataConfigError("K and shards_per_device must be >= 1")
    n = len(dataset)
    if K == 1:
        idx = np.arange(n)
        return ShardedDataset(dataset, {0: idx}, np.array([-1]), {0: [0]},
                              shards_per_device, [idx])
    n_shards = K * shards_per_device
    if n_shards < dataset.n_classes:
        raise DataConfigError(
            f"{K} devices x {shards_per_device} shards cannot cover {dataset.n_classes} classes")
    counts = _shards_per_class(n_shards, dataset.n_classes, rng)
    shard_classes, members = _split_by_class(dataset.y, counts, rng)
    if any(m.size == 0 for m in members):
        raise DataConfigError("some class has fewer samples than shards")
    order = rng.permutation(n_shards)
    device_shards = {k: sorted(order[k * shards_per_device:(k + 1) * shards_per_device].tolist())
                     for k in range(K)}
    indices = {k: np.concatenate([members[s] for s in device_shards[k]])
               for k in range(K)}
    return ShardedDataset(dataset, indices, shard_classes, device_shards,
                          shards_per_device, members)


def partition_like(train: ShardedDataset, test: Dataset, rng: np.random.Generator) -> ShardedDataset:
    """Cut a test set with the same shard-to-class layout as a training partition.

    Device k then evaluates on held-out samples of the classes it trained on,
    in the same proportions.
    """
    K = len(train.indices)
    if K == 1:
        idx = np.arange(len(test))
        return ShardedDataset(test, {0: idx}, np.array([-1]), {0: [0]},
                              train.shards_per_device, [idx])
    counts = np.bincount(train.shard_classes, minlength=test.n_classes)
    # shards of one class appear contiguously in the same order in both splits
    shard_classes, members = _split_by_class(test.y, counts, rng)
    indices = {k: np.concatenate([members[s] for s in shards])
               for k, shards in train.device_shards.items()}
    return ShardedDataset(test, indices, shard_classes, train.device_shards,
                          train.shards_per_device, members)


# --------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian-mixture classification task.

    Each class is a mixture of ``modes`` unit Gaussian blobs in a ``latent``
    space, placed into ``dim`` input dimensions by a random orthonormal map
    (optionally followed by a ReLU) plus isotropic noise. ``nuisance_rank``
    label-free directions with per-coordinate standard deviation
    ``nuisance_scale`` are added on top. A device with a few dozen samples
    cannot tell them from signal; the pooled data can, which is what a shared
    extractor exploits. The defaults make that effect dominate.
    """
    n_classes: int = 10
    dim: int = 64
    latent: int = 8
    modes: int = 1
    train_per_class: int = 60
    test_per_class: int = 100
    separation: float = 1.5
    noise: float = 0.3
    nuisance_rank: int = 8
    nuisance_scale: float = 3.0
    antipodal: bool = False      # second half of the modes mirror the first through the origin
    linear_embed: bool = True    # skip the ReLU in the embedding
    rms_norm: float = 4.0        # rescale inputs to this root-mean-square row norm (0 = off)


def make_synthetic(spec: SyntheticSpec, rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    centers = rng.normal(0.0, spec.separation, size=(spec.n_classes, spec.modes, spec.latent))
    if spec.antipodal:
        half = spec.modes // 2
        centers[:, half:2 * half] = -centers[:, :half]
    if spec.latent > spec.dim:
        raise DataConfigError("latent dimension exceeds input dimension")
    # orthonormal rows: latent distances carry over to input space unchanged
    q, _ = np.linalg.qr(rng.normal(size=(spec.dim, spec.latent)))
    embed = q.T
    shift = rng.normal(0.0, 0.5, size=spec.dim)
    nuisance = rng.normal(0.0, 1.0 / np.sqrt(spec.dim), size=(spec.nuisance_rank, spec.dim))

    def draw(per_class: int) -> Dataset:
        y = np.repeat(np.arange(spec.n_classes), per_class)
        mode = rng.integers(0, spec.modes, size=y.size)
        z = centers[y, mode] + rng.normal(size=(y.size, spec.latent))
        x = z @ embed + shift
        if not spec.linear_embed:
            x = np.maximum(x, 0.0)
        x = x + spec.noise * rng.normal(size=(y.size, spec.dim))
        if spec.nuisance_rank:
            coef = spec.nuisance_scale * rng.normal(size=(y.size, spec.nuisance_rank))
            x = x + coef @ nuisance * np.sqrt(spec.dim / spec.nuisance_rank)
        return Dataset(x, y.astype(np.int64), spec.n_classes)

    train, test = draw(spec.train_per_class), draw(spec.test_per_class)
    if spec.rms_norm > 0:
        # one factor from the training rows, applied to both splits
        factor = spec.rms_norm / np.sqrt(np.mean(np.sum(train.x ** 2, axis=1)))
        train.x *= factor
        test.x *= factor
    return train, test


# ------------------------------------------------------------------- MNIST

_IDX_IMAGES = 0x00000803
_IDX_LABELS = 0x00000801


def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Read an IDX file (images: magic 0x803, labels: magic 0x801), optionally gzipped."""
    path = Path(path)
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise DataConfigError(f"{path}: truncated IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic == _IDX_IMAGES:
        n, rows, cols = struct.unpack(">III", raw[4:16])
        shape, offset = (n, rows, cols), 16
    elif magic == _IDX_LABELS:
        (n,) = struct.unpack(">I", raw[4:8])
        shape, offset = (n,), 8
    else:
        raise DataConfigError(f"{path}: unknown IDX magic 0x{magic:08x}")
    need = int(np.prod(shape))
    if len(raw) - offset != need:
        raise DataConfigError(f"{path}: expected {need} data bytes, found {len(raw) - offset}")
    return np.frombuffer(raw, dtype=np.uint8, offset=offset).reshape(shape)


def load_mnist(train_images, train_labels, test_images, test_labels) -> tuple[Dataset, Dataset]:
    def build(img, lab) -> Dataset:
        x = read_idx(img).reshape(-1, 784).astype(np.float64) / 255.0
        y = read_idx(lab).astype(np.int64)
        if x.shape[0] != y.shape[0]:
            raise DataConfigError(f"{img} and {lab} hold different sample counts")
        return Dataset(x, y, 10)
    return build(train_images, train_labels), build(test_images, test_labels)
