"""Dataset ingestion (IDX files), synthetic blob fixtures, Dirichlet partitioning."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class DataError(Exception):
    pass


class MagicMismatchError(DataError):
    def __init__(self, path, expected, actual):
        super().__init__(f"{path}: expected magic 0x{expected:08x}, got 0x{actual:08x}")
        self.expected = expected
        self.actual = actual


class TruncatedFileError(DataError):
    pass


class CountMismatchError(DataError):
    pass


class PartitionError(DataError):
    pass


@dataclass
class Dataset:
    """Flat-input classification dataset; inputs scaled to [0, 1] for IDX data."""

    inputs: np.ndarray  # [n, d] float64
    labels: np.ndarray  # [n] int64
    class_count: int

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise DataError(f"inputs must be [n, d] with n >= 1, got {self.inputs.shape}")
        if self.labels.shape != (self.inputs.shape[0],):
            raise DataError("labels/inputs row count mismatch")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise DataError("labels out of range")
        if not np.all(np.isfinite(self.inputs)):
            raise DataError("non-finite inputs")

    @property
    def n(self):
        return self.inputs.shape[0]

    @property
    def dim(self):
        return self.inputs.shape[1]


def _read_idx(path, magic_expected):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: too short for a magic number")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != magic_expected:
        raise MagicMismatchError(path, magic_expected, magic)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    body = np.frombuffer(raw, dtype=np.uint8, offset=header)
    if body.size < expected:
        raise TruncatedFileError(
            f"{path}: payload has {body.size} bytes, header promises {expected}"
        )
    return body[:expected].reshape(dims)


def load_idx(images_path, labels_path):
    """Load a big-endian IDX image/label file pair into a Dataset."""
    images = _read_idx(images_path, IMAGE_MAGIC)
    labels = _read_idx(labels_path, LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(
            f"{images.shape[0]} images vs {labels.shape[0]} labels"
        )
    n = images.shape[0]
    inputs = images.reshape(n, -1).astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    return Dataset(inputs, labels, class_count=int(labels.max()) + 1)


def write_idx(dataset, images_path, labels_path, image_shape=None):
    """Inverse of load_idx (inputs are rescaled back to uint8 bytes)."""
    n, d = dataset.inputs.shape
    if image_shape is None:
        image_shape = (d,)
    pixels = np.rint(dataset.inputs * 255.0).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">II", IMAGE_MAGIC, n))
        for dim in image_shape:
            f.write(struct.pack(">I", dim))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def dirichlet_partition(dataset, n_clients, alpha, seed, min_per_client=1, max_retries=100):
    """Non-i.i.d. split: per class, scatter indices to clients ~ Dirichlet(alpha).

    Redraws until every client holds at least min_per_client samples.
    """
    if n_clients < 1:
        raise PartitionError("need at least one client")
    if alpha <= 0:
        raise PartitionError("alpha must be positive")
    if min_per_client * n_clients > dataset.n:
        raise PartitionError(
            f"min_per_client={min_per_client} infeasible for {dataset.n} samples "
            f"across {n_clients} clients"
        )
    rng = np.random.Generator(np.random.PCG64(seed))
    by_class = [np.flatnonzero(dataset.labels == c) for c in range(dataset.class_count)]
    for _ in range(max_retries):
        client_indices = [[] for _ in range(n_clients)]
        for idx in by_class:
            if idx.size == 0:
                continue
            p = rng.dirichlet(np.full(n_clients, alpha))
            counts = rng.multinomial(idx.size, p)
            shuffled = rng.permutation(idx)
            offsets = np.concatenate(([0], np.cumsum(counts)))
            for i in range(n_clients):
                client_indices[i].append(shuffled[offsets[i]:offsets[i + 1]])
        parts = [np.sort(np.concatenate(ci)) for ci in client_indices]
        if all(p.size >= min_per_client for p in parts):
            return parts
    raise PartitionError(
        f"could not satisfy min_per_client={min_per_client} in {max_retries} draws"
    )


def make_blobs(n_per_class, classes, dim, spread, seed, center_distance=4.0):
    """Gaussian blobs around axis-aligned class centers (test fixture).

    Centers sit at (center_distance / sqrt(2)) * e_c, so every pair of
    centers is exactly center_distance apart. Requires classes <= dim.
    """
    if n_per_class < 1 or classes < 1 or dim < 1:
        raise DataError("n_per_class, classes and dim must be positive")
    if classes > dim:
        raise DataError("blob fixture needs classes <= dim")
    rng = np.random.Generator(np.random.PCG64(seed))
    scale = center_distance / np.sqrt(2.0)
    inputs = []
    labels = []
    for c in range(classes):
        center = np.zeros(dim)
        center[c] = scale
        inputs.append(center + spread * rng.standard_normal((n_per_class, dim)))
        labels.append(np.full(n_per_class, c, dtype=np.int64))
    return Dataset(np.concatenate(inputs), np.concatenate(labels), class_count=classes)
