"""Dataset loading, synthetic generators, and non-iid user partitions.

IDX files are the MNIST/EMNIST binary layout: big-endian magic (2051 for
3-dimensional image tensors, 2049 for label vectors), dimension sizes, then
raw unsigned bytes. Files ending in ``.gz`` are decompressed transparently.
"""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .costs import LabeledDataset

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049

SCHEMES = ("iid-uniform", "label-shard", "dirichlet")


class IdxFormatError(ValueError):
    """Malformed IDX payload; the message names the failing byte offset."""


def _open_maybe_gzip(path: str | Path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_be32(f, path, offset: int) -> int:
    raw = f.read(4)
    if len(raw) != 4:
        raise IdxFormatError(f"{path}: truncated header at byte {offset}")
    return struct.unpack(">i", raw)[0]


def load_idx(images_path: str | Path, labels_path: str | Path) -> LabeledDataset:
    """Load an IDX image/label file pair into a flat-feature dataset.

    Pixels are scaled to [0, 1]; images are flattened row-major so a 28x28
    digit becomes a length-784 feature row.
    """
    with _open_maybe_gzip(images_path) as f:
        magic = _read_be32(f, images_path, 0)
        if magic != IDX_IMAGE_MAGIC:
            raise IdxFormatError(
                f"{images_path}: bad image magic {magic:#010x} at byte 0, "
                f"expected {IDX_IMAGE_MAGIC:#010x}"
            )
        count = _read_be32(f, images_path, 4)
        rows = _read_be32(f, images_path, 8)
        cols = _read_be32(f, images_path, 12)
        payload = f.read()
        expected = count * rows * cols
        if len(payload) != expected:
            raise IdxFormatError(
                f"{images_path}: payload has {len(payload)} bytes, expected "
                f"{expected}; file ends at byte {16 + len(payload)}"
            )
        pixels = np.frombuffer(payload, dtype=np.uint8)
        features = pixels.reshape(count, rows * cols).astype(float) / 255.0

    with _open_maybe_gzip(labels_path) as f:
        magic = _read_be32(f, labels_path, 0)
        if magic != IDX_LABEL_MAGIC:
            raise IdxFormatError(
                f"{labels_path}: bad label magic {magic:#010x} at byte 0, "
                f"expected {IDX_LABEL_MAGIC:#010x}"
            )
        label_count = _read_be32(f, labels_path, 4)
        payload = f.read()
        if len(payload) != label_count:
            raise IdxFormatError(
                f"{labels_path}: payload has {len(payload)} bytes, expected "
                f"{label_count}; file ends at byte {8 + len(payload)}"
            )
        labels = np.frombuffer(payload, dtype=np.uint8).astype(np.int64)

    if count != label_count:
        raise IdxFormatError(
            f"{images_path} holds {count} images but {labels_path} holds "
            f"{label_count} labels"
        )
    return LabeledDataset(features=features, labels=labels)


def inspect_idx(path: str | Path) -> dict:
    """Header summary of a single IDX file (for the CLI inspector)."""
    with _open_maybe_gzip(path) as f:
        magic = _read_be32(f, path, 0)
        dtype_code = (magic >> 8) & 0xFF
        ndim = magic & 0xFF
        dims = [_read_be32(f, path, 4 + 4 * i) for i in range(ndim)]
    return {"path": str(path), "magic": magic, "dtype_code": dtype_code, "dims": dims}


def load_csv(path: str | Path) -> LabeledDataset:
    """CSV with a header row, a ``label`` column, and numeric feature columns."""
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or "label" not in reader.fieldnames:
            raise ValueError(f"{path}: expected a header row with a 'label' column")
        feature_names = [c for c in reader.fieldnames if c != "label"]
        rows, labels = [], []
        for record in reader:
            rows.append([float(record[c]) for c in feature_names])
            labels.append(float(record["label"]))
    labels_arr = np.array(labels)
    if np.all(labels_arr == labels_arr.astype(int)):
        labels_arr = labels_arr.astype(np.int64)
    return LabeledDataset(features=np.array(rows), labels=labels_arr)


@dataclass(frozen=True)
class PartitionPlan:
    """How to split a pooled dataset across users."""

    scheme: str
    num_users: int
    shards_per_user: int = 2
    concentration: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if self.num_users < 1:
            raise ValueError("num_users must be >= 1")
        if self.shards_per_user < 1:
            raise ValueError("shards_per_user must be >= 1")
        if self.concentration <= 0:
            raise ValueError("concentration must be > 0")


def partition(data: LabeledDataset, plan: PartitionPlan) -> list[LabeledDataset]:
    """Disjoint cover of ``data`` across users, deterministic given the seed."""
    m = data.num_samples
    if plan.num_users > m:
        raise ValueError(f"cannot split {m} samples across {plan.num_users} users")
    rng = np.random.default_rng(plan.seed)

    if plan.scheme == "iid-uniform":
        order = rng.permutation(m)
        user_indices = np.array_split(order, plan.num_users)
    elif plan.scheme == "label-shard":
        num_shards = plan.num_users * plan.shards_per_user
        if num_shards > m:
            raise ValueError(f"{num_shards} shards for {m} samples")
        by_label = np.argsort(data.labels, kind="stable")
        shards = np.array_split(by_label, num_shards)
        shard_order = rng.permutation(num_shards)
        user_indices = [
            np.concatenate(
                [shards[s] for s in shard_order[u * plan.shards_per_user:(u + 1) * plan.shards_per_user]]
            )
            for u in range(plan.num_users)
        ]
    else:  # dirichlet
        assignments = [[] for _ in range(plan.num_users)]
        for cls in np.unique(data.labels):
            idx = np.flatnonzero(data.labels == cls)
            rng.shuffle(idx)
            props = rng.dirichlet(np.full(plan.num_users, plan.concentration))
            cuts = (np.cumsum(props)[:-1] * len(idx)).astype(int)
            for u, chunk in enumerate(np.split(idx, cuts)):
                assignments[u].extend(chunk.tolist())
        # Repair empty users by pulling one sample from the largest user.
        for u in range(plan.num_users):
            while not assignments[u]:
                donor = max(range(plan.num_users), key=lambda v: len(assignments[v]))
                assignments[u].append(assignments[donor].pop())
        user_indices = [np.array(sorted(a), dtype=int) for a in assignments]

    return [
        LabeledDataset(features=data.features[idx], labels=data.labels[idx])
        for idx in user_indices
    ]


def synth_quadratic(
    num_users: int,
    dim: int,
    heterogeneity: float,
    seed: int,
    samples_per_user: int | None = None,
) -> tuple[list[LabeledDataset], np.ndarray]:
    """Per-user linear-regression instances with a known pooled optimum.

    All users share one full-rank design matrix; labels come from per-user
    true weights spread around a common center by ``heterogeneity``. Sharing
    the design keeps the pooled least-squares optimum equal to the mean of
    the per-user optima, which makes gap measurements solver-drift-free.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if heterogeneity < 0:
        raise ValueError("heterogeneity must be >= 0")
    if samples_per_user is None:
        samples_per_user = 4 * dim
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(samples_per_user, dim))
    center = rng.normal(size=dim)
    datasets = []
    targets = np.empty((num_users, samples_per_user))
    for n in range(num_users):
        w_true = center + heterogeneity * rng.normal(size=dim)
        targets[n] = X @ w_true
        datasets.append(LabeledDataset(features=X.copy(), labels=targets[n].copy()))
    pooled_X = np.concatenate([X] * num_users, axis=0)
    pooled_y = targets.reshape(-1)
    optimum, *_ = np.linalg.lstsq(pooled_X, pooled_y, rcond=None)
    return datasets, optimum


def synth_blobs(
    num_classes: int,
    dim: int,
    samples: int,
    separation: float,
    seed: int,
) -> LabeledDataset:
    """Gaussian-blob classification data, one unit-noise cluster per class."""
    if num_classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(num_classes, dim))
    means *= separation / np.linalg.norm(means, axis=1, keepdims=True)
    labels = rng.integers(0, num_classes, size=samples)
    features = means[labels] + rng.normal(size=(samples, dim))
    return LabeledDataset(features=features, labels=labels.astype(np.int64))


def subsample(data: LabeledDataset, fraction: float, seed: int) -> LabeledDataset:
    """Seeded random subset, at least one sample."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    if fraction == 1.0:
        return data
    rng = np.random.default_rng(seed)
    keep = max(1, int(round(data.num_samples * fraction)))
    idx = np.sort(rng.choice(data.num_samples, size=keep, replace=False))
    return LabeledDataset(features=data.features[idx], labels=data.labels[idx])
