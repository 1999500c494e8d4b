"""Datasets, heterogeneous client partitioning and per-client train/test splits."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ParseError


@dataclass
class LabeledDataset:
    features: np.ndarray  # (n, D)
    labels: np.ndarray  # (n,) int64
    num_classes: int
    # original label values when labels were remapped on load
    label_values: tuple[int, ...] | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.features.ndim != 2:
            raise DataError(f"features must be 2-D, got {self.features.shape}")
        if self.features.shape[0] != self.labels.shape[0]:
            raise DataError("features and labels differ in length")
        if not np.all(np.isfinite(self.features)):
            raise DataError("features contain non-finite values")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> LabeledDataset:
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.num_classes, self.label_values)

    def label_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass
class ClientSplit:
    train: LabeledDataset
    test: LabeledDataset


def generate_synthetic(
    num_classes: int, dim: int, samples_per_class: int, separation: float, seed: int
) -> LabeledDataset:
    """Isotropic unit-variance Gaussian blobs centred at ``separation * u_c``.

    Each ``u_c`` is a random unit vector; rows are shuffled.
    """
    for key, value in (("num_classes", num_classes), ("dim", dim), ("samples_per_class", samples_per_class)):
        if value < 1:
            raise ConfigError("must be >= 1", key=key)
    if not separation > 0:
        raise ConfigError("must be > 0", key="separation")
    rng = np.random.default_rng(seed)
    directions = rng.normal(size=(num_classes, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    centres = separation * directions
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    features = centres[labels] + rng.normal(size=(labels.size, dim))
    order = rng.permutation(labels.size)
    return LabeledDataset(features[order], labels[order], num_classes)


def largest_remainder(proportions, total: int) -> np.ndarray:
    """Integer counts summing to ``total`` that best match ``proportions``."""
    p = np.asarray(proportions, dtype=np.float64)
    p = p / p.sum()
    raw = p * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short:
        # stable sort keeps ties in index order
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def _repair_empty(assignment: list[list[int]], rng: np.random.Generator) -> None:
    while True:
        sizes = [len(a) for a in assignment]
        empty = [i for i, s in enumerate(sizes) if s == 0]
        if not empty:
            return
        donor = int(np.argmax(sizes))
        pick = int(rng.integers(sizes[donor]))
        assignment[empty[0]].append(assignment[donor].pop(pick))


def partition_dirichlet(
    dataset: LabeledDataset, num_clients: int, beta: float, rng: np.random.Generator
) -> list[LabeledDataset]:
    """Label-skewed split: class ``c`` is spread over clients by ``Dir(beta)`` proportions.

    Clients that end up empty receive one sample from the currently largest client.
    """
    if not beta > 0:
        raise ConfigError("must be > 0", key="beta")
    if num_clients < 1:
        raise ConfigError("must be >= 1", key="num_clients")
    if num_clients > len(dataset):
        raise DataError(f"{num_clients} clients but only {len(dataset)} samples")
    assignment: list[list[int]] = [[] for _ in range(num_clients)]
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        if idx.size == 0:
            continue
        rng.shuffle(idx)
        q = rng.dirichlet(np.full(num_clients, beta))
        if not np.all(np.isfinite(q)) or q.sum() <= 0:
            # extreme concentration can underflow; put the class on one client
            q = np.zeros(num_clients)
            q[rng.integers(num_clients)] = 1.0
        counts = largest_remainder(q, idx.size)
        for i, part in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
            assignment[i].extend(part.tolist())
    _repair_empty(assignment, rng)
    return [dataset.subset(sorted(a)) for a in assignment]


def pathological_labels(num_classes: int, num_clients: int, labels_per_client: int, rng: np.random.Generator):
    """Give every client ``labels_per_client`` distinct labels, covering all labels.

    Labels are dealt round-robin from a shuffled order, so when
    ``num_clients * labels_per_client == num_classes`` the sets are disjoint.
    """
    if not 1 <= labels_per_client <= num_classes:
        raise ConfigError(f"must be in [1, {num_classes}]", key="labels_per_client")
    if num_clients * labels_per_client < num_classes:
        raise ConfigError(
            f"{num_clients} clients x {labels_per_client} labels cannot cover {num_classes} labels",
            key="labels_per_client",
        )
    order = rng.permutation(num_classes)
    return [
        sorted(int(order[(i * labels_per_client + j) % num_classes]) for j in range(labels_per_client))
        for i in range(num_clients)
    ]


def partition_pathological(
    dataset: LabeledDataset, num_clients: int, labels_per_client: int, rng: np.random.Generator
) -> list[LabeledDataset]:
    """Each client holds a few labels; a label's samples are sharded among its holders.

    Shard sizes are drawn within +-50% of an even split so data amounts differ.
    """
    if num_clients < 1:
        raise ConfigError("must be >= 1", key="num_clients")
    client_labels = pathological_labels(dataset.num_classes, num_clients, labels_per_client, rng)
    holders: dict[int, list[int]] = {c: [] for c in range(dataset.num_classes)}
    for i, labels in enumerate(client_labels):
        for c in labels:
            holders[c].append(i)
    assignment: list[list[int]] = [[] for _ in range(num_clients)]
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        if idx.size == 0:
            continue
        rng.shuffle(idx)
        owners = holders[c]
        weights = rng.uniform(0.5, 1.5, size=len(owners))
        counts = largest_remainder(weights, idx.size)
        for owner, part in zip(owners, np.split(idx, np.cumsum(counts)[:-1])):
            assignment[owner].extend(part.tolist())
    for i, a in enumerate(assignment):
        if not a:
            raise DataError(f"client {i} received no samples; use fewer clients or more data")
    return [dataset.subset(sorted(a)) for a in assignment]


def split_train_test(data: LabeledDataset, rng: np.random.Generator, fraction: float = 0.75) -> ClientSplit:
    """Shuffle, then put ``ceil(fraction * n)`` samples in train (at least one stays in test)."""
    n = len(data)
    if n < 2:
        raise DataError(f"need at least 2 samples to split, got {n}")
    if not 0 < fraction < 1:
        raise ConfigError("must be in (0, 1)", key="fraction")
    n_train = min(math.ceil(fraction * n), n - 1)
    order = rng.permutation(n)
    return ClientSplit(data.subset(order[:n_train]), data.subset(order[n_train:]))


def load_csv(path: str | Path, header: bool = False) -> LabeledDataset:
    """Read feature columns followed by one integer label column.

    Labels are remapped to ``0..C-1`` in sorted order; the original values are
    kept in ``label_values``.
    """
    rows: list[list[float]] = []
    raw_labels: list[int] = []
    width = None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if header and lineno == 1:
                continue
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < 2:
                raise ParseError("need at least one feature and a label", line=lineno)
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise ParseError(f"expected {width} fields, got {len(row)}", line=lineno)
            try:
                feats = [float(cell) for cell in row[:-1]]
                label_f = float(row[-1])
            except ValueError as exc:
                raise ParseError(f"non-numeric cell ({exc})", line=lineno) from None
            if not all(math.isfinite(v) for v in feats):
                raise ParseError("non-finite feature", line=lineno)
            if not math.isfinite(label_f) or label_f != int(label_f):
                raise ParseError(f"label {row[-1]!r} is not an integer", line=lineno)
            rows.append(feats)
            raw_labels.append(int(label_f))
    if not rows:
        raise ParseError("no data rows", line=None)
    values, dense = np.unique(np.array(raw_labels), return_inverse=True)
    return LabeledDataset(
        np.array(rows), dense.reshape(-1), max(len(values), 1), tuple(int(v) for v in values)
    )


def label_entropy(data: LabeledDataset) -> float:
    """Shannon entropy (nats) of a dataset's label distribution."""
    counts = data.label_counts().astype(np.float64)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())
