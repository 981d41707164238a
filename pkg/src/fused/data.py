"""Synthetic datasets, Dirichlet non-IID partitioning and attack injection."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .numcore import ConfigError, DimensionError, DomainError, as_tensor


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # n x d
    labels: np.ndarray  # length n, int64
    class_count: int

    def __post_init__(self):
        x = as_tensor(self.features)
        y = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if x.shape[0] != y.shape[0]:
            raise DimensionError(f"{x.shape[0]} feature rows but {y.shape[0]} labels")
        if self.class_count < 1:
            raise ConfigError("class_count must be positive")
        if y.size and (y.min() < 0 or y.max() >= self.class_count):
            raise DomainError(f"labels must lie in [0, {self.class_count})")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx].copy(), self.labels[idx].copy(), self.class_count)

    def where(self, mask) -> "Dataset":
        return self.subset(np.flatnonzero(mask))

    def without_classes(self, classes: Sequence[int]) -> "Dataset":
        return self.where(~np.isin(self.labels, list(classes)))

    def only_classes(self, classes: Sequence[int]) -> "Dataset":
        return self.where(np.isin(self.labels, list(classes)))

    def histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)

    @staticmethod
    def concat(parts: Sequence["Dataset"]) -> "Dataset":
        parts = list(parts)
        if not parts:
            raise ConfigError("nothing to concatenate")
        return Dataset(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.labels for p in parts]),
            parts[0].class_count,
        )


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    data: Dataset
    is_unlearn_target: bool = False
    attacked_indices: tuple[int, ...] = ()
    # Row indices of this shard in the dataset it was partitioned from.
    source_indices: tuple[int, ...] = field(default=(), repr=False)

    def __post_init__(self):
        att = tuple(sorted(int(i) for i in self.attacked_indices))
        if att and (att[0] < 0 or att[-1] >= len(self.data)):
            raise DomainError(f"attacked indices outside [0, {len(self.data)})")
        object.__setattr__(self, "attacked_indices", att)
        object.__setattr__(self, "source_indices", tuple(int(i) for i in self.source_indices))

    def __len__(self) -> int:
        return len(self.data)

    def clean_part(self) -> Dataset:
        """Rows not touched by an attack."""
        keep = np.ones(len(self.data), dtype=bool)
        keep[list(self.attacked_indices)] = False
        return self.data.where(keep)

    def attacked_part(self) -> Dataset:
        return self.data.subset(list(self.attacked_indices))


def gen_synthetic(classes: int, dim: int, per_class: int, spread: float, rng: np.random.Generator) -> Dataset:
    """Gaussian blobs, one per class, with class means uniform in ``[-1, 1]^dim``.

    Each sample is its class mean plus isotropic noise of standard deviation
    ``spread``.  Rows are shuffled.
    """
    if classes < 2:
        raise ConfigError("need at least 2 classes")
    if dim < 2:
        raise ConfigError("need at least 2 feature dimensions")
    if per_class < 1:
        raise ConfigError("per_class must be positive")
    if spread < 0:
        raise ConfigError("spread must be nonnegative")
    means = rng.uniform(-1.0, 1.0, size=(classes, dim))
    labels = np.repeat(np.arange(classes, dtype=np.int64), per_class)
    x = means[labels] + spread * rng.standard_normal((labels.size, dim))
    order = rng.permutation(labels.size)
    return Dataset(x[order], labels[order], classes)


def gen_synthetic_split(classes: int, dim: int, per_class_train: int, per_class_test: int, spread: float,
                        rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    """Train and test sets drawn from the same class means."""
    full = gen_synthetic(classes, dim, per_class_train + per_class_test, spread, rng)
    train_idx, test_idx = [], []
    for c in range(classes):
        rows = np.flatnonzero(full.labels == c)
        train_idx.append(rows[:per_class_train])
        test_idx.append(rows[per_class_train:])
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))
    return full.subset(train_idx), full.subset(test_idx)


def dirichlet_partition(ds: Dataset, n_clients: int, alpha: float, rng: np.random.Generator) -> list[ClientShard]:
    """Split ``ds`` across clients with per-class proportions drawn from Dirichlet(alpha).

    Clients left empty after the split each receive one sample taken at
    random from a client holding at least two.
    """
    if not alpha > 0:
        raise ConfigError(f"alpha must be positive, got {alpha}")
    if n_clients < 2:
        raise ConfigError("need at least 2 clients")
    if len(ds) < n_clients:
        raise ConfigError(f"cannot give {n_clients} clients a sample each from {len(ds)} rows")
    owners = np.empty(len(ds), dtype=np.int64)
    for c in range(ds.class_count):
        rows = np.flatnonzero(ds.labels == c)
        if rows.size == 0:
            continue
        rows = rows[rng.permutation(rows.size)]
        props = rng.dirichlet(np.full(n_clients, float(alpha)))
        cuts = np.floor(np.cumsum(props) * rows.size).astype(np.int64)
        cuts[-1] = rows.size
        start = 0
        for k, stop in enumerate(cuts):
            owners[rows[start:stop]] = k
            start = max(start, stop)
    counts = np.bincount(owners, minlength=n_clients)
    for k in np.flatnonzero(counts == 0):
        donors = np.flatnonzero(counts >= 2)
        donor = donors[rng.integers(donors.size)]
        candidates = np.flatnonzero(owners == donor)
        row = candidates[rng.integers(candidates.size)]
        owners[row] = k
        counts[donor] -= 1
        counts[k] += 1
    shards = []
    for k in range(n_clients):
        rows = np.flatnonzero(owners == k)
        shards.append(ClientShard(k, ds.subset(rows), source_indices=tuple(rows)))
    return shards


def apply_label_flip(shard: ClientShard, rng: np.random.Generator | None = None) -> ClientShard:
    """Relabel every sample ``y -> (y + 1) mod C`` and mark the shard for unlearning.

    ``rng`` is accepted for interface symmetry with the other attacks; the
    flip itself is deterministic.
    """
    ds = shard.data
    if ds.class_count < 2:
        raise ConfigError("label flipping needs at least 2 classes")
    if len(ds) == 0:
        raise ConfigError("cannot flip an empty shard")
    flipped = Dataset(ds.features.copy(), (ds.labels + 1) % ds.class_count, ds.class_count)
    return replace(shard, data=flipped, is_unlearn_target=True, attacked_indices=tuple(range(len(ds))))


def apply_backdoor(ds: Dataset, fraction: float, trigger_value: float, target_label: int,
                   rng: np.random.Generator) -> tuple[Dataset, tuple[int, ...]]:
    """Stamp the trigger on a random ``ceil(fraction * n)`` subset and relabel it ``target_label``.

    The trigger sets the last feature to ``trigger_value``.
    """
    if not 0 < fraction <= 1:
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
    if not 0 <= target_label < ds.class_count:
        raise ConfigError(f"target_label {target_label} outside [0, {ds.class_count})")
    n = len(ds)
    k = min(n, math.ceil(fraction * n - 1e-9))
    chosen = np.sort(rng.choice(n, size=k, replace=False))
    x = ds.features.copy()
    y = ds.labels.copy()
    x[chosen, -1] = trigger_value
    y[chosen] = target_label
    return Dataset(x, y, ds.class_count), tuple(int(i) for i in chosen)


def with_trigger(ds: Dataset, trigger_value: float) -> Dataset:
    """Copy of ``ds`` with the trigger stamped on every row; labels stay true."""
    x = ds.features.copy()
    x[:, -1] = trigger_value
    return Dataset(x, ds.labels.copy(), ds.class_count)


def overlap_split(ds: Dataset, n_clients: int, target_client: int, unique_class: int, overlap_class: int,
                  overlap_fraction: float, rng: np.random.Generator) -> list[ClientShard]:
    """Partition for the knowledge-interference experiment.

    The target client receives ``overlap_fraction`` of ``overlap_class`` and
    every sample of ``unique_class``.  All remaining rows are dealt uniformly
    at random to the other clients.
    """
    if n_clients < 2:
        raise ConfigError("need at least 2 clients")
    if not 0 <= target_client < n_clients:
        raise ConfigError(f"target_client {target_client} outside [0, {n_clients})")
    for c in (unique_class, overlap_class):
        if not 0 <= c < ds.class_count:
            raise ConfigError(f"class {c} outside [0, {ds.class_count})")
    if unique_class == overlap_class:
        raise ConfigError("unique and overlap class must differ")
    if not 0 < overlap_fraction < 1:
        raise ConfigError("overlap_fraction must lie in (0, 1)")
    owners = np.full(len(ds), -1, dtype=np.int64)
    owners[ds.labels == unique_class] = target_client
    overlap_rows = np.flatnonzero(ds.labels == overlap_class)
    overlap_rows = overlap_rows[rng.permutation(overlap_rows.size)]
    n_target = int(round(overlap_fraction * overlap_rows.size))
    owners[overlap_rows[:n_target]] = target_client
    others = [k for k in range(n_clients) if k != target_client]
    free = np.flatnonzero(owners < 0)
    owners[free] = np.asarray(others)[rng.integers(len(others), size=free.size)]
    shards = []
    for k in range(n_clients):
        rows = np.flatnonzero(owners == k)
        shards.append(ClientShard(k, ds.subset(rows), is_unlearn_target=(k == target_client),
                                  attacked_indices=tuple(range(rows.size)) if k == target_client else (),
                                  source_indices=tuple(rows)))
    return shards


# -- CSV exchange ---------------------------------------------------------------

def save_csv(ds: Dataset, path: str | Path) -> None:
    """Write ``f0..f{d-1},label`` rows; floats use ``repr`` so they round-trip exactly."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"f{j}" for j in range(ds.dim)] + ["label"])
        for row, label in zip(ds.features, ds.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


def load_csv(path: str | Path, class_count: int | None = None) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[-1] != "label":
            raise ConfigError(f"{path}: expected a header ending in 'label'")
        rows = [r for r in reader if r]
    if not rows:
        raise ConfigError(f"{path}: no data rows")
    x = np.array([[float(v) for v in r[:-1]] for r in rows], dtype=np.float64)
    y = np.array([int(r[-1]) for r in rows], dtype=np.int64)
    return Dataset(x, y, class_count if class_count is not None else int(y.max()) + 1)
