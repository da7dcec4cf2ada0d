"""Synthetic datasets, non-IID client partitions and query selection."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class PartitionError(ValueError):
    pass


class QuerySelectionError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx], self.num_classes)

    def class_counts(self) -> dict[int, int]:
        counts = np.bincount(self.y, minlength=self.num_classes)
        return {c: int(n) for c, n in enumerate(counts)}


@dataclass(frozen=True)
class GlobalDataset:
    train: Dataset
    test: Dataset

    @property
    def num_classes(self):
        return self.train.num_classes

    @property
    def input_dim(self):
        return self.train.x.shape[1]


@dataclass(frozen=True)
class ClientDataset:
    client_id: int
    x: np.ndarray
    y: np.ndarray
    num_classes: int
    train_idx: np.ndarray
    val_idx: np.ndarray
    # indices into the global training set, for conservation checks
    global_idx: np.ndarray = field(repr=False)

    @property
    def class_counts(self) -> dict[int, int]:
        """Counts over the client's training split."""
        counts = np.bincount(self.y[self.train_idx], minlength=self.num_classes)
        return {c: int(n) for c, n in enumerate(counts)}

    @property
    def local_classes(self) -> list[int]:
        return [c for c, n in self.class_counts.items() if n > 0]

    @property
    def train(self) -> Dataset:
        return Dataset(self.x[self.train_idx], self.y[self.train_idx], self.num_classes)

    @property
    def val(self) -> Dataset:
        return Dataset(self.x[self.val_idx], self.y[self.val_idx], self.num_classes)

    def class_distribution(self) -> np.ndarray:
        counts = np.array([self.class_counts[c] for c in range(self.num_classes)], float)
        return counts / counts.sum()


@dataclass(frozen=True)
class PartitionSpec:
    scheme: str  # "pathological" | "dirichlet"
    num_clients: int
    classes_per_client: int = 3
    alpha: float = 0.1
    count_range: tuple[float, float] = (0.3, 1.0)
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in ("pathological", "dirichlet"):
            raise PartitionError(f"unknown scheme {self.scheme!r}")
        if self.num_clients < 2:
            raise PartitionError("need at least two clients")
        if self.classes_per_client < 1:
            raise PartitionError("classes_per_client must be >= 1")
        if self.alpha <= 0:
            raise PartitionError("dirichlet alpha must be positive")
        lo, hi = self.count_range
        if not 0 < lo <= hi <= 1:
            raise PartitionError("count_range must satisfy 0 < low <= high <= 1")


@dataclass(frozen=True)
class QuerySpec:
    student_id: int
    query_classes: tuple[int, ...]
    sample_threshold: int = 50
    mode: str = "single"


def generate_synthetic(
    num_classes: int = 10,
    dims: int = 20,
    per_class: int = 300,
    cluster_spread: float = 1.0,
    seed: int = 0,
    test_per_class: int = 100,
    center_scale: float = 1.0,
    modes_per_class: int = 1,
) -> GlobalDataset:
    """Gaussian clusters around seeded random centers, standardised with training statistics.

    ``per_class`` training samples plus a balanced test set of
    ``test_per_class`` samples per class. With ``modes_per_class > 1`` each
    class is an equal mixture of that many clusters.
    """
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, center_scale, (num_classes, modes_per_class, dims))

    def draw(n):
        y = np.repeat(np.arange(num_classes), n)
        mode = np.tile(np.arange(n) % modes_per_class, num_classes)
        x = centers[y, mode] + cluster_spread * rng.normal(size=(len(y), dims))
        return x, y

    x_tr, y_tr = draw(per_class)
    x_te, y_te = draw(test_per_class)
    mu, sd = x_tr.mean(axis=0), x_tr.std(axis=0)
    sd[sd == 0] = 1.0
    return GlobalDataset(
        Dataset((x_tr - mu) / sd, y_tr, num_classes),
        Dataset((x_te - mu) / sd, y_te, num_classes),
    )


def load_csv(path, num_classes: int | None = None, test_fraction: float = 0.2, seed: int = 0) -> GlobalDataset:
    """Load rows of ``d`` feature columns followed by an integer label.

    A header row is skipped if its last field is not an integer. The test
    split is drawn balanced per class (same count for every class).
    """
    rows = list(csv.reader(Path(path).open()))
    if rows and not rows[0][-1].strip().lstrip("-").isdigit():
        rows = rows[1:]
    if not rows:
        raise ValueError(f"{path}: no data rows")
    x = np.array([[float(v) for v in r[:-1]] for r in rows])
    y = np.array([int(r[-1]) for r in rows])
    c = num_classes or int(y.max()) + 1
    if y.min() < 0 or y.max() >= c:
        raise ValueError(f"{path}: labels outside [0, {c})")
    rng = np.random.default_rng(seed)
    per_class_test = int(min(np.bincount(y, minlength=c)) * test_fraction)
    test_idx = []
    for k in range(c):
        idx = np.flatnonzero(y == k)
        test_idx.extend(rng.choice(idx, per_class_test, replace=False))
    test_mask = np.zeros(len(y), bool)
    test_mask[test_idx] = True
    mu, sd = x[~test_mask].mean(axis=0), x[~test_mask].std(axis=0)
    sd[sd == 0] = 1.0
    x = (x - mu) / sd
    return GlobalDataset(Dataset(x[~test_mask], y[~test_mask], c), Dataset(x[test_mask], y[test_mask], c))


def save_csv(dataset: Dataset, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(dataset.x.shape[1])] + ["label"])
        for row, label in zip(dataset.x, dataset.y):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


def _make_client(cid, data: Dataset, idx, val_fraction, rng) -> ClientDataset:
    idx = np.sort(np.asarray(idx, dtype=np.int64))
    x, y = data.x[idx], data.y[idx]
    # stratified val split; classes with a single sample stay in train
    val = []
    for c in np.unique(y):
        members = np.flatnonzero(y == c)
        n_val = int(np.floor(val_fraction * len(members)))
        if n_val and len(members) > 1:
            val.extend(rng.choice(members, n_val, replace=False))
    val = np.sort(np.asarray(val, dtype=np.int64))
    train = np.setdiff1d(np.arange(len(y)), val)
    return ClientDataset(cid, x, y, data.num_classes, train, val, idx)


def pathological_supports(num_classes: int, num_clients: int, m: int, rng) -> list[list[int]]:
    """Round-robin over a seeded class permutation, ``m`` distinct classes per client."""
    if m > num_classes:
        raise PartitionError(f"cannot give {m} distinct classes out of {num_classes}")
    perm = rng.permutation(num_classes)
    supports = []
    pos = 0
    for _ in range(num_clients):
        classes = []
        while len(classes) < m:
            c = int(perm[pos % num_classes])
            pos += 1
            if c not in classes:
                classes.append(c)
        supports.append(sorted(classes))
    return supports


def partition_pathological(data: GlobalDataset | Dataset, spec: PartitionSpec) -> list[ClientDataset]:
    train = data.train if isinstance(data, GlobalDataset) else data
    if spec.scheme != "pathological":
        raise PartitionError("spec is not pathological")
    rng = np.random.default_rng(spec.seed)
    c = train.num_classes
    supports = pathological_supports(c, spec.num_clients, spec.classes_per_client, rng)
    holders = {k: [i for i, s in enumerate(supports) if k in s] for k in range(c)}
    lo, hi = spec.count_range
    assigned: list[list[int]] = [[] for _ in range(spec.num_clients)]
    for k in range(c):
        idx = rng.permutation(np.flatnonzero(train.y == k))
        owners = holders[k]
        if not owners:
            continue
        # each holder gets an equal allotment, of which it keeps a random fraction
        allot = len(idx) // len(owners)
        if allot == 0:
            raise PartitionError(f"class {k} has too few samples for {len(owners)} holders")
        for j, owner in enumerate(owners):
            n = max(1, int(round(rng.uniform(lo, hi) * allot)))
            assigned[owner].extend(idx[j * allot : j * allot + n])
    return [_make_client(i, train, a, spec.val_fraction, rng) for i, a in enumerate(assigned)]


def partition_dirichlet(data: GlobalDataset | Dataset, spec: PartitionSpec) -> list[ClientDataset]:
    train = data.train if isinstance(data, GlobalDataset) else data
    if spec.scheme != "dirichlet":
        raise PartitionError("spec is not dirichlet")
    rng = np.random.default_rng(spec.seed)
    props = dirichlet_proportions(train.num_classes, spec.num_clients, spec.alpha, rng)
    assigned: list[list[int]] = [[] for _ in range(spec.num_clients)]
    for k in range(train.num_classes):
        idx = rng.permutation(np.flatnonzero(train.y == k))
        cuts = np.round(np.cumsum(props[k]) * len(idx)).astype(int)[:-1]
        for owner, part in enumerate(np.split(idx, cuts)):
            assigned[owner].extend(part)
    return [_make_client(i, train, a, spec.val_fraction, rng) for i, a in enumerate(assigned)]


def dirichlet_proportions(num_classes: int, num_clients: int, alpha: float, rng) -> np.ndarray:
    """Row ``k`` holds class ``k``'s split across clients, drawn from Dir(alpha * 1)."""
    p = rng.dirichlet(np.full(num_clients, alpha), size=num_classes)
    # tiny alphas can underflow to an all-zero row
    bad = ~np.isfinite(p).all(axis=1) | (p.sum(axis=1) == 0)
    for k in np.flatnonzero(bad):
        p[k] = 0.0
        p[k, rng.integers(num_clients)] = 1.0
    return p / p.sum(axis=1, keepdims=True)


def partition(data, spec: PartitionSpec) -> list[ClientDataset]:
    if spec.scheme == "pathological":
        return partition_pathological(data, spec)
    return partition_dirichlet(data, spec)


def eligible_query_classes(client: ClientDataset, sample_threshold: int = 50) -> list[int]:
    return [c for c, n in client.class_counts.items() if n < sample_threshold]


def select_query(
    client: ClientDataset,
    mode: str = "single",
    sample_threshold: int = 50,
    seed: int | np.random.Generator = 0,
    max_multi: int = 4,
) -> QuerySpec:
    """Pick under-represented classes uniformly at random.

    Multi mode draws the class count uniformly from ``[2, min(max_multi, eligible)]``.
    """
    rng = np.random.default_rng(seed)
    eligible = eligible_query_classes(client, sample_threshold)
    if not eligible:
        raise QuerySelectionError(
            f"client {client.client_id} has no class under {sample_threshold} samples; "
            "lower sample_threshold"
        )
    if mode == "single":
        chosen = [eligible[rng.integers(len(eligible))]]
    elif mode == "multi":
        if len(eligible) < 2:
            raise QuerySelectionError(
                f"client {client.client_id} has fewer than 2 eligible classes for a multi-class query"
            )
        k = int(rng.integers(2, min(max_multi, len(eligible)) + 1))
        chosen = rng.choice(eligible, k, replace=False).tolist()
    else:
        raise ValueError(f"unknown query mode {mode!r}")
    return QuerySpec(client.client_id, tuple(sorted(int(c) for c in chosen)), sample_threshold, mode)


def partition_manifest(clients: list[ClientDataset]) -> str:
    """JSON text mapping client id to its per-class training counts."""
    doc = {
        str(c.client_id): {str(k): n for k, n in c.class_counts.items() if n}
        for c in clients
    }
    return json.dumps(doc, indent=1, sort_keys=True)
