"""MNIST ingestion, non-IID worker partitions, edge assignment and the
surrogate synthetic pool."""
from __future__ import annotations

import csv
import gzip
import math
import os
import struct
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

DATA_ENV = "SDHFL_DATA"

_IDX_TYPES = {
    0x08: np.dtype("u1"),
    0x09: np.dtype("i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class ConfigurationError(ValueError):
    """A partition / pool / assignment request that cannot be satisfied."""


class IdxError(ValueError):
    def __init__(self, msg: str, path, offset: int):
        super().__init__(f"{path}: {msg} (byte offset {offset})")
        self.path = str(path)
        self.offset = offset


class BadMagic(IdxError):
    pass


class Truncated(IdxError):
    pass


class CountMismatch(IdxError):
    pass


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def read_idx(path, expect_magic: int | None = None) -> np.ndarray:
    """Parse an IDX file into an array of its native shape and dtype."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise Truncated("file shorter than the 4-byte magic", path, len(raw))
    magic = struct.unpack(">I", raw[:4])[0]
    zero, code, ndim = magic >> 16, (magic >> 8) & 0xFF, magic & 0xFF
    if zero != 0 or code not in _IDX_TYPES or ndim == 0:
        raise BadMagic(f"bad magic 0x{magic:08x}", path, 0)
    if expect_magic is not None and magic != expect_magic:
        raise BadMagic(f"magic 0x{magic:08x}, expected 0x{expect_magic:08x}", path, 0)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise Truncated(f"header needs {header} bytes", path, len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dtype = _IDX_TYPES[code]
    need = header + int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(raw) < need:
        raise Truncated(f"payload needs {need} bytes, file has {len(raw)}", path, len(raw))
    return np.frombuffer(raw, dtype=dtype, count=int(np.prod(dims)), offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array in IDX format (used for fixtures)."""
    array = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">I", (0x08 << 8) | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    with open(path, "wb") as f:
        f.write(header + array.tobytes())


@dataclass
class Dataset:
    images: np.ndarray  # (n, features), float32 in [0, 1]
    labels: np.ndarray  # (n,), int64
    num_classes: int = 10
    image_shape: tuple = (28, 28)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label outside [0, num_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], self.num_classes, self.image_shape)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def load_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    images = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatch(
            f"{images.shape[0]} images but {labels.shape[0]} labels in {labels_path}", images_path, 4
        )
    flat = images.reshape(images.shape[0], -1).astype(np.float32) / 255.0
    return Dataset(flat, labels.astype(np.int64), num_classes, tuple(images.shape[1:]))


_MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def data_root(root=None) -> Path:
    if root is not None:
        return Path(root)
    return Path(os.environ.get(DATA_ENV, "data/mnist"))


def _find(root: Path, name: str) -> Path:
    for cand in (root / name, root / (name + ".gz"), root / name.replace("-idx", ".idx")):
        if cand.exists():
            return cand
    raise FileNotFoundError(f"{name} not found under {root} (set ${DATA_ENV})")


def load_mnist(split: str = "train", root=None) -> Dataset:
    root = data_root(root)
    img, lab = _MNIST_FILES[split]
    return load_idx(_find(root, img), _find(root, lab))


def mnist_available(root=None) -> bool:
    try:
        root = data_root(root)
        for names in _MNIST_FILES.values():
            for n in names:
                _find(root, n)
        return True
    except FileNotFoundError:
        return False


# ---------------------------------------------------------------------------
# partitions


@dataclass(frozen=True)
class WorkerShard:
    worker: int
    local_indices: np.ndarray
    synthetic_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    edge: int = -1

    @property
    def size(self) -> int:
        return len(self.local_indices) + len(self.synthetic_indices)

    @property
    def synthetic_fraction(self) -> float:
        return len(self.synthetic_indices) / self.size if self.size else 0.0


@dataclass(frozen=True)
class PartitionSpec:
    J: int = 50
    classes_per_worker: int | None = 1  # None: IID shards
    edge_mode: str = "iid"  # iid | noniid | from-equilibrium
    synthetic_fraction: float = 0.0
    rng_seed: int = 0
    shares: tuple | None = None  # from-equilibrium only

    def __post_init__(self):
        if self.J < 1:
            raise ConfigurationError("J must be >= 1")
        if self.classes_per_worker not in (None, 1, 2):
            raise ConfigurationError("classes_per_worker must be 1, 2 or iid")
        if self.edge_mode not in ("iid", "noniid", "from-equilibrium"):
            raise ConfigurationError(f"unknown edge_mode {self.edge_mode!r}")
        if not 0.0 <= self.synthetic_fraction <= 0.25:
            raise ConfigurationError("synthetic_fraction must lie in [0, 0.25]")
        if self.edge_mode == "from-equilibrium" and self.shares is None:
            raise ConfigurationError("from-equilibrium edge mode needs shares")


def _indices(train: Dataset, indices) -> np.ndarray:
    if indices is None:
        return np.arange(len(train), dtype=np.int64)
    return np.asarray(indices, dtype=np.int64)


def balanced_subset(train: Dataset, n: int, seed: int = 0, indices=None) -> np.ndarray:
    """Class-balanced random subset of ``n`` indices (counts within +-1)."""
    idx = _indices(train, indices)
    rng = np.random.default_rng(seed)
    C = train.num_classes
    per = [n // C + (1 if c < n % C else 0) for c in range(C)]
    out = []
    for c in range(C):
        members = idx[train.labels[idx] == c]
        if len(members) < per[c]:
            raise ConfigurationError(f"class {c} has {len(members)} samples, need {per[c]}")
        out.append(np.sort(rng.choice(members, size=per[c], replace=False)))
    return np.sort(np.concatenate(out))


def partition_iid(train: Dataset, J: int, seed: int = 0, indices=None) -> list[WorkerShard]:
    idx = _indices(train, indices)
    if J > len(idx):
        raise ConfigurationError(f"J={J} workers but only {len(idx)} samples")
    perm = np.random.default_rng(seed).permutation(idx)
    return [WorkerShard(w, np.sort(part)) for w, part in enumerate(np.array_split(perm, J))]


def partition_noniid(train: Dataset, J: int, classes_per_worker: int, seed: int = 0, indices=None) -> list[WorkerShard]:
    """Label-sorted block partition: each worker gets exactly
    ``classes_per_worker`` distinct classes.

    Every class is cut into J*k/C contiguous blocks; worker w takes the
    blocks at positions w, w+J, ... of the label-ordered block list.
    """
    idx = _indices(train, indices)
    C, k = train.num_classes, classes_per_worker
    if k < 1 or k > C:
        raise ConfigurationError(f"classes_per_worker must be in [1, {C}]")
    if (J * k) % C:
        raise ConfigurationError(
            f"J*classes_per_worker = {J * k} must be a multiple of the class count {C}"
        )
    per_class = J * k // C
    rng = np.random.default_rng(seed)
    blocks = []
    for c in range(C):
        members = idx[train.labels[idx] == c]
        if len(members) < per_class:
            raise ConfigurationError(f"class {c} has {len(members)} samples, fewer than {per_class} blocks")
        members = rng.permutation(members)
        blocks.extend(np.array_split(members, per_class))
    shards = []
    for w in range(J):
        local = np.concatenate([blocks[w + r * J] for r in range(k)])
        shards.append(WorkerShard(w, np.sort(local)))
    return shards


def partition(train: Dataset, spec: PartitionSpec, indices=None) -> list[WorkerShard]:
    if spec.classes_per_worker is None:
        return partition_iid(train, spec.J, spec.rng_seed, indices)
    return partition_noniid(train, spec.J, spec.classes_per_worker, spec.rng_seed, indices)


def worker_classes(shard: WorkerShard, train: Dataset) -> np.ndarray:
    return np.unique(train.labels[shard.local_indices])


def dominant_class(shard: WorkerShard, train: Dataset) -> int:
    counts = np.bincount(train.labels[shard.local_indices], minlength=train.num_classes)
    return int(np.argmax(counts))


# ---------------------------------------------------------------------------
# edge assignment


@dataclass
class ClusterLayout:
    assignment: np.ndarray  # worker -> edge
    shard_sizes: np.ndarray  # |D_j^n|
    num_edges: int

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.int64)
        self.shard_sizes = np.asarray(self.shard_sizes, dtype=np.int64)
        if self.assignment.shape != self.shard_sizes.shape:
            raise ValueError("assignment and shard_sizes differ in length")
        if len(self.assignment) and (self.assignment.min() < 0 or self.assignment.max() >= self.num_edges):
            raise ValueError("worker assigned to a non-existent edge")
        if np.any(self.shard_sizes <= 0):
            raise ConfigurationError("every worker needs a non-empty shard")

    @property
    def num_workers(self) -> int:
        return len(self.assignment)

    @property
    def edge_totals(self) -> np.ndarray:
        return np.bincount(self.assignment, weights=self.shard_sizes, minlength=self.num_edges).astype(np.int64)

    @property
    def total(self) -> int:
        return int(self.shard_sizes.sum())

    def workers_of(self, edge: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == edge)

    def active_edges(self) -> list[int]:
        return [n for n in range(self.num_edges) if np.any(self.assignment == n)]

    @classmethod
    def from_shards(cls, shards: Sequence[WorkerShard], num_edges: int) -> "ClusterLayout":
        ordered = sorted(shards, key=lambda s: s.worker)
        return cls(
            assignment=[s.edge for s in ordered],
            shard_sizes=[s.size for s in ordered],
            num_edges=num_edges,
        )


def largest_remainder(shares: Sequence[float], total: int) -> np.ndarray:
    """Apportion ``total`` seats by largest remainder; ties go to the lower index."""
    fr = [Fraction(float(s)).limit_denominator(10**9) for s in shares]
    norm = sum(fr)
    if norm <= 0 or any(f < 0 for f in fr):
        raise ConfigurationError("shares must be non-negative with positive sum")
    quotas = [f / norm * total for f in fr]
    seats = [math.floor(q) for q in quotas]
    left = total - sum(seats)
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - seats[i]), i))
    for i in order[:left]:
        seats[i] += 1
    return np.array(seats, dtype=np.int64)


def assign_edges(
    shards: Sequence[WorkerShard],
    train: Dataset,
    num_edges: int,
    mode: str = "iid",
    shares=None,
    classes_per_worker: int | None = None,
) -> tuple[list[WorkerShard], ClusterLayout]:
    """Attach every worker to an edge server.

    ``iid`` deals workers ordered by dominant class round-robin so each edge
    sees every class; ``noniid`` deals them in contiguous runs; and
    ``from-equilibrium`` fills edges with worker counts apportioned from a
    share vector (or a Z x N population-state matrix, populations being
    equal-sized contiguous worker groups).
    """
    J = len(shards)
    C = train.num_classes
    if num_edges < 1:
        raise ConfigurationError("need at least one edge server")
    order = sorted(range(J), key=lambda i: (dominant_class(shards[i], train), shards[i].worker))
    edge_of = np.empty(J, dtype=np.int64)

    if mode == "iid":
        for pos, i in enumerate(order):
            edge_of[i] = pos % num_edges
    elif mode == "noniid":
        sizes = [J // num_edges + (1 if n < J % num_edges else 0) for n in range(num_edges)]
        pos = 0
        for n, size in enumerate(sizes):
            for i in order[pos : pos + size]:
                edge_of[i] = n
            pos += size
    elif mode == "from-equilibrium":
        if shares is None:
            raise ConfigurationError("from-equilibrium mode needs shares")
        x = np.atleast_2d(np.asarray(shares, dtype=float))
        if x.shape[1] != num_edges:
            raise ConfigurationError(f"shares have {x.shape[1]} columns for {num_edges} edges")
        by_id = sorted(range(J), key=lambda i: shards[i].worker)
        pop_sizes = largest_remainder([1.0] * x.shape[0], J)
        pos = 0
        for z, size in enumerate(pop_sizes):
            counts = largest_remainder(x[z], int(size))
            for n, cnt in enumerate(counts):
                for i in by_id[pos : pos + cnt]:
                    edge_of[i] = n
                pos += cnt
    else:
        raise ConfigurationError(f"unknown edge mode {mode!r}")

    out = [replace(s, edge=int(edge_of[i])) for i, s in enumerate(shards)]

    if mode == "iid":
        for n in range(num_edges):
            members = [s for s in out if s.edge == n]
            labels = np.concatenate([train.labels[s.local_indices] for s in members]) if members else np.array([])
            if len(np.unique(labels)) < C:
                raise ConfigurationError(
                    f"iid edge mode infeasible: edge {n} covers {len(np.unique(labels))} of {C} classes"
                )
    elif mode == "noniid" and classes_per_worker is not None:
        cap = math.ceil(C / num_edges) * classes_per_worker
        for n in range(num_edges):
            members = [s for s in out if s.edge == n]
            if not members:
                continue
            covered = len(np.unique(np.concatenate([train.labels[s.local_indices] for s in members])))
            if covered > cap:
                raise ConfigurationError(f"noniid edge mode: edge {n} covers {covered} classes (> {cap})")

    return out, ClusterLayout.from_shards(out, num_edges)


def edge_class_histograms(shards: Sequence[WorkerShard], train: Dataset, num_edges: int) -> np.ndarray:
    hist = np.zeros((num_edges, train.num_classes), dtype=np.int64)
    for s in shards:
        hist[s.edge] += np.bincount(train.labels[s.local_indices], minlength=train.num_classes)
    return hist


# ---------------------------------------------------------------------------
# surrogate synthetic pool


@dataclass
class SyntheticPool:
    data: Dataset
    source_indices: np.ndarray  # rows of the real training set the pool was cut from

    def __len__(self) -> int:
        return len(self.data)


def build_synthetic_pool(train: Dataset, pool_fraction: float = 0.1, noise_sigma: float = 0.1, seed: int = 0) -> SyntheticPool:
    """Reserve a class-balanced slice of ``train`` and perturb it with
    clamped Gaussian pixel noise.

    Pool rows are ordered so that consecutive draws from a class are random.
    """
    if not 0.0 < pool_fraction <= 0.2:
        raise ConfigurationError("pool_fraction must lie in (0, 0.2]")
    rng = np.random.default_rng(seed)
    size = int(round(pool_fraction * len(train)))
    src = balanced_subset(train, size, seed=int(rng.integers(2**63)))
    src = rng.permutation(src)
    images = train.images[src].astype(np.float64)
    if noise_sigma > 0:
        images = np.clip(images + rng.normal(0.0, noise_sigma, size=images.shape), 0.0, 1.0)
    pool = Dataset(images.astype(np.float32), train.labels[src].copy(), train.num_classes, train.image_shape)
    return SyntheticPool(pool, src)


def synthetic_count(local_size: int, rho: float) -> int:
    """floor(rho * |local| / (1 - rho)): never exceeds the requested fraction."""
    r = Fraction(rho).limit_denominator(10**9)
    if not 0 <= r < 1:
        raise ConfigurationError("rho must lie in [0, 1)")
    return math.floor(r * local_size / (1 - r))


def mix_synthetic(shards: Sequence[WorkerShard], pool: SyntheticPool, rho: float) -> list[WorkerShard]:
    """Give each worker a class-balanced, disjoint draw of synthetic samples."""
    counts = [synthetic_count(len(s.local_indices), rho) for s in shards]
    if sum(counts) > len(pool):
        raise ConfigurationError(f"synthetic pool exhausted: need {sum(counts)}, pool has {len(pool)}")
    C = pool.data.num_classes
    queues = [list(np.flatnonzero(pool.data.labels == c)) for c in range(C)]
    heads = [0] * C
    cursor = 0  # rotates remainders so pool usage stays class-balanced
    out = []
    for s, cnt in zip(shards, counts):
        per = [cnt // C] * C
        for r in range(cnt % C):
            per[(cursor + r) % C] += 1
        cursor = (cursor + cnt % C) % C
        picked = []
        for c in range(C):
            if heads[c] + per[c] > len(queues[c]):
                raise ConfigurationError(f"synthetic pool exhausted for class {c}")
            picked.extend(queues[c][heads[c] : heads[c] + per[c]])
            heads[c] += per[c]
        out.append(replace(s, synthetic_indices=np.array(sorted(picked), dtype=np.int64)))
    return out


# ---------------------------------------------------------------------------
# assembled input for the HFL engine


@dataclass
class PartitionedDataset:
    train: Dataset
    test: Dataset
    pool: SyntheticPool | None
    shards: list
    layout: ClusterLayout

    def worker_data(self, worker: int) -> tuple[np.ndarray, np.ndarray]:
        s = self.shards[worker]
        X = self.train.images[s.local_indices]
        y = self.train.labels[s.local_indices]
        if len(s.synthetic_indices):
            X = np.concatenate([X, self.pool.data.images[s.synthetic_indices]])
            y = np.concatenate([y, self.pool.data.labels[s.synthetic_indices]])
        return X, y


def prepare(
    train: Dataset,
    test: Dataset,
    spec: PartitionSpec,
    num_edges: int,
    subset_size: int | None = None,
    pool_fraction: float = 0.1,
    noise_sigma: float = 0.1,
) -> PartitionedDataset:
    """Full data pipeline: reserve pool, subsample, partition, assign, mix."""
    seeds = np.random.SeedSequence(spec.rng_seed).spawn(3)
    pool = build_synthetic_pool(train, pool_fraction, noise_sigma, seed=int(seeds[0].generate_state(1)[0]))
    remaining = np.setdiff1d(np.arange(len(train)), pool.source_indices)
    if subset_size is not None:
        remaining = balanced_subset(train, subset_size, seed=int(seeds[1].generate_state(1)[0]), indices=remaining)
    shards = partition(train, replace(spec, rng_seed=int(seeds[2].generate_state(1)[0])), indices=remaining)
    shards, _ = assign_edges(shards, train, num_edges, spec.edge_mode, spec.shares, spec.classes_per_worker)
    if spec.synthetic_fraction > 0:
        shards = mix_synthetic(shards, pool, spec.synthetic_fraction)
    layout = ClusterLayout.from_shards(shards, num_edges)
    return PartitionedDataset(train, test, pool, shards, layout)


MANIFEST_COLUMNS = ("worker", "edge", "local_size", "synthetic_size", "classes")


def write_partition_manifest(path, shards: Sequence[WorkerShard], train: Dataset) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for s in sorted(shards, key=lambda s: s.worker):
            classes = " ".join(str(int(c)) for c in worker_classes(s, train))
            w.writerow([s.worker, s.edge, len(s.local_indices), len(s.synthetic_indices), classes])
