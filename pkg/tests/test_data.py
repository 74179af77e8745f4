import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sdhfl.data import (
    BadMagic,
    ClusterLayout,
    ConfigurationError,
    CountMismatch,
    PartitionSpec,
    Truncated,
    assign_edges,
    balanced_subset,
    build_synthetic_pool,
    edge_class_histograms,
    largest_remainder,
    load_idx,
    mix_synthetic,
    partition,
    prepare,
    read_idx,
    synthetic_count,
    worker_classes,
    write_idx,
    write_partition_manifest,
)


def _fixture(tmp_path, n=5):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(n, 4, 3), dtype=np.uint8)
    labels = rng.integers(0, 10, size=n, dtype=np.uint8)
    write_idx(tmp_path / "img", images)
    write_idx(tmp_path / "lab", labels)
    return images, labels


def test_idx_round_trip_exact(tmp_path):
    images, labels = _fixture(tmp_path)
    assert np.array_equal(read_idx(tmp_path / "img"), images)
    ds = load_idx(tmp_path / "img", tmp_path / "lab")
    assert ds.images.shape == (5, 12) and ds.image_shape == (4, 3)
    assert np.array_equal(np.round(ds.images * 255).astype(np.uint8), images.reshape(5, -1))
    assert np.array_equal(ds.labels, labels)


def test_idx_gzip(tmp_path):
    images, _ = _fixture(tmp_path)
    with gzip.open(tmp_path / "img.gz", "wb") as f:
        f.write((tmp_path / "img").read_bytes())
    assert np.array_equal(read_idx(tmp_path / "img.gz"), images)


def test_idx_big_endian_int32(tmp_path):
    p = tmp_path / "ints"
    p.write_bytes(struct.pack(">I", 0x0C01) + struct.pack(">I", 2) + struct.pack(">ii", -7, 300))
    assert read_idx(p).tolist() == [-7, 300]


def test_idx_errors(tmp_path):
    _fixture(tmp_path)
    raw = (tmp_path / "img").read_bytes()
    (tmp_path / "bad").write_bytes(b"\x01\x02" + raw[2:])
    with pytest.raises(BadMagic) as e:
        read_idx(tmp_path / "bad")
    assert e.value.offset == 0
    with pytest.raises(BadMagic):
        read_idx(tmp_path / "img", expect_magic=0x801)
    (tmp_path / "short").write_bytes(raw[:-3])
    with pytest.raises(Truncated) as e:
        read_idx(tmp_path / "short")
    assert e.value.offset == len(raw) - 3
    write_idx(tmp_path / "lab4", np.zeros(4, dtype=np.uint8))
    with pytest.raises(CountMismatch):
        load_idx(tmp_path / "img", tmp_path / "lab4")


def test_largest_remainder_examples():
    assert largest_remainder([0.31, 0.14, 0.55], 50).tolist() == [16, 7, 27]
    assert largest_remainder([1, 1, 1], 10).tolist() == [4, 3, 3]
    assert largest_remainder([0.5, 0.5], 3).tolist() == [2, 1]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=6).filter(lambda v: sum(v) > 1e-3), st.integers(0, 500))
def test_largest_remainder_sums_and_is_within_one(shares, total):
    seats = largest_remainder(shares, total)
    assert seats.sum() == total
    quotas = np.array(shares) / sum(shares) * total
    assert np.all(np.abs(seats - quotas) < 1 + 1e-9)


def test_synthetic_count():
    assert synthetic_count(1200, 0.05) == 63  # floor(1200 * 0.05 / 0.95)
    assert synthetic_count(1200, 0.0) == 0
    assert synthetic_count(300, 0.25) == 100
    with pytest.raises(ConfigurationError):
        synthetic_count(10, 1.0)


@pytest.mark.parametrize("cpw", [None, 1, 2])
def test_partition_is_disjoint_cover(toy_dataset, cpw):
    shards = partition(toy_dataset, PartitionSpec(J=10, classes_per_worker=cpw))
    allidx = np.concatenate([s.local_indices for s in shards])
    assert len(allidx) == len(np.unique(allidx)) == len(toy_dataset)
    if cpw is not None:
        for s in shards:
            assert len(worker_classes(s, toy_dataset)) == cpw


def test_partition_rejects_uneven_blocks(toy_dataset):
    with pytest.raises(ConfigurationError):
        partition(toy_dataset, PartitionSpec(J=7, classes_per_worker=1))


def test_balanced_subset(toy_dataset):
    idx = balanced_subset(toy_dataset, 95, seed=3)
    counts = np.bincount(toy_dataset.labels[idx], minlength=10)
    assert counts.sum() == 95 and counts.max() - counts.min() <= 1
    assert len(np.unique(idx)) == 95


def test_iid_edges_cover_every_class(toy_dataset):
    shards = partition(toy_dataset, PartitionSpec(J=50, classes_per_worker=1))
    shards, layout = assign_edges(shards, toy_dataset, 5, "iid")
    hist = edge_class_histograms(shards, toy_dataset, 5).astype(float)
    p = hist / hist.sum(axis=1, keepdims=True)
    glob = toy_dataset.class_counts() / len(toy_dataset)
    assert (0.5 * np.abs(p - glob).sum(axis=1)).max() < 0.05
    assert layout.edge_totals.sum() == len(toy_dataset)


def test_iid_edges_infeasible(toy_dataset):
    shards = partition(toy_dataset, PartitionSpec(J=10, classes_per_worker=1))
    with pytest.raises(ConfigurationError):
        assign_edges(shards, toy_dataset, 3, "iid")


def test_noniid_edges_are_skewed(toy_dataset):
    shards = partition(toy_dataset, PartitionSpec(J=10, classes_per_worker=1))
    shards, _ = assign_edges(shards, toy_dataset, 2, "noniid", classes_per_worker=1)
    hist = edge_class_histograms(shards, toy_dataset, 2)
    assert [int((h > 0).sum()) for h in hist] == [5, 5]


def test_from_equilibrium_counts(toy_dataset):
    shards = partition(toy_dataset, PartitionSpec(J=50, classes_per_worker=1))
    _, layout = assign_edges(shards, toy_dataset, 3, "from-equilibrium", shares=[0.31, 0.14, 0.55])
    assert np.bincount(layout.assignment, minlength=3).tolist() == [16, 7, 27]


def test_pool_and_mix(toy_dataset):
    pool = build_synthetic_pool(toy_dataset, 0.2, noise_sigma=0.1, seed=1)
    assert len(pool) == 120
    assert np.all(pool.data.class_counts() == 12)
    assert pool.data.images.min() >= 0 and pool.data.images.max() <= 1
    rest = np.setdiff1d(np.arange(len(toy_dataset)), pool.source_indices)
    shards = partition(toy_dataset, PartitionSpec(J=8, classes_per_worker=None), indices=rest)
    assert not np.intersect1d(np.concatenate([s.local_indices for s in shards]), pool.source_indices).size
    mixed = mix_synthetic(shards, pool, 0.2)
    used = np.concatenate([s.synthetic_indices for s in mixed])
    assert len(used) == len(np.unique(used))
    for s in mixed:
        assert len(s.synthetic_indices) == synthetic_count(len(s.local_indices), 0.2)
        assert s.synthetic_fraction <= 0.2
    with pytest.raises(ConfigurationError):
        mix_synthetic(shards, pool, 0.8)  # 4x the local data, more than the pool holds


def test_pool_fraction_bounds(toy_dataset):
    with pytest.raises(ConfigurationError):
        build_synthetic_pool(toy_dataset, 0.3)


def test_layout_rejects_empty_shard():
    with pytest.raises(ConfigurationError):
        ClusterLayout([0, 1], [10, 0], 2)


def test_prepare_deterministic_with_manifest(toy_dataset, tmp_path):
    spec = PartitionSpec(J=10, classes_per_worker=1, edge_mode="noniid", synthetic_fraction=0.05, rng_seed=4)
    a = prepare(toy_dataset, toy_dataset, spec, 2, subset_size=400, pool_fraction=0.2)
    b = prepare(toy_dataset, toy_dataset, spec, 2, subset_size=400, pool_fraction=0.2)
    for sa, sb in zip(a.shards, b.shards):
        assert np.array_equal(sa.local_indices, sb.local_indices)
        assert np.array_equal(sa.synthetic_indices, sb.synthetic_indices)
    assert sum(len(s.local_indices) for s in a.shards) == 400
    write_partition_manifest(tmp_path / "m.csv", a.shards, toy_dataset)
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "worker,edge,local_size,synthetic_size,classes" and len(lines) == 11


@pytest.mark.mnist
def test_mnist_shapes(mnist):
    train, test = mnist
    assert len(train) == 60000 and len(test) == 10000
    assert train.images.shape[1] == 784 and train.images.max() <= 1.0
    assert np.all(train.class_counts() > 5000)


@pytest.mark.mnist
def test_mnist_noniid_cover(mnist):
    train, _ = mnist
    shards = partition(train, PartitionSpec(J=50, classes_per_worker=2))
    allidx = np.concatenate([s.local_indices for s in shards])
    assert len(allidx) == len(np.unique(allidx)) == len(train)
    assert all(len(worker_classes(s, train)) == 2 for s in shards)
