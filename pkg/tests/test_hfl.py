import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sdhfl.data import ClusterLayout, ConfigurationError, PartitionSpec, prepare
from sdhfl.hfl import (
    HFLConfig,
    batch_indices,
    evaluate,
    flat_aggregate,
    global_aggregate,
    intermediate_aggregate,
    local_step,
    run_hfl,
    step_size,
)
from sdhfl.model import Architecture, init_params, loss_and_grad, predict

ARCH = Architecture(input_dim=8, hidden_dim=4, num_classes=10)


@pytest.fixture
def toy_split(toy_dataset):
    spec = PartitionSpec(J=10, classes_per_worker=1, edge_mode="noniid", rng_seed=1)
    return prepare(toy_dataset, toy_dataset, spec, 2, subset_size=400, pool_fraction=0.2)


def test_step_size():
    assert step_size(100, 0.01, 0.995) == pytest.approx(0.01 * 0.995**100, rel=1e-15)
    assert step_size(100, 0.01, 0.995) == pytest.approx(0.006058, abs=1e-6)
    assert step_size(7, 0.3, 1.0) == 0.3


def test_config_validation():
    with pytest.raises(ConfigurationError):
        HFLConfig(K=301)
    with pytest.raises(ConfigurationError):
        HFLConfig(kappa1=0)
    assert HFLConfig(kappa1=6, kappa2=10, K=300).cloud_rounds == 5


def test_aggregation_hand_values():
    layout = ClusterLayout([0, 0, 1], [100, 300, 200], 2)
    w = {0: np.array([0.0, 4.0]), 1: np.array([4.0, 0.0])}
    assert np.allclose(intermediate_aggregate(0, w, layout), [3.0, 1.0])
    edges = {0: np.array([1.0]), 1: np.array([4.0])}
    assert global_aggregate(edges, layout)[0] == pytest.approx((400 * 1 + 200 * 4) / 600)
    with pytest.raises(ValueError):
        intermediate_aggregate(0, {0: w[0]}, layout)
    with pytest.raises(ValueError):
        global_aggregate({0: edges[0]}, layout)


@st.composite
def layouts(draw):
    J = draw(st.integers(1, 12))
    N = draw(st.integers(1, 4))
    assignment = [draw(st.integers(0, N - 1)) for _ in range(J)]
    sizes = [draw(st.integers(1, 5000)) for _ in range(J)]
    return ClusterLayout(assignment, sizes, N), draw(st.integers(0, 2**31))


@settings(max_examples=100, deadline=None)
@given(layouts())
def test_two_level_equals_flat(case):
    layout, seed = case
    rng = np.random.default_rng(seed)
    params = {j: rng.standard_normal(17) for j in range(layout.num_workers)}
    edges = {
        n: intermediate_aggregate(n, {int(j): params[int(j)] for j in layout.workers_of(n)}, layout)
        for n in layout.active_edges()
    }
    two = global_aggregate(edges, layout)
    assert np.abs(two - flat_aggregate(params, layout)).max() < 1e-12
    stack = np.array(list(params.values()))
    assert np.all(two >= stack.min(axis=0) - 1e-12) and np.all(two <= stack.max(axis=0) + 1e-12)


def test_batch_indices_pure_and_cover_epochs():
    a = batch_indices(50, 10, 3, 2, 7)
    assert np.array_equal(a, batch_indices(50, 10, 3, 2, 7, {}))
    epoch = np.concatenate([batch_indices(50, 10, 3, 2, k) for k in range(1, 6)])
    assert sorted(epoch.tolist()) == list(range(50))
    # batch straddling an epoch boundary
    assert len(batch_indices(25, 10, 0, 0, 3)) == 10
    assert not np.array_equal(a, batch_indices(50, 10, 3, 1, 7))


def test_local_step_descends_on_full_batch():
    rng = np.random.default_rng(0)
    X = rng.random((30, 8))
    y = rng.integers(0, 10, size=30)
    theta = init_params(ARCH, rng)
    cfg = HFLConfig(K=10, kappa1=1, kappa2=1, batch_size=30, eta0=0.05, decay=1.0, arch=ARCH)
    before = loss_and_grad(theta, X, y, ARCH)[0]
    after_theta, _ = local_step(theta, X, y, 1, cfg)
    assert loss_and_grad(after_theta, X, y, ARCH)[0] < before


def test_evaluate_recount(toy_dataset):
    theta = init_params(ARCH, np.random.default_rng(5))
    acc, loss = evaluate(theta, toy_dataset, ARCH, chunk=77)
    manual = np.mean(predict(theta, toy_dataset.images, ARCH) == toy_dataset.labels)
    assert acc == manual
    assert loss == pytest.approx(loss_and_grad(theta, toy_dataset.images, toy_dataset.labels, ARCH)[0], rel=1e-12)


def test_run_is_deterministic_and_evaluates_at_cloud_rounds(toy_split):
    cfg = HFLConfig(kappa1=2, kappa2=3, K=30, eta0=0.1, arch=ARCH, rng_seed=9)
    a = run_hfl(cfg, toy_split)
    b = run_hfl(cfg, toy_split)
    assert a.iterations == [6, 12, 18, 24, 30]
    assert a.global_accuracy == b.global_accuracy and a.global_loss == b.global_loss
    assert a.status == "ok"


def test_unit_kappa_matches_single_edge(toy_split):
    # with kappa1 = kappa2 = 1 the hierarchy collapses to flat averaging every step
    cfg = HFLConfig(kappa1=1, kappa2=1, K=12, eta0=0.1, arch=ARCH)
    two = run_hfl(cfg, toy_split)
    one = ClusterLayout(np.zeros(10, dtype=int), toy_split.layout.shard_sizes, 1)
    flat = run_hfl(cfg, toy_split, layout=one)
    assert np.allclose(two.global_loss, flat.global_loss, rtol=0, atol=1e-12)


def test_track_intermediate(toy_split):
    cfg = HFLConfig(kappa1=2, kappa2=2, K=8, arch=ARCH, track_intermediate=True)
    tr = run_hfl(cfg, toy_split)
    assert tr.edge_iterations == [2, 4, 6, 8]
    assert all(len(e) == 2 for e in tr.edge_accuracy)


def test_divergence_is_reported(toy_split):
    cfg = HFLConfig(kappa1=1, kappa2=1, K=4, eta0=float("inf"), decay=1.0, arch=ARCH)
    with np.errstate(all="ignore"):
        tr = run_hfl(cfg, toy_split)
    assert tr.status == "diverged" and tr.diverged_at == 1
    assert tr.global_accuracy == []
