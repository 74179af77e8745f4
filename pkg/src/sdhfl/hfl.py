"""Three-tier HFL training: local SGD on workers, data-weighted edge
aggregation every kappa1 iterations, cloud aggregation every kappa1*kappa2."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import ClusterLayout, ConfigurationError, Dataset, PartitionedDataset
from .model import Architecture, init_params, log_softmax, logits, loss_and_grad, sgd_update


@dataclass(frozen=True)
class HFLConfig:
    kappa1: int = 5
    kappa2: int = 2
    K: int = 300
    eta0: float = 0.01
    decay: float = 0.995
    batch_size: int = 20
    eval_every: int = 0  # 0: evaluate only at cloud aggregations
    rng_seed: int = 0
    track_intermediate: bool = False
    arch: Architecture = field(default_factory=Architecture)

    def __post_init__(self):
        if self.kappa1 < 1 or self.kappa2 < 1:
            raise ConfigurationError("kappa1 and kappa2 must be positive integers")
        if self.K < 1 or self.K % (self.kappa1 * self.kappa2):
            raise ConfigurationError(
                f"K={self.K} must be a positive multiple of kappa1*kappa2={self.kappa1 * self.kappa2}"
            )
        if not self.eta0 > 0:
            raise ConfigurationError("eta0 must be > 0")
        if not 0 < self.decay <= 1:
            raise ConfigurationError("decay must lie in (0, 1]")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")

    @property
    def cloud_interval(self) -> int:
        return self.kappa1 * self.kappa2

    @property
    def cloud_rounds(self) -> int:
        return self.K // self.cloud_interval


def step_size(k: int, eta0: float, decay: float) -> float:
    """eta_k = eta0 * decay**k on the global iteration index k."""
    return eta0 * decay**k


def batch_indices(n: int, batch_size: int, seed: int, worker: int, k: int, _cache: dict | None = None) -> np.ndarray:
    """Mini-batch for iteration k (1-based), a pure function of (seed, worker, k).

    Sample positions run through consecutive epochs; each epoch is an
    independent permutation drawn from (seed, worker, epoch).
    """
    pos = np.arange((k - 1) * batch_size, k * batch_size)
    epochs, offsets = np.divmod(pos, n)
    out = np.empty(batch_size, dtype=np.int64)
    for e in np.unique(epochs):
        key = (worker, int(e))
        perm = None if _cache is None else _cache.get(key)
        if perm is None:
            perm = np.random.default_rng([seed, worker, int(e)]).permutation(n)
            if _cache is not None:
                _cache.pop((worker, int(e) - 1), None)
                _cache[key] = perm
        mask = epochs == e
        out[mask] = perm[offsets[mask]]
    return out


def local_step(theta, X, y, k: int, cfg: HFLConfig, worker: int = 0, cache=None) -> tuple[np.ndarray, float]:
    """One mini-batch SGD step on a worker's mixed shard."""
    if len(y) == 0:
        raise ConfigurationError(f"worker {worker} has an empty shard")
    idx = batch_indices(len(y), min(cfg.batch_size, len(y)), cfg.rng_seed, worker, k, cache)
    loss, grad = loss_and_grad(theta, X[idx], y[idx], cfg.arch)
    return sgd_update(theta, grad, step_size(k, cfg.eta0, cfg.decay)), loss


def weighted_average(params: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    if len(params) != len(weights):
        raise ValueError(f"{len(params)} parameter vectors but {len(weights)} weights")
    if not params:
        raise ValueError("nothing to aggregate")
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    out = np.zeros_like(params[0], dtype=float)
    for wi, p in zip(w, params):
        out += wi * p
    return out


def intermediate_aggregate(edge: int, worker_params: dict, layout: ClusterLayout) -> np.ndarray:
    """|D_j^n| / |D^n|-weighted mean over the workers of ``edge``.

    ``worker_params`` maps worker id -> parameters and must cover exactly the
    edge's workers.
    """
    members = layout.workers_of(edge)
    if set(worker_params) != set(int(j) for j in members):
        raise ValueError(f"edge {edge}: parameters given for {sorted(worker_params)}, expected {members.tolist()}")
    ids = sorted(worker_params)
    return weighted_average([worker_params[j] for j in ids], layout.shard_sizes[ids])


def global_aggregate(edge_params: dict, layout: ClusterLayout) -> np.ndarray:
    """|D^n| / |D|-weighted mean of the edge models (edge id -> params)."""
    active = layout.active_edges()
    if sorted(edge_params) != active:
        raise ValueError(f"edge parameters given for {sorted(edge_params)}, expected {active}")
    totals = layout.edge_totals
    return weighted_average([edge_params[n] for n in active], totals[active])


def flat_aggregate(worker_params: dict, layout: ClusterLayout) -> np.ndarray:
    """|D_j^n| / |D|-weighted mean over all workers."""
    ids = sorted(worker_params)
    return weighted_average([worker_params[j] for j in ids], layout.shard_sizes[ids])


def evaluate(theta: np.ndarray, test: Dataset, arch: Architecture, chunk: int = 5000) -> tuple[float, float]:
    """Top-1 accuracy and mean cross-entropy on ``test``."""
    if len(test) == 0:
        raise ValueError("empty test set")
    correct = 0
    nll = 0.0
    for start in range(0, len(test), chunk):
        X = test.images[start : start + chunk]
        y = test.labels[start : start + chunk]
        z = logits(theta, X, arch)
        correct += int((np.argmax(z, axis=1) == y).sum())
        nll += float(-log_softmax(z)[np.arange(len(y)), y].sum())
    return correct / len(test), nll / len(test)


@dataclass
class TrainTrace:
    iterations: list = field(default_factory=list)  # evaluation points
    global_accuracy: list = field(default_factory=list)
    global_loss: list = field(default_factory=list)
    edge_iterations: list = field(default_factory=list)
    edge_accuracy: list = field(default_factory=list)  # one list per edge-eval point
    train_loss: list = field(default_factory=list)  # mean worker batch loss per iteration
    interval_seconds: list = field(default_factory=list)  # wall clock per cloud interval
    status: str = "ok"
    diverged_at: int | None = None

    @property
    def final_accuracy(self) -> float:
        return self.global_accuracy[-1] if self.global_accuracy else float("nan")


def run_hfl(cfg: HFLConfig, data: PartitionedDataset, layout: ClusterLayout | None = None) -> TrainTrace:
    """Run K iterations of hierarchical FL and record the global model's
    test accuracy at every cloud aggregation."""
    layout = data.layout if layout is None else layout
    arch = cfg.arch
    J = layout.num_workers
    shards = [data.worker_data(j) for j in range(J)]
    for j, (_, y) in enumerate(shards):
        if len(y) == 0:
            raise ConfigurationError(f"worker {j} has an empty shard")
    if shards[0][0].shape[1] != arch.input_dim:
        raise ConfigurationError("architecture input_dim does not match the data")

    theta = init_params(arch, np.random.default_rng([cfg.rng_seed, 0xC10D]))
    workers = {j: theta.copy() for j in range(J)}
    edges = layout.active_edges()
    caches = {j: {} for j in range(J)}
    trace = TrainTrace()
    tick = time.perf_counter()

    for k in range(1, cfg.K + 1):
        losses = []
        for j in range(J):
            X, y = shards[j]
            workers[j], loss = local_step(workers[j], X, y, k, cfg, worker=j, cache=caches[j])
            if not np.all(np.isfinite(workers[j])):
                trace.status = "diverged"
                trace.diverged_at = k
                return trace
            losses.append(loss)
        trace.train_loss.append(float(np.mean(losses)))

        if k % cfg.kappa1:
            continue
        edge_models = {
            n: intermediate_aggregate(n, {int(j): workers[int(j)] for j in layout.workers_of(n)}, layout)
            for n in edges
        }
        if k % cfg.cloud_interval == 0:
            theta = global_aggregate(edge_models, layout)
            for j in range(J):
                workers[j] = theta.copy()
            acc, loss = evaluate(theta, data.test, arch)
            trace.iterations.append(k)
            trace.global_accuracy.append(acc)
            trace.global_loss.append(loss)
            now = time.perf_counter()
            trace.interval_seconds.append(now - tick)
            tick = now
        else:
            for n in edges:
                for j in layout.workers_of(n):
                    workers[int(j)] = edge_models[n].copy()
        if cfg.track_intermediate and (cfg.eval_every == 0 or k % cfg.eval_every == 0):
            trace.edge_iterations.append(k)
            trace.edge_accuracy.append([evaluate(edge_models[n], data.test, arch)[0] for n in edges])
    return trace
