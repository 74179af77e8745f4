"""Evolutionary edge-association game.

Workers are grouped into populations; each population splits a unit mass of
workers over the edge servers.  The state is a Z x N matrix whose rows live on
probability simplices.  Shares evolve under replicator dynamics, integrated
with explicit Euler plus a clamp-and-renormalize projection.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

SIMPLEX_TOL = 1e-9
SHARE_FLOOR = 1e-4


class GameError(ValueError):
    """Invalid game configuration or state."""


class NoConvergence(RuntimeError):
    """Raised by run_to_equilibrium(strict=True) when max_steps is exhausted."""

    def __init__(self, residual: float, steps: int):
        super().__init__(f"no convergence after {steps} steps (residual {residual:.3e})")
        self.residual = residual
        self.steps = steps


@dataclass(frozen=True)
class PopulationSpec:
    d: float  # data quantity per worker
    c: float = 10.0  # computation resource for the local dataset
    m: float = 10.0  # communication resource

    def __post_init__(self):
        if not self.d > 0:
            raise GameError(f"population data quantity must be > 0, got {self.d}")
        if self.c < 0 or self.m < 0:
            raise GameError("population resources must be >= 0")


@dataclass(frozen=True)
class EdgeServerSpec:
    gamma: float  # reward pool
    s: float = 0.0  # extra computation for the server's synthetic dataset

    def __post_init__(self):
        if not self.gamma > 0:
            raise GameError(f"reward pool must be > 0, got {self.gamma}")
        if self.s < 0:
            raise GameError("synthetic computation requirement must be >= 0")


@dataclass(frozen=True)
class GameConfig:
    populations: tuple[PopulationSpec, ...]
    servers: tuple[EdgeServerSpec, ...]
    alpha: float = 0.001
    beta: float = 0.001
    delta: float = 0.01
    dt: float = 0.01
    max_steps: int = 1_000_000
    eq_tol: float = 1e-8
    rng_seed: int = 0
    utility_eq_tol: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "populations", tuple(self.populations))
        object.__setattr__(self, "servers", tuple(self.servers))
        if len(self.populations) < 1:
            raise GameError("at least one population is required")
        if len(self.servers) < 2:
            raise GameError("at least two edge servers are required")
        if self.alpha < 0 or self.beta < 0:
            raise GameError("unit costs must be >= 0")
        if not self.delta > 0:
            raise GameError("delta must be > 0")
        if not self.dt > 0:
            raise GameError("dt must be > 0")
        if not self.eq_tol > 0:
            raise GameError("eq_tol must be > 0")
        if self.max_steps < 1:
            raise GameError("max_steps must be >= 1")

    @property
    def Z(self) -> int:
        return len(self.populations)

    @property
    def N(self) -> int:
        return len(self.servers)

    @property
    def d(self) -> np.ndarray:
        return np.array([p.d for p in self.populations], dtype=float)

    @property
    def c(self) -> np.ndarray:
        return np.array([p.c for p in self.populations], dtype=float)

    @property
    def m(self) -> np.ndarray:
        return np.array([p.m for p in self.populations], dtype=float)

    @property
    def gamma(self) -> np.ndarray:
        return np.array([sv.gamma for sv in self.servers], dtype=float)

    @property
    def s(self) -> np.ndarray:
        return np.array([sv.s for sv in self.servers], dtype=float)

    @property
    def utility_tol(self) -> float:
        if self.utility_eq_tol is not None:
            return self.utility_eq_tol
        return 1e-3 * float(self.gamma.max())

    def cost_matrix(self) -> np.ndarray:
        """Z x N matrix of alpha*(s_n + c_z) + beta*m_z."""
        return self.alpha * (self.s[None, :] + self.c[:, None]) + self.beta * self.m[:, None]

    def replace(self, **changes) -> "GameConfig":
        from dataclasses import replace

        return replace(self, **changes)


def make_game(
    d: Sequence[float],
    gamma: Sequence[float],
    s: Sequence[float],
    c: Sequence[float] | None = None,
    m: Sequence[float] | None = None,
    **kwargs,
) -> GameConfig:
    """Build a GameConfig from per-population and per-server value lists."""
    c = [10.0] * len(d) if c is None else c
    m = [10.0] * len(d) if m is None else m
    if not len(d) == len(c) == len(m):
        raise GameError("d, c and m must have one entry per population")
    if len(gamma) != len(s):
        raise GameError("gamma and s must have one entry per server")
    pops = tuple(PopulationSpec(float(a), float(b), float(e)) for a, b, e in zip(d, c, m))
    servers = tuple(EdgeServerSpec(float(g), float(v)) for g, v in zip(gamma, s))
    return GameConfig(populations=pops, servers=servers, **kwargs)


def validate_state(x, cfg: GameConfig | None = None, tol: float = SIMPLEX_TOL) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise GameError(f"state must be a Z x N matrix, got shape {x.shape}")
    if cfg is not None and x.shape != (cfg.Z, cfg.N):
        raise GameError(f"state shape {x.shape} does not match game ({cfg.Z}, {cfg.N})")
    if not np.all(np.isfinite(x)):
        raise GameError("state has non-finite entries")
    if np.any(x < 0) or np.any(x > 1):
        raise GameError("state entries must lie in [0, 1]")
    worst = np.abs(x.sum(axis=1) - 1.0).max()
    if worst > tol:
        raise GameError(f"state rows must sum to 1 (worst deviation {worst:.3e})")
    return x


def init_state(cfg: GameConfig, mode: str = "uniform", seed: int | None = None, matrix=None) -> np.ndarray:
    """Initial population state.

    ``mode`` is ``"uniform"``, ``"random"`` (each row drawn from the flat
    Dirichlet distribution, deterministic under ``seed``) or ``"explicit"``.
    """
    if mode == "uniform":
        return np.full((cfg.Z, cfg.N), 1.0 / cfg.N)
    if mode == "random":
        rng = np.random.default_rng(cfg.rng_seed if seed is None else seed)
        x = rng.dirichlet(np.ones(cfg.N), size=cfg.Z)
        return x / x.sum(axis=1, keepdims=True)
    if mode == "explicit":
        if matrix is None:
            raise GameError("explicit mode requires a matrix")
        return validate_state(np.array(matrix, dtype=float), cfg).copy()
    raise GameError(f"unknown init mode {mode!r}")


def utility_matrix(x: np.ndarray, cfg: GameConfig) -> np.ndarray:
    """Net utility u_n^(z) for every (population, server) pair.

    The reward-share term gamma_n * d_z x_n^(z) / sum_z d_z x_n^(z) is taken
    as 0 on servers nobody is associated with.
    """
    d = cfg.d
    weighted = d[:, None] * x
    load = weighted.sum(axis=0)
    occupied = load > 0
    share = np.zeros_like(weighted)
    share[:, occupied] = weighted[:, occupied] / load[occupied]
    return cfg.gamma[None, :] * share - cfg.cost_matrix()


def _check_index(z: int, n: int, cfg: GameConfig) -> None:
    if not (0 <= z < cfg.Z):
        raise IndexError(f"population index {z} out of range [0, {cfg.Z})")
    if not (0 <= n < cfg.N):
        raise IndexError(f"server index {n} out of range [0, {cfg.N})")


def utility(z: int, n: int, x: np.ndarray, cfg: GameConfig) -> float:
    _check_index(z, n, cfg)
    return float(utility_matrix(x, cfg)[z, n])


def average_utility(z: int, x: np.ndarray, cfg: GameConfig) -> float:
    _check_index(z, 0, cfg)
    u = utility_matrix(x, cfg)
    return float(u[z] @ x[z])


def average_utilities(x: np.ndarray, cfg: GameConfig, u: np.ndarray | None = None) -> np.ndarray:
    if u is None:
        u = utility_matrix(x, cfg)
    return np.einsum("zn,zn->z", u, x)


def replicator_rhs(x: np.ndarray, cfg: GameConfig) -> np.ndarray:
    """delta * x_n^(z) * (u_n^(z) - ubar^(z))."""
    u = utility_matrix(x, cfg)
    ubar = average_utilities(x, cfg, u)
    return cfg.delta * x * (u - ubar[:, None])


def project(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return x / x.sum(axis=1, keepdims=True)


def step(x: np.ndarray, cfg: GameConfig, rhs: np.ndarray | None = None) -> np.ndarray:
    """One explicit-Euler step followed by clamp-and-renormalize."""
    if rhs is None:
        rhs = replicator_rhs(x, cfg)
    return project(x + cfg.dt * rhs)


@dataclass
class Trajectory:
    times: list = field(default_factory=list)
    states: list = field(default_factory=list)
    utilities: list = field(default_factory=list)
    avg_utilities: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    converged: bool = False
    steps: int = 0

    def append(self, t: float, x: np.ndarray, u: np.ndarray, ubar: np.ndarray, residual: float) -> None:
        self.times.append(t)
        self.states.append(x.copy())
        self.utilities.append(u)
        self.avg_utilities.append(ubar)
        self.residuals.append(residual)

    def __len__(self) -> int:
        return len(self.times)

    @property
    def final_residual(self) -> float:
        return self.residuals[-1] if self.residuals else float("inf")

    def share_series(self, z: int, n: int) -> np.ndarray:
        return np.array([x[z, n] for x in self.states])


def run_to_equilibrium(
    cfg: GameConfig,
    init: np.ndarray,
    record_every: int = 1,
    strict: bool = False,
) -> tuple[Trajectory, np.ndarray]:
    """Iterate Euler steps until max |xdot| < eq_tol or max_steps is hit.

    The returned trajectory carries ``converged`` and ``final_residual``; with
    ``strict=True`` a timeout raises NoConvergence instead.
    """
    x = validate_state(init, cfg).copy()
    traj = Trajectory()
    delta = cfg.delta
    for k in range(cfg.max_steps + 1):
        u = utility_matrix(x, cfg)
        ubar = average_utilities(x, cfg, u)
        rhs = delta * x * (u - ubar[:, None])
        residual = float(np.abs(rhs).max())
        done = residual < cfg.eq_tol
        if done or k == cfg.max_steps or k % record_every == 0:
            traj.append(k * cfg.dt, x, u, ubar, residual)
        if done:
            traj.converged = True
            break
        if k == cfg.max_steps:
            break
        x = project(x + cfg.dt * rhs)
    traj.steps = k
    if strict and not traj.converged:
        raise NoConvergence(traj.final_residual, k)
    return traj, x


def support_utility_gap(x: np.ndarray, cfg: GameConfig, share_floor: float = SHARE_FLOOR) -> float:
    """Largest within-population spread of utilities over supported servers."""
    u = utility_matrix(x, cfg)
    gap = 0.0
    for z in range(cfg.Z):
        supported = u[z, x[z] > share_floor]
        if supported.size > 1:
            gap = max(gap, float(supported.max() - supported.min()))
    return gap


def is_equilibrium(x: np.ndarray, cfg: GameConfig, share_floor: float = SHARE_FLOOR) -> bool:
    residual = float(np.abs(replicator_rhs(x, cfg)).max())
    return residual < cfg.eq_tol and support_utility_gap(x, cfg, share_floor) <= cfg.utility_tol


def aggregated_data(x: np.ndarray, cfg: GameConfig) -> np.ndarray:
    """Data quantity each server attracts, sum_z d_z x_n^(z)."""
    return cfg.d @ x
