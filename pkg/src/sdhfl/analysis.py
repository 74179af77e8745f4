"""Numerical certificates for a game instance.

Bounded partial derivatives of the replicator field, multi-start phase
portraits for uniqueness, equilibrium classification and a Lyapunov
(squared-distance-to-equilibrium) monotonicity check.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from typing import Sequence

import numpy as np

from .game import (
    SHARE_FLOOR,
    GameConfig,
    GameError,
    Trajectory,
    average_utilities,
    replicator_rhs,
    run_to_equilibrium,
    support_utility_gap,
    utility_matrix,
    validate_state,
)

FD_STEP = 1e-6
LYAPUNOV_SLACK = 1e-9
UNIQUENESS_TOL = 1e-3


def utility_partial(z: int, n: int, v: int, x: np.ndarray, cfg: GameConfig) -> float:
    """d u_n^(z) / d x_v^(z) in closed form.

    Shares are independent coordinates, so d x_n / d x_v is the Kronecker
    indicator; x_v only enters u_n through server n's load when v == n.
    """
    x = np.asarray(x, dtype=float)
    if not (0 <= z < cfg.Z and 0 <= n < cfg.N and 0 <= v < cfg.N):
        raise IndexError("index out of range")
    if np.any(x[z] <= 0):
        raise GameError(f"row {z} must be strictly interior")
    d = cfg.d
    load = float(d @ x[:, n])
    if load <= 0:
        raise GameError(f"server {n} has zero load; partial undefined")
    if v != n:
        return 0.0
    dz = d[z]
    return float(cfg.gamma[n] * (dz / load - x[z, n] * dz**2 / load**2))


def rhs_partial(z: int, n: int, v: int, x: np.ndarray, cfg: GameConfig) -> float:
    """d f_n^(z) / d x_v^(z) via the product rule on delta*x_n*(u_n - ubar)."""
    x = np.asarray(x, dtype=float)
    u = utility_matrix(x, cfg)
    ubar = average_utilities(x, cfg, u)[z]
    du_n = utility_partial(z, n, v, x, cfg)
    # ubar = sum_m x_m u_m, and u_m depends on x_v only for m == v
    dubar = u[z, v] + x[z, v] * utility_partial(z, v, v, x, cfg)
    kron = 1.0 if v == n else 0.0
    return float(cfg.delta * (kron * (u[z, n] - ubar) + x[z, n] * (du_n - dubar)))


def fd_utility_partial(z: int, n: int, v: int, x: np.ndarray, cfg: GameConfig, h: float = FD_STEP) -> float:
    xp = np.array(x, dtype=float)
    xm = xp.copy()
    xp[z, v] += h
    xm[z, v] -= h
    return float((utility_matrix(xp, cfg)[z, n] - utility_matrix(xm, cfg)[z, n]) / (2 * h))


def fd_rhs_jacobian(x: np.ndarray, cfg: GameConfig, h: float = FD_STEP) -> np.ndarray:
    """Central-difference Jacobian of the replicator field, shape (Z, N, Z, N)."""
    x = np.asarray(x, dtype=float)
    Z, N = x.shape
    jac = np.empty((Z, N, Z, N))
    for zz in range(Z):
        for v in range(N):
            xp = x.copy()
            xm = x.copy()
            xp[zz, v] += h
            xm[zz, v] -= h
            jac[:, :, zz, v] = (replicator_rhs(xp, cfg) - replicator_rhs(xm, cfg)) / (2 * h)
    return jac


def sample_interior(cfg: GameConfig, rng: np.random.Generator, floor: float = 1e-3) -> np.ndarray:
    """A flat-Dirichlet state with every entry above ``floor``."""
    while True:
        x = rng.dirichlet(np.ones(cfg.N), size=cfg.Z)
        if x.min() > floor:
            return x / x.sum(axis=1, keepdims=True)


@dataclass
class BoundednessReport:
    bound: float  # max |d f_n^(z) / d x_v^(z)| within populations
    full_bound: float  # max over the whole Jacobian, cross-population terms included
    n_samples: int
    seed: int
    worst_state: np.ndarray

    @property
    def finite(self) -> bool:
        return bool(np.isfinite(self.bound) and np.isfinite(self.full_bound))


def certify_boundedness(cfg: GameConfig, n_samples: int = 100, seed: int = 0) -> BoundednessReport:
    """Empirical Lipschitz constant of the replicator field over interior states."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    bound = full = 0.0
    worst = None
    for _ in range(n_samples):
        x = sample_interior(cfg, rng)
        jac = np.abs(fd_rhs_jacobian(x, cfg))
        within = max(float(jac[z, :, z, :].max()) for z in range(cfg.Z))
        if within > bound or worst is None:
            bound = max(bound, within)
            worst = x
        full = max(full, float(jac.max()))
    return BoundednessReport(bound=bound, full_bound=full, n_samples=n_samples, seed=seed, worst_state=worst)


@dataclass
class PhasePortrait:
    inits: list
    trajectories: list
    endpoints: list
    max_endpoint_spread: float
    uniqueness_tol: float = UNIQUENESS_TOL

    @property
    def inconclusive(self) -> bool:
        return not all(t.converged for t in self.trajectories)

    @property
    def unique(self) -> bool:
        """True only when every run converged and endpoints agree."""
        return not self.inconclusive and self.max_endpoint_spread < self.uniqueness_tol

    @property
    def status(self) -> str:
        if self.inconclusive:
            return "inconclusive"
        return "unique" if self.unique else "multiple"


def endpoint_spread(endpoints: Sequence[np.ndarray]) -> float:
    spread = 0.0
    for a, b in combinations(endpoints, 2):
        spread = max(spread, float(np.abs(a - b).max()))
    return spread


def _run_one(args):
    cfg, x0, record_every = args
    return run_to_equilibrium(cfg, x0, record_every=record_every)


def phase_portrait(
    cfg: GameConfig,
    n_inits: int = 10,
    seed: int = 0,
    inits: Sequence | None = None,
    uniqueness_tol: float = UNIQUENESS_TOL,
    jobs: int = 1,
    record_every: int = 1,
) -> PhasePortrait:
    """Run the dynamics from ``n_inits`` interior starts.

    Explicit ``inits`` are used first; the rest are seeded flat-Dirichlet
    draws.
    """
    if n_inits < 2:
        raise ValueError("n_inits must be >= 2")
    starts = [validate_state(np.array(x, dtype=float), cfg) for x in (inits or [])][:n_inits]
    for x in starts:
        if x.min() <= 0:
            raise GameError("phase portrait inits must be strictly interior")
    rng = np.random.default_rng(seed)
    while len(starts) < n_inits:
        starts.append(sample_interior(cfg, rng))
    work = [(cfg, x0, record_every) for x0 in starts]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, work))
    else:
        results = [_run_one(w) for w in work]
    trajs = [r[0] for r in results]
    ends = [r[1] for r in results]
    return PhasePortrait(
        inits=starts,
        trajectories=trajs,
        endpoints=ends,
        max_endpoint_spread=endpoint_spread(ends),
        uniqueness_tol=uniqueness_tol,
    )


@dataclass
class LyapunovReport:
    values: np.ndarray  # summed G at each recorded step
    monotone: bool
    per_entry_monotone: np.ndarray  # Z x N booleans
    max_increase: float


def lyapunov_values(traj: Trajectory, eq: np.ndarray) -> np.ndarray:
    states = np.asarray(traj.states)
    return ((states - np.asarray(eq)[None]) ** 2).sum(axis=(1, 2))


def lyapunov_check(traj: Trajectory, eq: np.ndarray, slack: float = LYAPUNOV_SLACK) -> LyapunovReport:
    """Is sum_(z,n) (x* - x)^2 non-increasing along the recorded trajectory?"""
    if len(traj) < 2:
        raise ValueError("trajectory must have at least 2 recorded steps")
    states = np.asarray(traj.states)
    per_entry = (states - np.asarray(eq)[None]) ** 2
    total = per_entry.sum(axis=(1, 2))
    inc = np.diff(total)
    per_entry_ok = (np.diff(per_entry, axis=0) <= slack).all(axis=0)
    return LyapunovReport(
        values=total,
        monotone=bool((inc <= slack).all()),
        per_entry_monotone=per_entry_ok,
        max_increase=float(inc.max()),
    )


def classify(eq: np.ndarray, share_floor: float = SHARE_FLOOR) -> str:
    eq = np.asarray(eq, dtype=float)
    if np.all(eq.max(axis=1) >= 1 - share_floor):
        return "boundary"
    if np.all((eq > share_floor) & (eq < 1 - share_floor)):
        return "interior"
    return "mixed-rows"


@dataclass
class EquilibriumReport:
    state: np.ndarray
    kind: str
    residual: float
    lyapunov_monotone: bool
    utility_gap: float
    converged: bool = True
    notes: list = field(default_factory=list)


def equilibrium_report(traj: Trajectory, eq: np.ndarray, cfg: GameConfig) -> EquilibriumReport:
    lyap = lyapunov_check(traj, eq).monotone if len(traj) >= 2 else True
    return EquilibriumReport(
        state=eq,
        kind=classify(eq),
        residual=float(np.abs(replicator_rhs(eq, cfg)).max()),
        lyapunov_monotone=lyap,
        utility_gap=support_utility_gap(eq, cfg),
        converged=traj.converged,
    )
