"""Experiment runners and the figure presets.

Every runner writes CSV artifacts into an output directory and returns a
RunResult; ``run_preset`` adds the manifest.
"""
from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .analysis import classify, lyapunov_check, phase_portrait
from .config import ExperimentConfig, derive_seed, parse_config
from .csvio import RunManifest, emit_csv
from .data import Dataset, load_mnist, prepare, write_partition_manifest
from .game import (
    GameConfig,
    aggregated_data,
    init_state,
    run_to_equilibrium,
    support_utility_gap,
)
from .hfl import run_hfl

REPORTED_POP3_SHARES = (0.31, 0.14, 0.55)


@dataclass
class RunResult:
    artifacts: list = field(default_factory=list)
    status: str = "ok"  # ok | nonconverged | diverged
    notes: list = field(default_factory=list)
    rows: list = field(default_factory=list)  # summary rows, for programmatic use

    def merge(self, other: "RunResult") -> None:
        self.artifacts += other.artifacts
        self.notes += other.notes
        self.rows += other.rows
        if other.status != "ok":
            self.status = other.status


def _pmap(fn, items, jobs: int):
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(it) for it in items]


# ---------------------------------------------------------------------------
# game runners


def initial_state(cfg: ExperimentConfig, game: GameConfig, index: int = 0) -> np.ndarray:
    spec = cfg["game"]["init"].strip()
    if spec in ("uniform", "random"):
        return init_state(game, spec, seed=derive_seed(cfg.master_seed, index))
    from .config import _matrix

    return init_state(game, "explicit", matrix=_matrix(spec))


def _state_columns(game: GameConfig, prefix: str) -> list[str]:
    return [f"{prefix}_z{z + 1}_n{n + 1}" for z in range(game.Z) for n in range(game.N)]


def write_trajectory(traj, game: GameConfig, path) -> Path:
    schema = ["t"] + _state_columns(game, "x") + _state_columns(game, "u") + ["residual"]
    rows = (
        [t, *x.ravel(), *u.ravel(), r]
        for t, x, u, r in zip(traj.times, traj.states, traj.utilities, traj.residuals)
    )
    return emit_csv(rows, schema, path)


REPORT_COLUMNS = ["population", "kind", "converged", "steps", "residual", "utility_gap", "lyapunov_monotone"]


def game_run(cfg: ExperimentConfig, out: Path, tag: str = "game", init=None) -> RunResult:
    game = cfg.game()
    x0 = initial_state(cfg, game) if init is None else init
    traj, x = run_to_equilibrium(game, x0)
    res = RunResult()
    res.artifacts.append(write_trajectory(traj, game, out / f"{tag}_trajectory.csv"))
    lyap = lyapunov_check(traj, x).monotone if len(traj) >= 2 else True
    kind = classify(x)
    gap = support_utility_gap(x, game)
    schema = REPORT_COLUMNS + [f"x_n{n + 1}" for n in range(game.N)] + [f"u_n{n + 1}" for n in range(game.N)]
    u = traj.utilities[-1]
    rows = [
        [z + 1, kind, traj.converged, traj.steps, traj.final_residual, gap, lyap, *x[z], *u[z]]
        for z in range(game.Z)
    ]
    res.artifacts.append(emit_csv(rows, schema, out / f"{tag}_equilibrium.csv"))
    res.rows.append(dict(state=x, trajectory=traj, game=game, lyapunov_monotone=lyap, utility_gap=gap))
    if not traj.converged:
        res.status = "nonconverged"
        res.notes.append(f"{tag}: no convergence within {game.max_steps} steps (residual {traj.final_residual:.3e})")
    return res


def phase_run(cfg: ExperimentConfig, out: Path, tag: str = "phase", inits=None, jobs: int = 1) -> RunResult:
    game = cfg.game()
    portrait = phase_portrait(
        game, n_inits=cfg["game"]["n_inits"], seed=derive_seed(cfg.master_seed, 1), inits=inits, jobs=jobs
    )
    res = RunResult()
    for i, traj in enumerate(portrait.trajectories):
        cols = ["t"] + [f"x_n1_pop{z + 1}" for z in range(game.Z)]
        rows = ([t, *x[:, 0]] for t, x in zip(traj.times, traj.states))
        res.artifacts.append(emit_csv(rows, cols, out / f"{tag}_run{i:02d}.csv"))
    schema = ["run", "converged", "steps", "residual", "kind", "lyapunov_monotone", "utility_gap"]
    schema += [f"init_x_n1_pop{z + 1}" for z in range(game.Z)] + [f"end_x_n1_pop{z + 1}" for z in range(game.Z)]
    rows = []
    for i, (traj, x0, x) in enumerate(zip(portrait.trajectories, portrait.inits, portrait.endpoints)):
        lyap = lyapunov_check(traj, x).monotone if len(traj) >= 2 else True
        rows.append(
            [i, traj.converged, traj.steps, traj.final_residual, classify(x), lyap, support_utility_gap(x, game), *x0[:, 0], *x[:, 0]]
        )
    res.artifacts.append(emit_csv(rows, schema, out / f"{tag}_endpoints.csv"))
    res.notes.append(f"{tag}: portrait {portrait.status}, max endpoint spread {portrait.max_endpoint_spread:.6g}")
    res.rows.append(dict(portrait=portrait, game=game))
    if portrait.inconclusive:
        res.status = "nonconverged"
    return res


def _equilibrium_job(args):
    game, x0 = args
    return run_to_equilibrium(game, x0)


def game_sweep(cfg: ExperimentConfig, out: Path, tag: str, jobs: int = 1) -> RunResult:
    """Run the game at every sweep point from one shared initial state."""
    points = cfg.expand_sweep()
    name = cfg["sweep"]["parameter"]
    values = cfg.sweep_points()
    games = [p.game() for p in points]
    x0 = initial_state(cfg, games[0])
    results = _pmap(_equilibrium_job, [(g, x0) for g in games], jobs)
    N = games[0].N
    schema = [name] + [f"data_n{n + 1}" for n in range(N)] + ["converged", "steps", "residual", "lyapunov_monotone"]
    schema += _state_columns(games[0], "x")
    rows = []
    res = RunResult()
    for v, g, (traj, x) in zip(values, games, results):
        lyap = lyapunov_check(traj, x).monotone if len(traj) >= 2 else True
        rows.append([v, *aggregated_data(x, g), traj.converged, traj.steps, traj.final_residual, lyap, *x.ravel()])
        res.rows.append(dict(value=v, state=x, trajectory=traj, game=g, lyapunov_monotone=lyap))
        if not traj.converged:
            res.status = "nonconverged"
    res.artifacts.append(emit_csv(rows, schema, out / f"{tag}_summary.csv"))
    return res


# ---------------------------------------------------------------------------
# HFL runners

_DATA_CACHE: dict = {}


def mnist(root=None) -> tuple[Dataset, Dataset]:
    key = str(root)
    if key not in _DATA_CACHE:
        _DATA_CACHE[key] = (load_mnist("train", root), load_mnist("test", root))
    return _DATA_CACHE[key]


TRACE_COLUMNS = ["iteration", "accuracy", "loss"]


def _hfl_job(args):
    cfg, seed, out, tag = args
    d = cfg["data"]
    h = cfg["hfl"]
    train, test = mnist(d.get("root"))
    cfg = cfg.with_value("data.rng_seed", seed).with_value("hfl.rng_seed", seed)
    data = prepare(
        train,
        test,
        cfg.partition(),
        d["N"],
        subset_size=d.get("subset_size"),
        pool_fraction=d["pool_fraction"],
        noise_sigma=d["noise_sigma"],
    )
    trace = run_hfl(cfg.hfl(), data)
    files = [
        emit_csv(zip(trace.iterations, trace.global_accuracy, trace.global_loss), TRACE_COLUMNS, out / f"{tag}_trace.csv")
    ]
    if h["track_intermediate"] and trace.edge_iterations:
        edges = data.layout.active_edges()
        cols = ["iteration"] + [f"edge{n + 1}_accuracy" for n in edges]
        files.append(emit_csv(([k, *a] for k, a in zip(trace.edge_iterations, trace.edge_accuracy)), cols, out / f"{tag}_edges.csv"))
    part = out / f"{tag}_partition.csv"
    write_partition_manifest(part, data.shards, train)
    files.append(part)
    return dict(
        tag=tag,
        seed=seed,
        final_accuracy=trace.final_accuracy,
        status=trace.status,
        diverged_at=trace.diverged_at,
        files=files,
        trace=trace,
    )


SUMMARY_COLUMNS = ["condition", "seed_index", "seed", "final_accuracy", "status", "diverged_at"]


def hfl_conditions(conditions: list, base: ExperimentConfig, out: Path, tag: str, jobs: int = 1) -> RunResult:
    """``conditions`` is a list of (label, ExperimentConfig); each runs for
    ``hfl.seeds`` paired seeds."""
    n_seeds = base["hfl"]["seeds"]
    seeds = [derive_seed(base.master_seed, 100 + i) for i in range(n_seeds)]
    jobs_list = []
    for label, cfg in conditions:
        for i, s in enumerate(seeds):
            jobs_list.append((cfg, s, out, f"{tag}_{label}_seed{i}"))
    results = _pmap(_hfl_job, jobs_list, jobs)
    res = RunResult()
    rows = []
    for (label, _), chunk in zip(conditions, [results[i : i + n_seeds] for i in range(0, len(results), n_seeds)]):
        accs = []
        for i, r in enumerate(chunk):
            rows.append([label, i, r["seed"], r["final_accuracy"], r["status"], r["diverged_at"]])
            res.artifacts += r["files"]
            accs.append(r["final_accuracy"])
            if r["status"] != "ok":
                res.status = "diverged"
                res.notes.append(f"{r['tag']}: diverged at iteration {r['diverged_at']}")
        rows.append([label, "mean", "", float(np.mean(accs)), "", ""])
        res.rows.append(dict(condition=label, accuracies=accs, mean=float(np.mean(accs)), traces=[r["trace"] for r in chunk]))
    res.artifacts.append(emit_csv(rows, SUMMARY_COLUMNS, out / f"{tag}_summary.csv"))
    return res


# ---------------------------------------------------------------------------
# presets

FIG2_TEXT = """
[game]
d_z = 2000, 4000
c_z = 10, 10
m_z = 10, 10
gamma_n = 100, 300
s_n = 2, 4
n_inits = 10
"""

FIG3_TEXT = """
[game]
d_z = 3000, 3000, 3000
c_z = 10, 30, 50
m_z = 10, 30, 50
gamma_n = 100, 300, 500
s_n = 2, 4, 6
"""

DESK_HFL_TEXT = """
[hfl]
kappa1 = 5
kappa2 = 2
K = 300
eta0 = 0.01
decay = 0.995
batch_size = 20
hidden_dim = 32
seeds = 3

[data]
J = 10
N = 2
subset_size = 6000
edge_mode = noniid
classes_per_worker = 1
synthetic_fraction = 0
"""

FIG2_INITS = ([[0.1, 0.9], [0.1, 0.9]], [[0.6, 0.4], [0.9, 0.1]])
FIG4_DELTAS = (0.001, 0.01, 0.1)
FIG5_GAMMAS = tuple(range(100, 1000, 100))
FIG6_COSTS = (10, 20, 30, 40, 50)
FIG8_RHOS = (0.0, 0.05, 0.10, 0.15, 0.20, 0.25)
FIG10_KAPPA2 = (1, 2, 3, 4, 6, 12)


def divisor_pairs(product: int) -> list[tuple[int, int]]:
    return [(k1, product // k1) for k1 in range(1, product + 1) if product % k1 == 0]


def _fig2(cfg, out, jobs):
    return phase_run(cfg, out, "fig2", inits=[np.array(x) for x in FIG2_INITS], jobs=jobs)


def _fig3(cfg, out, jobs):
    res = game_run(cfg, out, "fig3")
    x = res.rows[0]["state"]
    if x.shape == (3, 3):
        dev = np.abs(x[2] - np.array(REPORTED_POP3_SHARES)).max()
        res.notes.append(f"population 2 share on server 2: {x[1, 1]:.6f}")
        res.notes.append(
            f"population 3 shares {np.round(x[2], 4).tolist()} vs reported {list(REPORTED_POP3_SHARES)}: max deviation {dev:.4f}"
        )
        if dev > 0.10:
            res.notes.append(
                "population 3 outside +-0.10: population masses are not given for this scenario; "
                f"equilibrium property check residual={res.rows[0]['trajectory'].final_residual:.3e} "
                f"utility_gap={res.rows[0]['utility_gap']:.3e}"
            )
    return res


def _fig4(cfg, out, jobs):
    game = cfg.game()
    x0 = initial_state(cfg, game)
    res = RunResult()
    rows = []
    for dl in FIG4_DELTAS:
        sub = game_run(cfg.with_value("game.delta", dl), out, f"fig4_delta{dl:g}", init=x0)
        res.merge(sub)
        r = sub.rows[-1]
        rows.append([dl, r["trajectory"].steps, r["trajectory"].converged, r["trajectory"].final_residual, *r["state"].ravel()])
    schema = ["delta", "steps", "converged", "residual"] + _state_columns(game, "x")
    res.artifacts.append(emit_csv(rows, schema, out / "fig4_summary.csv"))
    return res


def _sweep_preset(param, values, tag):
    def run(cfg, out, jobs):
        cfg = cfg.with_value("sweep.parameter", param).with_value("sweep.values", ", ".join(str(v) for v in values))
        return game_sweep(cfg, out, tag, jobs)

    return run


def _fig7(cfg, out, jobs):
    conds = [(f"cpw-{c}", cfg.with_value("data.classes_per_worker", c)) for c in (None, 2, 1)]
    conds[0] = ("cpw-iid", conds[0][1])
    return hfl_conditions(conds, cfg, out, "fig7", jobs)


def _fig8(cfg, out, jobs):
    conds = [(f"rho-{r:g}", cfg.with_value("data.synthetic_fraction", r)) for r in FIG8_RHOS]
    return hfl_conditions(conds, cfg, out, "fig8", jobs)


def _fig9(cfg, out, jobs):
    base = cfg.with_value("data.synthetic_fraction", 0.05)
    conds = [
        (f"k1-{k1}-k2-{k2}", base.with_values({"hfl.kappa1": k1, "hfl.kappa2": k2}))
        for k1, k2 in divisor_pairs(60)
    ]
    return hfl_conditions(conds, base, out, "fig9", jobs)


def _fig10(cfg, out, jobs):
    base = cfg.with_value("data.synthetic_fraction", 0.05)
    k1 = base["hfl"]["kappa1"]
    conds = [(f"k1-{k1}-k2-{k2}", base.with_value("hfl.kappa2", k2)) for k2 in FIG10_KAPPA2]
    return hfl_conditions(conds, base, out, "fig10", jobs)


@dataclass(frozen=True)
class Preset:
    name: str
    figure: str
    base_text: str
    runner: Callable
    needs_data: bool = False


PRESETS = {
    p.name: p
    for p in [
        Preset("fig2-phaseplane", "Fig. 2 phase plane", FIG2_TEXT, _fig2),
        Preset("fig3-populations", "Fig. 3 population shares", FIG3_TEXT, _fig3),
        Preset("fig4-learningrate", "Fig. 4 learning rates", FIG3_TEXT, _fig4),
        Preset("fig5-rewardpool", "Fig. 5 reward pools", FIG3_TEXT, _sweep_preset("gamma_1", FIG5_GAMMAS, "fig5")),
        Preset("fig6-computationcost", "Fig. 6 computation costs", FIG3_TEXT, _sweep_preset("c_1", FIG6_COSTS, "fig6")),
        Preset("fig7-noniid-accuracy", "Fig. 7 non-IID accuracy (MNIST)", DESK_HFL_TEXT, _fig7, True),
        Preset("fig8-synthetic-sweep", "Fig. 8 synthetic fraction sweep (MNIST)", DESK_HFL_TEXT, _fig8, True),
        Preset("fig9-kappa-fixed-product", "Fig. 9 kappa1 with kappa1*kappa2 = 60 (MNIST)", DESK_HFL_TEXT, _fig9, True),
        Preset("fig10-kappa2-sweep", "Fig. 10 kappa2 with kappa1 fixed (MNIST)", DESK_HFL_TEXT, _fig10, True),
    ]
}


class UnknownPreset(KeyError):
    def __str__(self):
        return f"unknown preset {self.args[0]!r}; choose from: {', '.join(PRESETS)}"


def preset_config(name: str, user: ExperimentConfig | None = None) -> ExperimentConfig:
    """Preset base config with any keys the user set explicitly layered on top."""
    if name not in PRESETS:
        raise UnknownPreset(name)
    cfg = parse_config(PRESETS[name].base_text)
    if user is not None:
        cfg = cfg.with_values(
            {f"{section}.{key}": user[section][key] for section, key in user.lines if section != "sweep"}
        )
    return cfg


def run_preset(name: str, cfg: ExperimentConfig | None = None, out=None, jobs: int = 1) -> tuple[RunResult, RunManifest]:
    if name not in PRESETS:
        raise UnknownPreset(name)
    preset = PRESETS[name]
    cfg = preset_config(name, cfg)
    out = Path(out if out is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    res = preset.runner(cfg, out, jobs)
    manifest = RunManifest(
        preset=name,
        figure=preset.figure,
        config_hash=cfg.hash(),
        seed=cfg.master_seed,
        artifacts=list(res.artifacts),
        status=res.status,
        notes=list(res.notes),
        wall_clock=time.perf_counter() - start,
    )
    manifest.write(out)
    return res, manifest


def run_config(cfg: ExperimentConfig, out=None, jobs: int = 1) -> tuple[RunResult, RunManifest]:
    """Run a config without a preset, according to its ``mode``."""
    out = Path(out if out is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    mode = cfg.mode
    if mode == "game":
        res = game_run(cfg, out)
    elif mode == "phase":
        res = phase_run(cfg, out, jobs=jobs)
    elif mode == "hfl":
        res = hfl_conditions([("run", cfg)], cfg, out, "hfl", jobs)
    else:
        if not cfg.sweep_points():
            from .config import ConfigError

            raise ConfigError("sweep mode needs [sweep] parameter and values", "sweep")
        if cfg["sweep"]["runs"] == "game":
            res = game_sweep(cfg, out, "sweep", jobs)
        else:
            values = cfg.sweep_points()
            conds = [(f"{cfg['sweep']['parameter']}-{v:g}", c) for v, c in zip(values, cfg.expand_sweep())]
            res = hfl_conditions(conds, cfg, out, "sweep", jobs)
    manifest = RunManifest(
        preset="",
        figure="",
        config_hash=cfg.hash(),
        seed=cfg.master_seed,
        artifacts=list(res.artifacts),
        status=res.status,
        notes=list(res.notes),
        wall_clock=time.perf_counter() - start,
    )
    manifest.write(out)
    return res, manifest
