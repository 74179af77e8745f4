import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sdhfl.game import (
    GameError,
    NoConvergence,
    average_utility,
    init_state,
    make_game,
    replicator_rhs,
    run_to_equilibrium,
    step,
    support_utility_gap,
    utility,
    utility_matrix,
)


def fig2_game(**kw):
    return make_game(d=[2000, 4000], gamma=[100, 300], s=[2, 4], **kw)


def test_single_population_full_share():
    cfg = make_game(d=[1000], gamma=[100, 50], s=[2, 3])
    x = np.array([[1.0, 0.0]])
    assert utility(0, 0, x, cfg) == pytest.approx(99.978, abs=1e-12)


def test_empty_server_is_pure_cost():
    cfg = make_game(d=[2000, 4000], gamma=[100, 300], s=[2, 4], c=[10, 20], m=[5, 7])
    x = np.array([[0.0, 1.0], [0.0, 1.0]])
    for z, (c, m) in enumerate([(10, 5), (20, 7)]):
        assert utility(z, 0, x, cfg) == pytest.approx(-0.001 * (2 + c) - 0.001 * m)


def test_two_population_utility_hand_value():
    # 100 * (2000*0.5) / (2000*0.5 + 4000*0.25) - 0.001*(2+10) - 0.001*10
    cfg = fig2_game()
    x = np.array([[0.5, 0.5], [0.25, 0.75]])
    assert utility(0, 0, x, cfg) == pytest.approx(49.978, rel=1e-14)


def test_utility_index_errors():
    cfg = fig2_game()
    x = np.full((2, 2), 0.5)
    with pytest.raises(IndexError):
        utility(2, 0, x, cfg)
    with pytest.raises(IndexError):
        utility(0, 5, x, cfg)


def test_average_utility_cases():
    cfg = make_game(d=[1000, 3000], gamma=[100, 300, 500], s=[2, 4, 6])
    x = np.array([[1.0, 0.0, 0.0], [0.2, 0.3, 0.5]])
    assert average_utility(0, x, cfg) == pytest.approx(utility(0, 0, x, cfg))

    x = np.array([[0.2, 0.1, 0.7], [0.6, 0.3, 0.1]])
    brute = sum(utility(1, n, x, cfg) * x[1, n] for n in range(3))
    assert average_utility(1, x, cfg) == pytest.approx(brute, rel=1e-14)

    same = make_game(d=[1000], gamma=[100, 100, 100], s=[2, 2, 2])
    u = np.full((1, 3), 1 / 3)
    assert average_utility(0, u, same) == pytest.approx(utility(0, 1, u, same))


def test_rhs_extinct_and_symmetric():
    cfg = make_game(d=[1000, 2000], gamma=[100, 300, 500], s=[2, 4, 6])
    x = np.array([[0.0, 0.4, 0.6], [0.5, 0.0, 0.5]])
    rhs = replicator_rhs(x, cfg)
    assert rhs[0, 0] == 0.0 and rhs[1, 1] == 0.0

    sym = make_game(d=[1000, 1000], gamma=[100, 100], s=[2, 2])
    assert np.all(replicator_rhs(np.full((2, 2), 0.5), sym) == 0)


def test_rhs_sign_at_fig2_start():
    cfg = fig2_game()
    x = np.array([[0.1, 0.9], [0.1, 0.9]])
    a = b = 0.001
    rhs = replicator_rhs(x, cfg)
    for z, dz in enumerate([2000.0, 4000.0]):
        other = 6000.0 - dz
        u1 = 100 * dz * 0.1 / (dz * 0.1 + other * 0.1) - a * (2 + 10) - b * 10
        u2 = 300 * dz * 0.9 / (dz * 0.9 + other * 0.9) - a * (4 + 10) - b * 10
        ubar = 0.1 * u1 + 0.9 * u2
        expect = 0.01 * 0.1 * (u1 - ubar)
        assert rhs[z, 0] == pytest.approx(expect, rel=1e-12)
        assert np.sign(rhs[z, 0]) == -1


def test_step_fixed_point_and_euler_bound():
    sym = make_game(d=[1000], gamma=[100, 100], s=[2, 2])
    x = np.array([[0.3, 0.7]])
    assert np.array_equal(step(x, sym), x)

    cfg = fig2_game()
    x = np.array([[0.3, 0.7], [0.8, 0.2]])
    rhs = replicator_rhs(x, cfg)
    raw = x + cfg.dt * rhs
    assert np.abs(raw - x).max() <= cfg.dt * np.abs(rhs).max() + 1e-18
    assert np.allclose(step(x, cfg).sum(axis=1), 1.0, atol=1e-12)


def test_run_identical_servers_converges_immediately():
    cfg = make_game(d=[1000], gamma=[100, 100, 100], s=[2, 2, 2])
    x0 = init_state(cfg)
    traj, x = run_to_equilibrium(cfg, x0)
    assert traj.converged and traj.steps == 0
    assert np.allclose(x, 1 / 3)


def test_run_reports_nonconvergence():
    cfg = fig2_game(max_steps=5)
    traj, _ = run_to_equilibrium(cfg, np.array([[0.1, 0.9], [0.1, 0.9]]))
    assert not traj.converged
    assert traj.final_residual > cfg.eq_tol
    with pytest.raises(NoConvergence) as err:
        run_to_equilibrium(cfg, np.array([[0.1, 0.9], [0.1, 0.9]]), strict=True)
    assert err.value.residual > 0


def test_converged_state_has_equal_supported_utilities():
    cfg = make_game(d=[3000] * 3, gamma=[100, 300, 500], s=[2, 4, 6], c=[10, 30, 50], m=[10, 30, 50])
    traj, x = run_to_equilibrium(cfg, init_state(cfg, "random", seed=3))
    assert traj.converged
    assert np.abs(replicator_rhs(x, cfg)).max() < cfg.eq_tol
    assert support_utility_gap(x, cfg) <= cfg.utility_tol


def test_init_modes():
    cfg = fig2_game()
    assert np.all(init_state(cfg) == 0.5)
    assert np.array_equal(init_state(cfg, "random", seed=11), init_state(cfg, "random", seed=11))
    with pytest.raises(GameError):
        init_state(cfg, "explicit", matrix=[[0.5, 0.6], [0.5, 0.5]])
    with pytest.raises(GameError):
        init_state(cfg, "explicit", matrix=[[1.2, -0.2], [0.5, 0.5]])
    big = make_game(d=[1] * 5, gamma=[1, 2, 3, 4], s=[0, 0, 0, 0])
    for seed in range(200):
        x = init_state(big, "random", seed=seed)
        assert np.abs(x.sum(axis=1) - 1).max() < 1e-12


def test_config_validation():
    with pytest.raises(GameError):
        make_game(d=[1000], gamma=[100], s=[1])
    with pytest.raises(GameError):
        make_game(d=[0], gamma=[100, 100], s=[1, 1])
    with pytest.raises(GameError):
        make_game(d=[10], gamma=[100, -1], s=[1, 1])
    with pytest.raises(GameError):
        make_game(d=[10], gamma=[100, 100], s=[1, 1], delta=0)


# ---------------------------------------------------------------------------
# properties

positive = st.floats(min_value=1.0, max_value=5000.0)


@st.composite
def game_and_state(draw):
    Z = draw(st.integers(1, 3))
    N = draw(st.integers(2, 4))
    d = [draw(positive) for _ in range(Z)]
    gamma = [draw(st.floats(1.0, 900.0)) for _ in range(N)]
    s = [draw(st.floats(0.0, 6.0)) for _ in range(N)]
    c = [draw(st.floats(0.0, 50.0)) for _ in range(Z)]
    delta = draw(st.floats(0.001, 0.1))
    cfg = make_game(d=d, gamma=gamma, s=s, c=c, m=c, delta=delta)
    seed = draw(st.integers(0, 2**32 - 1))
    x = init_state(cfg, "random", seed=seed)
    if draw(st.booleans()):
        x[:, 0] = 0.0  # extinct first strategy
        x[:, 1] += 1e-3
        x /= x.sum(axis=1, keepdims=True)
    return cfg, x


@settings(max_examples=60, deadline=None)
@given(game_and_state())
def test_rhs_rows_sum_to_zero(case):
    cfg, x = case
    assert np.abs(replicator_rhs(x, cfg).sum(axis=1)).max() < 1e-9


@settings(max_examples=40, deadline=None)
@given(game_and_state(), st.integers(1, 200))
def test_simplex_and_extinction_preserved(case, n_steps):
    cfg, x = case
    extinct = x == 0
    for _ in range(n_steps):
        x = step(x, cfg)
    assert np.all((x >= 0) & (x <= 1))
    assert np.abs(x.sum(axis=1) - 1).max() < 1e-9
    assert np.all(x[extinct] == 0)


@settings(max_examples=60, deadline=None)
@given(game_and_state())
def test_above_average_share_grows(case):
    cfg, x = case
    u = utility_matrix(x, cfg)
    ubar = (u * x).sum(axis=1, keepdims=True)
    raw = x + cfg.dt * replicator_rhs(x, cfg)
    # skip advantages too small to survive rounding in x + dt * rhs
    grow = (cfg.delta * cfg.dt * (u - ubar) > 1e-12) & (x > 0) & (x < 1)
    assert np.all(raw[grow] > x[grow])


@settings(max_examples=10, deadline=None)
@given(game_and_state())
def test_runs_are_bit_identical(case):
    cfg, x = case
    cfg = cfg.replace(max_steps=300)
    t1, x1 = run_to_equilibrium(cfg, x)
    t2, x2 = run_to_equilibrium(cfg, x)
    assert np.array_equal(x1, x2)
    assert all(np.array_equal(a, b) for a, b in zip(t1.states, t2.states))
    assert t1.residuals == t2.residuals
