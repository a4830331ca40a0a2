import math
from dataclasses import replace

import numpy as np
from scipy.integrate import trapezoid
import pytest
from hypothesis import given, settings, strategies as st

from movact.errors import ConfigError, PreconditionError
from movact.model import ActuatorWindow, CoefficientField, FemGrid, fem_load_vector
from movact.rhc import (Horizon, MovingProblem, RhcConfig, bb_step, cost, my_penalty, projected_bb,
                        receding_horizon, solve_open_loop, solve_static_open_loop, static_bank_rhc,
                        uncontrolled, bank_loads)
from movact.simulate import fit_exponential, step_actuator_ode
from movact.static_feedback import ActuatorBank

NU = 0.1
EX1 = CoefficientField.from_spec("-3-2|sin(t+x)|", "|cos(t+x)|")
EX2 = CoefficientField.constant(-5.0)


def small_cfg(**kw):
    base = dict(T=0.25, delta=0.125, h=0.02, dt=1e-3)
    base.update(kw)
    return RhcConfig(**base)


# -------------------------------------------------------------- config and cost

def test_config_validation():
    with pytest.raises(ConfigError):
        RhcConfig(T=1.0, delta=2.0).validate()
    with pytest.raises(ConfigError):
        RhcConfig(beta=0.0).validate()
    with pytest.raises(ConfigError):
        RhcConfig(T=1.0005).validate()
    RhcConfig(T=1.0, delta=1.0).validate()


def test_cost_zero():
    cfg = RhcConfig()
    assert cost(np.zeros(10), np.zeros(10), {"grad_sq": np.zeros(11)}, cfg, 0.1) == 0.0


def test_cost_constant_control():
    cfg = RhcConfig(beta=0.5)
    assert cost(np.ones(100), np.zeros(100), {"grad_sq": np.zeros(101)}, cfg, 0.01) == pytest.approx(0.25,
                                                                                                     rel=1e-14)


def test_penalty_values():
    pen, d = my_penalty(np.array([0.5, 0.01, 0.995]), 0.04)
    np.testing.assert_allclose(pen, [0.0, 0.01 ** 2, 0.015 ** 2], atol=1e-18)
    np.testing.assert_allclose(d, [0.0, -0.02, 0.03], atol=1e-15)


def dense_reference(cfg, coeffs, y0, c0, c1, u, eta):
    """Plain dense re-implementation of the forward model and the cost."""
    grid = FemGrid(h=cfg.h)
    steps, dt = len(u), cfg.dt
    m = grid.mass_interior().dense()
    lap = grid.stiffness_interior().dense()
    stiff = NU * lap + coeffs.reaction_const * m
    lhs, rhs = m + 0.5 * dt * stiff, m - 0.5 * dt * stiff
    t = dt * np.arange(steps + 1)
    ops = grid.explicit_matrices(coeffs, t)
    c, v = [c0], c1
    for k in range(steps):
        cn, v = step_actuator_ode(c[-1], v, eta[k], cfg.varsigma, cfg.epsilon, dt)
        c.append(cn)
    c = np.array(c)
    ys = [np.asarray(y0, float)]
    g_prev = None
    for k in range(steps):
        g = u[k] * fem_load_vector(grid, ActuatorWindow(c[k], cfg.r))[grid.interior]
        if ops is not None:
            g = g - ops.at(k).dense() @ ys[-1]
        ab = g if g_prev is None else 1.5 * g - 0.5 * g_prev
        ys.append(np.linalg.solve(lhs, rhs @ ys[-1] + dt * ab))
        g_prev = g
    ys = np.array(ys)
    grad_sq = np.einsum("ki,ij,kj->k", ys, lap, ys)
    pen, _ = my_penalty(c, cfg.r)
    J = (0.5 * trapezoid(grad_sq, dx=dt) + 0.5 * cfg.beta * dt * np.sum(u * u)
         + trapezoid(pen, dx=dt) / (2 * cfg.mu_my))
    return ys, c, J


@pytest.mark.parametrize("coeffs", [EX1, EX2])
def test_value_matches_dense_reference(coeffs):
    cfg = small_cfg(beta=0.3)
    rng = np.random.default_rng(0)
    hz = Horizon(cfg, NU, coeffs, 0.0)
    y0 = rng.standard_normal(hz.n)
    prob = MovingProblem(hz, y0, 0.5, 0.2)
    u, eta = rng.standard_normal(hz.steps), 3 * rng.standard_normal(hz.steps)
    x = prob.join(u, eta)
    ys, s = prob.simulate(x)
    ref_y, ref_c, ref_J = dense_reference(cfg, coeffs, y0, 0.5, 0.2, u, eta)
    np.testing.assert_allclose(s[:, 0], ref_c, rtol=0, atol=1e-14)
    np.testing.assert_allclose(ys, ref_y, rtol=0, atol=1e-12 * np.abs(ref_y).max())
    assert prob.value(x) == pytest.approx(ref_J, rel=1e-12)
    grad_sq = np.einsum("ki,ij,kj->k", ys, hz.S.dense(), ys)
    assert cost(u, eta, {"grad_sq": grad_sq, "c": s[:, 0]}, cfg, cfg.dt) == pytest.approx(ref_J, rel=1e-12)


# -------------------------------------------------------------- gradient

def fd_instance(seed, c0=0.5, c1=0.0, mu_my=1e-5):
    cfg = RhcConfig(T=1.0, delta=0.5, dt=0.02, h=1 / 65, beta=0.1, mu_my=mu_my)
    hz = Horizon(cfg, NU, EX1, 0.0)
    assert hz.n == 64 and hz.steps == 50
    rng = np.random.default_rng(seed)
    prob = MovingProblem(hz, np.sin(np.pi * hz.grid.x_interior) + 0.3 * rng.standard_normal(hz.n), c0, c1)
    x = prob.join(5 * rng.standard_normal(hz.steps), 2 * rng.standard_normal(hz.steps))
    return prob, x, rng


def fd_errors(prob, x, rng, block, step=1e-4, count=5):
    g = prob.gradient(x) * prob.hz.dt
    errs = []
    for _ in range(count):
        d = np.zeros_like(x)
        d[block] = rng.standard_normal(prob.m)
        d /= np.linalg.norm(d)
        fd = (prob.value(x + step * d) - prob.value(x - step * d)) / (2 * step)
        errs.append(abs(fd - g @ d) / abs(g @ d))
    return max(errs)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradient_finite_differences_interior(seed):
    prob, x, rng = fd_instance(seed)
    _, s = prob.simulate(x)
    assert np.all((s[:, 0] > 0.1) & (s[:, 0] < 0.9))
    m = prob.m
    assert fd_errors(prob, x, rng, slice(0, m)) < 1e-5
    assert fd_errors(prob, x, rng, slice(m, 2 * m)) < 1e-5


def test_gradient_finite_differences_with_active_penalty():
    prob, x, rng = fd_instance(5, c0=0.05, c1=-1.0, mu_my=1e-2)
    _, s = prob.simulate(x)
    assert np.min(s[:, 0]) < 0.02
    m = prob.m
    assert fd_errors(prob, x, rng, slice(0, m)) < 1e-5
    assert fd_errors(prob, x, rng, slice(m, 2 * m)) < 1e-5


# -------------------------------------------------------------- optimizer

def test_bb_identity_hessian():
    x0, x1 = np.array([1.0, 2.0]), np.array([0.3, -0.5])
    assert bb_step(x0, x1, x0, x1, 1) == 1.0
    assert bb_step(x0, x1, x0, x1, 2) == 1.0


def test_bb_worked_instance():
    s, y = np.array([1.0, 0.0]), np.array([2.0, 0.0])
    z = np.zeros(2)
    assert bb_step(z, y, z, s, 1) == 0.5
    assert bb_step(z, y, z, s, 2) == 0.5


def test_bb_negative_curvature_falls_back():
    z = np.zeros(2)
    assert bb_step(z, np.array([-1.0, 0.0]), z, np.array([1.0, 0.0]), 1) == 1.0


def test_bb_clipping():
    z = np.zeros(1)
    assert bb_step(z, np.array([1e-12]), z, np.array([1.0]), 1) == 1e8


def test_projected_bb_ill_conditioned_quadratic():
    dvec = np.array([1.0, 100.0])
    vg = lambda x, need: (0.5 * float(x @ (dvec * x)), dvec * x if need else None)
    res = projected_bb(vg, np.array([1.0, 1.0]), tol=0.0, abs_tol=1e-8, max_iter=200)
    assert res.converged and res.iterations <= 200
    assert np.linalg.norm(res.x) < 1e-8


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_projected_bb_box(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.5, 10, 5)
    b = rng.standard_normal(5) * 3
    vg = lambda x, need: (0.5 * float(x @ (a * x)) - float(b @ x), a * x - b if need else None)
    proj = lambda x: np.clip(x, -1, 1)
    res = projected_bb(vg, np.zeros(5), proj, tol=0.0, abs_tol=1e-10, max_iter=500)
    assert res.converged
    np.testing.assert_allclose(res.x, np.clip(b / a, -1, 1), atol=1e-8)


# -------------------------------------------------------------- open loop

def test_zero_state_gives_zero_controls():
    cfg = small_cfg()
    g = FemGrid(h=cfg.h)
    sol = solve_open_loop((0.0, np.zeros(g.n_interior), 0.5, 0.0), cfg, NU, EX1)
    assert sol.converged and not sol.kicked
    assert np.all(sol.u == 0) and np.all(sol.eta == 0)


def test_frozen_actuator_example2():
    cfg = small_cfg(freeze_actuator=True, beta=0.01)
    g = FemGrid(h=cfg.h)
    sol = solve_open_loop((0.0, np.sin(2 * np.pi * g.x_interior), 0.5, 0.0), cfg, NU, EX2)
    assert sol.converged
    assert np.max(np.abs(sol.u)) <= 1e-12
    assert np.all(sol.c == 0.5)


def test_inadmissible_start():
    cfg = small_cfg()
    with pytest.raises(PreconditionError):
        solve_open_loop((0.0, np.zeros(49), 0.01, 0.0), cfg, NU, EX1)


def test_large_control_weight_suppresses_control():
    cfg = small_cfg(beta=1e6)
    g = FemGrid(h=cfg.h)
    loads = bank_loads(g, ActuatorBank(1, cfg.r))
    sol = solve_static_open_loop((0.0, np.sin(np.pi * g.x_interior)), cfg, NU, EX1, loads)
    assert math.sqrt(cfg.dt * float(np.sum(sol.u ** 2))) <= 1e-3


def test_constraint_overshoot_decreases_with_penalty_weight():
    # the actuator heads for the wall faster than the force box can brake it
    g = FemGrid(h=0.02)
    y0 = np.exp(-((g.x_interior - 0.05) / 0.05) ** 2)
    viol = []
    for mu in (1e-3, 1e-4, 1e-5):
        cfg = RhcConfig(T=0.5, delta=0.25, beta=0.01, K=22, mu_my=mu, h=0.02, max_iter=3000)
        sol = solve_open_loop((0.0, y0, 0.2, -3.0), cfg, NU, CoefficientField.constant(-1.0))
        assert np.max(np.abs(sol.eta)) <= cfg.K
        viol.append(sol.violation)
    assert viol[0] > 0
    assert viol[1] <= 1.1 * viol[0] and viol[2] <= 1.1 * viol[1]


def shifted_warm_start(coeffs, f, beta):
    cfg = small_cfg(beta=beta, max_iter=300)
    g = FemGrid(h=cfg.h)
    first = solve_open_loop((0.0, f(g.x_interior), 0.5, 0.0), cfg, NU, coeffs)
    k = int(round(cfg.delta / cfg.dt))
    init = (cfg.delta, first.y[k], first.c[k], first.cdot[k])
    warm = np.r_[first.u[k:], np.zeros(k), first.eta[k:], np.zeros(k)]
    return cfg, init, warm


@pytest.mark.parametrize("coeffs,f,beta", [
    (EX1, lambda x: np.sin(np.pi * x), 0.05),
    (EX1, lambda x: np.sin(np.pi * x), 0.5),
    (EX2, lambda x: np.sin(2 * np.pi * x), 0.01),
    (EX2, lambda x: np.exp(-50 * (x - 0.3) ** 2), 0.1),
])
def test_warm_start_first_iterate_not_worse(coeffs, f, beta):
    cfg, init, warm = shifted_warm_start(coeffs, f, beta)
    hz = Horizon(cfg, NU, coeffs, init[0])
    cold = MovingProblem(hz, *init[1:]).value(np.zeros(2 * hz.steps))
    sol = solve_open_loop(init, cfg, NU, coeffs, warm=warm, horizon=hz)
    assert sol.start_cost <= cold
    assert sol.cost <= sol.start_cost


def test_warm_start_used_when_cheaper():
    # Gaussian bump off centre: the shifted plan keeps pushing the right way
    cfg, init, warm = shifted_warm_start(EX2, lambda x: np.exp(-50 * (x - 0.3) ** 2), 0.1)
    hz = Horizon(cfg, NU, EX2, init[0])
    prob = MovingProblem(hz, *init[1:])
    sol = solve_open_loop(init, cfg, NU, EX2, warm=warm, horizon=hz)
    assert sol.warm_used == (prob.value(warm) <= prob.value(prob.zero()))
    assert sol.start_cost == min(prob.value(warm), prob.value(prob.zero()))


# -------------------------------------------------------------- receding horizon

def test_degenerate_rhc_is_open_loop():
    cfg = small_cfg(T=0.25, delta=0.25, max_iter=200)
    g = FemGrid(h=cfg.h)
    y0 = np.sin(np.pi * g.x_interior)
    run = receding_horizon((y0, 0.5), cfg, NU, EX1, 0.25)
    sol = solve_open_loop((0.0, y0, 0.5, 0.0), cfg, NU, EX1)
    assert np.array_equal(run.y, sol.y)
    assert np.array_equal(run.u, sol.u)
    assert np.array_equal(run.c, sol.c)


def test_rhc_box_and_shapes():
    cfg = small_cfg(K=3.0, max_iter=100)
    g = FemGrid(h=cfg.h)
    run = receding_horizon((np.sin(2 * np.pi * g.x_interior), 0.5), cfg, NU, EX2, 0.5)
    assert not run.failed
    assert len(run.t) == 501 and len(run.u) == 500 and len(run.eta) == 500
    assert np.all(np.abs(run.eta) <= cfg.K)
    assert np.all(np.diff(run.t) > 0)
    cols = run.columns()
    assert set(cols) == {"t", "l2_norm", "c", "abs_u", "eta"}


def test_t_final_must_be_multiple_of_delta():
    cfg = small_cfg()
    with pytest.raises(ConfigError):
        receding_horizon((np.zeros(49), 0.5), cfg, NU, EX1, 0.3)


def test_static_single_actuator_example2_matches_uncontrolled():
    cfg = RhcConfig(beta=0.01, h=0.02)
    g = FemGrid(h=cfg.h)
    y0 = np.sin(2 * np.pi * g.x_interior)
    run = static_bank_rhc((y0,), cfg, NU, EX2, ActuatorBank(1, cfg.r), 1.0)
    _, _, free = uncontrolled(cfg, NU, EX2, y0, 1.0)
    assert np.max(np.abs(run.u)) <= 1e-6
    assert np.max(np.abs(run.l2_norm - free) / free) <= 1e-6


def test_moving_actuator_ordering_against_static_banks():
    cfg = RhcConfig(beta=0.1, h=0.02, max_iter=300)
    g = FemGrid(h=cfg.h)
    y0 = np.sin(np.pi * g.x_interior)
    mv = receding_horizon((y0, 0.5), cfg, NU, EX1, 3.0)
    rate_mv = fit_exponential(mv.t, mv.l2_norm)[1]
    rates = {}
    for M in (1, 5):
        run = static_bank_rhc((y0,), cfg, NU, EX1, ActuatorBank(M, cfg.r), 3.0)
        rates[M] = fit_exponential(run.t, run.l2_norm)[1]
    assert rate_mv > 0
    assert rates[1] < rate_mv
    assert rates[5] <= 1.5 * rate_mv
