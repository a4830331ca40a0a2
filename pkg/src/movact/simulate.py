"""Crank-Nicolson / Adams-Bashforth time stepping for y' + A y + A_rc(t) y = f.

The stiff part (A plus the constant reaction) is implicit, everything else
(control load, convection, varying reaction) is extrapolated with AB2.
"""
import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError
from .model import fem_load_vector, hat_integrals, spectral_coeffs_of_indicator
from .tridiag import Tridiag


class LinearSystem:
    """Common interface of the spectral and FEM discretizations."""

    kind = None
    dim = 0

    def __init__(self):
        self._solvers = {}

    def cn_solver(self, dt):
        raise NotImplementedError

    def cn_rhs(self, y, dt):
        raise NotImplementedError

    def explicit(self, times):
        """Explicit-part operators at the given times (indexable by step), or None."""
        raise NotImplementedError

    def apply_explicit(self, ops, k, y):
        raise NotImplementedError

    def load(self, act, normalized=False):
        raise NotImplementedError


class SpectralSystem(LinearSystem):
    kind = "spectral"

    def __init__(self, model, coeffs):
        super().__init__()
        self.model = model
        self.coeffs = coeffs
        self.dim = model.n
        self.stiff = model.eigenvalues + coeffs.reaction_const - 1.0

    def cn_solver(self, dt):
        if dt not in self._solvers:
            self._solvers[dt] = _DiagSolver(1.0 + 0.5 * dt * self.stiff)
        return self._solvers[dt]

    def cn_rhs(self, y, dt):
        return (1.0 - 0.5 * dt * self.stiff) * y

    def explicit(self, times):
        if self.coeffs.autonomous:
            return None
        return self.model.field_matrices(self.coeffs, times)

    def apply_explicit(self, ops, k, y):
        # y may carry leading batch axes
        return y @ ops[k].T

    def apply_explicit_t(self, ops, k, p):
        return p @ ops[k]

    def system_matrix(self, t):
        """-(A + A_rc(t)) as a dense matrix."""
        m = np.diag(self.stiff)
        if not self.coeffs.autonomous:
            m = m + self.model.field_matrices(self.coeffs, [t])[0]
        return -m

    def load(self, act, normalized=False):
        return spectral_coeffs_of_indicator(self.model, act, normalized=normalized)

    def loads_at(self, centers, r):
        from .model import indicator_coeffs
        return indicator_coeffs(self.model.j, centers, r)

    def norm_h(self, y):
        return self.model.norm_h(y)

    def norm_v(self, y):
        return self.model.norm_v(y)


class FemSystem(LinearSystem):
    kind = "fem"

    def __init__(self, grid, nu, coeffs):
        super().__init__()
        self.grid = grid
        self.nu = float(nu)
        self.coeffs = coeffs
        self.dim = grid.n_interior
        self.mass = grid.mass_interior()
        self.lap = grid.stiffness_interior()
        self.stiff = self.lap.scale(self.nu) + self.mass.scale(coeffs.reaction_const)

    def cn_solver(self, dt):
        if dt not in self._solvers:
            self._solvers[dt] = (self.mass + self.stiff.scale(0.5 * dt)).factor()
        return self._solvers[dt]

    def cn_rhs(self, y, dt):
        return self.mass.dot(y) - 0.5 * dt * self.stiff.dot(y)

    def explicit(self, times):
        return self.grid.explicit_matrices(self.coeffs, times)

    def apply_explicit(self, ops, k, y):
        return ops.at(k).dot(y)

    def apply_explicit_t(self, ops, k, p):
        return ops.at(k).T.dot(p)

    def load(self, act, normalized=False):
        v = fem_load_vector(self.grid, act)[self.grid.interior]
        return v / math.sqrt(act.r) if normalized else v

    def loads_at(self, centers, r):
        """Unchecked loads for many centers (windows may stick out of the domain)."""
        c = np.asarray(centers, dtype=float)
        full = hat_integrals(self.grid.nodes, self.grid.h, c - 0.5 * r, c + 0.5 * r)
        return full[..., self.grid.interior]

    def norm_h(self, y):
        y = np.asarray(y)
        return np.sqrt(np.sum(y * self.mass.dot(y), axis=-1))

    def norm_v(self, y):
        y = np.asarray(y)
        ay = self.nu * self.lap.dot(y) + self.mass.dot(y)
        return np.sqrt(np.sum(y * ay, axis=-1))


class _DiagSolver:
    def __init__(self, d):
        self.d = d

    def solve(self, rhs):
        return rhs / self.d


def step_cnab(system, y, t, dt, explicit_part, g_prev=None):
    """One CN/AB2 step. Returns (y_next, g_now); feed g_now back as g_prev.

    explicit_part(t, y) evaluates the explicit right-hand side at time t.
    Without g_prev the explicit part is advanced by forward Euler.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    g = explicit_part(t, y)
    ab = g if g_prev is None else 1.5 * g - 0.5 * g_prev
    rhs = system.cn_rhs(y, dt) + dt * ab
    return system.cn_solver(dt).solve(rhs), g


@dataclass
class Trajectory:
    t: np.ndarray
    states: np.ndarray
    l2_norm: np.ndarray = None
    v_norm: np.ndarray = None
    extras: dict = field(default_factory=dict)

    def columns(self):
        cols = {"t": self.t}
        if self.l2_norm is not None:
            cols["l2_norm"] = self.l2_norm
        if self.v_norm is not None:
            cols["v_norm"] = self.v_norm
        for key in ("c", "u", "eta"):
            if key in self.extras:
                cols[key] = self.extras[key]
        return cols

    def to_csv(self, path):
        write_columns_csv(path, self.columns())


def write_columns_csv(path, cols):
    names = list(cols)
    n = len(cols[names[0]])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for i in range(n):
            w.writerow([repr(float(cols[k][i])) if i < len(cols[k]) else "" for k in names])


def time_grid(t0, horizon, dt):
    steps = int(round(horizon / dt))
    if steps < 1 or abs(steps * dt - horizon) > 1e-9 * max(1.0, horizon):
        # keep the horizon exact and adjust the step slightly
        steps = max(1, int(math.ceil(horizon / dt - 1e-9)))
    return t0 + horizon * np.arange(steps + 1) / steps


def _finish(system, t, states, extras=None):
    return Trajectory(t=t, states=states, l2_norm=system.norm_h(states),
                      v_norm=system.norm_v(states), extras=extras or {})


def simulate_controlled(system, y0, control, horizon, dt=1e-3, normalized=False, t0=0.0):
    """Simulate with forcing u(t) * 1_omega(c(t)) (optionally normalized).

    control(t) returns (u, ActuatorWindow) or None for no forcing.
    """
    t = time_grid(t0, horizon, dt)
    steps = len(t) - 1
    h = t[1] - t[0]
    ops = system.explicit(t)
    ys = np.empty((steps + 1, system.dim))
    ys[0] = y0
    uu = np.zeros(steps + 1)
    cc = np.full(steps + 1, np.nan)
    g_prev = None
    for k in range(steps + 1):
        ctrl = control(t[k]) if control is not None else None
        g = np.zeros(system.dim)
        if ctrl is not None:
            u, act = ctrl
            if not act.admissible:
                raise GeometryError(f"inadmissible actuator at t={t[k]:.6g}: center {act.center:.6g}")
            uu[k], cc[k] = u, act.center
            if u != 0.0:
                g = g + u * system.load(act, normalized=normalized)
        if k == steps:
            break
        if ops is not None:
            g = g - system.apply_explicit(ops, k, ys[k])
        ab = g if g_prev is None else 1.5 * g - 0.5 * g_prev
        ys[k + 1] = system.cn_solver(h).solve(system.cn_rhs(ys[k], h) + h * ab)
        g_prev = g
    extras = {}
    if control is not None:
        extras = {"u": uu, "c": cc}
    return _finish(system, t, ys, extras)


def simulate_free(system, y0, horizon, dt=1e-3, t0=0.0):
    return simulate_controlled(system, y0, None, horizon, dt, t0=t0)


def simulate_forced(system, y0, step_integrals, t, ops=None):
    """Simulate with a prescribed forcing given by its integrals over each step.

    step_integrals has shape (steps, dim): row k is int_{t_k}^{t_{k+1}} f.
    Using integrals keeps piecewise-constant forcing with arbitrary switching
    times exact in the mean over every step.
    """
    steps = len(t) - 1
    h = t[1] - t[0]
    solver = system.cn_solver(h)
    ys = np.empty((steps + 1,) + np.shape(y0))
    ys[0] = y0
    g_prev = None
    for k in range(steps):
        rhs = system.cn_rhs(ys[k], h) + step_integrals[k]
        if ops is not None:
            g = -system.apply_explicit(ops, k, ys[k])
            rhs = rhs + h * (g if g_prev is None else 1.5 * g - 0.5 * g_prev)
            g_prev = g
        ys[k + 1] = solver.solve(rhs)
    return ys


def step_actuator_ode(c, cdot, eta, varsigma, epsilon, dt):
    """One CN step of c'' + varsigma c' + epsilon c = eta (eta constant on the step)."""
    a = 0.5 * dt
    # (I - a F) s+ = (I + a F) s + dt G eta, F = [[0, 1], [-epsilon, -varsigma]]
    r0 = c + a * cdot
    r1 = cdot + a * (-epsilon * c - varsigma * cdot) + dt * eta
    det = (1.0 + a * varsigma) + a * a * epsilon
    c_new = ((1.0 + a * varsigma) * r0 + a * r1) / det
    cdot_new = (-a * epsilon * r0 + r1) / det
    return c_new, cdot_new


def actuator_ode_matrices(varsigma, epsilon, dt):
    """(Phi, Gamma) with s_{k+1} = Phi s_k + Gamma eta_k for the CN actuator step."""
    f = np.array([[0.0, 1.0], [-epsilon, -varsigma]])
    lhs = np.eye(2) - 0.5 * dt * f
    phi = np.linalg.solve(lhs, np.eye(2) + 0.5 * dt * f)
    gam = np.linalg.solve(lhs, np.array([0.0, dt]))
    return phi, gam


def fit_exponential(t, values):
    """Least-squares line through log(values) vs t; returns (C, rate) with
    values ~ C exp(-rate t)."""
    t = np.asarray(t, dtype=float)
    v = np.asarray(values, dtype=float)
    if np.any(v <= 0):
        raise ValueError("norm samples must be positive")
    slope, intercept = np.polyfit(t, np.log(v), 1)
    return float(np.exp(intercept)), float(-slope)
