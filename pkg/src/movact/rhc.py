"""Receding horizon control of y' - nu y'' + a y + b y' = u 1_omega(c), c'' + s c' + e c = eta.

Each open-loop problem is discretized first (P1 elements, CN/AB2 in time,
piecewise-constant controls per step) and optimized with the exact discrete
adjoint and a projected Barzilai-Borwein method with nonmonotone line search.
The state constraint omega(c) in (0, 1) is relaxed by a Moreau-Yosida penalty.
"""
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from numba import njit

from .errors import ConfigError, OptimizerError, PreconditionError
from .model import FemGrid, fem_load_vector
from .simulate import FemSystem, actuator_ode_matrices, time_grid

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RhcConfig:
    T: float = 1.25
    delta: float = 0.5
    beta: float = 0.1
    K: float = 500.0
    varsigma: float = 1.0
    epsilon: float = 0.0
    mu_my: float = 1e-5
    r: float = 0.04
    h: float = 0.0025
    dt: float = 1e-3
    tol: float = 1e-4              # relative projected-gradient tolerance
    abs_tol: float = 1e-10         # absolute floor, scaled by 1 + ||y0||
    max_iter: int = 2000
    memory: int = 10
    gamma: float = 1e-4
    step0: float = 1.0
    step_min: float = 1e-8
    step_max: float = 1e8
    max_backtracks: int = 60
    bb_rule: str = "alternate"
    freeze_actuator: bool = False
    kick: float = 0.1              # initial force used to leave symmetric saddles
    eta_scale: float = 1.0         # optimize eta / eta_scale (block preconditioner)

    def validate(self):
        # delta == T is the degenerate single-solve case
        if not self.T >= self.delta > 0:
            raise ConfigError(f"need T >= delta > 0, got T={self.T}, delta={self.delta}")
        for name in ("beta", "K", "mu_my", "r", "h", "dt"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 < self.r < 1:
            raise ConfigError("r must lie in (0, 1)")
        if self.max_iter < 1 or self.memory < 1:
            raise ConfigError("max_iter and memory must be at least 1")
        steps = self.T / self.dt
        if abs(steps - round(steps)) > 1e-9 or abs(self.delta / self.dt - round(self.delta / self.dt)) > 1e-9:
            raise ConfigError("T and delta must be multiples of dt")
        return self

    def to_dict(self):
        return asdict(self)


# ------------------------------------------------------------ kernels

@njit(cache=True)
def _factor(lower, diag, upper):
    n = diag.shape[0]
    cp = np.empty(n)
    den = np.empty(n)
    den[0] = diag[0]
    cp[0] = upper[0] / den[0] if n > 1 else 0.0
    for i in range(1, n):
        den[i] = diag[i] - lower[i - 1] * cp[i - 1]
        cp[i] = upper[i] / den[i] if i < n - 1 else 0.0
    return cp, den


@njit(cache=True)
def _solve(lower, cp, den, rhs, out):
    n = rhs.shape[0]
    out[0] = rhs[0] / den[0]
    for i in range(1, n):
        out[i] = (rhs[i] - lower[i - 1] * out[i - 1]) / den[i]
    for i in range(n - 2, -1, -1):
        out[i] -= cp[i] * out[i + 1]


@njit(cache=True)
def _tdot(lower, diag, upper, y, out, transpose):
    n = y.shape[0]
    for i in range(n):
        out[i] = diag[i] * y[i]
    if transpose:
        lower, upper = upper, lower
    for i in range(1, n):
        out[i] += lower[i - 1] * y[i - 1]
        out[i - 1] += upper[i - 1] * y[i]


@njit(cache=True)
def _forward(y0, force, Ll, Lcp, Lden, Rl, Rd, Ru, El, Ed, Eu, has_e, dt):
    steps, n = force.shape
    ys = np.empty((steps + 1, n))
    ys[0] = y0
    g = np.empty(n)
    g_prev = np.empty(n)
    tmp = np.empty(n)
    rhs = np.empty(n)
    for k in range(steps):
        for i in range(n):
            g[i] = force[k, i]
        if has_e:
            _tdot(El[k], Ed[k], Eu[k], ys[k], tmp, False)
            for i in range(n):
                g[i] -= tmp[i]
        _tdot(Rl, Rd, Ru, ys[k], rhs, False)
        if k == 0:
            for i in range(n):
                rhs[i] += dt * g[i]
        else:
            for i in range(n):
                rhs[i] += dt * (1.5 * g[i] - 0.5 * g_prev[i])
        _solve(Ll, Lcp, Lden, rhs, ys[k + 1])
        for i in range(n):
            g_prev[i] = g[i]
    return ys


@njit(cache=True)
def _adjoint(ys, w, Sl, Sd, Su, Ll, Lcp, Lden, Rl, Rd, Ru, El, Ed, Eu, has_e, dt):
    """Returns q[m] = dJ/dg_m (the multiplier of the explicit term of step m)."""
    steps = ys.shape[0] - 1
    n = ys.shape[1]
    q = np.zeros((steps, n))
    p1 = np.zeros(n)       # p_{j+1}
    p2 = np.zeros(n)       # p_{j+2}
    pj = np.empty(n)
    rhs = np.empty(n)
    tmp = np.empty(n)
    _tdot(Sl, Sd, Su, ys[steps], tmp, False)
    for i in range(n):
        rhs[i] = w[steps] * tmp[i]
    _solve(Ll, Lcp, Lden, rhs, p1)          # p_K
    for j in range(steps - 1, 0, -1):
        for i in range(n):
            q[j, i] = dt * (1.5 * p1[i] - 0.5 * p2[i])
        _tdot(Rl, Rd, Ru, p1, rhs, False)
        _tdot(Sl, Sd, Su, ys[j], tmp, False)
        for i in range(n):
            rhs[i] += w[j] * tmp[i]
        if has_e:
            _tdot(El[j], Ed[j], Eu[j], q[j], tmp, True)
            for i in range(n):
                rhs[i] -= tmp[i]
        _solve(Ll, Lcp, Lden, rhs, pj)
        for i in range(n):
            p2[i] = p1[i]
            p1[i] = pj[i]
    for i in range(n):
        q[0, i] = dt * (p1[i] - 0.5 * p2[i])
    return q


@njit(cache=True)
def _hat_prim(s):
    if s <= -1.0:
        return 0.0
    if s >= 1.0:
        return 1.0
    if s < 0.0:
        return 0.5 * (s + 1.0) ** 2
    return 1.0 - 0.5 * (1.0 - s) ** 2


@njit(cache=True)
def _node_range(lo, hi, h, n):
    # interior unknown i sits at x = (i + 1) h
    a = max(0, int(math.floor(lo / h)) - 2)
    b = min(n, int(math.ceil(hi / h)) + 1)
    return a, b


@njit(cache=True)
def _moving_force(c, u, h, r, n):
    steps = u.shape[0]
    out = np.zeros((steps, n))
    for k in range(steps):
        if u[k] == 0.0:
            continue
        lo = c[k] - 0.5 * r
        hi = c[k] + 0.5 * r
        a, b = _node_range(lo, hi, h, n)
        for i in range(a, b):
            x = (i + 1) * h
            out[k, i] = u[k] * h * (_hat_prim((hi - x) / h) - _hat_prim((lo - x) / h))
    return out


@njit(cache=True)
def _load_products(q, c, h, r):
    """(q_m, l(c_m)) and (q_m, dl/dc(c_m)) for every step."""
    steps, n = q.shape
    val = np.zeros(steps)
    der = np.zeros(steps)
    for k in range(steps):
        lo = c[k] - 0.5 * r
        hi = c[k] + 0.5 * r
        a, b = _node_range(lo, hi, h, n)
        for i in range(a, b):
            x = (i + 1) * h
            ell = h * (_hat_prim((hi - x) / h) - _hat_prim((lo - x) / h))
            d = max(0.0, 1.0 - abs(hi - x) / h) - max(0.0, 1.0 - abs(lo - x) / h)
            val[k] += q[k, i] * ell
            der[k] += q[k, i] * d
    return val, der


@njit(cache=True)
def _actuator_path(phi, gam, c0, c1, eta):
    steps = eta.shape[0]
    s = np.empty((steps + 1, 2))
    s[0, 0] = c0
    s[0, 1] = c1
    for k in range(steps):
        s[k + 1, 0] = phi[0, 0] * s[k, 0] + phi[0, 1] * s[k, 1] + gam[0] * eta[k]
        s[k + 1, 1] = phi[1, 0] * s[k, 0] + phi[1, 1] * s[k, 1] + gam[1] * eta[k]
    return s


@njit(cache=True)
def _actuator_adjoint(phi, gam, hc):
    steps = hc.shape[0] - 1
    g = np.empty(steps)
    r0 = hc[steps]
    r1 = 0.0
    for k in range(steps - 1, -1, -1):
        g[k] = gam[0] * r0 + gam[1] * r1
        r0, r1 = phi[0, 0] * r0 + phi[1, 0] * r1 + hc[k], phi[0, 1] * r0 + phi[1, 1] * r1
    return g


@njit(cache=True)
def _weighted_energy(ys, w, Sl, Sd, Su):
    steps, n = ys.shape
    total = 0.0
    for k in range(steps):
        e = Sd[0] * ys[k, 0] * ys[k, 0]
        for i in range(1, n):
            e += Sd[i] * ys[k, i] * ys[k, i] + 2.0 * Sl[i - 1] * ys[k, i] * ys[k, i - 1]
        total += w[k] * e
    return total


def moving_loads(grid, c, r):
    """Unnormalized interior loads l(c_k) for many centers (dense, for checks)."""
    return _moving_force(np.asarray(c, float), np.ones(len(c)), grid.h, r, grid.n_interior)


# ------------------------------------------------------------ discrete problem

def trapezoid_weights(steps, dt):
    w = np.full(steps + 1, dt)
    w[[0, -1]] = 0.5 * dt
    return w


def my_penalty(c, r):
    """max(0, c + r/2 - 1)^2 + max(0, r/2 - c)^2 and its derivative."""
    over = np.maximum(0.0, c + 0.5 * r - 1.0)
    under = np.maximum(0.0, 0.5 * r - c)
    return over ** 2 + under ** 2, 2.0 * over - 2.0 * under


def constraint_violation(c, r):
    """Largest distance by which omega(c) leaves (0, 1)."""
    c = np.asarray(c, dtype=float)
    if c.size == 0:
        return 0.0
    return float(max(0.0, np.max(c + 0.5 * r - 1.0), np.max(0.5 * r - c)))


class Horizon:
    """Everything fixed over one open-loop problem: grid, matrices, time window."""

    def __init__(self, cfg, nu, coeffs, t0, steps=None, system=None):
        self.cfg = cfg
        self.grid = system.grid if system is not None else FemGrid(h=cfg.h)
        self.system = system if system is not None else FemSystem(self.grid, nu, coeffs)
        self.steps = int(round(cfg.T / cfg.dt)) if steps is None else int(steps)
        self.dt = cfg.dt
        self.t0 = float(t0)
        self.t = time_grid(self.t0, self.steps * self.dt, self.dt)
        n = self.grid.n_interior
        self.n = n
        L = self.system.mass + self.system.stiff.scale(0.5 * self.dt)
        R = self.system.mass - self.system.stiff.scale(0.5 * self.dt)
        self.L = L
        self.Lcp, self.Lden = _factor(L.lower, L.diag, L.upper)
        self.R = R
        self.S = self.grid.stiffness_interior()
        ops = self.system.explicit(self.t)
        if ops is None:
            z = np.zeros((1, 1))
            self.E = (z, np.zeros((1, n)), z)
            self.has_e = False
        else:
            self.E = (ops.lower, ops.diag, ops.upper)
            self.has_e = True
        self.w = trapezoid_weights(self.steps, self.dt)
        self.phi, self.gam = actuator_ode_matrices(cfg.varsigma, cfg.epsilon, self.dt)

    def forward(self, y0, force):
        L, R = self.L, self.R
        return _forward(np.asarray(y0, float), np.ascontiguousarray(force), L.lower, self.Lcp, self.Lden,
                        R.lower, R.diag, R.upper, *self.E, self.has_e, self.dt)

    def adjoint(self, ys):
        L, R, S = self.L, self.R, self.S
        return _adjoint(ys, self.w, S.lower, S.diag, S.upper, L.lower, self.Lcp, self.Lden,
                        R.lower, R.diag, R.upper, *self.E, self.has_e, self.dt)

    def actuator_path(self, c0, c1, eta):
        """Centers and velocities at all grid times for the force eta (per step)."""
        return _actuator_path(self.phi, self.gam, float(c0), float(c1), np.asarray(eta, float))

    def actuator_adjoint(self, hc):
        """d/d eta of sum_k hc[k] c_k through the actuator recursion."""
        return _actuator_adjoint(self.phi, self.gam, np.asarray(hc, float))

    def state_cost(self, ys):
        # S is symmetric
        return 0.5 * _weighted_energy(ys, self.w, self.S.lower, self.S.diag, self.S.upper)


def cost(u, eta, traj, cfg, dt):
    """J = 1/2 int |grad y|^2 + beta |u|^2 dt + 1/(2 mu) int penalty(c) dt.

    traj is a dict with 'grad_sq' (|grad y(t_k)|^2 at all grid times) and
    optionally 'c'. The state and penalty terms use the trapezoid rule, the
    control term is exact for piecewise-constant u. `eta` enters only through c.
    """
    g2 = np.asarray(traj["grad_sq"], dtype=float)
    steps = len(g2) - 1
    if steps < 1:
        return 0.0
    w = trapezoid_weights(steps, dt)
    u = np.asarray(u, dtype=float)
    u2 = np.sum(u * u, axis=-1) if u.ndim > 1 else u * u
    val = 0.5 * float(np.sum(w * g2)) + 0.5 * cfg.beta * dt * float(np.sum(u2))
    c = traj.get("c")
    if c is not None:
        pen, _ = my_penalty(np.asarray(c, dtype=float), cfg.r)
        val += float(np.sum(w * pen)) / (2.0 * cfg.mu_my)
    return val


class MovingProblem:
    """Reduced problem in x = (u, eta) for the single moving actuator."""

    def __init__(self, horizon, y0, c0, c1):
        self.hz = horizon
        self.y0 = np.asarray(y0, dtype=float)
        self.c0, self.c1 = float(c0), float(c1)
        self.m = horizon.steps

    def split(self, x):
        """(u, eta) from the optimization variable (u, eta / eta_scale)."""
        return x[:self.m], self.hz.cfg.eta_scale * x[self.m:]

    def join(self, u, eta):
        return np.concatenate([u, np.asarray(eta, dtype=float) / self.hz.cfg.eta_scale])

    def project(self, x):
        x = x.copy()
        if self.hz.cfg.freeze_actuator:
            x[self.m:] = 0.0
        else:
            b = self.hz.cfg.K / self.hz.cfg.eta_scale
            np.clip(x[self.m:], -b, b, out=x[self.m:])
        return x

    def simulate(self, x):
        u, eta = self.split(x)
        s = self.hz.actuator_path(self.c0, self.c1, eta)
        c = s[:, 0]
        force = _moving_force(c, u, self.hz.grid.h, self.hz.cfg.r, self.hz.n)
        ys = self.hz.forward(self.y0, force)
        return ys, s

    def value(self, x, sim=None):
        ys, s = self.simulate(x) if sim is None else sim
        cfg = self.hz.cfg
        u, _ = self.split(x)
        pen, _ = my_penalty(s[:, 0], cfg.r)
        return (self.hz.state_cost(ys) + 0.5 * cfg.beta * self.hz.dt * float(u @ u)
                + float(self.hz.w @ pen) / (2.0 * cfg.mu_my))

    def gradient(self, x, sim=None):
        """L2(time) gradient: the Euclidean gradient divided by dt."""
        ys, s = self.simulate(x) if sim is None else sim
        cfg, hz = self.hz.cfg, self.hz
        u, _ = self.split(x)
        c = s[:, 0]
        q = hz.adjoint(ys)
        val, der = _load_products(q, c[:-1], hz.grid.h, cfg.r)
        gu = cfg.beta * hz.dt * u + val
        _, dpen = my_penalty(c, cfg.r)
        hc = hz.w * dpen / (2.0 * cfg.mu_my)
        hc[:-1] += u * der
        geta = hz.actuator_adjoint(hc)
        if cfg.freeze_actuator:
            geta[:] = 0.0
        return np.concatenate([gu, cfg.eta_scale * geta]) / hz.dt

    def zero(self):
        return np.zeros(2 * self.m)


class StaticProblem:
    """Reduced problem in u (steps x M) for a fixed actuator bank."""

    def __init__(self, horizon, y0, loads):
        self.hz = horizon
        self.y0 = np.asarray(y0, dtype=float)
        self.B = np.asarray(loads, dtype=float)          # n x M
        self.m = horizon.steps
        self.M = self.B.shape[1]

    def project(self, x):
        return x

    def simulate(self, x):
        u = x.reshape(self.m, self.M)
        return self.hz.forward(self.y0, u @ self.B.T), None

    def value(self, x, sim=None):
        ys, _ = self.simulate(x) if sim is None else sim
        return self.hz.state_cost(ys) + 0.5 * self.hz.cfg.beta * self.hz.dt * float(x @ x)

    def gradient(self, x, sim=None):
        ys, _ = self.simulate(x) if sim is None else sim
        q = self.hz.adjoint(ys)
        u = x.reshape(self.m, self.M)
        g = self.hz.cfg.beta * self.hz.dt * u + q @ self.B
        return g.ravel() / self.hz.dt

    def zero(self):
        return np.zeros(self.m * self.M)


# ------------------------------------------------------------ optimizer

def bb_step(grad_prev, grad_cur, iter_prev, iter_cur, k, lo=1e-8, hi=1e8, rule="alternate"):
    """Barzilai-Borwein step clipped to [lo, hi].

    rule "alternate" takes BB1 = s.s/s.y on odd k and BB2 = s.y/y.y on even k;
    "bb1" and "bb2" always take one of them.
    """
    s = np.asarray(iter_cur, float) - np.asarray(iter_prev, float)
    y = np.asarray(grad_cur, float) - np.asarray(grad_prev, float)
    sy = float(s @ y)
    if sy <= 0.0:
        return 1.0
    use_bb1 = rule == "bb1" or (rule == "alternate" and k % 2 == 1)
    step = float(s @ s) / sy if use_bb1 else sy / float(y @ y)
    return min(hi, max(lo, step))


@dataclass
class BBResult:
    x: np.ndarray
    value: float
    pg_norm: float
    pg0_norm: float
    iterations: int
    converged: bool
    evaluations: int
    history: list = field(default_factory=list)


def projected_bb(value_grad, x0, project=lambda x: x, tol=1e-4, abs_tol=0.0, max_iter=2000,
                 memory=10, gamma=1e-4, step0=1.0, step_min=1e-8, step_max=1e8,
                 max_backtracks=60, weight=1.0, rule="alternate"):
    """Projected BB gradient method with a nonmonotone (max over `memory` values) Armijo rule.

    value_grad(x, need_grad) returns (J, grad or None). Stops when
    ||x - P(x - grad)|| <= max(tol * initial, abs_tol). `weight` scales the
    Euclidean inner product (dt for L2 in time).
    """
    def norm(v):
        return math.sqrt(weight * float(v @ v))

    x = project(np.asarray(x0, dtype=float))
    J, g = value_grad(x, True)
    evals = 1
    pg = x - project(x - g)
    pg0 = norm(pg)
    target = max(tol * pg0, abs_tol)
    recent = [J]
    best = (J, x, norm(pg))
    step = step0
    history = [J]
    if pg0 <= target:
        return BBResult(x, J, pg0, pg0, 0, True, evals, history)
    for it in range(1, max_iter + 1):
        d = project(x - step * g) - x
        dd = weight * float(d @ d)
        jmax = max(recent)
        lam = 1.0
        for _ in range(max_backtracks):
            x_new = x + lam * d
            J_new, _ = value_grad(x_new, False)
            evals += 1
            if not math.isfinite(J_new):
                raise OptimizerError(f"non-finite cost in line search at iteration {it}")
            if J_new <= jmax - gamma * lam * dd / step:
                break
            lam *= 0.5
        else:
            log.warning("line search failed at iteration %d", it)
            return BBResult(best[1], best[0], best[2], pg0, it, False, evals, history)
        J_new, g_new = value_grad(x_new, True)
        evals += 1
        step = bb_step(g, g_new, x, x_new, it, step_min, step_max, rule)
        x, g, J = x_new, g_new, J_new
        recent.append(J)
        if len(recent) > memory:
            recent.pop(0)
        history.append(J)
        pgn = norm(x - project(x - g))
        if J < best[0]:
            best = (J, x, pgn)
        if pgn <= target:
            return BBResult(x, J, pgn, pg0, it, True, evals, history)
    return BBResult(best[1], best[0], best[2], pg0, max_iter, False, evals, history)


# ------------------------------------------------------------ open loop

@dataclass
class OpenLoopSolution:
    t: np.ndarray
    u: np.ndarray                  # per step (moving) or steps x M (static)
    eta: np.ndarray
    y: np.ndarray
    c: np.ndarray
    cdot: np.ndarray
    cost: float
    pg_norm: float
    pg0_norm: float
    iterations: int
    converged: bool
    kicked: bool = False
    violation: float = 0.0
    start_cost: float = float("nan")
    warm_used: bool = False


def _pick_start(prob, warm_x):
    """Shifted warm start, unless the cold start is strictly cheaper.

    The zero-padded tail can leave the actuator coasting out of the domain, so
    the shifted solution is not automatically a better first iterate.
    """
    cold = prob.zero()
    j_cold = prob.value(cold)
    if warm_x is None:
        return cold, j_cold, False
    j_warm = prob.value(warm_x)
    if j_warm <= j_cold:
        return warm_x, j_warm, True
    log.debug("warm start rejected: %.6g > cold %.6g", j_warm, j_cold)
    return cold, j_cold, False


def _run(problem, cfg, x0, scale):
    def value_grad(x, need_grad):
        sim = problem.simulate(x)
        J = problem.value(x, sim)
        return J, (problem.gradient(x, sim) if need_grad else None)

    return projected_bb(value_grad, x0, problem.project, tol=cfg.tol, abs_tol=cfg.abs_tol * scale,
                        max_iter=cfg.max_iter, memory=cfg.memory, gamma=cfg.gamma, step0=cfg.step0,
                        step_min=cfg.step_min, step_max=cfg.step_max,
                        max_backtracks=cfg.max_backtracks, weight=cfg.dt, rule=cfg.bb_rule)


def solve_open_loop(init, cfg, nu, coeffs, warm=None, horizon=None):
    """Minimize the finite-horizon cost from init = (t0, y0, c0, c1) (y0 on interior nodes)."""
    cfg.validate()
    t0, y0, c0, c1 = init
    hz = horizon or Horizon(cfg, nu, coeffs, t0)
    if not (0.5 * cfg.r - 1e-14 <= c0 <= 1.0 - 0.5 * cfg.r + 1e-14):
        raise PreconditionError(f"initial center {c0} is not admissible")
    prob = MovingProblem(hz, y0, c0, c1)
    x0, j0, warm_used = _pick_start(prob, None if warm is None else prob.join(warm[:prob.m], warm[prob.m:]))
    scale = 1.0 + float(hz.system.norm_h(prob.y0))
    kicked = False
    if not warm_used and not cfg.freeze_actuator and np.any(prob.y0 != 0.0) and cfg.kick != 0.0:
        # from a symmetric configuration the gradient at zero can vanish up to
        # rounding (a saddle); push the actuator off centre before starting
        g = prob.gradient(x0)
        pg = math.sqrt(cfg.dt * float(g @ g))
        if pg <= cfg.abs_tol * scale:
            x0 = x0.copy()
            x0[prob.m:] = (cfg.kick if c0 <= 0.5 else -cfg.kick) / cfg.eta_scale
            kicked = True
            j0 = prob.value(x0)
    res = _run(prob, cfg, x0, scale)
    ys, s = prob.simulate(res.x)
    u, eta = prob.split(res.x)
    viol = constraint_violation(s[:, 0], cfg.r)
    if viol > 0:
        log.info("actuator leaves the domain by %.3g on [%g, %g]", viol, hz.t[0], hz.t[-1])
    if not res.converged:
        log.warning("open loop at t0=%g not converged: |pg|=%.3g of %.3g after %d iterations",
                    t0, res.pg_norm, res.pg0_norm, res.iterations)
    return OpenLoopSolution(hz.t, u.copy(), eta.copy(), ys, s[:, 0].copy(), s[:, 1].copy(), res.value,
                            res.pg_norm, res.pg0_norm, res.iterations, res.converged, kicked, viol,
                            j0, warm_used)


def solve_static_open_loop(init, cfg, nu, coeffs, loads, warm=None, horizon=None):
    cfg.validate()
    t0, y0 = init[0], init[1]
    hz = horizon or Horizon(cfg, nu, coeffs, t0)
    prob = StaticProblem(hz, y0, loads)
    x0, j0, warm_used = _pick_start(prob, None if warm is None else np.asarray(warm, dtype=float).ravel())
    scale = 1.0 + float(hz.system.norm_h(prob.y0))
    res = _run(prob, cfg, x0, scale)
    ys, _ = prob.simulate(res.x)
    u = res.x.reshape(prob.m, prob.M)
    nan = np.full(hz.steps + 1, np.nan)
    return OpenLoopSolution(hz.t, u.copy(), np.zeros(hz.steps), ys, nan, nan, res.value, res.pg_norm,
                            res.pg0_norm, res.iterations, res.converged, start_cost=j0, warm_used=warm_used)


# ------------------------------------------------------------ receding horizon

@dataclass
class RhcRun:
    t: np.ndarray
    y: np.ndarray
    c: np.ndarray
    u: np.ndarray          # committed controls per step (length steps, or steps x M)
    eta: np.ndarray
    l2_norm: np.ndarray
    stats: list
    failed: bool = False
    message: str = ""
    wall: float = 0.0

    def columns(self):
        u = self.u if self.u.ndim == 1 else np.linalg.norm(self.u, axis=1)
        pad = lambda v: np.concatenate([v, [np.nan]]) if len(v) == len(self.t) - 1 else v
        return {"t": self.t, "l2_norm": self.l2_norm, "c": self.c, "abs_u": np.abs(pad(u)),
                "eta": pad(self.eta)}


def _shift(x, n_shift, fill_shape):
    out = np.zeros(fill_shape)
    out[:len(x) - n_shift] = x[n_shift:]
    return out


def _receding(cfg, nu, coeffs, y0, t_final, solve_one, moving):
    cfg.validate()
    n_total = t_final / cfg.delta
    if t_final <= 0 or abs(n_total - round(n_total)) > 1e-9:
        raise ConfigError("t_final must be a positive multiple of delta")
    n_total = int(round(n_total))
    commit = int(round(cfg.delta / cfg.dt))
    steps = int(round(cfg.T / cfg.dt))
    grid = FemGrid(h=cfg.h)
    system = FemSystem(grid, nu, coeffs)
    total = n_total * commit
    t = cfg.dt * np.arange(total + 1)
    ys = np.empty((total + 1, grid.n_interior))
    ys[0] = y0
    cs = np.full(total + 1, np.nan)
    us, etas, stats = [], [], []
    state = None
    warm = None
    t0_wall = time.perf_counter()
    failed, msg = False, ""
    done = 0
    for i in range(n_total):
        t0 = i * cfg.delta
        hz = Horizon(cfg, nu, coeffs, t0, steps, system=system)
        try:
            sol, state = solve_one(hz, ys[done], state, warm)
        except (OptimizerError, FloatingPointError) as exc:
            failed, msg = True, f"subproblem at t0={t0:g} failed: {exc}"
            log.error(msg)
            break
        stats.append({"t0": t0, "iterations": sol.iterations, "converged": sol.converged,
                      "cost": sol.cost, "pg_ratio": sol.pg_norm / sol.pg0_norm if sol.pg0_norm else 0.0,
                      "kicked": sol.kicked, "violation": sol.violation,
                      "start_cost": sol.start_cost, "warm_used": sol.warm_used})
        log.info("t0=%.3g: %d iterations, cost %.6g, converged %s", t0, sol.iterations, sol.cost,
                 sol.converged)
        ys[done + 1:done + commit + 1] = sol.y[1:commit + 1]
        if moving:
            cs[done:done + commit + 1] = sol.c[:commit + 1]
        us.append(sol.u[:commit])
        etas.append(sol.eta[:commit])
        done += commit
        if moving:
            warm = np.concatenate([_shift(sol.u, commit, steps), _shift(sol.eta, commit, steps)])
        else:
            warm = _shift(sol.u, commit, sol.u.shape)
    t, ys, cs = t[:done + 1], ys[:done + 1], cs[:done + 1]
    u = np.concatenate(us) if us else np.zeros(0)
    eta = np.concatenate(etas) if etas else np.zeros(0)
    return RhcRun(t, ys, cs, u, eta, system.norm_h(ys), stats, failed, msg,
                  time.perf_counter() - t0_wall)


def receding_horizon(init, cfg, nu, coeffs, t_final):
    """Receding-horizon loop for the moving actuator from init = (y0, c0) with zero velocity."""
    y0, c0 = init

    def solve_one(hz, y, state, warm):
        c, c1 = (c0, 0.0) if state is None else state
        sol = solve_open_loop((hz.t0, y, c, c1), cfg, nu, coeffs, warm=warm, horizon=hz)
        k = int(round(cfg.delta / cfg.dt))
        return sol, (float(sol.c[k]), float(sol.cdot[k]))

    return _receding(cfg, nu, coeffs, y0, t_final, solve_one, moving=True)


def bank_loads(grid, bank):
    """Interior load vectors of the static actuators as columns."""
    return np.column_stack([fem_load_vector(grid, w)[grid.interior] for w in bank.windows])


def static_bank_rhc(init, cfg, nu, coeffs, bank, t_final):
    """Receding-horizon loop with M fixed actuators and u in R^M."""
    y0 = init[0] if isinstance(init, tuple) else init
    for w in bank.windows:
        w.check()
    loads = bank_loads(FemGrid(h=cfg.h), bank)

    def solve_one(hz, y, state, warm):
        sol = solve_static_open_loop((hz.t0, y), cfg, nu, coeffs, loads, warm=warm, horizon=hz)
        return sol, None

    return _receding(cfg, nu, coeffs, y0, t_final, solve_one, moving=False)


def uncontrolled(cfg, nu, coeffs, y0, t_final):
    """Free FEM trajectory on the same grid (reference for the plots)."""
    grid = FemGrid(h=cfg.h)
    steps = int(round(t_final / cfg.dt))
    cfg_full = replace(cfg, T=t_final, delta=min(cfg.delta, 0.5 * t_final))
    hz = Horizon(cfg_full, nu, coeffs, 0.0, steps, system=FemSystem(grid, nu, coeffs))
    ys = hz.forward(y0, np.zeros((steps, grid.n_interior)))
    return hz.t, ys, hz.system.norm_h(ys)
