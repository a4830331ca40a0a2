"""Oblique-projection feedback with M static actuators and the empirical
constants (C, mu, T, K, D_Y, C_rc) consumed by the switching construction."""
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.linalg import expm, lu_factor, lu_solve

from .errors import ConfigError, PreconditionError, StabilizationError
from .model import ActuatorWindow, indicator_coeffs
from .simulate import SpectralSystem, time_grid

log = logging.getLogger(__name__)


class ActuatorBank:
    """M windows of width r centred at (2i - 1) / (2M)."""

    def __init__(self, M, r):
        if M < 1:
            raise ConfigError("M must be >= 1")
        if r * M > 1.0 + 1e-14:
            raise ConfigError(f"M={M} windows of width r={r} overlap")
        self.M = int(M)
        self.r = float(r)
        self.centers = (2.0 * np.arange(1, self.M + 1) - 1.0) / (2.0 * self.M)
        self.windows = [ActuatorWindow(c, self.r).check() for c in self.centers]

    def indicator_matrix(self, model):
        """Sine coefficients of the unnormalized indicators, shape (n, M)."""
        return indicator_coeffs(model.j, self.centers, self.r).T

    def hat_matrix(self, model):
        """Unit-norm actuators in the truncated space (columns)."""
        u = self.indicator_matrix(model)
        return u / np.linalg.norm(u, axis=0)


class ObliqueProjector:
    """P h = sum_j beta_j 1_{omega_j} with G beta = ((h, e_1), ..., (h, e_M))."""

    def __init__(self, model, bank):
        self.model = model
        self.bank = bank
        self.M = bank.M
        self.U = bank.indicator_matrix(model)
        if model.n < self.M:
            raise ConfigError("truncation order must be at least M")
        self.G = self.U[:self.M, :].copy()
        self.cond = float(np.linalg.cond(self.G))
        if not np.isfinite(self.cond) or self.cond >= 1e8:
            raise ConfigError(f"Gram matrix ill-conditioned (cond={self.cond:.3g}) for M={bank.M}, r={bank.r}")
        self._lu = lu_factor(self.G)
        self.col_norms = np.linalg.norm(self.U, axis=0)
        self.hat = self.U / self.col_norms
        self.norm = self._power_norm()

    def coefficients(self, h):
        """beta for each state (leading axes allowed)."""
        h = np.asarray(h, dtype=float)
        rhs = h[..., :self.M]
        return lu_solve(self._lu, rhs.reshape(-1, self.M).T).T.reshape(rhs.shape)

    def apply(self, h):
        return self.coefficients(h) @ self.U.T

    def magnitudes(self, h):
        """Magnitudes on the unit-norm actuators: P h = hat @ magnitudes."""
        return self.coefficients(h) * self.col_norms

    def matrix(self):
        return self.apply(np.eye(self.model.n)).T

    def _power_norm(self, iters=200, seed=0):
        p = self.matrix()
        x = np.random.default_rng(seed).standard_normal(self.model.n)
        s = 0.0
        for _ in range(iters):
            x = p.T @ (p @ x)
            s_new = np.linalg.norm(x)
            x /= s_new
            if abs(s_new - s) <= 1e-12 * s_new:
                break
            s = s_new
        return float(math.sqrt(s_new))


def build_projector(model, bank):
    proj = ObliqueProjector(model, bank)
    if proj.norm > 50:
        log.warning("oblique projector norm %.3g exceeds 50", proj.norm)
    return proj


def default_lambda(coeffs):
    return 2.0 * abs(coeffs.min_reaction() - 1.0) + 1.0


class FeedbackLaw:
    """v0(t, y): magnitudes on the unit actuators of P(A_rc(t) y - lam y)."""

    def __init__(self, model, projector, lam, coeffs):
        if lam < 0:
            raise PreconditionError("lambda must be nonnegative")
        self.model = model
        self.projector = projector
        self.lam = float(lam)
        self.coeffs = coeffs
        self.system = SpectralSystem(model, coeffs)
        self.M = projector.M
        self.actuators = projector.hat

    def _shift(self):
        return self.coeffs.reaction_const - 1.0 - self.lam

    def magnitudes_with(self, varying, y):
        """Same as __call__ given the varying-part matrix at the current time."""
        z = self._shift() * y[..., :self.M]
        if varying is not None:
            z = z + y @ varying[:self.M].T
        h = np.zeros(y.shape)
        h[..., :self.M] = z
        return self.projector.magnitudes(h)

    def __call__(self, t, y):
        y = np.asarray(y, dtype=float)
        varying = None
        if not self.coeffs.autonomous:
            varying = self.model.field_matrices(self.coeffs, [t])[0]
        return self.magnitudes_with(varying, y)

    def force(self, t, y):
        return self(t, y) @ self.actuators.T


def closed_loop_feedback(model, projector, lam, coeffs):
    return FeedbackLaw(model, projector, lam, coeffs)


class GridOps:
    """Varying-part matrices on a uniform grid, computed once and sliced."""

    def __init__(self, system, t_end, dt):
        self.system = system
        self.t = time_grid(0.0, t_end, dt)
        self.dt = self.t[1] - self.t[0]
        self.ops = system.explicit(self.t)

    def index(self, t):
        k = int(round(t / self.dt))
        if abs(k * self.dt - t) > 1e-9:
            raise ValueError(f"time {t} not on the grid")
        return k

    def window(self, t0, steps):
        k0 = self.index(t0)
        if k0 + steps >= len(self.t):
            raise ValueError("grid too short")
        ops = None if self.ops is None else self.ops[k0:k0 + steps + 1]
        return self.t[k0:k0 + steps + 1], ops


def run_closed_loop(law, y0, t, ops):
    """Closed loop on grid t (ops = varying matrices on t). Returns (states, v0)."""
    sysm = law.system
    dt = t[1] - t[0]
    solver = sysm.cn_solver(dt)
    steps = len(t) - 1
    y0 = np.asarray(y0, dtype=float)
    ys = np.empty((steps + 1,) + y0.shape)
    vs = np.empty((steps + 1,) + y0.shape[:-1] + (law.M,))
    ys[0] = y0
    g_prev = None
    for k in range(steps + 1):
        var = None if ops is None else ops[k]
        vs[k] = law.magnitudes_with(var, ys[k])
        if k == steps:
            break
        g = vs[k] @ law.actuators.T
        if var is not None:
            g = g - ys[k] @ var.T
        ab = g if g_prev is None else 1.5 * g - 0.5 * g_prev
        ys[k + 1] = solver.solve(sysm.cn_rhs(ys[k], dt) + dt * ab)
        g_prev = g
    return ys, vs


def random_states(model, count, rng, decay=1.0):
    """Random states with coefficients ~ N(0,1)/j^decay, unit V-norm."""
    y = rng.standard_normal((count, model.n)) / model.j ** decay
    return y / model.norm_v(y)[:, None]


@dataclass(frozen=True)
class FeedbackConstants:
    C: float
    mu: float
    theta: float
    T: float
    K: float
    D_Y: float
    C_rc: float
    lam: float
    projector_norm: float
    dt: float
    refits: int = 0

    def __post_init__(self):
        if not (self.T > 0 and self.mu > 0 and self.C >= 1 and 0 < self.theta < 1):
            raise PreconditionError("invalid feedback constants")
        if self.C * math.exp(-self.mu * self.T) > self.theta * (1 + 1e-12):
            raise PreconditionError("C exp(-mu T) exceeds theta")

    def to_dict(self):
        return asdict(self)


def transition_norms(law, grid, starts, horizon, every=10):
    """max over starts s of ||Y(s + tau, s)||_{V->V} sampled every `every` steps."""
    model = law.model
    steps = int(round(horizon / grid.dt))
    sq = np.sqrt(model.eigenvalues)
    best = None
    for s in starts:
        t, ops = grid.window(s, steps)
        ys, _ = run_closed_loop(law, np.diag(1.0 / sq), t, ops)
        idx = np.arange(0, steps + 1, every)
        norms = np.array([np.linalg.norm(ys[i] * sq, 2) for i in idx])
        best = norms if best is None else np.maximum(best, norms)
    return (t[idx] - t[0]), best


def fit_decay_envelope(tau, norms):
    """(C, mu) with norms <= C exp(-mu tau) on the samples; mu from the tail slope."""
    tail = tau >= 0.5 * tau[-1]
    slope = np.polyfit(tau[tail], np.log(norms[tail]), 1)[0]
    mu = -float(slope)
    if not mu > 0:
        return 1.0, mu
    C = max(1.0, float(np.max(norms * np.exp(mu * tau))))
    return C, mu


def open_loop_gain(system, t, ops):
    """max over t of sup_{v, f} ||y(t)||_V^2 / (||v||_V^2 + ||f||_{L2 H}^2).

    Exact for the linear system via the Gramian Z' = -S Z - Z S^T + I,
    Z(0) = A^{-1}, evaluated with per-step matrix exponentials.
    """
    model = system.model
    alpha = model.eigenvalues
    sq = np.sqrt(alpha)
    dt = t[1] - t[0]
    z = np.diag(1.0 / alpha)
    base = np.diag(system.stiff)
    best = 1.0
    for k in range(len(t) - 1):
        m = base if ops is None else base + 0.5 * (ops[k] + ops[k + 1])
        e = expm(-dt * m)
        z = e @ z @ e.T + 0.5 * dt * (e @ e.T + np.eye(model.n))
        w = sq[:, None] * z * sq[None, :]
        best = max(best, float(np.linalg.eigvalsh(w)[-1]))
    return best


def estimate_constants(model, projector, lam, coeffs, theta, dt=1e-3, horizon=3.0,
                       n_starts=None, n_probe=20, seed=0, max_refits=12, k_check=3,
                       safety_K=1.2, safety_D=2.0):
    """Fit the closed-loop decay and measure the constants on probe states."""
    law = closed_loop_feedback(model, projector, lam, coeffs)
    if n_starts is None:
        n_starts = 1 if coeffs.autonomous else 9
    starts = np.arange(n_starts) * dt * round(np.pi / (max(n_starts - 1, 1) * dt))
    grid_end = float(starts[-1]) + horizon + dt
    grid = GridOps(law.system, grid_end, dt)
    tau, norms = transition_norms(law, grid, starts, horizon)
    C, mu = fit_decay_envelope(tau, norms)
    if not mu > 0:
        raise StabilizationError(
            f"no closed-loop decay (fitted mu={mu:.3g}); increase M (={projector.M}) or lambda (={lam:g})")
    T = math.log(C / theta) / mu
    rng = np.random.default_rng(seed)
    probes = random_states(model, n_probe, rng)
    refits = 0
    while True:
        steps = max(1, int(math.ceil(T / dt - 1e-9)))
        T = steps * dt
        C = max(C, theta * math.exp(mu * T))
        big = GridOps(law.system, k_check * T + 2 * dt, dt)
        ok = True
        ratio_K = 0.0
        y = probes.copy()
        for k in range(k_check):
            t, ops = big.window(k * T, steps)
            ys, vs = run_closed_loop(law, y, t, ops)
            nv0 = model.norm_v(ys[0])
            ratio_K = max(ratio_K, float(np.max(np.linalg.norm(vs, axis=-1) / nv0)))
            if np.any(model.norm_v(ys[-1]) > theta * nv0):
                ok = False
                break
            y = ys[-1] / model.norm_v(ys[-1])[:, None]
        if ok:
            break
        refits += 1
        if refits > max_refits:
            raise StabilizationError("squeezing could not be verified after enlarging T")
        log.info("squeeze check failed at T=%.4g, enlarging by 1.25", T)
        T *= 1.25
    gain = 1.0
    for k in range(k_check):
        t, ops = big.window(k * T, steps)
        gain = max(gain, open_loop_gain(law.system, t, ops))
    c_rc = rc_bound(model, coeffs, np.linspace(0.0, k_check * T, 64))
    return FeedbackConstants(C=C, mu=mu, theta=theta, T=T, K=safety_K * ratio_K,
                             D_Y=safety_D * gain, C_rc=c_rc, lam=float(lam),
                             projector_norm=projector.norm, dt=dt, refits=refits)


def rc_bound(model, coeffs, times):
    """max over sampled t of ||A_rc(t)||_{L(V, H)} in the truncated space."""
    mats = model.field_matrices(coeffs, times, part="rc")
    inv_sq = 1.0 / np.sqrt(model.eigenvalues)
    return float(max(np.linalg.norm(m * inv_sq[None, :], 2) for m in mats))


def verify_squeeze(law, constants, states, k_values=(0, 1, 2)):
    """Ratios ||y(kT+T)||_V / ||y(kT)||_V along the closed loop started at 0."""
    model = law.model
    dt = constants.dt
    steps = int(round(constants.T / dt))
    grid = GridOps(law.system, (max(k_values) + 1) * constants.T + 2 * dt, dt)
    y = np.asarray(states, dtype=float)
    ratios = []
    for k in range(max(k_values) + 1):
        t, ops = grid.window(k * constants.T, steps)
        ys, vs = run_closed_loop(law, y, t, ops)
        if k in k_values:
            ratios.append(model.norm_v(ys[-1]) / model.norm_v(ys[0]))
        y = ys[-1]
    return np.array(ratios)
