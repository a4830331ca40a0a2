"""From a multi-actuator feedback control to a single moving actuator.

Stages on one interval I = [t0, t0 + T]:
  0  static feedback magnitudes on the unit actuators
  1  same magnitudes on smoothed (finite sine sum) actuators
  2  switching schedule: one smoothed actuator at a time
  3  same schedule on the original actuators
  4  schedule with switching times pulled apart by epsilon
  5  one moving actuator whose centre travels between the static positions

Each control exposes `step_integrals(t)` (integral of the forcing over every
step of grid t, spectral coefficients) and `primitive(t)` (running integral).
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.legendre import leggauss

from .errors import ConfigError, ConvergenceError, PipelineError, PreconditionError
from .model import indicator_coeffs
from .simulate import simulate_forced, time_grid
from .static_feedback import GridOps, run_closed_loop

log = logging.getLogger(__name__)

EMPIRICAL = "EMPIRICAL"
THEORETICAL = "THEORETICAL"


def quintic(s):
    return s * s * s * (10.0 + s * (-15.0 + 6.0 * s))


def quintic_d1(s):
    return 30.0 * s * s * (s - 1.0) ** 2


def quintic_d2(s):
    return 60.0 * s * (2.0 * s - 1.0) * (s - 1.0)


QUINTIC = (quintic, quintic_d1, quintic_d2)
QUINTIC_D1_MAX = 15.0 / 8.0
QUINTIC_D2_MAX = 10.0 / math.sqrt(3.0)


# ------------------------------------------------------------ static sample

class StaticControlSample:
    """Magnitudes v(t) in R^M sampled on a grid, linear in between."""

    def __init__(self, t, values):
        self.t = np.asarray(t, dtype=float)
        self.values = np.asarray(values, dtype=float)
        if self.values.shape[0] != len(self.t):
            raise ValueError("one sample per grid time required")
        dt = np.diff(self.t)
        if np.any(dt <= 0):
            raise ValueError("time grid must be strictly increasing")
        self.M = self.values.shape[1]
        self._cum = np.concatenate([np.zeros((1, self.M)),
                                    np.cumsum(0.5 * dt[:, None] * (self.values[1:] + self.values[:-1]), axis=0)])

    @property
    def sup_norm(self):
        return float(np.max(np.linalg.norm(self.values, axis=1)))

    def primitive(self, t):
        """int_{t0}^{t} v, exact for the piecewise-linear interpolant."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        i = np.clip(np.searchsorted(self.t, t, side="right") - 1, 0, len(self.t) - 2)
        s = np.clip(t - self.t[i], 0.0, None)
        dt = self.t[i + 1] - self.t[i]
        slope = (self.values[i + 1] - self.values[i]) / dt[:, None]
        return self._cum[i] + s[:, None] * self.values[i] + 0.5 * (s * s)[:, None] * slope

    def integral(self, a, b):
        return self.primitive(b) - self.primitive(a)


class ActuatorControl:
    """Forcing sum_j w_j(t) Phi_j with fixed actuator columns Phi (n x M)."""

    def __init__(self, magnitudes, actuators):
        self.magnitudes = magnitudes  # anything with primitive(t) -> (len t, M)
        self.actuators = np.asarray(actuators, dtype=float)

    def primitive(self, t):
        return self.magnitudes.primitive(t) @ self.actuators.T

    def step_integrals(self, t):
        return np.diff(self.magnitudes.primitive(t), axis=0) @ self.actuators.T


class PiecewiseConstant:
    """Right-continuous piecewise-constant magnitudes: values[i] on [breaks[i], breaks[i+1])."""

    def __init__(self, breaks, values):
        self.breaks = np.asarray(breaks, dtype=float)
        self.values = np.asarray(values, dtype=float)
        widths = np.diff(self.breaks)
        if np.any(widths < -1e-14 * max(1.0, abs(self.breaks[-1]))):
            raise ValueError("breakpoints must be weakly increasing")
        self._cum = np.concatenate([np.zeros((1,) + self.values.shape[1:]),
                                    np.cumsum(widths[:, None] * self.values, axis=0)])

    def primitive(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        i = np.clip(np.searchsorted(self.breaks, t, side="right") - 1, 0, len(self.breaks) - 2)
        s = np.clip(t - self.breaks[i], 0.0, None)
        return self._cum[i] + s[:, None] * self.values[i]

    def __call__(self, t):
        """Value at t; the left limit is used at the final endpoint."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        i = np.clip(np.searchsorted(self.breaks, t, side="right") - 1, 0, len(self.breaks) - 2)
        return self.values[i]


# ---------------------------------------------------------------- smoothing

@dataclass(frozen=True)
class SmoothedActuators:
    coeffs: np.ndarray        # (L, M) unit-norm sine coefficients
    orders: np.ndarray        # truncation order per actuator
    distances: np.ndarray     # ||tilde Phi_j - hat Phi_j||_H
    budget: float
    da_norm: float            # max_j ||tilde Phi_j||_{D(A)}

    def matrix(self, n):
        """Columns restricted / padded to n modes."""
        out = np.zeros((n, self.coeffs.shape[1]))
        m = min(n, self.coeffs.shape[0])
        out[:m] = self.coeffs[:m]
        return out


def truncation_distances(hat):
    """||h_m/|h_m| - h|| for every truncation order m of a unit vector h."""
    hat = np.asarray(hat, dtype=float)
    sq = hat * hat
    tail = np.concatenate([np.cumsum(sq[::-1])[::-1][1:], [0.0]])
    head = np.sqrt(np.cumsum(sq))
    # 2 - 2|h_m| written without cancellation
    with np.errstate(invalid="ignore", divide="ignore"):
        d2 = 2.0 * tail / (1.0 + head)
    d2 = np.where(head > 0, d2, 2.0)
    return np.sqrt(d2)


def continuum_truncation_distances(center, r, orders):
    """Same for the exact normalized indicator in L^2(0, 1) (unit norm analytically)."""
    j = np.arange(1, orders + 1)
    sq = (indicator_coeffs(j, center, r) / math.sqrt(r)) ** 2
    head2 = np.cumsum(sq)
    tail = np.clip(1.0 - head2, 0.0, None)
    return np.sqrt(2.0 * tail / (1.0 + np.sqrt(head2)))


def smoothing_budget(constants, M):
    c = constants
    return (1.0 - c.theta) / 10.0 / (math.sqrt(c.D_Y * c.T) * c.K * M)


def smooth_actuators(bank, constants, model, space="model", max_order=4096):
    """Normalized spectral truncations meeting the H-distance budget.

    space="model": the unit actuators are the normalized indicators of the
    truncated space (what the spectral simulation sees).
    space="continuum": the exact indicators in L^2(0,1).
    """
    budget = smoothing_budget(constants, bank.M)
    alpha_all = 1.0 + model.nu * (np.pi * np.arange(1, max(max_order, model.n) + 1)) ** 2
    cols, orders, dists = [], [], []
    for c in bank.centers:
        if space == "model":
            hat = indicator_coeffs(model.j, c, bank.r)
            hat = hat / np.linalg.norm(hat)
            d = truncation_distances(hat)
        elif space == "continuum":
            hat = indicator_coeffs(np.arange(1, max_order + 1), c, bank.r) / math.sqrt(bank.r)
            d = continuum_truncation_distances(c, bank.r, max_order)
        else:
            raise ConfigError(f"unknown space {space!r}")
        ok = np.nonzero(d <= budget)[0]
        if len(ok) == 0:
            raise ConfigError(
                f"smoothing budget {budget:.3g} not reachable within order {len(d)} (best {d[-1]:.3g})")
        m = int(ok[0]) + 1
        tilde = np.zeros_like(hat)
        tilde[:m] = hat[:m] / np.linalg.norm(hat[:m])
        cols.append(tilde)
        orders.append(m)
        dists.append(float(d[m - 1]))
    L = max(len(c) for c in cols)
    coeffs = np.zeros((L, bank.M))
    for i, c in enumerate(cols):
        coeffs[:len(c), i] = c
    da = float(np.max(np.linalg.norm(alpha_all[:L, None] * coeffs, axis=0)))
    return SmoothedActuators(coeffs=coeffs, orders=np.array(orders), distances=np.array(dists),
                             budget=budget, da_norm=da)


# ----------------------------------------------------------------- schedule

@dataclass
class SwitchingSchedule:
    t0: float
    T: float
    N: int
    M: int
    epsilon: float
    sigma: np.ndarray         # (N,)
    lengths: np.ndarray       # (N, 2M) signed l_{n,j}
    times: np.ndarray         # (N, 2M+1) raw switching times
    shifted: np.ndarray       # (N, 2M+1) epsilon-shifted times
    vartheta: float
    slot_actuator: np.ndarray = field(default=None)   # (2M,) 0-based

    def __post_init__(self):
        j = np.arange(1, 2 * self.M + 1)
        self.slot_actuator = np.minimum(j, 2 * self.M + 1 - j) - 1

    @property
    def signs(self):
        return np.sign(self.lengths)

    @property
    def Theta(self):
        return theta_of_epsilon(self.epsilon, self.T, self.N, self.M)

    def slot_values(self):
        """(N, 2M, M) magnitudes vector active in each slot."""
        vals = np.zeros((self.N, 2 * self.M, self.M))
        idx = np.arange(2 * self.M)
        vals[:, idx, self.slot_actuator] = self.signs * self.sigma[:, None]
        return vals

    def piecewise(self, shifted=False):
        times = self.shifted if shifted else self.times
        breaks = np.concatenate([times[:, :-1].ravel(), [times[-1, -1]]])
        vals = self.slot_values().reshape(-1, self.M)
        return PiecewiseConstant(breaks, vals)

    def subinterval_ends(self):
        return self.t0 + self.T * np.arange(self.N + 1) / self.N

    def to_dict(self):
        return {"t0": self.t0, "T": self.T, "N": self.N, "M": self.M, "epsilon": self.epsilon,
                "vartheta": self.vartheta, "sigma": self.sigma.tolist(),
                "signs": self.signs.tolist(), "lengths": self.lengths.tolist(),
                "times": self.times.tolist(), "shifted_times": self.shifted.tolist(),
                "slot_actuator": (self.slot_actuator + 1).tolist()}


def vartheta_of(epsilon, T, N, M):
    return T / (T + N * (2 * M + 1) * M * epsilon)


def theta_of_epsilon(epsilon, T, N, M):
    th = vartheta_of(epsilon, T, N, M)
    return (1.0 - th) * T / N + (2 * M + 1) * M * epsilon * th


def build_schedule(v0, constants, N, epsilon, t0=None):
    """Switching schedule (raw and epsilon-shifted times) from sampled magnitudes."""
    if N < 1:
        raise PreconditionError("N must be >= 1")
    if not epsilon > 0:
        raise PreconditionError("epsilon must be positive")
    T = constants.T if hasattr(constants, "T") else float(constants)
    M = v0.M
    t0 = v0.t[0] if t0 is None else t0
    ends = t0 + T * np.arange(N + 1) / N
    ints = v0.integral(ends[:-1], ends[1:])                    # (N, M)
    sigma = (N / T) * np.sum(np.abs(ints), axis=1)
    lengths = np.zeros((N, 2 * M))
    times = np.zeros((N, 2 * M + 1))
    times[:, 0] = ends[:-1]
    pos = sigma > 0
    half = np.zeros_like(ints)
    half[pos] = ints[pos] / (2.0 * sigma[pos, None])
    lengths[:, :M] = half
    lengths[:, M:] = half[:, ::-1]
    widths = np.abs(lengths)
    widths[~pos] = T / (2 * M * N)
    times[:, 1:] = ends[:-1, None] + np.cumsum(widths, axis=1)
    times[:, -1] = ends[1:]
    th = vartheta_of(epsilon, T, N, M)
    j = np.arange(2 * M + 1)
    shifted = ends[:-1, None] + th * (times - ends[:-1, None] + j * (j + 1) * epsilon / 2.0)
    shifted[:, -1] = ends[1:]
    return SwitchingSchedule(t0=float(t0), T=T, N=int(N), M=M, epsilon=float(epsilon), sigma=sigma,
                             lengths=lengths, times=times, shifted=shifted, vartheta=th)


# ------------------------------------------------------------ moving control

class MovingControl:
    """One moving normalized indicator: plateaus follow the shifted schedule,
    2 xi windows around each interior switching time move the centre along a
    quintic road and blend the signed magnitude linearly."""

    def __init__(self, schedule, bank, xi, model, profile=QUINTIC):
        lim = 0.5 * schedule.epsilon * schedule.vartheta
        if not 0.0 < xi < lim:
            raise PreconditionError(f"xi={xi:.3g} must lie in (0, {lim:.3g})")
        self.schedule = schedule
        self.bank = bank
        self.xi = float(xi)
        self.model = model
        self.phi, self.dphi, self.ddphi = profile
        self.r = bank.r
        sch = schedule
        M = sch.M
        self.hat = bank.hat_matrix(model)
        self.base = ActuatorControl(sch.piecewise(shifted=True), self.hat)
        act = sch.slot_actuator
        signs = sch.signs
        # windows between slot j and j+1 (j = 0..2M-2) of every subinterval
        jj = np.arange(2 * M - 1)
        self.w_mid = sch.shifted[:, 1:2 * M].ravel()
        self.w_from = np.tile(act[jj], sch.N)
        self.w_to = np.tile(act[jj + 1], sch.N)
        self.w_s0 = signs[:, jj].ravel()
        self.w_s1 = signs[:, jj + 1].ravel()
        self.w_sigma = np.repeat(sch.sigma, 2 * M - 1)
        self.centers = bank.centers
        self._corr = None

    # -- pointwise evaluation
    def _locate(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        i = np.clip(np.searchsorted(self.w_mid, t) , 0, len(self.w_mid) - 1)
        # nearest window midpoint on either side
        alt = np.clip(i - 1, 0, len(self.w_mid) - 1)
        use_alt = np.abs(t - self.w_mid[alt]) < np.abs(t - self.w_mid[i])
        i = np.where(use_alt, alt, i)
        inside = np.abs(t - self.w_mid[i]) < self.xi
        return t, i, inside

    def center(self, t):
        t, i, inside = self._locate(t)
        sched_c = self.centers[self._slot_actuator_at(t)]
        s = np.clip((t - self.w_mid[i] + self.xi) / (2 * self.xi), 0.0, 1.0)
        c0, c1 = self.centers[self.w_from[i]], self.centers[self.w_to[i]]
        return np.where(inside, c0 + self.phi(s) * (c1 - c0), sched_c)

    def velocity(self, t):
        t, i, inside = self._locate(t)
        s = np.clip((t - self.w_mid[i] + self.xi) / (2 * self.xi), 0.0, 1.0)
        dc = self.centers[self.w_to[i]] - self.centers[self.w_from[i]]
        return np.where(inside, self.dphi(s) * dc / (2 * self.xi), 0.0)

    def magnitude(self, t):
        t, i, inside = self._locate(t)
        plateau = self.base.magnitudes(t)
        plateau = plateau[np.arange(len(t)), self._slot_actuator_at(t)]
        tm = self.w_mid[i]
        blend = ((self.xi + tm - t) * self.w_s0[i] + (self.xi - tm + t) * self.w_s1[i]) / (2 * self.xi)
        return np.where(inside, self.w_sigma[i] * blend, plateau)

    def _slot_actuator_at(self, t):
        pc = self.base.magnitudes
        idx = np.clip(np.searchsorted(pc.breaks, t, side="right") - 1, 0, len(pc.breaks) - 2)
        return self.schedule.slot_actuator[idx % (2 * self.schedule.M)]

    def actuator(self, c):
        """Unit-norm (in the truncated space) indicator coefficients at centres c."""
        a = indicator_coeffs(self.model.j, c, self.r)
        return a / np.linalg.norm(a, axis=-1, keepdims=True)

    def forcing(self, t):
        """Forcing coefficients u(t) Phi(t), shape (len t, n)."""
        return self.magnitude(t)[:, None] * self.actuator(self.center(t))

    # -- integrals
    def _window_difference(self, w, a, b, nodes=8):
        """int_a^b (V5 - V4) over part of window w (a, b inside the window)."""
        s, wt = leggauss(nodes)
        x = 0.5 * (a + b) + 0.5 * (b - a) * s
        tm = self.w_mid[w]
        ss = (x - tm + self.xi) / (2 * self.xi)
        c = self.centers[self.w_from[w]] + self.phi(ss) * (self.centers[self.w_to[w]] - self.centers[self.w_from[w]])
        blend = ((self.xi + tm - x) * self.w_s0[w] + (self.xi - tm + x) * self.w_s1[w]) / (2 * self.xi)
        f5 = (self.w_sigma[w] * blend)[:, None] * self.actuator(c)
        # V4 inside the window: slot j before the midpoint, slot j+1 after
        before = x < tm
        f4 = np.where(before[:, None],
                      (self.w_sigma[w] * self.w_s0[w]) * self.hat[:, self.w_from[w]][None, :],
                      (self.w_sigma[w] * self.w_s1[w]) * self.hat[:, self.w_to[w]][None, :])
        return 0.5 * (b - a) * (wt @ (f5 - f4))

    def _window_piece(self, w, a, b):
        tm = self.w_mid[w]
        if a < tm < b:
            return self._window_difference(w, a, tm) + self._window_difference(w, tm, b)
        return self._window_difference(w, a, b)

    def _window_totals(self):
        if self._corr is None:
            tot = np.zeros((len(self.w_mid), self.model.n))
            for w in range(len(self.w_mid)):
                if self.w_from[w] == self.w_to[w] and self.w_s0[w] == self.w_s1[w]:
                    continue
                tot[w] = self._window_piece(w, self.w_mid[w] - self.xi, self.w_mid[w] + self.xi)
            self._corr = np.concatenate([np.zeros((1, self.model.n)), np.cumsum(tot, axis=0)])
        return self._corr

    def primitive(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        out = self.base.primitive(t)
        cum = self._window_totals()
        lo = self.w_mid - self.xi
        hi = self.w_mid + self.xi
        done = np.searchsorted(hi, t, side="right")   # windows fully before t
        out = out + cum[done]
        for k in np.nonzero((done < len(lo)) & (t > lo[np.minimum(done, len(lo) - 1)]))[0]:
            w = done[k]
            out[k] += self._window_piece(w, lo[w], t[k])
        return out

    def step_integrals(self, t):
        return np.diff(self.primitive(t), axis=0)

    def sample(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return {"t": t, "u": self.magnitude(t), "c": self.center(t)}


def build_moving_control(schedule, bank, xi, model, profile=QUINTIC):
    return MovingControl(schedule, bank, xi, model, profile)


def approach_path(c0, c1, t):
    """Centre path c0 + t^2 (2 - t)^2 (c1 - c0) on [0, 1] (zero velocity at both ends)."""
    t = np.clip(np.asarray(t, dtype=float), 0.0, 1.0)
    return c0 + t * t * (2.0 - t) ** 2 * (c1 - c0)


# ------------------------------------------------------------ relaxation

def relaxation_distance(f, g, model, t):
    """sup over the grid t of ||int_{t0}^{t} (f - g)||_{D(A)}."""
    diff = f.primitive(t) - g.primitive(t)
    return float(np.max(model.norm_da(diff[..., :model.n])))


def relaxation_bound(schedule, smoothed, constants, v_norm):
    M = schedule.M
    return schedule.T / schedule.N * (M + 1) * smoothed.da_norm * constants.K * v_norm


# ----------------------------------------------------------- Prop 3.4 helper

def piecewise_switch_distance(tau, sigma, values):
    """Exact L^2 distance between two piecewise-constant functions with the same
    values on [tau_{i-1}, tau_i) and [sigma_{i-1}, sigma_i), plus the bound
    sqrt(K) sqrt(R) X with R = max |tau_i - sigma_i| and X = max |phi_i - phi_j|."""
    tau = np.asarray(tau, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    vals = np.asarray(values, dtype=float)
    if vals.ndim == 1:
        vals = vals[:, None]
    K = len(vals)
    if len(tau) != K + 1 or len(sigma) != K + 1:
        raise PreconditionError("need K+1 switching times for K values")
    if tau[0] != sigma[0] or tau[-1] != sigma[-1]:
        raise PreconditionError("switching sequences must share their endpoints")
    if np.any(np.diff(tau) < 0) or np.any(np.diff(sigma) < 0):
        raise PreconditionError("switching times must be weakly increasing")
    pts = np.union1d(tau, sigma)
    mid = 0.5 * (pts[1:] + pts[:-1])
    it = np.clip(np.searchsorted(tau, mid, side="right") - 1, 0, K - 1)
    js = np.clip(np.searchsorted(sigma, mid, side="right") - 1, 0, K - 1)
    gap = np.sum((vals[it] - vals[js]) ** 2, axis=1)
    dist = math.sqrt(float(np.sum(np.diff(pts) * gap)))
    R = float(np.max(np.abs(tau - sigma)))
    diffs = vals[:, None, :] - vals[None, :, :]
    X = float(np.max(np.sqrt(np.sum(diffs ** 2, axis=-1))))
    return dist, math.sqrt(K) * math.sqrt(R) * X


# ------------------------------------------------------------ pipeline

@dataclass
class PipelineContext:
    model: object
    system: object          # SpectralSystem
    law: object             # FeedbackLaw
    bank: object
    constants: object
    smoothed: SmoothedActuators
    grid: GridOps = None

    def ensure_grid(self, t_end):
        if self.grid is None or self.grid.t[-1] < t_end - 1e-12:
            self.grid = GridOps(self.system, t_end + 2 * self.constants.dt, self.constants.dt)
        return self.grid

    @property
    def budget_fraction(self):
        return (1.0 - self.constants.theta) / 10.0


@dataclass
class IntervalStages:
    t0: float
    t: np.ndarray
    ops: object
    v: np.ndarray
    v0: StaticControlSample
    controls: dict
    schedule: SwitchingSchedule = None


def feedback_sample(ctx, v, t0):
    """Closed-loop feedback magnitudes from state v at t0 over one interval."""
    c = ctx.constants
    steps = int(round(c.T / c.dt))
    grid = ctx.ensure_grid(t0 + c.T)
    t, ops = grid.window(t0, steps)
    _, vs = run_closed_loop(ctx.law, v, t, ops)
    return t, ops, StaticControlSample(t, vs)


def build_stages(ctx, v, t0, N, epsilon, xi=None, upto=5):
    t, ops, v0 = feedback_sample(ctx, v, t0)
    hat = ctx.bank.hat_matrix(ctx.model)
    tilde = ctx.smoothed.matrix(ctx.model.n)
    controls = {0: ActuatorControl(v0, hat), 1: ActuatorControl(v0, tilde)}
    sched = None
    if upto >= 2:
        sched = build_schedule(v0, ctx.constants, N, epsilon, t0=t0)
        controls[2] = ActuatorControl(sched.piecewise(), tilde)
        controls[3] = ActuatorControl(sched.piecewise(), hat)
        controls[4] = ActuatorControl(sched.piecewise(shifted=True), hat)
        if upto >= 5 and xi is not None:
            controls[5] = build_moving_control(sched, ctx.bank, xi, ctx.model)
    return IntervalStages(t0=t0, t=t, ops=ops, v=np.asarray(v, dtype=float), v0=v0,
                          controls=controls, schedule=sched)


def stage_states(ctx, stages, keys=None):
    keys = sorted(stages.controls) if keys is None else keys
    out = {}
    for k in keys:
        f = stages.controls[k].step_integrals(stages.t)
        out[k] = simulate_forced(ctx.system, stages.v, f, stages.t, stages.ops)
    return out


@dataclass
class PipelineReport:
    errors: list
    contraction: float
    v_norm: float
    budget: float
    passed: bool
    final_state: np.ndarray = None

    def to_dict(self):
        return {"stage_errors": [float(e) for e in self.errors], "contraction": float(self.contraction),
                "v_norm": float(self.v_norm), "budget": float(self.budget), "passed": bool(self.passed)}


def verify_pipeline(ctx, stages):
    """Per-stage end-of-interval errors in V and the final contraction."""
    model = ctx.model
    theta = ctx.constants.theta
    states = stage_states(ctx, stages)
    ends = {k: s[-1] for k, s in states.items()}
    vn = float(model.norm_v(stages.v))
    errs = [float(model.norm_v(ends[k] - ends[k - 1])) for k in range(1, 6) if k in ends and k - 1 in ends]
    last = ends[max(ends)]
    contraction = float(model.norm_v(last) / vn) if vn > 0 else 0.0
    budget = ctx.budget_fraction * vn
    passed = all(e <= budget for e in errs) and (vn == 0 or contraction <= 0.5 * (theta + 1))
    return PipelineReport(errors=errs, contraction=contraction, v_norm=vn, budget=budget,
                          passed=passed, final_state=last)


# ---------------------------------------------------- parameter selection

def theoretical_N(constants, smoothed, model, M):
    c = constants
    one_da_v = 1.0 / math.sqrt(model.eigenvalues[0])
    val = (math.sqrt(c.D_Y) * (1.0 + c.C_rc * one_da_v) * c.T ** 1.5 * (M + 1)
           * smoothed.da_norm * c.K * 10.0 / (1.0 - c.theta))
    return int(math.ceil(val))


def epsilon_for_Theta(target, T, N, M):
    """Largest epsilon with Theta(epsilon) <= target (Theta is increasing)."""
    a = (2 * M + 1) * M
    if N * target >= 2 * T:
        raise ValueError("target too large")
    return target * T / (a * (2.0 * T - N * target))


def theoretical_epsilon(constants, N, M):
    c = constants
    target = ((1.0 - c.theta) / 10.0) ** 2 / (8.0 * M ** 3 * c.D_Y * N * c.K ** 2)
    return epsilon_for_Theta(target, c.T, N, M)


def theoretical_xi(constants, N, M, epsilon):
    c = constants
    th = vartheta_of(epsilon, c.T, N, M)
    second = ((1.0 - c.theta) / 10.0) ** 2 / (c.D_Y * 2.0 * N * (2 * M - 1) * M ** 2 * c.K ** 2)
    return min(0.5 * epsilon * th * (1.0 - 1e-9), second)


def _chain_errors(ctx, probes, N, epsilon, keys, xi=None, intervals=3):
    """Worst relative stage error over chained intervals started at each probe.

    Each chain advances with the last available stage (4 or 5), so later
    intervals start from states produced by the construction itself.
    """
    model = ctx.model
    T = ctx.constants.T
    upto = 5 if xi is not None else 4
    need = sorted(set(keys) | {k - 1 for k in keys} | {upto})
    worst = 0.0
    for v in probes:
        v = np.asarray(v, dtype=float)
        for k in range(intervals):
            st = build_stages(ctx, v, k * T, N, epsilon, xi=xi, upto=upto)
            states = stage_states(ctx, st, keys=need)
            vn = float(model.norm_v(v))
            if vn == 0:
                break
            for j in keys:
                worst = max(worst, float(model.norm_v(states[j][-1] - states[j - 1][-1])) / vn)
            v = states[upto][-1]
    return worst


def choose_N_epsilon(ctx, mode=EMPIRICAL, probes=None, N_start=8, N_max=2 ** 16, safety=2.0,
                     intervals=3, max_eps_halvings=30):
    """(N, epsilon) either from the closed-form bounds or empirically.

    EMPIRICAL: starting from (8, T/(64 M N)), double N and halve epsilon while
    the switching errors (stages 2, 3) exceed budget/safety on chained probe
    runs; then halve epsilon alone until the shift error (stage 4) fits too.
    Doubling N while halving epsilon keeps N*epsilon fixed, which leaves the
    shift error unchanged, hence the second loop.
    """
    M = ctx.bank.M
    c = ctx.constants
    if mode == THEORETICAL:
        N = theoretical_N(c, ctx.smoothed, ctx.model, M)
        return N, theoretical_epsilon(c, N, M)
    if mode != EMPIRICAL:
        raise ConfigError(f"unknown mode {mode!r}")
    if probes is None or len(probes) == 0:
        raise PreconditionError("EMPIRICAL mode needs probe states")
    ctx.ensure_grid(intervals * c.T)
    N = N_start
    eps = c.T / (64 * M * N)
    target = ctx.budget_fraction / safety
    while True:
        worst = _chain_errors(ctx, probes, N, eps, keys=(2, 3), intervals=intervals)
        log.info("N=%d worst relative switching error %.3g (target %.3g)", N, worst, target)
        if worst <= target:
            break
        N *= 2
        eps /= 2
        if N > N_max:
            raise ConvergenceError(f"switching errors above budget up to N={N_max}")
    for _ in range(max_eps_halvings):
        worst = _chain_errors(ctx, probes, N, eps, keys=(4,), intervals=intervals)
        log.info("eps=%.3g worst relative shift error %.3g", eps, worst)
        if worst <= target:
            return N, eps
        eps /= 2
    raise ConvergenceError("shift errors above budget")


def choose_xi(ctx, N, epsilon, mode=EMPIRICAL, probes=None, safety=2.0, intervals=3,
              max_halvings=40):
    """Transition half-width: closed form, or halve from half the admissible
    maximum until the stage-5 error fits on chained probe runs."""
    M = ctx.bank.M
    c = ctx.constants
    if mode == THEORETICAL:
        return theoretical_xi(c, N, M, epsilon)
    lim = 0.5 * epsilon * vartheta_of(epsilon, c.T, N, M)
    xi = 0.5 * lim
    target = ctx.budget_fraction / safety
    for _ in range(max_halvings):
        worst = _chain_errors(ctx, probes, N, epsilon, keys=(5,), xi=xi, intervals=intervals)
        log.info("xi=%.3g worst relative stage-5 error %.3g", xi, worst)
        if worst <= target:
            return xi
        xi *= 0.5
    raise ConvergenceError("no admissible xi found")


# ------------------------------------------------------------ concatenation

@dataclass
class GlobalRun:
    T: float
    v_norms: list                   # ||y(kT)||_V, k = 0..k_max
    reports: list
    pieces: list                    # MovingControl per interval
    t: np.ndarray = None
    states: np.ndarray = None

    def sample(self, per_interval=2000):
        rows = []
        for mc in self.pieces:
            sch = mc.schedule
            tt = np.linspace(sch.t0, sch.t0 + sch.T, per_interval, endpoint=False)
            s = mc.sample(tt)
            rows.append(np.column_stack([s["t"], s["u"], s["c"]]))
        return np.vstack(rows) if rows else np.zeros((0, 3))


def concatenate_intervals(ctx, v0, k_max, N, epsilon, xi, strict=True):
    """Apply the construction on I_0, ..., I_{k_max - 1}, each time from y(kT)."""
    v = np.asarray(v0, dtype=float)
    T = ctx.constants.T
    norms = [float(ctx.model.norm_v(v))]
    reports, pieces, ts, ys = [], [], [], []
    ctx.ensure_grid(k_max * T)
    for k in range(k_max):
        st = build_stages(ctx, v, k * T, N, epsilon, xi=xi)
        rep = verify_pipeline(ctx, st)
        reports.append(rep)
        if strict and not rep.passed:
            raise PipelineError(f"pipeline failed on interval {k}: {rep.to_dict()}", interval=k)
        mc = st.controls[5]
        pieces.append(mc)
        traj = simulate_forced(ctx.system, v, mc.step_integrals(st.t), st.t, st.ops)
        ts.append(st.t if k == 0 else st.t[1:])
        ys.append(traj if k == 0 else traj[1:])
        v = traj[-1]
        norms.append(float(ctx.model.norm_v(v)))
    return GlobalRun(T=T, v_norms=norms, reports=reports, pieces=pieces,
                     t=np.concatenate(ts), states=np.vstack(ys))


# ------------------------------------------------------------ end to end

def prepare_pipeline(nu, n, M, r, theta, coeffs, dt=1e-3, seed=0, space="model"):
    """Spectral model, actuator bank, feedback constants and smoothed actuators."""
    from .model import SpectralModel
    from .static_feedback import (ActuatorBank, build_projector, closed_loop_feedback,
                                  default_lambda, estimate_constants)
    model = SpectralModel(nu, n)
    bank = ActuatorBank(M, r)
    proj = build_projector(model, bank)
    lam = default_lambda(coeffs)
    constants = estimate_constants(model, proj, lam, coeffs, theta, dt=dt, seed=seed)
    law = closed_loop_feedback(model, proj, lam, coeffs)
    smoothed = smooth_actuators(bank, constants, model, space=space)
    return PipelineContext(model, law.system, law, bank, constants, smoothed)


@dataclass
class PipelineChoice:
    N: int
    epsilon: float
    xi: float
    mode: str

    def to_dict(self):
        return {"N": self.N, "epsilon": self.epsilon, "xi": self.xi, "mode": self.mode}


def choose_parameters(ctx, mode=EMPIRICAL, n_probes=3, seed=1, safety=2.0, intervals=3):
    probes = None
    if mode == EMPIRICAL:
        from .static_feedback import random_states
        probes = random_states(ctx.model, n_probes, np.random.default_rng(seed))
    N, eps = choose_N_epsilon(ctx, mode, probes, safety=safety, intervals=intervals)
    xi = choose_xi(ctx, N, eps, mode, probes, safety=safety, intervals=intervals)
    return PipelineChoice(int(N), float(eps), float(xi), mode)
