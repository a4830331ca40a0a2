"""Domain, coefficient fields, actuators and the two discretizations of
A = -nu*Laplace + 1 on (0, 1) with homogeneous Dirichlet conditions."""
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.interpolate import RegularGridInterpolator

from .errors import ConfigError, GeometryError
from .tridiag import Tridiag

SQRT2 = math.sqrt(2.0)


def sinpi(x):
    """sin(pi*x) with exact zeros at the integers."""
    y = np.mod(np.asarray(x, dtype=float), 2.0)
    return np.where(y <= 0.5, np.sin(np.pi * y),
                    np.where(y <= 1.5, np.sin(np.pi * (1.0 - y)), np.sin(np.pi * (y - 2.0))))


def composite_gauss(panels, order=4, a=0.0, b=1.0):
    s, w = leggauss(order)
    edges = np.linspace(a, b, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    x = (mid[:, None] + half[:, None] * s[None, :]).ravel()
    wt = (half[:, None] * w[None, :]).ravel()
    return x, wt


# ---------------------------------------------------------------- spectral

class SpectralModel:
    """Sine basis e_j = sqrt(2) sin(j pi x), j = 1..n, eigenvalues 1 + nu j^2 pi^2.

    States are coefficient vectors (last axis of length n).
    """

    def __init__(self, nu, n):
        if nu <= 0:
            raise ConfigError("nu must be positive")
        if n < 1:
            raise ConfigError("n must be >= 1")
        self.nu = float(nu)
        self.n = int(n)
        self.j = np.arange(1, self.n + 1)
        self.eigenvalues = 1.0 + self.nu * (self.j * np.pi) ** 2
        self._quad = None

    def basis(self, x):
        """Matrix of e_j(x), shape (len(x), n)."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return SQRT2 * np.sin(np.pi * np.outer(x, self.j))

    def basis_dx(self, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return SQRT2 * np.pi * self.j * np.cos(np.pi * np.outer(x, self.j))

    def evaluate(self, coeffs, x):
        return self.basis(x) @ np.asarray(coeffs)

    def quadrature(self):
        if self._quad is None:
            x, w = composite_gauss(max(64, 8 * self.n))
            self._quad = (x, w, self.basis(x), self.basis_dx(x))
        return self._quad

    def project(self, func):
        """Coefficients (func, e_j) by composite Gauss quadrature."""
        x, w, e, _ = self.quadrature()
        return e.T @ (w * func(x))

    def norm_h(self, y):
        return np.sqrt(np.sum(np.square(y), axis=-1))

    def norm_v(self, y):
        return np.sqrt(np.sum(self.eigenvalues * np.square(y), axis=-1))

    def norm_da(self, y):
        return np.sqrt(np.sum(np.square(self.eigenvalues * y), axis=-1))

    def field_matrices(self, coeffs, times, part="varying"):
        """Spectral matrices of z -> a z + b z_x at each time, shape (len(times), n, n).

        part="varying" uses only the time/space varying reaction, part="rc" gives
        A_rc = (a - 1) + b d/dx in full.
        """
        times = np.atleast_1d(np.asarray(times, dtype=float))
        x, w, e, ex = self.quadrature()
        out = np.zeros((len(times), self.n, self.n))
        chunk = max(1, 4_000_000 // (len(x) * self.n))
        for s in range(0, len(times), chunk):
            tt = times[s:s + chunk]
            a = coeffs.reaction_var_grid(tt, x)
            b = coeffs.convection_grid(tt, x)
            if a is not None:
                out[s:s + chunk] += np.matmul(e.T, (a * w)[:, :, None] * e[None])
            if b is not None:
                out[s:s + chunk] += np.matmul(e.T, (b * w)[:, :, None] * ex[None])
        if part == "rc":
            out += (coeffs.reaction_const - 1.0) * np.eye(self.n)
        return out


# ------------------------------------------------------------ coefficients

def _abs_sin_shift(t, x):
    return -2.0 * np.abs(np.sin(t + x))


def _abs_cos_shift(t, x):
    return np.abs(np.cos(t + x))


# name -> (constant part, varying part)
REACTION_PRESETS = {
    "-3-2|sin(t+x)|": (-3.0, _abs_sin_shift),
}
CONVECTION_PRESETS = {
    "|cos(t+x)|": _abs_cos_shift,
}


class Tabulated:
    """Bilinear interpolation on a (t, x) grid, clamped to the grid range."""

    def __init__(self, t, x, values):
        self.t = np.asarray(t, dtype=float)
        self.x = np.asarray(x, dtype=float)
        self.values = np.asarray(values, dtype=float)
        if self.values.shape != (len(self.t), len(self.x)):
            raise ConfigError("table values must have shape (len(t), len(x))")
        self._interp = RegularGridInterpolator((self.t, self.x), self.values)

    @classmethod
    def load(cls, path):
        path = Path(path)
        if path.suffix == ".npz":
            data = np.load(path)
        else:
            data = json.loads(path.read_text())
        return cls(data["t"], data["x"], data["values"])

    def __call__(self, t, x):
        t, x = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(x, dtype=float))
        tc = np.clip(t, self.t[0], self.t[-1])
        xc = np.clip(x, self.x[0], self.x[-1])
        pts = np.stack([tc.ravel(), xc.ravel()], axis=-1)
        return self._interp(pts).reshape(t.shape)


@dataclass(frozen=True)
class CoefficientField:
    """Reaction a(t,x) = reaction_const + reaction_var(t,x) and convection b(t,x).

    The constant part of the reaction is treated implicitly by the steppers,
    everything else explicitly.
    """
    reaction_const: float = 0.0
    reaction_var: object = None
    convection: object = None
    name: str = field(default="custom", compare=False)

    @classmethod
    def constant(cls, a=0.0, b=0.0):
        conv = None if b == 0 else (lambda t, x, _b=float(b): np.full(np.broadcast(t, x).shape, _b))
        return cls(float(a), None, conv, name=f"a={a:g},b={b:g}")

    @classmethod
    def from_spec(cls, reaction, convection=0.0, base_dir=None):
        """Build from preset names, numbers or table paths (.npz / .json)."""
        a0, avar = _parse_reaction(reaction, base_dir)
        conv = _parse_convection(convection, base_dir)
        return cls(a0, avar, conv, name=f"{reaction}|{convection}")

    @property
    def autonomous(self):
        # presets and tables may depend on t; only constants are surely autonomous
        return self.reaction_var is None and self.convection is None

    def reaction(self, t, x):
        t, x = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(x, dtype=float))
        out = np.full(t.shape, self.reaction_const)
        if self.reaction_var is not None:
            out = out + self.reaction_var(t, x)
        return out

    def convection_at(self, t, x):
        t, x = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(x, dtype=float))
        if self.convection is None:
            return np.zeros(t.shape)
        return self.convection(t, x)

    def reaction_var_grid(self, times, x):
        if self.reaction_var is None:
            return None
        return self.reaction_var(np.asarray(times)[:, None], np.asarray(x)[None, :])

    def convection_grid(self, times, x):
        if self.convection is None:
            return None
        return self.convection(np.asarray(times)[:, None], np.asarray(x)[None, :])

    def min_reaction(self, t_max=2 * np.pi, nt=201, nx=201):
        t = np.linspace(0.0, t_max, nt)[:, None]
        x = np.linspace(0.0, 1.0, nx)[None, :]
        return float(np.min(self.reaction(t, x)))


def _parse_reaction(spec, base_dir):
    if isinstance(spec, (int, float)):
        return float(spec), None
    spec = str(spec).strip()
    if spec in REACTION_PRESETS:
        return REACTION_PRESETS[spec]
    try:
        return float(spec), None
    except ValueError:
        pass
    path = Path(base_dir or ".") / spec
    if path.exists():
        tab = Tabulated.load(path)
        return 0.0, tab
    raise ConfigError(f"unknown reaction preset or table: {spec!r}")


def _parse_convection(spec, base_dir):
    if isinstance(spec, (int, float)):
        b = float(spec)
        return None if b == 0 else (lambda t, x: np.full(np.broadcast(t, x).shape, b))
    spec = str(spec).strip()
    if spec in CONVECTION_PRESETS:
        return CONVECTION_PRESETS[spec]
    try:
        return _parse_convection(float(spec), base_dir)
    except ValueError:
        pass
    path = Path(base_dir or ".") / spec
    if path.exists():
        return Tabulated.load(path)
    raise ConfigError(f"unknown convection preset or table: {spec!r}")


# ---------------------------------------------------------------- actuators

@dataclass(frozen=True)
class ActuatorWindow:
    """Interval omega(c) = (c - r/2, c + r/2)."""
    center: float
    r: float

    def __post_init__(self):
        if not 0.0 < self.r < 1.0 + 1e-15:
            raise GeometryError(f"width r={self.r} must lie in (0, 1]")

    @property
    def half_width(self):
        return 0.5 * self.r

    @property
    def left(self):
        return self.center - 0.5 * self.r

    @property
    def right(self):
        return self.center + 0.5 * self.r

    @property
    def admissible(self):
        tol = 1e-14
        return self.left >= -tol and self.right <= 1.0 + tol

    @property
    def strictly_interior(self):
        return self.left > 0.0 and self.right < 1.0

    def check(self, strict=False):
        ok = self.strictly_interior if strict else self.admissible
        if not ok:
            kind = "strictly inside" if strict else "inside"
            raise GeometryError(
                f"actuator window ({self.left:.6g}, {self.right:.6g}) is not {kind} (0, 1)")
        return self

    def indicator(self, x, normalized=True):
        x = np.asarray(x, dtype=float)
        val = 1.0 / math.sqrt(self.r) if normalized else 1.0
        return np.where((x > self.left) & (x < self.right), val, 0.0)


def indicator_coeffs(j, center, r):
    """Sine coefficients of the unnormalized indicator of (center - r/2, center + r/2).

    Uses cos(j pi a) - cos(j pi b) = 2 sin(j pi c) sin(j pi r/2) so that
    symmetric cancellations come out exactly zero.
    """
    j = np.asarray(j, dtype=float)
    center = np.asarray(center, dtype=float)[..., None]
    return 2.0 * SQRT2 * sinpi(j * center) * sinpi(j * 0.5 * r) / (j * np.pi)


def spectral_coeffs_of_indicator(model, act, normalized=False, n=None):
    act.check()
    c = indicator_coeffs(np.arange(1, (n or model.n) + 1), act.center, act.r)
    return c / math.sqrt(act.r) if normalized else c


# --------------------------------------------------------------------- FEM

class FemGrid:
    """Uniform P1 grid on [0, 1]. Matrices and load vectors cover all nodes;
    `interior` selects the Dirichlet unknowns."""

    def __init__(self, h=None, n_elements=None):
        if n_elements is None:
            if h is None or h <= 0:
                raise ConfigError("need h > 0 or n_elements")
            n_elements = int(round(1.0 / h))
            if abs(n_elements * h - 1.0) > 1e-9:
                raise ConfigError(f"h={h} does not divide the unit interval")
        self.n_elements = int(n_elements)
        if self.n_elements < 2:
            raise ConfigError("need at least two elements")
        self.h = 1.0 / self.n_elements
        self.nodes = np.linspace(0.0, 1.0, self.n_elements + 1)
        self.interior = slice(1, self.n_elements)
        self.n_interior = self.n_elements - 1
        h = self.h
        nn = self.n_elements + 1
        d = np.full(nn, 2 * h / 3)
        d[[0, -1]] = h / 3
        self.mass = Tridiag(np.full(nn - 1, h / 6), d, np.full(nn - 1, h / 6))
        d = np.full(nn, 2 / h)
        d[[0, -1]] = 1 / h
        self.stiffness = Tridiag(np.full(nn - 1, -1 / h), d, np.full(nn - 1, -1 / h))
        self._gauss = leggauss(3)

    @property
    def x_interior(self):
        return self.nodes[self.interior]

    def inner(self, mat):
        """Restriction of a full-node matrix to the interior unknowns."""
        return mat.restrict(1, self.n_elements)

    def mass_interior(self):
        return self.inner(self.mass)

    def stiffness_interior(self):
        return self.inner(self.stiffness)

    def _points(self):
        s, w = self._gauss
        s = 0.5 * (s + 1.0)
        w = 0.5 * w
        x = self.nodes[:-1, None] + self.h * s[None, :]
        return s, w, x

    def weighted_mass(self, values):
        """Interior matrix of int f phi_i phi_j given f at element quadrature points,
        values shape (..., n_elements, 3)."""
        s, w, _ = self._points()
        h = self.h
        fw = values * w * h
        ll = np.sum(fw * (1 - s) ** 2, axis=-1)
        lr = np.sum(fw * (1 - s) * s, axis=-1)
        rr = np.sum(fw * s * s, axis=-1)
        diag = np.zeros(values.shape[:-2] + (self.n_elements + 1,))
        diag[..., :-1] += ll
        diag[..., 1:] += rr
        return self.inner(Tridiag(lr, diag, lr))

    def weighted_convection(self, values):
        """Interior matrix of int b phi_j' phi_i (row i, column j)."""
        s, w, _ = self._points()
        bw = values * w
        # phi_L' = -1/h, phi_R' = 1/h; the factor h from dx cancels
        il = np.sum(bw * (1 - s), axis=-1)
        ir = np.sum(bw * s, axis=-1)
        diag = np.zeros(values.shape[:-2] + (self.n_elements + 1,))
        diag[..., :-1] += -il
        diag[..., 1:] += ir
        upper = il        # row L, column R
        lower = -ir       # row R, column L
        return self.inner(Tridiag(lower, diag, upper))

    def explicit_matrices(self, coeffs, times):
        """Interior matrices of the explicit operator a_var + b d/dx at each time,
        as a batched Tridiag (leading axis = time), or None if it vanishes."""
        times = np.atleast_1d(np.asarray(times, dtype=float))
        _, _, x = self._points()
        out = None
        if coeffs.reaction_var is not None:
            vals = coeffs.reaction_var(times[:, None, None], x[None])
            out = self.weighted_mass(vals)
        if coeffs.convection is not None:
            vals = coeffs.convection(times[:, None, None], x[None])
            conv = self.weighted_convection(vals)
            out = conv if out is None else out + conv
        return out

    def interpolate(self, func):
        return func(self.x_interior)

    def norm_h(self, y):
        m = self.mass_interior()
        return math.sqrt(float(y @ m.dot(y)))

    def norm_v(self, y, nu):
        m = self.mass_interior()
        k = self.stiffness_interior()
        return math.sqrt(float(y @ (nu * k.dot(y) + m.dot(y))))


def _hat_primitive(s):
    s = np.clip(s, -1.0, 1.0)
    return np.where(s < 0.0, 0.5 * (s + 1.0) ** 2, 1.0 - 0.5 * (1.0 - s) ** 2)


def hat_integrals(nodes, h, lo, hi):
    """int_lo^hi phi_i for every node; lo, hi may be arrays (windows on the leading axis)."""
    lo = np.asarray(lo, dtype=float)[..., None]
    hi = np.asarray(hi, dtype=float)[..., None]
    return h * (_hat_primitive((hi - nodes) / h) - _hat_primitive((lo - nodes) / h))


def hat_values(nodes, h, x):
    x = np.asarray(x, dtype=float)[..., None]
    return np.maximum(0.0, 1.0 - np.abs(x - nodes) / h)


def fem_load_vector(grid, act):
    """Exact (1_omega, phi_i) for all nodes (boundary nodes included)."""
    act.check()
    return hat_integrals(grid.nodes, grid.h, act.left, act.right)


def fem_load_derivative(grid, act):
    """d/dc of fem_load_vector: phi_i(c + r/2) - phi_i(c - r/2)."""
    act.check(strict=True)
    return hat_values(grid.nodes, grid.h, act.right) - hat_values(grid.nodes, grid.h, act.left)
