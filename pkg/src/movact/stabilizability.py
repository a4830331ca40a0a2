"""Can one static actuator 1_omega stabilize y' - nu y'' + a(x) y = u 1_omega?

Decided from the nonpositive eigenpairs of -nu Laplace + a: a nonsimple one,
or a simple one whose eigenfunction is orthogonal to the actuator, gives a
solution no control can touch. Otherwise the finite unstable part is
controllable (Kalman / Vandermonde) and the actuator stabilizes.
"""
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh

from .errors import PreconditionError
from .model import FemGrid, SpectralModel, fem_load_vector, indicator_coeffs
from .simulate import simulate_controlled

NOT_STABILIZABLE = "NOT_STABILIZABLE"
STABILIZABLE = "STABILIZABLE"
INCONCLUSIVE = "INCONCLUSIVE"

CLUSTER_RTOL = 1e-8
ORTH_EXACT = 1e-10
ORTH_BAND = 1e-6
COVERAGE_MARGIN = 3


@dataclass
class EigenAnalysis:
    """Eigenpairs of the reaction-diffusion operator, ascending.

    vectors[:, k] is the k-th eigenvector in the chosen representation
    (sine coefficients, FEM nodal values or synthetic coordinates), orthonormal
    with respect to `gram`. `operator` is the matrix whose generalized
    eigenproblem (operator, gram) they solve.
    """
    eigenvalues: np.ndarray
    vectors: np.ndarray
    gram: np.ndarray
    operator: np.ndarray
    representation: str = "synthetic"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        ev = np.asarray(self.eigenvalues, dtype=float)
        if np.any(np.diff(ev) < 0):
            raise ValueError("eigenvalues must be sorted ascending")
        self.eigenvalues = ev

    @classmethod
    def closed_form(cls, nu, a, n=64):
        """Constant reaction: eigenvalues nu j^2 pi^2 + a, eigenvectors the sines."""
        j = np.arange(1, n + 1)
        ev = nu * (j * np.pi) ** 2 + float(a)
        eye = np.eye(n)
        return cls(ev, eye, eye, np.diag(ev), "spectral", {"nu": nu, "a": float(a), "n": n})

    @classmethod
    def fem(cls, grid, nu, reaction, count=None):
        """Generalized FEM eigenproblem (nu K + M_a) v = lambda M v for a reaction a(x)."""
        _, _, x = grid._points()
        m_a = grid.weighted_mass(np.asarray(reaction(x), dtype=float)).dense()
        k = grid.stiffness_interior().dense()
        m = grid.mass_interior().dense()
        op = nu * k + m_a
        idx = None if count is None else [0, min(count, grid.n_interior) - 1]
        ev, vec = eigh(op, m, subset_by_index=idx)
        return cls(ev, vec, m, op, "fem", {"nu": nu, "h": grid.h})

    @classmethod
    def synthetic(cls, eigenvalues, vectors=None):
        ev = np.asarray(eigenvalues, dtype=float)
        order = np.argsort(ev, kind="stable")
        n = len(ev)
        vec = np.eye(n) if vectors is None else np.asarray(vectors, dtype=float)
        vec = vec[:, order]
        ev = ev[order]
        op = vec @ np.diag(ev) @ vec.T
        return cls(ev, vec, np.eye(vec.shape[0]), op, "synthetic")

    @property
    def j0(self):
        """1-based index of the first positive eigenvalue."""
        pos = np.nonzero(self.eigenvalues > 0)[0]
        if len(pos) == 0:
            raise PreconditionError("no positive eigenvalue in the analysed range")
        return int(pos[0]) + 1

    def clusters(self, rtol=CLUSTER_RTOL):
        """Groups of 0-based indices whose eigenvalues agree to relative gap rtol."""
        ev = self.eigenvalues
        groups = [[0]]
        for k in range(1, len(ev)):
            if ev[k] - ev[k - 1] <= rtol * max(1.0, abs(ev[k - 1])):
                groups[-1].append(k)
            else:
                groups.append([k])
        return groups

    def check_coverage(self, margin=COVERAGE_MARGIN):
        n_pos = int(np.sum(self.eigenvalues > 0))
        if n_pos < margin:
            raise PreconditionError(
                f"analysis holds {n_pos} positive eigenvalues, need a margin of {margin}")

    def products(self, psi):
        """(e_k, Psi) for all k; psi is given as its dual vector (loads / coefficients)."""
        return self.vectors.T @ np.asarray(psi, dtype=float)

    def residual(self, w, lam):
        w = np.asarray(w, dtype=float)
        return float(np.linalg.norm(self.operator @ w - lam * (self.gram @ w)))

    def norm(self, w):
        w = np.asarray(w, dtype=float)
        return math.sqrt(float(w @ self.gram @ w))


def analyze(nu, reaction, n=64, h=0.0025, count=None):
    """Closed form for a constant reaction, FEM eigenpairs for a(x)."""
    if np.isscalar(reaction):
        return EigenAnalysis.closed_form(nu, reaction, n)
    return EigenAnalysis.fem(FemGrid(h=h), nu, reaction, count=count)


def actuator_functional(analysis, act):
    """Dual vector of the unnormalized indicator in the analysis representation."""
    if analysis.representation == "spectral":
        n = analysis.vectors.shape[0]
        return indicator_coeffs(np.arange(1, n + 1), act.center, act.r)
    if analysis.representation == "fem":
        grid = FemGrid(h=analysis.meta["h"])
        return fem_load_vector(grid, act)[grid.interior]
    raise PreconditionError("synthetic analyses take Psi directly")


def find_orthogonal_eigenfunction(analysis, psi, j):
    """Unit eigenvector of the (multiple) eigenvalue number j (1-based) orthogonal to Psi.

    Combines e_j with its neighbour e_{j+1} in the same cluster (or e_{j-1}
    if e_j closes the cluster).
    """
    k = j - 1
    group = next(g for g in analysis.clusters() if k in g)
    if len(group) < 2:
        raise PreconditionError(f"eigenvalue {j} is simple")
    other = k + 1 if k + 1 in group else k - 1
    beta = analysis.products(psi)
    bk, bo = beta[k], beta[other]
    ek, eo = analysis.vectors[:, k], analysis.vectors[:, other]
    if bk == 0.0:
        return ek.copy()
    if bo == 0.0:
        return eo.copy()
    w = bo * ek - bk * eo
    return w / analysis.norm(w)


@dataclass
class Verdict:
    kind: str
    eigenvalue: float = None
    index: int = None                   # 1-based
    witness: np.ndarray = None
    orthogonality: np.ndarray = None    # |(e_k, Psi)| / |Psi| over nonpositive modes
    reason: str = ""

    def to_dict(self, analysis=None, n_coeffs=16):
        out = {"verdict": self.kind, "eigenvalue": self.eigenvalue, "index": self.index,
               "reason": self.reason,
               "orthogonality": None if self.orthogonality is None else
               [float(v) for v in self.orthogonality]}
        if self.witness is not None:
            out["witness_coeffs"] = [float(v) for v in witness_sine_coeffs(analysis, self.witness, n_coeffs)]
        return out


def witness_sine_coeffs(analysis, w, n=16):
    """Coefficients of the witness in the basis sqrt(2) sin(j pi x)."""
    w = np.asarray(w, dtype=float)
    if analysis is None or analysis.representation != "fem":
        return w[:n]
    model = SpectralModel(analysis.meta["nu"], n)
    grid = FemGrid(h=analysis.meta["h"])
    vals = np.concatenate([[0.0], w, [0.0]])
    return model.project(lambda x: np.interp(x, grid.nodes, vals))


def static_stabilizability_verdict(analysis, psi):
    """NOT_STABILIZABLE (with witness), STABILIZABLE or INCONCLUSIVE."""
    analysis.check_coverage()
    psi = np.asarray(psi, dtype=float)
    scale = math.sqrt(float(psi @ np.linalg.lstsq(analysis.gram, psi, rcond=None)[0])) \
        if analysis.representation == "fem" else float(np.linalg.norm(psi))
    if scale == 0.0:
        scale = 1.0
    beta = analysis.products(psi)
    ev = analysis.eigenvalues
    n_neg = int(np.sum(ev <= 0))
    orth = np.abs(beta[:n_neg]) / scale
    if n_neg == 0:
        return Verdict(STABILIZABLE, orthogonality=orth, reason="no nonpositive eigenvalues")
    doubtful = None
    for group in analysis.clusters():
        k = group[0]
        if ev[k] > 0:
            break
        if len(group) > 1:
            w = find_orthogonal_eigenfunction(analysis, psi, k + 1)
            return Verdict(NOT_STABILIZABLE, float(ev[k]), k + 1, w, orth,
                           f"eigenvalue {ev[k]:.6g} has multiplicity {len(group)}")
        if orth[k] < ORTH_EXACT:
            return Verdict(NOT_STABILIZABLE, float(ev[k]), k + 1, analysis.vectors[:, k].copy(),
                           orth, f"eigenfunction {k + 1} is orthogonal to the actuator")
        if orth[k] <= ORTH_BAND and doubtful is None:
            doubtful = k
    if doubtful is not None:
        return Verdict(INCONCLUSIVE, float(ev[doubtful]), doubtful + 1, None, orth,
                       f"|(e_{doubtful + 1}, Psi)| = {orth[doubtful]:.3g} within the tolerance band")
    return Verdict(STABILIZABLE, orthogonality=orth,
                   reason="nonpositive eigenvalues simple and not orthogonal to the actuator")


@dataclass
class KalmanResult:
    direct: float
    closed_form: float
    controllable: bool

    @property
    def relative_error(self):
        if self.closed_form == 0.0:
            return abs(self.direct)
        return abs(self.direct - self.closed_form) / abs(self.closed_form)


def kalman_matrix(eigenvalues, psi_coeffs):
    a = np.asarray(eigenvalues, dtype=float)
    b = np.asarray(psi_coeffs, dtype=float)
    return b[:, None] * a[:, None] ** np.arange(len(a))[None, :]


def kalman_controllability(eigenvalues, psi_coeffs):
    """det [B | AB | ... | A^(n-1) B] for A = diag(eigenvalues), B = psi_coeffs,
    directly and as prod(beta) * prod_{i<j} (alpha_j - alpha_i)."""
    a = np.asarray(eigenvalues, dtype=float)
    b = np.asarray(psi_coeffs, dtype=float)
    if a.ndim != 1 or len(a) < 1 or a.shape != b.shape:
        raise PreconditionError("need matching nonempty eigenvalue and coefficient vectors")
    diffs = a[None, :] - a[:, None]
    iu = np.triu_indices(len(a), 1)
    if np.any(diffs[iu] == 0.0):
        raise PreconditionError("eigenvalues must be pairwise distinct")
    direct = float(np.linalg.det(kalman_matrix(a, b)))
    closed = float(np.prod(b) * np.prod(diffs[iu]))
    return KalmanResult(direct, closed, closed != 0.0)


def verify_lower_bound(system, witness, act, control, horizon, rate, dt=1e-3, orth_tol=1e-8):
    """Ratios ||y(t)|| / (exp(-rate t) ||y0||) under an arbitrary magnitude u(t) on 1_omega.

    The witness component evolves on its own, so the ratio never drops below 1
    beyond discretization error.
    """
    w = np.asarray(witness, dtype=float)
    load = system.load(act)
    nw = float(system.norm_h(w))
    if abs(float(load @ w)) > orth_tol * nw * math.sqrt(act.r):
        raise PreconditionError("witness is not orthogonal to the actuator")
    traj = simulate_controlled(system, w, lambda t: (float(control(t)), act), horizon, dt)
    ratio = traj.l2_norm / (np.exp(-rate * (traj.t - traj.t[0])) * nw)
    return traj.t, ratio, traj
