"""Tridiagonal matrices stored by diagonals, with optional leading batch axes."""
import numpy as np
from scipy.linalg import cholesky_banded, cho_solve_banded, solve_banded


class Tridiag:
    """lower[i] = A[i+1, i], diag[i] = A[i, i], upper[i] = A[i, i+1]."""

    def __init__(self, lower, diag, upper):
        self.lower = np.asarray(lower, dtype=float)
        self.diag = np.asarray(diag, dtype=float)
        self.upper = np.asarray(upper, dtype=float)

    @property
    def n(self):
        return self.diag.shape[-1]

    def __add__(self, other):
        return Tridiag(self.lower + other.lower, self.diag + other.diag, self.upper + other.upper)

    def __sub__(self, other):
        return self + other.scale(-1.0)

    def scale(self, s):
        return Tridiag(s * self.lower, s * self.diag, s * self.upper)

    def restrict(self, lo, hi):
        """Principal submatrix on indices lo..hi-1."""
        return Tridiag(self.lower[..., lo:hi - 1], self.diag[..., lo:hi], self.upper[..., lo:hi - 1])

    def at(self, k):
        return Tridiag(self.lower[k], self.diag[k], self.upper[k])

    @property
    def T(self):
        return Tridiag(self.upper, self.diag, self.lower)

    def dot(self, y):
        out = self.diag * y
        out[..., 1:] += self.lower * y[..., :-1]
        out[..., :-1] += self.upper * y[..., 1:]
        return out

    def dense(self):
        n = self.n
        a = np.diag(self.diag)
        if n > 1:
            a += np.diag(self.lower, -1) + np.diag(self.upper, 1)
        return a

    def banded(self):
        ab = np.zeros((3, self.n))
        ab[0, 1:] = self.upper
        ab[1] = self.diag
        ab[2, :-1] = self.lower
        return ab

    def is_symmetric(self):
        return np.array_equal(self.lower, self.upper)

    def factor(self):
        return TridiagSolver(self)


class TridiagSolver:
    """Factor once, solve many times. Cholesky when SPD, banded LU otherwise."""

    def __init__(self, mat):
        self.n = mat.n
        self._chol = None
        self._ab = None
        if mat.is_symmetric():
            upper_form = np.zeros((2, mat.n))
            upper_form[0, 1:] = mat.upper
            upper_form[1] = mat.diag
            try:
                self._chol = cholesky_banded(upper_form)
            except np.linalg.LinAlgError:
                self._chol = None
        if self._chol is None:
            self._ab = mat.banded()

    def solve(self, rhs):
        if self._chol is not None:
            return cho_solve_banded((self._chol, False), rhs, check_finite=False)
        return solve_banded((1, 1), self._ab, rhs, check_finite=False)
