import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from movact.errors import PreconditionError
from movact.model import ActuatorWindow, CoefficientField, FemGrid
from movact.simulate import FemSystem
from movact.stabilizability import (INCONCLUSIVE, NOT_STABILIZABLE, STABILIZABLE, EigenAnalysis,
                                    actuator_functional, analyze, find_orthogonal_eigenfunction,
                                    kalman_controllability, static_stabilizability_verdict,
                                    verify_lower_bound)

NU = 0.1
MID = ActuatorWindow(0.5, 0.04)


def double_eigenvalue_analysis():
    return EigenAnalysis.synthetic([-2.0, -1.0, -1.0, 1.0, 2.0, 3.0])


def test_example2_not_stabilizable():
    an = analyze(NU, -5.0)
    v = static_stabilizability_verdict(an, actuator_functional(an, MID))
    assert v.kind == NOT_STABILIZABLE
    assert v.index == 2
    assert v.eigenvalue == pytest.approx(4 * math.pi ** 2 * NU - 5, rel=1e-14)
    w = np.zeros(64)
    w[1] = 1.0
    np.testing.assert_array_equal(v.witness, w)


def test_example2_fem_agrees():
    an = analyze(NU, lambda x: np.full_like(x, -5.0), h=0.005, count=12)
    v = static_stabilizability_verdict(an, actuator_functional(an, MID))
    assert v.kind == NOT_STABILIZABLE and v.index == 2
    assert v.eigenvalue == pytest.approx(4 * math.pi ** 2 * NU - 5, rel=1e-3)
    assert an.residual(v.witness, v.eigenvalue) <= 1e-8
    psi = actuator_functional(an, MID)
    assert abs(v.witness @ psi) / np.linalg.norm(psi) <= 1e-10
    d = v.to_dict(an, 4)
    assert abs(abs(d["witness_coeffs"][1]) - 1) < 1e-3 and abs(d["witness_coeffs"][0]) < 1e-8


def test_positive_reaction_stabilizable():
    an = analyze(NU, 1.0)
    assert an.j0 == 1
    assert static_stabilizability_verdict(an, actuator_functional(an, MID)).kind == STABILIZABLE


def test_irrational_endpoints_stabilizable():
    act = ActuatorWindow(0.5 + math.sqrt(2) / 200, 0.04 + math.sqrt(2) / 100)
    an = analyze(NU, -5.0)
    v = static_stabilizability_verdict(an, actuator_functional(an, act))
    assert v.kind == STABILIZABLE
    assert np.all(v.orthogonality > 1e-6)


def test_coverage_margin():
    an = EigenAnalysis.synthetic([-3.0, -2.0, -1.0, 0.5, 1.0])
    with pytest.raises(PreconditionError):
        static_stabilizability_verdict(an, np.ones(5))


def test_inconclusive_band():
    an = EigenAnalysis.synthetic([-1.0, 1.0, 2.0, 3.0])
    v = static_stabilizability_verdict(an, np.array([1e-8, 1.0, 1.0, 1.0]))
    assert v.kind == INCONCLUSIVE and v.index == 1


def test_orthogonal_returns_unit_vector_when_beta_vanishes():
    an = double_eigenvalue_analysis()
    psi = np.array([1.0, 0.0, 3.0, 1.0, 1.0, 1.0])
    np.testing.assert_array_equal(find_orthogonal_eigenfunction(an, psi, 2), an.vectors[:, 1])


def test_orthogonal_combination_worked_instance():
    an = double_eigenvalue_analysis()
    psi = np.array([0.3, 1.0, 2.0, 1.0, 1.0, 1.0])
    w = find_orthogonal_eigenfunction(an, psi, 2)
    expected = (2 * an.vectors[:, 1] - an.vectors[:, 2]) / math.sqrt(5)
    np.testing.assert_allclose(w, expected, atol=1e-15)
    assert w @ psi == 0.0


def test_orthogonal_simple_eigenvalue_is_an_error():
    with pytest.raises(PreconditionError):
        find_orthogonal_eigenfunction(double_eigenvalue_analysis(), np.ones(6), 1)


def test_random_double_eigenvalue_witnesses():
    rng = np.random.default_rng(3)
    for _ in range(100):
        q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
        an = EigenAnalysis.synthetic([-2.0, -1.0, -1.0, 1.0, 2.0, 3.0], q)
        psi = rng.standard_normal(6)
        w = find_orthogonal_eigenfunction(an, psi, 2)
        assert abs(w @ psi) < 1e-10
        assert an.norm(w) == pytest.approx(1.0, abs=1e-12)
        assert an.residual(w, -1.0) < 1e-8
        v = static_stabilizability_verdict(an, psi)
        assert v.kind == NOT_STABILIZABLE and v.eigenvalue == -1.0


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-3, 1e3))
def test_verdict_scale_invariant(s):
    an = analyze(NU, -5.0)
    for act in (MID, ActuatorWindow(0.31, 0.04)):
        psi = actuator_functional(an, act)
        a = static_stabilizability_verdict(an, psi)
        b = static_stabilizability_verdict(an, s * psi)
        assert (a.kind, a.index) == (b.kind, b.index)


def test_kalman_unit_beta():
    res = kalman_controllability([1.0, 2.0, 3.0], [1.0, 1.0, 1.0])
    assert res.direct == pytest.approx(2.0, rel=1e-14)
    assert res.closed_form == 2.0 and res.controllable


def test_kalman_zero_beta():
    res = kalman_controllability([1.0, 2.0, 3.0], [1.0, 0.0, 1.0])
    assert res.closed_form == 0.0 and not res.controllable
    assert res.direct == 0.0


def test_kalman_repeated_eigenvalues():
    with pytest.raises(PreconditionError):
        kalman_controllability([1.0, 1.0], [1.0, 1.0])


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2 ** 32 - 1))
def test_kalman_direct_matches_closed_form(n, seed):
    rng = np.random.default_rng(seed)
    alpha = np.sort(rng.uniform(-10, 0, n))
    if n > 1 and np.min(np.diff(alpha)) < 1e-3:
        alpha = -np.linspace(10, 0.5, n)
    res = kalman_controllability(alpha, rng.uniform(0.1, 2, n))
    assert res.relative_error < 1e-10


def lower_bound_setup():
    g = FemGrid(h=0.005)
    sysm = FemSystem(g, NU, CoefficientField.constant(-5.0))
    return sysm, math.sqrt(2) * np.sin(2 * np.pi * g.x_interior), 5 - 4 * math.pi ** 2 * NU


def test_lower_bound_zero_control():
    sysm, w, rate = lower_bound_setup()
    _, ratio, _ = verify_lower_bound(sysm, w, MID, lambda t: 0.0, 2.0, -rate)
    assert np.max(np.abs(ratio - 1)) <= 1e-3


def test_lower_bound_random_control():
    sysm, w, rate = lower_bound_setup()
    rng = np.random.default_rng(0)
    amps = rng.uniform(-50, 50, 8)
    ctrl = lambda t: float(np.sum(amps * np.sin(np.arange(1, 9) * 3 * t)))
    _, ratio, traj = verify_lower_bound(sysm, w, MID, ctrl, 2.0, -rate)
    assert np.min(ratio) >= 1 - 1e-3
    assert traj.l2_norm[-1] > traj.l2_norm[0]


def test_lower_bound_rejects_non_orthogonal_witness():
    sysm, _, rate = lower_bound_setup()
    w = np.sin(np.pi * sysm.grid.x_interior)
    with pytest.raises(PreconditionError):
        verify_lower_bound(sysm, w, MID, lambda t: 0.0, 0.1, -rate)
