import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import eigh

from movact.errors import ConfigError, GeometryError
from movact.model import (ActuatorWindow, CoefficientField, FemGrid, SpectralModel, Tabulated,
                          fem_load_derivative, fem_load_vector, indicator_coeffs, sinpi,
                          spectral_coeffs_of_indicator)


def trapezoid(f, a, b, n):
    x = np.linspace(a, b, n)
    y = f(x)
    return (b - a) / (n - 1) * (y.sum() - 0.5 * (y[0] + y[-1]))


def test_sinpi_exact_zeros():
    assert np.all(sinpi(np.arange(-5, 6)) == 0.0)
    assert sinpi(0.5) == 1.0
    x = np.linspace(-3, 3, 101)
    np.testing.assert_allclose(sinpi(x), np.sin(np.pi * x), atol=1e-15)


def test_eigenvalues_and_orthonormality():
    m = SpectralModel(0.1, 12)
    assert np.all(np.diff(m.eigenvalues) > 0) and m.eigenvalues[0] > 0
    np.testing.assert_allclose(m.eigenvalues, 1 + 0.1 * (np.arange(1, 13) * np.pi) ** 2)
    x, w, e, _ = m.quadrature()
    np.testing.assert_allclose(e.T @ (w[:, None] * e), np.eye(12), atol=1e-12)


def test_indicator_mode_two_vanishes_exactly():
    m = SpectralModel(0.1, 4)
    c = spectral_coeffs_of_indicator(m, ActuatorWindow(0.5, 0.04))
    assert c[1] == 0.0 and c[3] == 0.0
    assert c[0] > 0


def test_indicator_full_domain():
    m = SpectralModel(0.1, 1)
    c = spectral_coeffs_of_indicator(m, ActuatorWindow(0.5, 1.0))
    assert c[0] == pytest.approx(math.sqrt(2) * 2 / math.pi, rel=1e-15)


def test_indicator_coefficient_against_quadrature():
    expected = trapezoid(lambda x: math.sqrt(2) * np.sin(np.pi * x), 0.28, 0.32, 100_000)
    m = SpectralModel(0.1, 1)
    got = spectral_coeffs_of_indicator(m, ActuatorWindow(0.3, 0.04))[0]
    assert abs(got - expected) < 1e-10


def test_normalized_indicator_divides_by_sqrt_r():
    m = SpectralModel(0.1, 5)
    act = ActuatorWindow(0.3, 0.04)
    np.testing.assert_allclose(spectral_coeffs_of_indicator(m, act, normalized=True),
                               spectral_coeffs_of_indicator(m, act) / 0.2, rtol=1e-14)


def test_inadmissible_window_is_an_error():
    m = SpectralModel(0.1, 5)
    with pytest.raises(GeometryError):
        spectral_coeffs_of_indicator(m, ActuatorWindow(0.01, 0.04))
    with pytest.raises(GeometryError):
        fem_load_vector(FemGrid(h=0.01), ActuatorWindow(0.99, 0.04))
    with pytest.raises(GeometryError):
        ActuatorWindow(0.5, 1.5)


def test_normalized_indicator_unit_norm():
    act = ActuatorWindow(0.37, 0.04)
    g = FemGrid(h=0.0025)
    load = fem_load_vector(g, act) / math.sqrt(act.r)
    # (1^, 1^) = sum_i (1^, phi_i) / sqrt(r) since the hats sum to one
    assert abs(load.sum() / math.sqrt(act.r) - 1.0) < 1e-12
    # spectral Parseval sum converges to 1 from below
    j = np.arange(1, 200_001)
    sq = np.cumsum((indicator_coeffs(j, act.center, act.r) / math.sqrt(act.r)) ** 2)
    assert np.all(np.diff(sq) >= 0)
    assert 1.0 - 1e-4 < sq[-1] <= 1.0 + 1e-12


def test_load_one_element_wide_centered_on_node():
    g = FemGrid(h=0.01)
    i = 40
    act = ActuatorWindow(g.nodes[i], g.h)
    load = fem_load_vector(g, act)
    # oracle: brute-force midpoint quadrature of the three affected hats
    n = 1_000_000
    x = act.left + (np.arange(n) + 0.5) * act.r / n
    for k in (i - 1, i, i + 1):
        ref = np.sum(np.maximum(0.0, 1.0 - np.abs(x - g.nodes[k]) / g.h)) * act.r / n
        assert abs(load[k] - ref) < 1e-12
    assert load[i] == pytest.approx(0.75 * g.h, rel=1e-12)
    assert load[i - 1] == pytest.approx(g.h / 8, rel=1e-12)
    assert np.count_nonzero(load) == 3


def test_load_covering_mesh_is_mass_times_ones():
    g = FemGrid(h=0.05)
    load = fem_load_vector(g, ActuatorWindow(0.5, 1.0))
    np.testing.assert_allclose(load, g.mass.dot(np.ones(len(g.nodes))), atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.01, 0.5), st.floats(0, 1))
def test_load_sums_to_width(r, s):
    g = FemGrid(h=0.0025)
    c = 0.5 * r + s * (1 - r)
    load = fem_load_vector(g, ActuatorWindow(c, r))
    assert abs(load.sum() - r) < 1e-13


@settings(max_examples=60, deadline=None)
@given(st.floats(0.01, 0.3), st.floats(0.05, 0.95))
def test_load_derivative_matches_finite_difference(r, s):
    g = FemGrid(h=0.01)
    c = 0.5 * r + 1e-6 + s * (1 - r - 2e-6)
    d = fem_load_derivative(g, ActuatorWindow(c, r))
    step = 1e-7
    fd = (fem_load_vector(g, ActuatorWindow(c + step, r))
          - fem_load_vector(g, ActuatorWindow(c - step, r))) / (2 * step)
    assert np.max(np.abs(d - fd)) < 1e-6
    assert abs(d.sum()) < 1e-13


def test_load_derivative_symmetric_window():
    g = FemGrid(h=0.01)
    d = fem_load_derivative(g, ActuatorWindow(g.nodes[30], 0.047))
    assert d[30] == 0.0


def test_load_derivative_needs_strict_interior():
    g = FemGrid(h=0.01)
    with pytest.raises(GeometryError):
        fem_load_derivative(g, ActuatorWindow(0.02, 0.04))


def test_mass_and_stiffness_properties():
    g = FemGrid(h=0.1)
    m, k = g.mass.dense(), g.stiffness.dense()
    assert np.allclose(m, m.T) and np.all(np.linalg.eigvalsh(m) > 0)
    assert np.allclose(k, k.T) and np.min(np.linalg.eigvalsh(k)) > -1e-12
    # row sums are the measures of the hat supports (halved at the ends)
    np.testing.assert_allclose(m.sum(axis=1), np.r_[g.h / 2, np.full(len(g.nodes) - 2, g.h), g.h / 2])


def test_fem_eigenvalues_converge_at_order_two():
    nu = 0.1
    exact = 1 + nu * (np.arange(1, 6) * np.pi) ** 2
    errs = []
    for ne in (32, 64, 128):
        g = FemGrid(n_elements=ne)
        ev = eigh(nu * g.stiffness_interior().dense() + g.mass_interior().dense(),
                  g.mass_interior().dense(), eigvals_only=True, subset_by_index=[0, 4])
        errs.append(np.abs(ev - exact))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders >= 1.9)


def test_spectral_and_fem_norms_agree_at_order_two():
    f = lambda x: np.sin(np.pi * x) + 0.5 * np.sin(3 * np.pi * x)
    m = SpectralModel(0.1, 8)
    spec = float(m.norm_h(m.project(f)))
    assert spec == pytest.approx(math.sqrt(0.625), rel=1e-12)
    errs = [abs(FemGrid(n_elements=ne).norm_h(f(FemGrid(n_elements=ne).x_interior)) - spec)
            for ne in (16, 32, 64, 128)]
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders >= 1.9)


def test_grid_must_divide_interval():
    with pytest.raises(ConfigError):
        FemGrid(h=0.3)


def test_presets_and_constant_field():
    cf = CoefficientField.from_spec("-3-2|sin(t+x)|", "|cos(t+x)|")
    t, x = 0.3, 0.4
    assert cf.reaction(t, x) == pytest.approx(-3 - 2 * abs(math.sin(t + x)))
    assert cf.convection_at(t, x) == pytest.approx(abs(math.cos(t + x)))
    assert not cf.autonomous
    c = CoefficientField.from_spec(-5.0, 0.0)
    assert c.autonomous and c.reaction_const == -5.0
    with pytest.raises(ConfigError):
        CoefficientField.from_spec("no-such-preset")


def test_tabulated_field_is_clamped(tmp_path):
    p = tmp_path / "tab.json"
    p.write_text(json.dumps({"t": [0, 1], "x": [0, 1], "values": [[0, 1], [2, 3]]}))
    tab = Tabulated.load(p)
    assert tab(0.5, 0.5) == pytest.approx(1.5)
    assert tab(5.0, -1.0) == pytest.approx(2.0)
    cf = CoefficientField.from_spec("tab.json", base_dir=tmp_path)
    assert cf.reaction(0.0, 1.0) == pytest.approx(1.0)
