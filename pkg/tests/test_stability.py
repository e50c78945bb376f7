import cmath
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fimex.stability import (
    Grid, amplification, region_S, region_S_hat, region_S_tilde, spectral_radius, wedge_samples,
)
from fimex.tableaux import build_propagator

SMALL = Grid(-4, 2, -3, 3, 61, 61)


def test_spectral_radius_examples():
    assert spectral_radius(np.eye(4)) == pytest.approx(1.0)
    assert spectral_radius(np.triu(np.ones((4, 4)), 1)) == 0.0
    assert spectral_radius(np.array([[0, 1], [0, 0.5]])) == pytest.approx(0.5)


def test_spectral_radius_rejects_nonfinite():
    with pytest.raises(ValueError):
        spectral_radius(np.array([[np.nan, 0], [0, 1]]))


@pytest.mark.parametrize("q", [2, 3, 4, 5])
@pytest.mark.parametrize("kappa", [0, 1, 3])
def test_origin_is_rank_one_projection(q, kappa):
    t = build_propagator(q, "radau-star")
    M = amplification(0, 0, t, kappa)
    np.testing.assert_allclose(M, np.linalg.matrix_power(t.A_tilde, kappa) @ t.A, atol=1e-14)
    assert spectral_radius(M) == pytest.approx(1.0, abs=1e-14)


def test_kappa_zero_is_propagator():
    t = build_propagator(4, "radau")
    z1, z2 = -2 + 1j, 0.5 - 0.3j
    q = t.q
    M_prop = np.linalg.solve(np.eye(q) - z1 / 2 * t.B1, t.A + z2 / 2 * t.B2)
    np.testing.assert_array_equal(amplification(z1, z2, t, 0), M_prop)


def test_q2_eigenvalues():
    t = build_propagator(2, "radau")
    z1, z2 = -1.5 + 0.7j, 0.2 - 1.1j
    ev = np.sort_complex(np.linalg.eigvals(amplification(z1, z2, t, 0)))
    np.testing.assert_allclose(ev, np.sort_complex([0, (1 + z2) / (1 - z1)]), atol=1e-14)


def test_l_stability_q3():
    assert spectral_radius(amplification(-1e8, 0, build_propagator(3), 0)) <= 1e-6


@settings(max_examples=60, deadline=None)
@given(st.complex_numbers(max_magnitude=20), st.complex_numbers(max_magnitude=20),
       st.integers(2, 5), st.integers(0, 2))
def test_conjugate_symmetry(z1, z2, q, kappa):
    t = build_propagator(q, "radau-star")
    try:
        a = spectral_radius(amplification(z1, z2, t, kappa))
        b = spectral_radius(amplification(z1.conjugate(), z2.conjugate(), t, kappa))
    except ArithmeticError:
        return
    assert a == pytest.approx(b, rel=1e-12, abs=1e-12)


def test_region_S_forward_euler_disk():
    t = build_propagator(2, "radau")
    scan = region_S(0, t, 0, SMALL)
    pts = SMALL.points()
    inside = np.abs(1 + pts) <= 1 - 1e-9
    outside = np.abs(1 + pts) >= 1 + 1e-9
    assert scan.mask[inside].all() and not scan.mask[outside].any()


def test_region_S_shifted_disk():
    t = build_propagator(2, "radau")
    g = Grid(-9, 9, -9, 9, 91, 91)
    scan = region_S(-6, t, 0, g)
    r = np.abs(1 + g.points())
    assert scan.mask[r <= 7 - 1e-9].all() and not scan.mask[r >= 7 + 1e-9].any()
    assert all(np.allclose(np.abs(1 + seg), 7, atol=0.3) for seg in scan.contours)


def test_deep_stable_window_is_all_true():
    scan = region_S(-3, build_propagator(3), 0, Grid(-0.1, 0.1, -0.1, 0.1, 5, 5))
    assert scan.mask.all()


def test_hat_equals_S_for_real_z1():
    t = build_propagator(3, "radau-star")
    np.testing.assert_array_equal(region_S(-2, t, 1, SMALL).mask, region_S_hat(-2, t, 1, SMALL).mask)


def test_hat_is_subset_of_S():
    t = build_propagator(3, "radau-star")
    z1 = 2 * cmath.exp(0.8j * math.pi)
    hat = region_S_hat(z1, t, 1, SMALL).mask
    assert not (hat & ~region_S(z1, t, 1, SMALL).mask).any()


def test_q4_star_imaginary_z1_contains_origin():
    scan = region_S_hat(3j, build_propagator(4, "radau-star"), 1, SMALL)
    assert scan.mask.any() and scan.contains(0j)


def test_tilde_is_subset_of_each_sampled_hat():
    t = build_propagator(2, "radau")
    g = Grid(-3, 1, -2, 2, 21, 21)
    gammas = [0.0, 0.5, 2.0]
    tilde = region_S_tilde(0.75 * math.pi, t, 0, g, gamma_samples=gammas).mask
    for gamma in gammas:
        for w in wedge_samples(0.75 * math.pi)[0]:
            assert not (tilde & ~region_S_hat(gamma * cmath.exp(1j * w), t, 0, g).mask).any()


def test_tilde_negative_axis_is_euler_disk():
    t = build_propagator(2, "radau")
    g = Grid(-3, 1, -2, 2, 41, 41)
    scan = region_S_tilde(math.pi, t, 0, g, gamma_samples=[0.0, 1.0, 10.0])
    r = np.abs(1 + g.points())
    assert scan.mask[r <= 1 - 1e-9].all() and not scan.mask[r >= 1 + 1e-9].any()


@pytest.mark.parametrize("kappa", [0, 1, 2])
def test_tilde_contains_origin_for_wide_wedge(kappa):
    g = Grid(-0.5, 0.5, -0.5, 0.5, 5, 5)
    scan = region_S_tilde(math.pi / 2, build_propagator(3, "radau-star"), kappa, g,
                          gamma_samples=[0.0, 0.1, 1.0, 10.0, 1000.0])
    assert scan.contains(0j)


def test_wedge_sampling():
    rays, gammas = wedge_samples(math.pi / 2)
    assert len(rays) == 5 and rays[0] == math.pi / 2 and rays[-1] == math.pi
    assert gammas[0] == 0 and len(gammas) == 61 and gammas[-1] == pytest.approx(1e3)
    with pytest.raises(ValueError):
        wedge_samples(4.0)


def test_pole_marks_grid_unstable():
    # q = 2: I - w1 B1 is singular at z1 = 1
    scan = region_S(1.0, build_propagator(2), 0, Grid(-1, 1, -1, 1, 3, 3))
    assert np.isinf(scan.rho).all() and not scan.mask.any()


@pytest.mark.parametrize("bad", [dict(nx=1), dict(ny=0), dict(re_min=1, re_max=1)])
def test_empty_grid_rejected(bad):
    with pytest.raises(ValueError):
        Grid(**bad)


def test_scan_is_deterministic_under_threads(monkeypatch):
    t = build_propagator(4, "radau-star")
    a = region_S_hat(3j, t, 1, Grid(-8, 8, -8, 8, 41, 150)).rho
    monkeypatch.setenv("FIMEX_THREADS", "4")
    b = region_S_hat(3j, t, 1, Grid(-8, 8, -8, 8, 41, 150)).rho
    np.testing.assert_array_equal(a, b)
