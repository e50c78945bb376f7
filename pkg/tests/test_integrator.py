from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fimex.integrator import (
    Dense, DiagonalLinear, LinearlyImplicitJacobian, MethodSpec, NewtonDivergence, NewtonMode,
    PartitionedProblem, Semilinear, SolverConfig, integrate, propagate, start,
)
from fimex.nodes import quad_weights, radau_nodes
from fimex.problems import DahlquistProblem, kdv_problem
from fimex.stability import amplification
from fimex.tableaux import build_propagator

ALL_METHODS = [MethodSpec(v, q, k) for v in ("radau", "radau-star") for q in (3, 4, 5) for k in (0, 1, 2)]


def radau_iia_oracle(lam, y0, h, n, s):
    """Plain Butcher-form Radau IIA with ``s`` stages on ``y' = lam y``."""
    c = (radau_nodes(s + 1).z[1:] + 1) / 2
    a = quad_weights(c, 0.0, c)
    b = a[-1]
    y = complex(y0)
    for _ in range(n):
        k = np.linalg.solve(np.eye(s) - h * lam * a, lam * y * np.ones(s))
        y = y + h * b @ k
    return y


@lru_cache(maxsize=None)
def generic_reference():
    return integrate(generic_problem(), MethodSpec("radau-star", 5, 2), (0.0, 1.0), 600).y


def generic_problem():
    def f1(ts, Y):
        return np.stack([-Y[:, 0] * Y[:, 1] - 0.5 * Y[:, 0], np.sin(Y[:, 0]) - Y[:, 1]], axis=1)

    def f2(ts, Y):
        return np.stack([np.cos(ts) * Y[:, 1], 0.3 * Y[:, 0] ** 2 - 0.2 * Y[:, 1]], axis=1)

    p = PartitionedProblem(2, f1, f2, vectorized=True)
    p.y0 = np.array([1.0, 0.5])
    return p


@pytest.mark.parametrize("q", [2, 3, 4])
def test_reduces_to_radau_iia(q):
    lam = -2 + 1j
    p = DahlquistProblem(lam, 0.0).partitioned()
    res = integrate(p, MethodSpec("radau", q, 0), (0.0, 1.0), 16)
    ref = radau_iia_oracle(lam, 1.0, 1.0 / 16, 16, q - 1)
    assert abs(res.y[0] - ref) <= 1e-12


@pytest.mark.parametrize("variant", ["radau", "radau-star"])
@pytest.mark.parametrize("q", [2, 3, 5])
def test_propagator_matches_amplification_matrix(variant, q):
    # two routes to one propagator step on the partitioned Dahlquist equation
    l1, l2, r = -3 + 2j, 0.7 - 0.4j, 0.05
    t = build_propagator(q, variant)
    p = DahlquistProblem(l1, l2).partitioned()
    rng = np.random.default_rng(q)
    y = (rng.normal(size=(q, 1)) + 1j * rng.normal(size=(q, 1)))
    from fimex.integrator import BlockState
    out = propagate(BlockState(t_anchor=0.0, r=r, y=y), t, p)
    M = amplification(2 * r * l1, 2 * r * l2, t, 0)
    np.testing.assert_allclose(out.y[:, 0], M @ y[:, 0], atol=1e-13)


@pytest.mark.parametrize("m", ALL_METHODS, ids=lambda m: m.label)
def test_orders_on_generic_problem(m):
    p = generic_problem()
    ref = generic_reference()
    ns = [4, 8, 16]
    errs = [np.max(np.abs(integrate(p, m, (0.0, 1.0), n).y - ref)) for n in ns]
    slope = np.polyfit(np.log(1.0 / np.array(ns)), np.log(errs), 1)[0]
    assert abs(slope - m.order) < 0.5, (m.label, errs)


def test_start_block_lands_on_nodes():
    t = build_propagator(4)
    p = DahlquistProblem(-1.0, 0.0).partitioned()
    s = start(1.0, 0.0, 0.1, t, p)
    np.testing.assert_allclose(s.times(t.z), 0.1 * (t.z + 1))
    exact = np.exp(-0.1 * (t.z + 1))
    np.testing.assert_allclose(s.y[:, 0], exact, atol=1e-5)
    # with f2 = 0 the starting block is the collocation solution itself
    assert abs(s.y[-1, 0] - radau_iia_oracle(-1.0, 1.0, 0.2, 1, 3)) < 1e-14


@pytest.mark.parametrize("kappa", [1, 2, 3])
def test_starting_iterations_raise_order(kappa):
    t = build_propagator(4)
    p = DahlquistProblem(0.0, 1.0).partitioned()
    errs = []
    for r in (0.1, 0.05, 0.025):
        s = start(1.0, 0.0, r, t, p, kappa_start=kappa)
        errs.append(np.max(np.abs(s.y[:, 0] - np.exp(s.times(t.z)))))
    ratios = np.log2(np.array(errs[:-1]) / errs[1:])
    np.testing.assert_allclose(ratios, kappa + 1, atol=0.5)


def test_diagonal_structure_matches_dense_newton():
    kdv = kdv_problem(32)
    dense = PartitionedProblem(32, kdv._f1, kdv._f2, jacobian_f1=lambda t, y: np.diag(kdv.L),
                               implicit_structure=Dense(), vectorized=True)
    m = MethodSpec("radau-star", 4, 1)
    a = integrate(kdv, m, (0.0, 0.2), 20, y0=kdv.y0).y
    b = integrate(dense, m, (0.0, 0.2), 20, y0=kdv.y0).y
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_semilinear_adapter():
    L = np.array([[-2.0, 1.0], [0.0, -3.0]])
    p = Semilinear(L, lambda t, y: np.array([np.sin(t), y[0] * y[1]]))
    y = np.array([0.3, -0.2])
    np.testing.assert_allclose(p.eval_f1(0.1, y), L @ y)


def test_parallel_matches_serial():
    p = generic_problem()
    m = MethodSpec("radau-star", 4, 2)
    a = integrate(p, m, (0.0, 1.0), 20).y
    b = integrate(p, m, (0.0, 1.0), 20, cfg=SolverConfig(parallel=True, threads=3)).y
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_simplified_newton_agrees():
    p = generic_problem()
    m = MethodSpec("radau", 4, 1)
    a = integrate(p, m, (0.0, 1.0), 20).y
    b = integrate(p, m, (0.0, 1.0), 20, cfg=SolverConfig(newton_mode=NewtonMode.SIMPLIFIED)).y
    np.testing.assert_allclose(a, b, atol=1e-11)


def test_newton_divergence_is_reported():
    # y' = y^2 from y0 = 1 blows up at t = 1; a single huge block has no nearby root
    p = PartitionedProblem(1, lambda t, y: y ** 2, lambda t, y: 0 * y)
    with pytest.raises(NewtonDivergence) as info:
        integrate(p, MethodSpec("radau", 3, 0), (0.0, 50.0), 1, y0=[1.0],
                  cfg=SolverConfig(newton_max_iters=30))
    assert info.value.step is not None


@pytest.mark.parametrize("bad", [0, -3])
def test_rejects_nonpositive_steps(bad):
    with pytest.raises(ValueError):
        integrate(generic_problem(), MethodSpec("radau", 3, 0), (0.0, 1.0), bad)


def test_rejects_negative_kappa():
    with pytest.raises(ValueError):
        MethodSpec("radau", 3, -1)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=2, max_size=2))
def test_linearly_implicit_splitting_sums_to_rhs(y):
    y = np.array(y)

    def rhs(t, v):
        return np.array([v[1], (1 - v[0] ** 2) * v[1] - v[0]])

    def jac(t, v):
        return np.array([[0.0, 1.0], [-2 * v[0] * v[1] - 1, 1 - v[0] ** 2]])

    p = LinearlyImplicitJacobian(2, rhs, jac)
    p.refresh(0.0, np.array([0.4, -0.1]))
    total = p.eval_f1(0.0, y) + p.eval_f2(0.0, y)
    np.testing.assert_allclose(total, rhs(0.0, y), rtol=1e-13, atol=1e-13)


def test_complex_dahlquist_all_methods_converge():
    p = DahlquistProblem(-1 + 0.5j, 0.4 - 0.3j)
    exact = p.exact(2.0)
    for m in ALL_METHODS:
        e = [abs(integrate(p.partitioned(), m, (0.0, 2.0), n).y[0] - exact[0]) for n in (6, 12)]
        assert e[1] < e[0]


def test_diagonal_structure_type():
    assert isinstance(kdv_problem(16).implicit_structure, DiagonalLinear)
