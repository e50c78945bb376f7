import json
import math

import numpy as np
import pytest

from fimex.tableaux import Variant, build_iterator, build_propagator, export_coeffs, import_coeffs, to_glm

S6 = math.sqrt(6.0)

# published q = 2, 3, 4 coefficient tables
GOLDEN = {
    2: {
        "B1": [[0, 0], [0, 2]],
        "B2": [[0, 0], [0, 2]],
        "B2*": [[0, 0], [-1, 3]],
    },
    3: {
        "B1": [[0, 0, 0], [0, 5 / 6, -1 / 6], [0, 3 / 2, 1 / 2]],
        "B2": [[0, 0, 0], [0, -1 / 6, 5 / 6], [0, -3 / 2, 7 / 2]],
        "B2*": [[0, 0, 0], [8 / 27, -11 / 18, 53 / 54], [4, -15 / 2, 11 / 2]],
    },
    4: {
        "B1": [[0, 0, 0, 0],
               [0, (88 - 7 * S6) / 180, (296 - 169 * S6) / 900, 2 * (-2 + 3 * S6) / 225],
               [0, (296 + 169 * S6) / 900, (88 + 7 * S6) / 180, -2 * (2 + 3 * S6) / 225],
               [0, 8 / 9 - 1 / (3 * S6), (16 + S6) / 18, 2 / 9]],
        "B2": [[0, 0, 0, 0],
               [0, (-272 + 113 * S6) / 180, (296 - 169 * S6) / 900, 2 * (223 - 72 * S6) / 225],
               [0, (296 + 169 * S6) / 900, (-272 - 113 * S6) / 180, 2 * (223 + 72 * S6) / 225],
               [0, (-56 + 41 * S6) / 18, (-56 - 41 * S6) / 18, 74 / 9]],
        "B2*": [[0, 0, 0, 0],
                [(-1091 + 424 * S6) / 500, (-1198 + 517 * S6) / 360, (32402 - 14053 * S6) / 9000,
                 (12193 - 4152 * S6) / 4500],
                [(-1091 - 424 * S6) / 500, (32402 + 14053 * S6) / 9000, (-1198 - 517 * S6) / 360,
                 (12193 + 4152 * S6) / 4500],
                [-16, 5 * (8 + 37 * S6) / 18, -5 * (-8 + 37 * S6) / 18, 122 / 9]],
    },
}


@pytest.mark.parametrize("q", [2, 3, 4])
@pytest.mark.parametrize("variant", list(Variant))
def test_golden_tables(q, variant):
    t = build_propagator(q, variant)
    g = GOLDEN[q]
    np.testing.assert_allclose(t.B1, g["B1"], atol=1e-12, rtol=0)
    np.testing.assert_allclose(t.B2, g["B2*" if variant is Variant.RADAU_STAR else "B2"], atol=1e-12, rtol=0)
    A = np.zeros((q, q))
    A[:, -1] = 1
    At = np.zeros((q, q))
    At[:, 0] = 1
    np.testing.assert_array_equal(t.A, A)
    np.testing.assert_array_equal(t.A_tilde, At)
    np.testing.assert_array_equal(t.B_it, t.B1)


@pytest.mark.parametrize("q", range(2, 10))
def test_consistency_rows(q):
    # constants are integrated exactly: rows of B1 sum to z_j + 1, rows of B2 to 2 (Radau* exact too)
    for v in Variant:
        t = build_propagator(q, v)
        np.testing.assert_allclose(t.B1.sum(axis=1), t.z + 1, atol=1e-11)
        np.testing.assert_allclose(t.B2.sum(axis=1), t.z + 1, atol=1e-9)


@pytest.mark.parametrize("q", range(3, 8))
def test_iterator_first_row_zero(q):
    A_tilde, B_it = build_iterator(q)
    assert not B_it[0].any()
    assert not B_it[:, 0].any()


def test_tableau_is_read_only():
    t = build_propagator(3)
    with pytest.raises(ValueError):
        t.B1[1, 1] = 0.0


@pytest.mark.parametrize("q,kappa,radau,star", [
    (2, 0, 1, 1), (3, 0, 2, 3), (3, 2, 3, 3), (4, 1, 4, 5), (5, 2, 6, 7), (5, 5, 7, 7),
])
def test_order_formula(q, kappa, radau, star):
    assert build_propagator(q, "radau").order(kappa) == radau
    assert build_propagator(q, "radau-star").order(kappa) == star


@pytest.mark.parametrize("fmt", ["json", "csv"])
@pytest.mark.parametrize("q", [2, 5, 9])
def test_export_round_trip_is_bit_exact(fmt, q):
    t = build_propagator(q, "radau-star")
    back = import_coeffs(export_coeffs(t, fmt), fmt)
    for name, m in t.matrices().items():
        np.testing.assert_array_equal(back[name], m)
    np.testing.assert_array_equal(back["z"], t.z)


def test_export_json_fields():
    payload = json.loads(export_coeffs(build_propagator(3)))
    assert {"q", "variant", "z", "A", "B1", "B2", "A_tilde", "B_it"} <= payload.keys()


@pytest.mark.parametrize("q", [2, 3, 4])
def test_glm_shapes(q):
    g = to_glm(build_propagator(q))
    assert g.U.shape == (q, 3 * q)
    assert g.V.shape == (3 * q, 3 * q)
    assert g.Bg1.shape == g.Bg2.shape == (3 * q, q)


def test_glm_q2_blocks():
    g = to_glm(build_propagator(2, "radau"))
    # input derivatives of f1 are never used, so their block in U is zero
    np.testing.assert_array_equal(g.U, [[0, 1, 0, 0, 0, 0], [0, 1, 0, 0, 0, 2]])
    np.testing.assert_array_equal(g.V[:2], g.U)
    np.testing.assert_array_equal(g.A1, build_propagator(2).B1)
    assert not g.A2.any()


def test_glm_step_matches_propagator_q3():
    from fimex.integrator import BlockState, propagate
    from fimex.problems import DahlquistProblem

    lam1, lam2, r = -1.0, 0.3, 0.05
    t = build_propagator(3, "radau")
    g = to_glm(t)
    y = np.array([1.0, 0.9, 0.8])
    aug = np.concatenate([y, r * lam1 * y, r * lam2 * y])
    Y = np.linalg.solve(np.eye(3) - r * lam1 * g.A1, g.U @ aug)
    out = g.V @ aug + r * g.Bg1 @ (lam1 * Y) + r * g.Bg2 @ (lam2 * Y)
    prop = propagate(BlockState(0.0, r, y[:, None]), t, DahlquistProblem(lam1, lam2).partitioned())
    np.testing.assert_allclose(Y, prop.y[:, 0], atol=1e-14)
    np.testing.assert_allclose(out[:3], Y, atol=1e-14)
