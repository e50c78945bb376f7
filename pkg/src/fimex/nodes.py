"""Node sets and interpolatory quadrature weights.

The block methods in this package advance ``q`` solution values that live at
the scaled nodes ``t_n + r*z_j``.  The node set is ``z_1 = -1`` followed by
the ``q - 1`` right-Radau points on ``[-1, 1]``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import comb

import mpmath
import numpy as np

MIN_Q = 2
MAX_Q = 9

# Right-Radau points on [-1, 1] (excluding z_1 = -1), q = 2..8.  Used as Newton
# seeds; the polished values are authoritative.
_TABULATED = {
    2: (1.0,),
    3: (-0.333333333333333, 1.0),
    4: (-0.689897948556636, 0.289897948556636, 1.0),
    5: (-0.822824080974592, -0.181066271118531, 0.575318923521694, 1.0),
    6: (-0.885791607770965, -0.446313972723752, 0.167180864737834,
        0.720480271312439, 1.0),
    7: (-0.920380285897062, -0.603973164252784, -0.124050379505228,
        0.390928546707272, 0.802929828402347, 1.0),
    8: (-0.941367145680430, -0.703842800663031, -0.326030619437691,
        0.117343037543100, 0.538467724060109, 0.853891342639482, 1.0),
}

_NEWTON_DPS = 50


class UnsupportedOrderError(ValueError):
    """Raised when a node count outside ``[2, 9]`` is requested."""


class DegenerateInterpolationError(ValueError):
    """Raised when interpolation nodes are not pairwise distinct."""


@dataclass(frozen=True)
class NodeSet:
    """Block-method node set on ``[-1, 1]``.

    Attributes
    ----------
    q : int
        Number of nodes.
    z : numpy.ndarray
        Strictly increasing nodes with ``z[0] == -1`` and ``z[-1] == 1``.
    """

    q: int
    z: np.ndarray

    def __post_init__(self):
        self.z.setflags(write=False)


def defining_polynomial(q: int) -> list[int]:
    """Integer monomial coefficients (ascending powers) of the polynomial
    ``d^{q-2}/dx^{q-2} [x^{q-2} (x-1)^{q-1}]`` whose zeros on ``[0, 1]`` are
    the right-Radau points."""
    m = q - 2
    # x^m (x-1)^(q-1) = sum_k C(q-1, k) (-1)^(q-1-k) x^(k+m)
    coeffs = [0] * (m + q)
    for k in range(q):
        coeffs[k + m] = comb(q - 1, k) * (-1) ** (q - 1 - k)
    for _ in range(m):
        coeffs = [p * c for p, c in enumerate(coeffs)][1:]
    return coeffs


def _newton_polish(coeffs: list[int], seeds) -> list:
    dcoeffs = [p * c for p, c in enumerate(coeffs)][1:]
    with mpmath.workdps(_NEWTON_DPS):
        poly = [mpmath.mpf(c) for c in reversed(coeffs)]
        dpoly = [mpmath.mpf(c) for c in reversed(dcoeffs)]
        tol = mpmath.mpf(10) ** (-(_NEWTON_DPS - 5))
        roots = []
        for seed in seeds:
            x = mpmath.mpf(seed)
            for _ in range(100):
                dx = mpmath.polyval(poly, x) / mpmath.polyval(dpoly, x)
                x -= dx
                if abs(dx) < tol:
                    break
            else:
                raise ArithmeticError(f"Newton failed to polish root near {seed}")
            roots.append(x)
    return roots


def _chebyshev_seeds(n: int) -> np.ndarray:
    # Chebyshev-like points clustered toward both ends; the last one is x = 1
    k = np.arange(1, n + 1)
    return 0.5 * (1.0 - np.cos(np.pi * (2 * k - 1) / (2 * n - 1)))


@lru_cache(maxsize=None)
def _radau_points(q: int) -> tuple[float, ...]:
    coeffs = defining_polynomial(q)
    if q in _TABULATED:
        seeds = [(z + 1) / 2 for z in _TABULATED[q]]
    else:
        seeds = list(_chebyshev_seeds(q - 1))
    roots = _newton_polish(coeffs, seeds)
    z = [float(2 * x - 1) for x in roots]
    z[-1] = 1.0
    if len(set(z)) != len(z) or any(b <= a for a, b in zip(z, z[1:])):
        raise ArithmeticError(f"Newton seeds for q={q} did not isolate distinct roots")
    return tuple(z)


def radau_nodes(q: int) -> NodeSet:
    """Return the node set ``{-1, right-Radau points}`` with ``q`` entries.

    Parameters
    ----------
    q : int
        Number of nodes, ``2 <= q <= 9``.

    Raises
    ------
    UnsupportedOrderError
        If ``q`` is outside the supported range.
    """
    if not isinstance(q, (int, np.integer)) or not MIN_Q <= q <= MAX_Q:
        raise UnsupportedOrderError(f"q must be an integer in [{MIN_Q}, {MAX_Q}], got {q!r}")
    z = np.array((-1.0,) + _radau_points(int(q)))
    return NodeSet(q=int(q), z=z)


def quad_weights(interp_nodes, a, b) -> np.ndarray:
    """Integrals of the Lagrange basis on ``interp_nodes``.

    Returns ``W`` with ``W[i, j] = int_{a_i}^{b_i} l_j(x) dx`` where ``l_j`` is
    the ``j``-th Lagrange basis polynomial.  ``a`` may be a scalar or one lower
    bound per row.  The weights come from the transposed Vandermonde system
    ``V^T w = moments``, solved by LU with partial pivoting.
    """
    x = np.asarray(interp_nodes, dtype=float).ravel()
    upper = np.asarray(b, dtype=float).ravel()
    lower = np.broadcast_to(np.asarray(a, dtype=float), upper.shape)
    n = x.size
    if n == 0:
        raise DegenerateInterpolationError("at least one interpolation node is required")
    if np.unique(x).size != n:
        raise DegenerateInterpolationError(f"interpolation nodes are not distinct: {x}")
    powers = np.arange(1, n + 1)
    # ascending-power moments int_a^b x^(p-1) dx = (b^p - a^p) / p
    moments = (upper[None, :] ** powers[:, None] - lower[None, :] ** powers[:, None]) / powers[:, None]
    vander = x[None, :] ** (powers[:, None] - 1)
    return np.linalg.solve(vander, moments).T
