"""Linear stability of composite FIMEX methods on ``y' = lambda1 y + lambda2 y``.

With ``z_k = h lambda_k`` and ``h = 2r`` the propagator and iterator reduce to
``q x q`` matrices::

    M_prop = (I - w1 B1)^-1 (A + w2 B2)
    M_iter = (I - w1 B_it)^-1 (A_tilde + w2 B_it),     w_k = z_k / 2

and the composite method ``M^kappa(P(.))`` has amplification matrix
``M_iter^kappa M_prop``.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import contourpy
import numpy as np

from .tableaux import MethodTableau

STABLE_SLACK = 1e-12


class PoleError(ArithmeticError):
    """The implicit resolvent ``I - w1 B`` is singular at the requested ``z1``."""


@dataclass(frozen=True)
class Grid:
    """Rectangular sample of the ``z2`` plane."""

    re_min: float = -8.0
    re_max: float = 8.0
    im_min: float = -8.0
    im_max: float = 8.0
    nx: int = 401
    ny: int = 401

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ValueError(f"grid needs at least 2x2 samples, got {self.nx}x{self.ny}")
        if not (self.re_max > self.re_min and self.im_max > self.im_min):
            raise ValueError("grid extent is empty")

    @property
    def re(self) -> np.ndarray:
        return np.linspace(self.re_min, self.re_max, self.nx)

    @property
    def im(self) -> np.ndarray:
        return np.linspace(self.im_min, self.im_max, self.ny)

    def points(self) -> np.ndarray:
        """Complex sample points, shape ``(ny, nx)``."""
        return self.re[None, :] + 1j * self.im[:, None]

    @property
    def cell_area(self) -> float:
        return (self.re_max - self.re_min) / (self.nx - 1) * (self.im_max - self.im_min) / (self.ny - 1)

    @classmethod
    def parse(cls, text: str) -> "Grid":
        """``"re_min,re_max,im_min,im_max,nx,ny"`` or ``"n"`` (default extent)."""
        parts = [p for p in text.replace("x", ",").split(",") if p]
        if len(parts) == 1:
            return cls(nx=int(parts[0]), ny=int(parts[0]))
        if len(parts) == 6:
            a, b, c, d = (float(v) for v in parts[:4])
            return cls(a, b, c, d, int(parts[4]), int(parts[5]))
        raise ValueError(f"cannot parse grid {text!r}")


@dataclass
class RegionScan:
    """Spectral radius sampled on a grid and the derived stability mask."""

    grid: Grid
    rho: np.ndarray
    z1: tuple = ()
    label: str = ""
    contours: list = field(default_factory=list)

    @property
    def mask(self) -> np.ndarray:
        return self.rho <= 1.0 + STABLE_SLACK

    @property
    def area(self) -> float:
        return float(self.mask.sum()) * self.grid.cell_area

    def contains(self, z2: complex) -> bool:
        g = self.grid
        i = int(round((z2.imag - g.im_min) / (g.im_max - g.im_min) * (g.ny - 1)))
        j = int(round((z2.real - g.re_min) / (g.re_max - g.re_min) * (g.nx - 1)))
        if not (0 <= i < g.ny and 0 <= j < g.nx):
            raise ValueError(f"{z2} is outside the scanned grid")
        return bool(self.mask[i, j])


def _resolvent_solve(w1, B, rhs):
    q = B.shape[0]
    lhs = np.eye(q) - np.asarray(w1)[..., None, None] * B
    try:
        return np.linalg.solve(np.broadcast_to(lhs, rhs.shape[:-2] + (q, q)), rhs)
    except np.linalg.LinAlgError as exc:
        raise PoleError(f"I - w1 B is singular for z1 = {2 * np.asarray(w1)}") from exc


def amplification(z1, z2, tableau: MethodTableau, kappa: int = 0) -> np.ndarray:
    """Composite amplification matrix ``M(z1, z2)``.

    ``z1`` and ``z2`` broadcast against each other; the result has shape
    ``broadcast(z1, z2).shape + (q, q)``.
    """
    z1 = np.asarray(z1, dtype=complex)
    z2 = np.asarray(z2, dtype=complex)
    shape = np.broadcast_shapes(z1.shape, z2.shape)
    w1 = np.broadcast_to(z1 / 2, shape)
    w2 = np.broadcast_to(z2 / 2, shape)[..., None, None]
    M = _resolvent_solve(w1, tableau.B1, tableau.A + w2 * tableau.B2)
    if kappa:
        M_it = _resolvent_solve(w1, tableau.B_it, tableau.A_tilde + w2 * tableau.B_it)
        for _ in range(kappa):
            M = M_it @ M
    return M


def spectral_radius(M) -> np.ndarray | float:
    """Largest eigenvalue modulus (batched over leading axes)."""
    M = np.asarray(M)
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix has non-finite entries")
    try:
        rho = np.max(np.abs(np.linalg.eigvals(M)), axis=-1)
    except np.linalg.LinAlgError as exc:
        raise ArithmeticError(f"eigenvalue iteration failed for matrix of shape {M.shape}") from exc
    return float(rho) if rho.ndim == 0 else rho


def _workers() -> int:
    env = os.environ.get("FIMEX_THREADS")
    return max(1, int(env)) if env else 1


def _rho_grid(z1: complex, tableau, kappa, grid: Grid) -> np.ndarray:
    pts = grid.points()
    try:
        _resolvent_solve(np.asarray(z1 / 2), tableau.B1, np.eye(tableau.q))
    except PoleError:
        return np.full(pts.shape, np.inf)

    def rows(sl):
        return spectral_radius(amplification(z1, pts[sl], tableau, kappa))

    chunks = [slice(i, min(i + 64, grid.ny)) for i in range(0, grid.ny, 64)]
    workers = _workers()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(rows, chunks))
    else:
        parts = [rows(sl) for sl in chunks]
    return np.concatenate(parts, axis=0)


def stability_contours(grid: Grid, rho: np.ndarray, level: float = 1.0) -> list[np.ndarray]:
    """Polylines (arrays of complex points) where ``rho`` crosses ``level``."""
    finite = np.where(np.isfinite(rho), rho, 1e6)
    gen = contourpy.contour_generator(grid.re, grid.im, finite,
                                      line_type=contourpy.LineType.Separate)
    return [seg[:, 0] + 1j * seg[:, 1] for seg in gen.lines(level)]


def region_S(z1: complex, tableau: MethodTableau, kappa: int = 0, grid: Grid | None = None) -> RegionScan:
    """Stable ``z2`` values for fixed ``z1``."""
    grid = grid or Grid()
    rho = _rho_grid(complex(z1), tableau, kappa, grid)
    return RegionScan(grid=grid, rho=rho, z1=(complex(z1),), label="S",
                      contours=stability_contours(grid, rho))


def region_S_hat(z1: complex, tableau: MethodTableau, kappa: int = 0, grid: Grid | None = None) -> RegionScan:
    """Stable ``z2`` values for both ``z1`` and its conjugate."""
    grid = grid or Grid()
    z1 = complex(z1)
    rho = _rho_grid(z1, tableau, kappa, grid)
    if z1.imag != 0:
        rho = np.maximum(rho, _rho_grid(z1.conjugate(), tableau, kappa, grid))
    return RegionScan(grid=grid, rho=rho, z1=(z1, z1.conjugate()), label="S_hat",
                      contours=stability_contours(grid, rho))


def wedge_samples(theta: float, n_rays: int = 5, gamma_max: float = 1e3, n_gamma: int = 60):
    """Rays ``theta = w_0 < ... < w_4 = pi`` and radii ``{0} + logspace(-2, log10(gamma_max))``."""
    if not 0 <= theta <= np.pi:
        raise ValueError("theta must lie in [0, pi]")
    rays = np.unique(np.linspace(theta, np.pi, n_rays))
    gammas = np.concatenate(([0.0], np.logspace(-2, np.log10(gamma_max), n_gamma)))
    return rays, gammas


def region_S_tilde(theta: float, tableau: MethodTableau, kappa: int = 0, grid: Grid | None = None,
                   gamma_samples=None, n_rays: int = 5) -> RegionScan:
    """``z2`` values stable for every sampled ``z1 = gamma exp(i w)`` in the wedge
    ``theta <= w <= 2 pi - theta`` (conjugate rays via the S-hat maximum)."""
    grid = grid or Grid()
    rays, gammas = wedge_samples(theta, n_rays)
    if gamma_samples is not None:
        gammas = np.asarray(gamma_samples, dtype=float)
        if np.any(np.diff(gammas) <= 0):
            raise ValueError("gamma_samples must be strictly increasing")
    rho = np.zeros((grid.ny, grid.nx))
    z1s = []
    for w in rays:
        for g in gammas:
            z1 = g * np.exp(1j * w)
            z1s.append(z1)
            rho = np.maximum(rho, region_S_hat(z1, tableau, kappa, grid).rho)
    return RegionScan(grid=grid, rho=rho, z1=tuple(z1s), label="S_tilde",
                      contours=stability_contours(grid, rho))
