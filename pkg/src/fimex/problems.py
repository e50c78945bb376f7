"""Test problems: partitioned Dahlquist, Van der Pol, and pseudospectral KdV."""
from __future__ import annotations

import enum
import hashlib
import json
import os
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import __version__
from .integrator import (
    DiagonalLinear, FullyImplicit, Linear, LinearlyImplicitJacobian, MethodSpec,
    PartitionedProblem, SolverConfig, integrate,
)

REFERENCE_METHOD = MethodSpec("radau-star", 5, 2)
REFERENCE_REFINEMENT = 64


# -- FFT ---------------------------------------------------------------------

@lru_cache(maxsize=None)
def _fft_plan(n: int):
    if n < 1 or n & (n - 1):
        raise ValueError(f"FFT length must be a power of two, got {n}")
    bits = n.bit_length() - 1
    idx = np.arange(n)
    perm = np.zeros(n, dtype=np.intp)
    for b in range(bits):
        perm |= ((idx >> b) & 1) << (bits - 1 - b)
    twiddles = []
    m = 1
    while m < n:
        twiddles.append(np.exp(-1j * np.pi * np.arange(m) / m))
        m *= 2
    return perm, tuple(twiddles)


def _fft(x, inverse: bool):
    x = np.asarray(x, dtype=complex)
    n = x.shape[-1]
    perm, twiddles = _fft_plan(n)
    lead = x.shape[:-1]
    x = x[..., perm]
    m = 1
    for w in twiddles:
        if inverse:
            w = w.conj()
        x = x.reshape(*lead, n // (2 * m), 2, m)
        even = x[..., 0, :]
        odd = x[..., 1, :] * w
        x = np.concatenate((even + odd, even - odd), axis=-1)
        m *= 2
    x = x.reshape(*lead, n)
    return x / n if inverse else x


def fft_forward(buffer):
    """Unnormalized DFT ``X_k = sum_n x_n exp(-2 pi i k n / N)`` along the last axis.

    Iterative radix-2 decimation in time; the length must be a power of two.
    """
    return _fft(buffer, inverse=False)


def fft_inverse(buffer):
    """Inverse of :func:`fft_forward` (carries the ``1/N`` factor)."""
    return _fft(buffer, inverse=True)


# -- Dahlquist ---------------------------------------------------------------

@dataclass(frozen=True)
class DahlquistProblem:
    """``y' = lambda1 y + lambda2 y`` with ``lambda1`` treated implicitly."""

    lambda1: complex
    lambda2: complex
    y0: complex = 1.0

    def partitioned(self) -> PartitionedProblem:
        l1, l2 = self.lambda1, self.lambda2
        dtype = complex if np.iscomplexobj(np.array([l1, l2, self.y0])) else float
        p = PartitionedProblem(
            1, lambda ts, Y: l1 * Y, lambda ts, Y: l2 * Y,
            implicit_structure=Linear(np.array([[l1]], dtype=dtype)), vectorized=True)
        p.y0 = np.array([self.y0], dtype=dtype)
        return p

    def exact(self, t) -> np.ndarray:
        return np.array([self.y0 * np.exp((self.lambda1 + self.lambda2) * t)])

    def params(self) -> dict:
        return {"problem": "dahlquist", "lambda1": str(self.lambda1), "lambda2": str(self.lambda2),
                "y0": str(self.y0)}


# -- Van der Pol -------------------------------------------------------------

class VdpSplitting(enum.Enum):
    SEMI_IMPLICIT = "semi-implicit"
    LINEARLY_IMPLICIT = "linearly-implicit"
    FULLY_IMPLICIT = "fully-implicit"


@dataclass(frozen=True)
class VanDerPolProblem:
    """``y1' = y2``, ``y2' = ((1 - y1^2) y2 - y1) / eps``."""

    epsilon: float

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    @property
    def y0(self) -> np.ndarray:
        e = self.epsilon
        return np.array([2.0, -2.0 / 3 + 10 * e / 81 - 292 * e**2 / 2187 - 1814 * e**3 / 19683])

    def rhs(self, ts, Y):
        Y = np.atleast_2d(Y)
        y1, y2 = Y[:, 0], Y[:, 1]
        return np.stack([y2, ((1 - y1 * y1) * y2 - y1) / self.epsilon], axis=1)

    def jacobian(self, t, y):
        y1, y2 = y
        e = self.epsilon
        return np.array([[0.0, 1.0], [(-2 * y1 * y2 - 1) / e, (1 - y1 * y1) / e]])

    def partitioned(self, splitting=VdpSplitting.SEMI_IMPLICIT) -> PartitionedProblem:
        """Split the right-hand side for the FIMEX integrators.

        ``semi-implicit``: first component explicit, second implicit.
        ``linearly-implicit``: ``f1 = J_n y`` with the exact Jacobian at the
        start of each step.  ``fully-implicit``: everything in ``f1``.
        """
        splitting = VdpSplitting(splitting)
        e = self.epsilon
        if splitting is VdpSplitting.SEMI_IMPLICIT:
            def f1(ts, Y):
                out = np.zeros_like(Y)
                out[:, 1] = ((1 - Y[:, 0] ** 2) * Y[:, 1] - Y[:, 0]) / e
                return out

            def f2(ts, Y):
                out = np.zeros_like(Y)
                out[:, 0] = Y[:, 1]
                return out

            def jac(t, y):
                return np.array([[0.0, 0.0], [(-2 * y[0] * y[1] - 1) / e, (1 - y[0] ** 2) / e]])

            p = PartitionedProblem(2, f1, f2, jacobian_f1=jac, vectorized=True,
                                   rhs=lambda t, y: self.rhs(None, y)[0])
        elif splitting is VdpSplitting.LINEARLY_IMPLICIT:
            p = LinearlyImplicitJacobian(2, self.rhs, self.jacobian, vectorized=True)
        else:
            p = FullyImplicit(2, self.rhs, lambda ts, Y: np.zeros_like(Y), jac_A=self.jacobian,
                              vectorized=True)
        p.y0 = self.y0
        return p

    def reference_problem(self) -> PartitionedProblem:
        return self.partitioned(VdpSplitting.SEMI_IMPLICIT)

    def params(self) -> dict:
        return {"problem": "vdp", "epsilon": repr(float(self.epsilon))}


# -- KdV ---------------------------------------------------------------------

class KdvSpectralProblem(PartitionedProblem):
    """Korteweg-de Vries ``u_t = -(delta u_xxx + (u^2)_x / 2)`` on ``[0, 2)``.

    The state holds normalized Fourier coefficients ``u_hat[k]`` so that
    ``u(x) = sum_k u_hat[k] exp(i pi k x)``.  The dispersive term is the
    implicit diagonal operator, the dealiased nonlinear term is explicit.
    """

    def __init__(self, N: int = 512, delta: float = 0.022, fft_backend: str = "numpy"):
        if N < 4 or N & (N - 1):
            raise ValueError(f"N must be a power of two, got {N}")
        if fft_backend == "numpy":
            self._fwd, self._inv = np.fft.fft, np.fft.ifft
        elif fft_backend == "internal":
            self._fwd, self._inv = fft_forward, fft_inverse
        else:
            raise ValueError(f"unknown FFT backend {fft_backend!r}")
        self.fft_backend = fft_backend
        self.N = N
        self.delta = delta
        self.k = np.fft.fftfreq(N, d=1.0 / N)
        self.L = 1j * delta * (np.pi * self.k) ** 3
        self.mask = dealias_mask(N)
        self._dx = 1j * np.pi * self.k
        self.x = 2.0 * np.arange(N) / N
        super().__init__(N, self._linear, self._nonlinear,
                         implicit_structure=DiagonalLinear(self.L), vectorized=True)

    def _linear(self, ts, Y):
        return Y * self.L

    def _nonlinear(self, ts, Y):
        u = self.to_physical(Y)
        return -0.5 * self._dx * self.mask * self.to_spectral(u * u)

    def to_physical(self, u_hat):
        return self._inv(u_hat) * self.N

    def to_spectral(self, u):
        return self._fwd(u) / self.N

    @property
    def y0(self) -> np.ndarray:
        return self.to_spectral(np.cos(np.pi * self.x).astype(complex))

    def reference_problem(self) -> PartitionedProblem:
        return self

    def params(self) -> dict:
        return {"problem": "kdv", "N": self.N, "delta": repr(float(self.delta))}


def dealias_mask(N: int) -> np.ndarray:
    """Keep modes with ``|k| <= floor(N / 3)``; zero the top third."""
    k = np.fft.fftfreq(N, d=1.0 / N)
    return (np.abs(k) <= N // 3).astype(float)


def kdv_problem(N: int = 512, delta: float = 0.022, fft_backend: str = "numpy") -> KdvSpectralProblem:
    return KdvSpectralProblem(N, delta, fft_backend)


# -- reference solutions -----------------------------------------------------

def relative_error(y, y_ref) -> float:
    """``||y - y_ref||_inf / ||y_ref||_inf``."""
    y_ref = np.asarray(y_ref)
    return float(np.max(np.abs(np.asarray(y) - y_ref)) / np.max(np.abs(y_ref)))


def default_cache_dir() -> Path:
    env = os.environ.get("FIMEX_CACHE")
    if env:
        return Path(env)
    return Path(os.environ.get("XDG_CACHE_HOME", Path.home() / ".cache")) / "fimex"


def _encode(y: np.ndarray) -> bytes:
    y = np.asarray(y)
    if np.iscomplexobj(y):
        y = np.stack([y.real, y.imag], axis=-1).ravel()
    return np.ascontiguousarray(y, dtype="<f8").tobytes()


def _decode(raw: bytes, complex_: bool) -> np.ndarray:
    y = np.frombuffer(raw, dtype="<f8").astype(float)
    if complex_:
        y = y[0::2] + 1j * y[1::2]
    return y


def reference_solution(problem, t_end: float, n_steps: int | None = None, *,
                       finest_steps: int | None = None, cache_dir=None,
                       method: MethodSpec = REFERENCE_METHOD, cfg: SolverConfig | None = None,
                       t0: float = 0.0) -> np.ndarray:
    """Reference solution at ``t_end``.

    Dahlquist problems use the closed form.  Otherwise the solution is
    computed with ``method`` using ``n_steps`` steps (default: 64 times
    ``finest_steps``) and cached as a little-endian f64 file with a JSON
    sidecar; a sidecar or checksum mismatch triggers regeneration.
    """
    if isinstance(problem, DahlquistProblem):
        return problem.exact(t_end - t0)
    if n_steps is None:
        if finest_steps is None:
            raise ValueError("either n_steps or finest_steps is required")
        n_steps = REFERENCE_REFINEMENT * finest_steps
    meta = {
        **problem.params(),
        "t0": repr(float(t0)),
        "t_end": repr(float(t_end)),
        "method": method.label,
        "n_steps": int(n_steps),
    }
    key = hashlib.sha256(json.dumps(meta, sort_keys=True).encode()).hexdigest()[:16]
    cache = Path(cache_dir) if cache_dir is not None else default_cache_dir()
    bin_path = cache / f"ref-{meta['problem']}-{key}.f64"
    side_path = bin_path.with_suffix(".json")
    if bin_path.exists() and side_path.exists():
        side = json.loads(side_path.read_text())
        raw = bin_path.read_bytes()
        if side.get("params") == meta and side.get("sha256") == hashlib.sha256(raw).hexdigest():
            return _decode(raw, side["complex"])
    result = integrate(problem.reference_problem(), method, (t0, t_end), n_steps, cfg=cfg)
    raw = _encode(result.y)
    cache.mkdir(parents=True, exist_ok=True)
    bin_path.write_bytes(raw)
    side_path.write_text(json.dumps({
        "params": meta,
        "generator": f"fimex {__version__}",
        "complex": bool(np.iscomplexobj(result.y)),
        "length": int(result.y.size),
        "sha256": hashlib.sha256(raw).hexdigest(),
    }, indent=1, sort_keys=True) + "\n")
    return result.y
