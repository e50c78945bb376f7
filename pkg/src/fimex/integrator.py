"""Composite FIMEX-Radau time stepping.

One composite step applies the propagator (advance the block by ``h = 2r``)
followed by ``kappa`` iterator sweeps that re-solve the block in place.  The
implicit component is solved with Newton's method (dense problems), a direct
Kronecker solve (linear operators) or cached per-mode ``q x q`` inverses
(diagonal operators, e.g. Fourier spectral discretizations).
"""
from __future__ import annotations

import enum
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from .tableaux import MethodTableau, Variant, build_propagator

__all__ = [
    "BlockState", "BlockSolver", "Dense", "DiagonalLinear", "FullyImplicit",
    "IntegrationResult", "Linear", "LinearSolveFailure", "LinearlyImplicitFirst",
    "LinearlyImplicitJacobian", "MethodSpec", "NewtonDivergence", "NewtonMode",
    "PartitionedProblem", "Semilinear", "SolverConfig", "integrate", "iterate",
    "propagate", "solve_block_implicit", "start",
]


class NewtonDivergence(ArithmeticError):
    """Newton iteration failed to reach the residual tolerance."""

    def __init__(self, message, *, iterations=None, residual=None, step=None):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual
        self.step = step


class LinearSolveFailure(ArithmeticError):
    """The block Jacobian (or resolvent) was singular."""

    def __init__(self, message, *, step=None):
        super().__init__(message)
        self.step = step


# -- implicit structure ------------------------------------------------------

@dataclass(frozen=True)
class Dense:
    """General nonlinear implicit component, solved by Newton's method."""


@dataclass(frozen=True, eq=False)
class Linear:
    """Implicit component ``f1(t, y) = matrix @ y``."""

    matrix: np.ndarray


@dataclass(frozen=True, eq=False)
class DiagonalLinear:
    """Implicit component ``f1(t, y) = diag * y`` (elementwise)."""

    diag: np.ndarray


class NewtonMode(enum.Enum):
    FULL = "full"
    SIMPLIFIED = "simplified"


@dataclass(frozen=True)
class SolverConfig:
    """Nonlinear/linear solver settings.

    ``parallel`` dispatches the per-node right-hand-side evaluations to a
    thread pool of at most ``threads`` workers (default: ``FIMEX_THREADS`` or
    the CPU count).  Serial mode is the bitwise-reproducible reference.
    """

    newton_tol: float = 1e-12
    newton_max_iters: int = 50
    newton_mode: NewtonMode = NewtonMode.FULL
    parallel: bool = False
    threads: Optional[int] = None

    def __post_init__(self):
        if not self.newton_tol > 0:
            raise ValueError("newton_tol must be positive")
        if self.newton_max_iters < 1:
            raise ValueError("newton_max_iters must be at least 1")
        object.__setattr__(self, "newton_mode", NewtonMode(self.newton_mode))


# -- problems and splittings -------------------------------------------------

class PartitionedProblem:
    """Right-hand side ``y' = f1(t, y) + f2(t, y)``; ``f1`` is treated implicitly.

    Parameters
    ----------
    dim : int
        Length of the state vector.
    f1, f2 : callable
        Component evaluators ``f(t, y) -> array``.  With ``vectorized=True``
        they receive a vector of times ``ts`` (shape ``(k,)``) and a stack of
        states ``Y`` (shape ``(k, dim)``) and must return shape ``(k, dim)``.
    jacobian_f1 : callable, optional
        ``J(t, y) -> (dim, dim)`` for a single point.  Finite differences are
        used when it is missing and the structure is :class:`Dense`.
    implicit_structure : Dense, Linear or DiagonalLinear
    rhs : callable, optional
        Unsplit right-hand side (single point), used for consistency checks.

    Evaluators must be safe to call concurrently on distinct arguments.
    """

    def __init__(self, dim, f1, f2, jacobian_f1=None, implicit_structure=None,
                 vectorized=False, rhs=None):
        self.dim = int(dim)
        self._f1 = f1
        self._f2 = f2
        self._jac = jacobian_f1
        self.implicit_structure = implicit_structure if implicit_structure is not None else Dense()
        self.vectorized = vectorized
        self._rhs = rhs

    # single-point evaluation
    def eval_f1(self, t, y):
        if self.vectorized:
            return self._f1(np.atleast_1d(t), np.asarray(y)[None, :])[0]
        return np.asarray(self._f1(t, y))

    def eval_f2(self, t, y):
        if self.vectorized:
            return self._f2(np.atleast_1d(t), np.asarray(y)[None, :])[0]
        return np.asarray(self._f2(t, y))

    # block evaluation over nodes
    def f1_block(self, ts, Y):
        if self.vectorized:
            return self._f1(ts, Y)
        return np.stack([np.asarray(self._f1(t, y)) for t, y in zip(ts, Y)])

    def f2_block(self, ts, Y):
        if self.vectorized:
            return self._f2(ts, Y)
        return np.stack([np.asarray(self._f2(t, y)) for t, y in zip(ts, Y)])

    def jacobian_f1(self, t, y):
        structure = self.implicit_structure
        if isinstance(structure, Linear):
            return structure.matrix
        if isinstance(structure, DiagonalLinear):
            return np.diag(structure.diag)
        if self._jac is not None:
            return np.asarray(self._jac(t, y))
        return _fd_jacobian(self.eval_f1, t, np.asarray(y))

    def rhs(self, t, y):
        if self._rhs is not None:
            return np.asarray(self._rhs(t, y))
        return self.eval_f1(t, y) + self.eval_f2(t, y)

    def refresh(self, t, y) -> bool:
        """Hook called once per macro-step at ``(t_n, y_n)``.

        Returns True when the split changed, so cached explicit derivatives
        must be recomputed.
        """
        return False


def _fd_jacobian(fun, t, y):
    f0 = fun(t, y)
    J = np.empty((f0.size, y.size), dtype=np.result_type(f0, y))
    for k in range(y.size):
        step = np.sqrt(np.finfo(float).eps) * max(1.0, abs(y[k]))
        yk = y.copy()
        yk[k] += step
        J[:, k] = (fun(t, yk) - f0) / step
    return J


def _apply_rowwise(fun, ts, Y, vectorized):
    if vectorized:
        return fun(ts, Y)
    return np.stack([np.asarray(fun(t, y)) for t, y in zip(ts, Y)])


class Semilinear(PartitionedProblem):
    """``y' = L y + N(t, y)`` with ``f1 = L y`` and ``f2 = N``.

    ``L`` may be a matrix or a vector (diagonal operator).
    """

    def __init__(self, L, N, vectorized=False):
        L = np.asarray(L)
        if L.ndim == 1:
            structure = DiagonalLinear(L)
            f1 = lambda ts, Y: Y * L
        else:
            structure = Linear(L)
            f1 = lambda ts, Y: Y @ L.T
        f2 = N if vectorized else (lambda ts, Y: _apply_rowwise(N, ts, Y, False))
        super().__init__(L.shape[0], f1, f2, implicit_structure=structure, vectorized=True)


class FullyImplicit(PartitionedProblem):
    """``y' = A(t, y) + B(t, y)`` with ``f1 = A`` (implicit) and ``f2 = B``."""

    def __init__(self, dim, A, B, jac_A=None, vectorized=False):
        super().__init__(dim, A, B, jacobian_f1=jac_A, vectorized=vectorized,
                         rhs=None)


class _LinearlyImplicit(PartitionedProblem):
    """Shared machinery for splittings with ``f1 = J_n y``."""

    def __init__(self, dim, full_rhs, jac, vectorized=False):
        self._full = full_rhs
        self._jac_full = jac
        self._full_vectorized = vectorized
        self._J = np.zeros((dim, dim))
        f1 = lambda ts, Y: Y @ self._J.T
        f2 = lambda ts, Y: _apply_rowwise(self._full, ts, Y, self._full_vectorized) - Y @ self._J.T
        super().__init__(dim, f1, f2, implicit_structure=Linear(self._J), vectorized=True)

    @property
    def J(self):
        return self._J

    def rhs(self, t, y):
        return _apply_rowwise(self._full, np.atleast_1d(t), np.asarray(y)[None, :],
                              self._full_vectorized)[0]

    def refresh(self, t, y) -> bool:
        self._J = np.asarray(self._jac_full(t, np.asarray(y)))
        self.implicit_structure = Linear(self._J)
        return True


class LinearlyImplicitFirst(_LinearlyImplicit):
    """``f1 = dA/dy(t_n, y_n) y``, ``f2 = A + B - f1``."""

    def __init__(self, dim, A, B, jac_A, vectorized=False):
        if vectorized:
            full = lambda ts, Y: A(ts, Y) + B(ts, Y)
        else:
            full = lambda t, y: np.asarray(A(t, y)) + np.asarray(B(t, y))
        super().__init__(dim, full, jac_A, vectorized=vectorized)


class LinearlyImplicitJacobian(_LinearlyImplicit):
    """``f1 = J_n y``, ``f2 = f - J_n y`` with ``J_n`` from ``jac(t_n, y_n)``."""

    def __init__(self, dim, rhs, jac, vectorized=False):
        super().__init__(dim, rhs, jac, vectorized=vectorized)


# -- block state -------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BlockState:
    """``q`` solution values ``y[j] ~ y(t_anchor + r z_j)`` plus the explicit
    derivatives ``f2_in[j]`` at the same nodes."""

    t_anchor: float
    r: float
    y: np.ndarray
    f2_in: Optional[np.ndarray] = None

    def times(self, z) -> np.ndarray:
        return self.t_anchor + self.r * np.asarray(z)


@dataclass
class SolverStats:
    f1_evals: int = 0
    f2_evals: int = 0
    newton_iters: int = 0
    linear_solves: int = 0


# -- implicit solves ---------------------------------------------------------

_POOLS: dict[int, ThreadPoolExecutor] = {}


def _thread_count(cfg: SolverConfig) -> int:
    if cfg.threads:
        return max(1, int(cfg.threads))
    env = os.environ.get("FIMEX_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _pool(n: int) -> ThreadPoolExecutor:
    if n not in _POOLS:
        _POOLS[n] = ThreadPoolExecutor(max_workers=n, thread_name_prefix="fimex")
    return _POOLS[n]


class BlockSolver:
    """Solves ``Y = C + r (W kron f1)(Y)`` and owns the factorization caches."""

    def __init__(self, problem: PartitionedProblem, cfg: SolverConfig | None = None):
        self.problem = problem
        self.cfg = cfg or SolverConfig()
        self.stats = SolverStats()
        self._diag_cache: dict = {}
        self._linear_cache: dict = {}

    # node-parallel evaluation
    def _eval(self, which: str, ts, Y):
        p = self.problem
        if which == "f1":
            self.stats.f1_evals += len(ts)
            single, block = p.eval_f1, p.f1_block
        else:
            self.stats.f2_evals += len(ts)
            single, block = p.eval_f2, p.f2_block
        if self.cfg.parallel and len(ts) > 1:
            pool = _pool(min(_thread_count(self.cfg), len(ts)))
            return np.stack(list(pool.map(single, ts, Y)))
        return block(ts, Y)

    def f1(self, ts, Y):
        return self._eval("f1", ts, Y)

    def f2(self, ts, Y):
        return self._eval("f2", ts, Y)

    def solve(self, C, W, r, ts, guess):
        """Solve for the active nodes.  ``C``, ``guess``: ``(k, dim)``; ``W``: ``(k, k)``."""
        structure = self.problem.implicit_structure
        if isinstance(structure, DiagonalLinear):
            return self._solve_diagonal(C, W, r, structure)
        if isinstance(structure, Linear):
            return self._solve_linear(C, W, r, structure)
        return self._solve_newton(C, W, r, ts, guess)

    def _solve_diagonal(self, C, W, r, structure):
        key = (id(structure), r, W.tobytes())
        entry = self._diag_cache.get(key)
        if entry is None or entry[0] is not structure:
            # factors are computed once per (r, operator) and dropped when r changes
            self._diag_cache = {k: v for k, v in self._diag_cache.items() if k[1] == r}
            lam = np.asarray(structure.diag)
            mats = np.eye(W.shape[0])[None, :, :] - r * lam[:, None, None] * W[None, :, :]
            try:
                inv = np.linalg.inv(mats)
            except np.linalg.LinAlgError as exc:
                raise LinearSolveFailure(f"singular per-mode block system at r={r}") from exc
            entry = (structure, inv)
            self._diag_cache[key] = entry
        self.stats.linear_solves += 1
        return np.einsum("mij,jm->im", entry[1], C)

    def _solve_linear(self, C, W, r, structure):
        key = (r, W.tobytes())
        entry = self._linear_cache.get(key)
        if entry is None or entry[0] is not structure:
            K = np.asarray(structure.matrix)
            n = K.shape[0]
            M = np.eye(W.shape[0] * n) - r * np.kron(W, K)
            lu = scipy.linalg.lu_factor(M, check_finite=True)
            if np.any(np.diag(lu[0]) == 0):
                raise LinearSolveFailure(f"singular block system at r={r}")
            entry = (structure, lu)
            self._linear_cache = {key: entry}
        self.stats.linear_solves += 1
        rhs = C.reshape(-1)
        if np.iscomplexobj(rhs) and not np.iscomplexobj(entry[1][0]):
            x = scipy.linalg.lu_solve(entry[1], rhs.real) + 1j * scipy.linalg.lu_solve(entry[1], rhs.imag)
        else:
            x = scipy.linalg.lu_solve(entry[1], rhs)
        return x.reshape(C.shape)

    def _block_jacobian(self, W, r, ts, Y):
        k, n = Y.shape
        J = np.stack([self.problem.jacobian_f1(t, y) for t, y in zip(ts, Y)])
        blocks = -r * W[:, :, None, None] * J[None, :, :, :]
        M = blocks.transpose(0, 2, 1, 3).reshape(k * n, k * n)
        M[np.diag_indices(k * n)] += 1.0
        return M

    def _solve_newton(self, C, W, r, ts, guess):
        cfg = self.cfg
        Y = np.array(guess, dtype=np.result_type(C, guess), copy=True)
        lu = None
        history = []
        for it in range(1, cfg.newton_max_iters + 1):
            F = self.f1(ts, Y)
            G = Y - C - r * (W @ F)
            res = float(np.max(np.abs(G)))
            scale = max(1.0, float(np.max(np.abs(Y))))
            if not np.isfinite(res) or res > 1e10:
                raise NewtonDivergence(f"Newton residual {res:.3e} blew up at iteration {it}",
                                       iterations=it, residual=res)
            # at least one correction is always applied, so linear problems
            # are solved exactly even from a guess inside the tolerance
            if it > 1 and res <= cfg.newton_tol * scale:
                # final correction with the current factors keeps the per-step
                # defect well below tol, so it does not accumulate over steps
                Y = Y - scipy.linalg.lu_solve(lu, G.reshape(-1)).reshape(Y.shape)
                self.stats.linear_solves += 1
                self.stats.newton_iters += it - 1
                return Y
            history.append(res)
            if len(history) >= 4 and all(b > a for a, b in zip(history[-4:], history[-3:])):
                raise NewtonDivergence(f"Newton residual grew for 3 consecutive iterations (last {res:.3e})",
                                       iterations=it, residual=res)
            if lu is None or cfg.newton_mode is NewtonMode.FULL:
                M = self._block_jacobian(W, r, ts, Y)
                try:
                    lu = scipy.linalg.lu_factor(M)
                except (ValueError, np.linalg.LinAlgError) as exc:
                    raise LinearSolveFailure("block Jacobian factorization failed") from exc
                if np.any(np.diag(lu[0]) == 0):
                    raise LinearSolveFailure("singular block Jacobian")
            delta = scipy.linalg.lu_solve(lu, G.reshape(-1)).reshape(Y.shape)
            self.stats.linear_solves += 1
            Y = Y - delta
            # stagnation at roundoff: the residual of stiff components cannot
            # drop below eps * |r W F|, but the Newton update still does
            if float(np.max(np.abs(delta))) <= cfg.newton_tol * scale:
                self.stats.newton_iters += it
                return Y
        raise NewtonDivergence(f"Newton did not converge in {cfg.newton_max_iters} iterations "
                               f"(residual {history[-1]:.3e})",
                               iterations=cfg.newton_max_iters, residual=history[-1])


def _active(W):
    return np.flatnonzero(np.any(W != 0, axis=1) | np.any(W != 0, axis=0))


def solve_block_implicit(rhs_const, w_matrix, r, problem, t_nodes, guess=None, cfg=None, solver=None):
    """Solve ``Y = rhs_const + r (w_matrix kron f1)(Y)`` for a ``q``-node block.

    Nodes whose row and column of ``w_matrix`` are both zero are decoupled and
    copied from ``rhs_const`` directly.
    """
    solver = solver or BlockSolver(problem, cfg)
    C = np.asarray(rhs_const)
    W = np.asarray(w_matrix, dtype=float)
    guess = C if guess is None else np.asarray(guess)
    idx = _active(W)
    Y = np.array(C, dtype=np.result_type(C, guess), copy=True)
    if idx.size:
        Wa = W[np.ix_(idx, idx)]
        if np.any(W[idx][:, np.setdiff1d(np.arange(W.shape[1]), idx)]):
            raise ValueError("active nodes depend on decoupled nodes")
        Y[idx] = solver.solve(C[idx], Wa, r, np.asarray(t_nodes)[idx], guess[idx])
    return Y


# -- propagator / iterator ---------------------------------------------------

def _with_f2(state: BlockState, tableau: MethodTableau, solver: BlockSolver, first=None) -> BlockState:
    """Attach fresh explicit derivatives; ``first`` reuses a known value at node 1."""
    ts = state.times(tableau.z)
    if first is None:
        f2 = solver.f2(ts, state.y)
    else:
        rest = solver.f2(ts[1:], state.y[1:])
        f2 = np.empty((state.y.shape[0],) + rest.shape[1:], dtype=np.result_type(rest, first))
        f2[0] = first
        f2[1:] = rest
    return replace(state, f2_in=f2)


def propagate(state: BlockState, tableau: MethodTableau, problem=None, cfg=None, solver=None) -> BlockState:
    """Advance the block by ``h = 2r`` with the FIMEX propagator."""
    solver = solver or BlockSolver(problem, cfg)
    if state.f2_in is None:
        state = _with_f2(state, tableau, solver)
    r = state.r
    y = state.y
    t_new = state.t_anchor + 2.0 * r
    ts = t_new + r * tableau.z
    C = y[-1][None, :] + r * (tableau.B2 @ state.f2_in)
    guess = np.broadcast_to(y[-1], y.shape)
    Y = np.empty(np.broadcast_shapes(C.shape), dtype=np.result_type(C, y))
    Y[0] = y[-1]
    Y[1:] = solver.solve(C[1:], tableau.B1[1:, 1:], r, ts[1:], guess[1:])
    out = BlockState(t_anchor=t_new, r=r, y=Y)
    # output node 1 coincides with input node q
    return _with_f2(out, tableau, solver, first=state.f2_in[-1])


def iterate(state: BlockState, tableau: MethodTableau, problem=None, cfg=None, solver=None) -> BlockState:
    """Re-solve the current block once with the iterator (anchor unchanged)."""
    solver = solver or BlockSolver(problem, cfg)
    if state.f2_in is None:
        state = _with_f2(state, tableau, solver)
    r = state.r
    y = state.y
    ts = state.times(tableau.z)
    C = y[0][None, :] + r * (tableau.B_it @ state.f2_in)
    Y = np.empty(C.shape, dtype=np.result_type(C, y))
    Y[0] = y[0]
    Y[1:] = solver.solve(C[1:], tableau.B_it[1:, 1:], r, ts[1:], y[1:])
    out = BlockState(t_anchor=state.t_anchor, r=r, y=Y)
    return _with_f2(out, tableau, solver, first=state.f2_in[0])


def default_kappa_start(tableau: MethodTableau) -> int:
    """Iterator sweeps used to build the first block.

    ``2q - 2`` sweeps reach the collocation accuracy of the implicit part, so
    the starting block never limits the order of any composite method.
    """
    return 2 * tableau.q - 2


def start(y0, t0, r, tableau: MethodTableau, problem=None, kappa_start=None, cfg=None, solver=None) -> BlockState:
    """Initial block on ``[t0, t0 + 2r]`` by iterating from the constant ``y0``."""
    solver = solver or BlockSolver(problem, cfg)
    problem = solver.problem
    y0 = np.atleast_1d(np.asarray(y0))
    if kappa_start is None:
        kappa_start = default_kappa_start(tableau)
    problem.refresh(t0, y0)
    y = np.repeat(y0[None, :], tableau.q, axis=0)
    state = BlockState(t_anchor=t0 + r, r=r, y=y)
    state = _with_f2(state, tableau, solver)
    for _ in range(kappa_start):
        state = iterate(state, tableau, solver=solver)
    return state


# -- driver ------------------------------------------------------------------

@dataclass(frozen=True)
class MethodSpec:
    variant: Variant
    q: int
    kappa: int

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        if self.kappa < 0:
            raise ValueError("kappa must be non-negative")

    @property
    def label(self) -> str:
        tag = "RadauStar" if self.variant is Variant.RADAU_STAR else "Radau"
        return f"{tag}({self.q},{self.kappa})"

    @property
    def order(self) -> int:
        return build_propagator(self.q, self.variant).order(self.kappa)


@dataclass
class IntegrationResult:
    t: float
    y: np.ndarray
    block: BlockState
    n_steps: int
    stats: SolverStats = field(default_factory=SolverStats)


def integrate(problem: PartitionedProblem, method: MethodSpec, t_span, n_steps: int,
              cfg: SolverConfig | None = None, kappa_start: int | None = None, y0=None,
              callback: Callable | None = None) -> IntegrationResult:
    """Integrate with the composite method ``M^kappa(P(.))``.

    The node radius is ``r = (t_end - t0) / (2 n_steps)``.  The starting block
    covers the first step ``[t0, t0 + h]``; ``n_steps - 1`` composite steps
    follow, so the last node of the final block sits exactly at ``t_end``.

    ``y0`` defaults to ``problem.y0`` when the problem defines one.
    """
    t0, t_end = (float(v) for v in t_span)
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    if not t_end > t0:
        raise ValueError("t_end must exceed t0")
    if y0 is None:
        y0 = problem.y0
    tableau = build_propagator(method.q, method.variant)
    r = (t_end - t0) / (2 * n_steps)
    solver = BlockSolver(problem, cfg)
    step = 0
    try:
        state = start(y0, t0, r, tableau, kappa_start=kappa_start, solver=solver)
        if callback is not None:
            callback(0, state)
        for step in range(1, n_steps):
            t_n = state.t_anchor + r * tableau.z[-1]
            if problem.refresh(t_n, state.y[-1]):
                state = _with_f2(replace(state, f2_in=None), tableau, solver)
            state = propagate(state, tableau, solver=solver)
            for _ in range(method.kappa):
                state = iterate(state, tableau, solver=solver)
            if callback is not None:
                callback(step, state)
    except (NewtonDivergence, LinearSolveFailure) as exc:
        exc.step = step
        exc.args = (f"{exc.args[0]} (step {step} of {n_steps}, {method.label})",)
        raise
    return IntegrationResult(t=t_end, y=state.y[-1].copy(), block=state, n_steps=n_steps,
                             stats=solver.stats)
