"""Experiment orchestration: convergence studies, order fits, stability exports, timings.

All CSV output uses 17 significant digits and LF line endings so that serial
runs are byte-reproducible (wall-clock columns aside).
"""
from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .integrator import LinearSolveFailure, MethodSpec, NewtonDivergence, SolverConfig, integrate
from .problems import (
    DahlquistProblem, KdvSpectralProblem, VanDerPolProblem, VdpSplitting,
    reference_solution, relative_error,
)
from .stability import Grid, RegionScan, region_S_hat, region_S_tilde
from .tableaux import build_propagator

OK = "ok"
FLOOR = "floor"
DIVERGED = "diverged"
OVERFLOW = "overflow"
SINGULAR = "singular"

# Errors below this are indistinguishable from accumulated roundoff in the
# reference (about 1e-14); they are recorded but kept out of the order fit.
DEFAULT_FLOOR = 1e-12

DEFAULT_T_END = {"dahlquist": 1.0, "vdp": 0.5, "kdv": 3.6 / math.pi}
VDP_EPSILONS = tuple(10.0 ** -k for k in range(9))
# |z1| in {0, 3, 6} and arg(z1) in {0, 3pi/2, pi/2}
DEFAULT_Z1_MODULI = (0.0, 3.0, 6.0)
DEFAULT_Z1_ARGS = (0.0, 1.5 * math.pi, 0.5 * math.pi)


def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.17g}"


def _write_csv(path: Path, header: Sequence[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([v if isinstance(v, str) else fmt(v) for v in row])
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())
    return path


# -- order fitting -----------------------------------------------------------

def fit_order(pairs) -> tuple[float, float]:
    """Least-squares slope of ``log(error)`` against ``log(h)``.

    Parameters
    ----------
    pairs : iterable of (h, error)
        Non-positive or non-finite errors are skipped.

    Returns
    -------
    p_hat : float
        Fitted slope.
    residual : float
        Root-mean-square residual of the fit in natural-log units.
    """
    pts = [(float(h), float(e)) for h, e in pairs
           if h > 0 and e > 0 and math.isfinite(e) and math.isfinite(h)]
    if len(pts) < 2:
        raise ValueError(f"order fit needs at least 2 valid points, got {len(pts)}")
    x = np.log([p[0] for p in pts])
    y = np.log([p[1] for p in pts])
    if np.ptp(x) == 0:
        raise ValueError("order fit needs at least two distinct step sizes")
    X = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    res = y - X @ coef
    return float(coef[0]), float(np.sqrt(np.mean(res ** 2)))


@dataclass
class ConvergenceRow:
    h: float
    n_steps: int
    error: float
    wall_ms: float
    status: str = OK


@dataclass
class ConvergenceReport:
    method: MethodSpec
    rows: list[ConvergenceRow] = field(default_factory=list)
    order: float | None = None
    residual: float | None = None

    @property
    def expected(self) -> int:
        return self.method.order

    @property
    def valid(self) -> list[ConvergenceRow]:
        return [r for r in self.rows if r.status == OK]

    @property
    def all_failed(self) -> bool:
        return not any(r.status in (OK, FLOOR) for r in self.rows)

    def refit(self) -> "ConvergenceReport":
        try:
            self.order, self.residual = fit_order((r.h, r.error) for r in self.valid)
        except ValueError:
            self.order = self.residual = None
        return self

    HEADER = ("h", "n_steps", "error", "wall_ms", "status")

    def write_csv(self, path) -> Path:
        return _write_csv(path, self.HEADER,
                          ((r.h, r.n_steps, r.error, r.wall_ms, r.status) for r in self.rows))


# -- experiment specs --------------------------------------------------------

def log_schedule(t_end: float, h_max: float, h_min: float, count: int) -> list[int]:
    """Step counts for ``count`` log-spaced step sizes in ``[h_min, h_max]``.

    Each requested ``h`` is rounded to the nearest ``t_end / n``; duplicates
    collapse, so the realized schedule may be shorter than ``count``.
    """
    if not 0 < h_min <= h_max:
        raise ValueError("need 0 < h_min <= h_max")
    hs = np.geomspace(h_max, h_min, count)
    return sorted({max(1, int(round(t_end / h))) for h in hs})


@dataclass
class ExperimentSpec:
    """What to run: problem, splitting, methods and step schedule.

    ``n_steps`` must be strictly increasing (strictly decreasing ``h``).
    """

    problem: str
    methods: list[MethodSpec]
    n_steps: list[int]
    params: dict = field(default_factory=dict)
    splitting: str | None = None
    t_end: float | None = None
    out_dir: Path | None = None
    floor: float = DEFAULT_FLOOR
    repeats: int = 3
    parallel: bool = False
    cache_dir: Path | None = None

    def __post_init__(self):
        if self.problem not in DEFAULT_T_END:
            raise ValueError(f"unknown problem {self.problem!r}")
        if not self.n_steps or any(b <= a for a, b in zip(self.n_steps, self.n_steps[1:])):
            raise ValueError("n_steps must be non-empty and strictly increasing")
        if self.n_steps[0] < 1:
            raise ValueError("n_steps must be positive")
        if self.repeats < 1:
            raise ValueError("repeats must be at least 1")
        self.methods = [m if isinstance(m, MethodSpec) else MethodSpec(*m) for m in self.methods]
        if self.t_end is None:
            self.t_end = DEFAULT_T_END[self.problem]

    def build(self):
        """Return ``(model, partitioned_problem)``."""
        if self.problem == "dahlquist":
            model = DahlquistProblem(complex(self.params.get("lambda1", -1.0)),
                                     complex(self.params.get("lambda2", 0.0)),
                                     complex(self.params.get("y0", 1.0)))
            return model, model.partitioned()
        if self.problem == "vdp":
            model = VanDerPolProblem(float(self.params.get("epsilon", 1.0)))
            return model, model.partitioned(self.splitting or VdpSplitting.SEMI_IMPLICIT)
        model = KdvSpectralProblem(int(self.params.get("N", 512)),
                                   float(self.params.get("delta", 0.022)),
                                   self.params.get("fft_backend", "numpy"))
        return model, model

    def to_json(self) -> dict:
        return {
            "problem": self.problem,
            "params": {k: (repr(v) if isinstance(v, complex) else v) for k, v in self.params.items()},
            "splitting": None if self.splitting is None else str(VdpSplitting(self.splitting).value),
            "methods": [m.label for m in self.methods],
            "n_steps": list(self.n_steps),
            "t_end": self.t_end,
            "floor": self.floor,
            "repeats": self.repeats,
            "parallel": self.parallel,
        }


def timed_integrate(problem, method, t_span, n_steps, cfg=None, repeats=1):
    """Run ``integrate`` ``repeats`` times; return the result and the fastest wall time in ms."""
    best = math.inf
    result = None
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        result = integrate(problem, method, t_span, n_steps, cfg=cfg)
        best = min(best, (time.perf_counter_ns() - t0) / 1e6)
    return result, best


def _run_one(problem, method, t_end, n, y_ref, cfg, repeats, floor) -> ConvergenceRow:
    h = t_end / n
    try:
        with np.errstate(over="raise", invalid="raise"):
            res, wall = timed_integrate(problem, method, (0.0, t_end), n, cfg, repeats)
    except NewtonDivergence:
        return ConvergenceRow(h, n, math.nan, math.nan, DIVERGED)
    except LinearSolveFailure:
        return ConvergenceRow(h, n, math.nan, math.nan, SINGULAR)
    except (FloatingPointError, OverflowError):
        return ConvergenceRow(h, n, math.nan, math.nan, OVERFLOW)
    if not np.all(np.isfinite(res.y)):
        return ConvergenceRow(h, n, math.nan, wall, OVERFLOW)
    err = relative_error(res.y, y_ref)
    return ConvergenceRow(h, n, err, wall, FLOOR if err < floor else OK)


def _method_slug(m: MethodSpec) -> str:
    return f"{m.variant.value}_q{m.q}_k{m.kappa}"


def run_convergence(spec: ExperimentSpec) -> list[ConvergenceReport]:
    """Run every method over the schedule and fit orders.

    Divergent or overflowing runs become rows with a non-``ok`` status.  When
    ``spec.out_dir`` is set, one CSV per method plus ``manifest.json`` are
    written there.
    """
    model, problem = spec.build()
    y_ref = reference_solution(model, spec.t_end, finest_steps=max(spec.n_steps),
                               cache_dir=spec.cache_dir)
    cfg = SolverConfig(parallel=spec.parallel)
    reports = []
    for method in spec.methods:
        rep = ConvergenceReport(method)
        for n in spec.n_steps:
            rep.rows.append(_run_one(problem, method, spec.t_end, n, y_ref, cfg,
                                     spec.repeats, spec.floor))
        reports.append(rep.refit())
    if spec.out_dir is not None:
        out = Path(spec.out_dir)
        for rep in reports:
            rep.write_csv(out / f"{spec.problem}_{_method_slug(rep.method)}.csv")
        write_manifest(out / "manifest.json", spec.to_json(), {
            rep.method.label: {"order": rep.order, "residual": rep.residual,
                               "expected": rep.expected} for rep in reports})
    return reports


def write_manifest(path, spec: dict, results: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = {"fimex_version": __version__, "spec": spec}
    if results is not None:
        body["results"] = results
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    return path


def run_vdp_sweep(methods, n_steps, epsilons=VDP_EPSILONS, splitting=VdpSplitting.LINEARLY_IMPLICIT,
                  out_dir=None, cache_dir=None, repeats=1, floor=DEFAULT_FLOOR):
    """Fitted order as a function of stiffness for each method.

    Returns a list of ``(epsilon, method_label, order, residual, n_valid)``
    rows; with ``out_dir`` also writes ``vdp_orders.csv`` and the per-run CSVs.
    """
    rows = []
    for eps in epsilons:
        spec = ExperimentSpec("vdp", list(methods), list(n_steps), params={"epsilon": eps},
                              splitting=splitting, repeats=repeats, floor=floor, cache_dir=cache_dir,
                              out_dir=None if out_dir is None else Path(out_dir) / f"eps_{eps:.0e}")
        for rep in run_convergence(spec):
            rows.append((eps, rep.method.label, rep.order, rep.residual, len(rep.valid)))
    if out_dir is not None:
        _write_csv(Path(out_dir) / "vdp_orders.csv",
                   ("epsilon", "method", "order", "residual", "n_valid"), rows)
    return rows


# -- stability export --------------------------------------------------------

def default_z1_settings() -> list[complex]:
    """``z1 = m exp(i a)`` over the moduli and arguments used for the region figures."""
    out = []
    for m in DEFAULT_Z1_MODULI:
        for a in DEFAULT_Z1_ARGS:
            z = complex(m * math.cos(a), m * math.sin(a)) if m else 0j
            if z not in out:
                out.append(z)
    return out


def write_scan(scan: RegionScan, stem) -> tuple[Path, Path]:
    """Write ``<stem>.csv`` (re_z2, im_z2, rho) and ``<stem>_contour.csv``."""
    stem = Path(stem)
    pts = scan.grid.points()
    grid_path = _write_csv(stem.with_name(stem.name + ".csv"), ("re_z2", "im_z2", "rho"),
                           zip(pts.real.ravel(), pts.imag.ravel(), scan.rho.ravel()))
    contour_rows = ((i, p.real, p.imag) for i, seg in enumerate(scan.contours) for p in seg)
    contour_path = _write_csv(stem.with_name(stem.name + "_contour.csv"),
                              ("segment", "re_z2", "im_z2"), contour_rows)
    return grid_path, contour_path


def run_stability_export(q: int, variant, kappa: int, out_dir, z1_list=None, theta=None,
                         grid: Grid | None = None) -> list[tuple[complex, RegionScan, Path, Path]]:
    """Scan ``S_hat(z1)`` for each ``z1`` (or ``S_tilde(theta)``) and write CSVs.

    Output files are named ``<method>_k<kappa>_<i>.csv`` in the order of
    ``z1_list`` (``..._wedge.csv`` for a wedge scan).
    """
    grid = grid or Grid()
    tableau = build_propagator(q, variant)
    base = Path(out_dir) / f"{tableau.variant.value}_q{q}_k{kappa}"
    results = []
    if theta is not None:
        scan = region_S_tilde(theta, tableau, kappa, grid)
        results.append((complex(theta), scan, *write_scan(scan, f"{base}_wedge")))
    for i, z1 in enumerate(default_z1_settings() if z1_list is None and theta is None else (z1_list or [])):
        scan = region_S_hat(z1, tableau, kappa, grid)
        results.append((complex(z1), scan, *write_scan(scan, f"{base}_{i}")))
    write_manifest(Path(out_dir) / f"{base.name}_manifest.json", {
        "q": q, "variant": tableau.variant.value, "kappa": kappa,
        "grid": asdict(grid), "theta": theta,
        "z1": [[z.real, z.imag] for z, *_ in results] if theta is None else None,
    }, {f"{i}": {"area": s.area, "contains_origin": s.contains(0j)}
        for i, (_, s, *_r) in enumerate(results)})
    return results


# -- KdV efficiency ----------------------------------------------------------

@dataclass
class EfficiencyRow:
    method: str
    n_steps: int
    error: float
    wall_ms_serial: float
    wall_ms_parallel: float | None = None
    error_parallel: float | None = None
    mass_drift: float = math.nan
    max_imag: float = math.nan
    status: str = OK


EFFICIENCY_HEADER = ("method", "n_steps", "error", "wall_ms_serial", "wall_ms_parallel",
                     "mass_drift", "max_imag", "status")


def run_kdv_efficiency(methods, n_steps, N: int = 256, t_end: float = DEFAULT_T_END["kdv"],
                       parallel: bool = False, repeats: int = 3, out=None, cache_dir=None,
                       reference_steps: int | None = None) -> list[EfficiencyRow]:
    """Error against wall time for each method and step count.

    ``mass_drift`` is ``|u_hat_0(t_end) - u_hat_0(0)|`` and ``max_imag`` the
    largest imaginary part of the physical-space solution.
    """
    prob = KdvSpectralProblem(N)
    y_ref = reference_solution(prob, t_end, n_steps=reference_steps, finest_steps=max(n_steps),
                               cache_dir=cache_dir)
    mass0 = prob.y0[0]
    rows = []
    for m in methods:
        m = m if isinstance(m, MethodSpec) else MethodSpec(*m)
        for n in n_steps:
            try:
                res, wall = timed_integrate(prob, m, (0.0, t_end), n, repeats=repeats)
            except (NewtonDivergence, LinearSolveFailure):
                rows.append(EfficiencyRow(m.label, n, math.nan, math.nan, status=DIVERGED))
                continue
            if not np.all(np.isfinite(res.y)):
                rows.append(EfficiencyRow(m.label, n, math.nan, wall, status=OVERFLOW))
                continue
            row = EfficiencyRow(m.label, n, relative_error(res.y, y_ref), wall,
                                mass_drift=float(abs(res.y[0] - mass0)),
                                max_imag=float(np.max(np.abs(prob.to_physical(res.y).imag))))
            if parallel:
                pres, pwall = timed_integrate(prob, m, (0.0, t_end), n,
                                              cfg=SolverConfig(parallel=True), repeats=repeats)
                row.wall_ms_parallel = pwall
                row.error_parallel = relative_error(pres.y, y_ref)
            rows.append(row)
    if out is not None:
        _write_csv(out, EFFICIENCY_HEADER,
                   ((r.method, r.n_steps, r.error, r.wall_ms_serial, r.wall_ms_parallel,
                     r.mass_drift, r.max_imag, r.status) for r in rows))
    return rows
