"""Command-line front end: ``fimex {coeffs,stability,converge,kdv,vdp}``."""
from __future__ import annotations

import argparse
import cmath
import math
import sys
from itertools import product
from pathlib import Path

from . import __version__, harness
from .integrator import MethodSpec
from .nodes import UnsupportedOrderError
from .stability import Grid
from .tableaux import build_propagator, export_coeffs


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v]


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v]


def _variants(text: str) -> list[str]:
    return [v for v in text.split(",") if v]


def _z1_list(text: str) -> list[complex]:
    """``"3j,-6"`` or polar ``"6@pi/2"`` entries separated by commas."""
    out = []
    for item in (s.strip() for s in text.split(",") if s.strip()):
        if "@" in item:
            mod, arg = item.split("@")
            arg = float(eval(arg, {"__builtins__": {}}, {"pi": math.pi}))
            z = cmath.rect(float(mod), arg)
            # drop the rounding residue of cos/sin at multiples of pi/2
            out.append(complex(round(z.real, 12), round(z.imag, 12)))
        else:
            out.append(complex(item.replace(" ", "")))
    return out


def _methods(args) -> list[MethodSpec]:
    return [MethodSpec(v, q, k) for v, q, k in product(_variants(args.variant), _ints(args.q), _ints(args.kappa))]


def _schedule(args, t_end: float) -> list[int]:
    if args.steps:
        return sorted(set(_ints(args.steps)))
    h_max, h_min, count = args.h_range
    return harness.log_schedule(t_end, h_max, h_min, int(count))


def _add_method_args(p, q="4", kappa="1", variant="radau-star"):
    p.add_argument("--q", default=q, help="comma-separated node counts (default %(default)s)")
    p.add_argument("--kappa", default=kappa, help="comma-separated iterator counts (default %(default)s)")
    p.add_argument("--variant", default=variant, help="radau, radau-star, or both comma-separated")


def _add_run_args(p):
    p.add_argument("--steps", help="comma-separated step counts")
    p.add_argument("--h-range", nargs=3, type=float, default=(0.05, 1e-3, 12),
                   metavar=("H_MAX", "H_MIN", "COUNT"), help="log-spaced step sizes when --steps is absent")
    p.add_argument("--repeats", type=int, default=3, help="timing repetitions, minimum reported")
    p.add_argument("--parallel", action="store_true", help="evaluate block nodes on a thread pool")
    p.add_argument("--cache", type=Path, help="reference cache directory")
    p.add_argument("--out", type=Path, default=Path("fimex-out"))
    p.add_argument("--plot", action="store_true", help="also render PNG figures next to the CSVs")


def cmd_coeffs(args) -> int:
    for v, q in product(_variants(args.variant), _ints(args.q)):
        text = export_coeffs(build_propagator(q, v), args.format)
        if args.out is None:
            sys.stdout.write(text)
        else:
            path = args.out / f"{v}_q{q}.{args.format}"
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", newline="") as fh:
                fh.write(text)
            print(path)
    return 0


def cmd_stability(args) -> int:
    grid = Grid.parse(args.grid) if args.grid else Grid()
    z1 = _z1_list(args.z1) if args.z1 else None
    for v, q in product(_variants(args.variant), _ints(args.q)):
        scans, labels = [], []
        for k in _ints(args.kappa):
            res = harness.run_stability_export(q, v, k, args.out, z1_list=z1, theta=args.theta, grid=grid)
            for z, scan, grid_csv, _ in res:
                print(f"{grid_csv}  area={scan.area:.6g}  origin_stable={scan.contains(0j)}")
                scans.append(scan)
                labels.append(f"k={k} z1={z:.3g}" if args.theta is None else f"k={k} theta={z.real:.3g}")
        if args.plot:
            from .plotting import plot_regions
            print(plot_regions(scans, args.out / f"{v}_q{q}_regions.png", labels,
                               title=build_propagator(q, v).name))
    return 0


def _converge(args, problem: str, params: dict, out: Path, title: str) -> tuple[int, list]:
    t_end = args.t_end or harness.DEFAULT_T_END[problem]
    spec = harness.ExperimentSpec(problem, _methods(args), _schedule(args, t_end), params=params,
                                  splitting=getattr(args, "splitting", None), t_end=t_end, out_dir=out,
                                  repeats=args.repeats, parallel=args.parallel, cache_dir=args.cache)
    reports = harness.run_convergence(spec)
    for rep in reports:
        order = "n/a" if rep.order is None else f"{rep.order:.3f}"
        print(f"{rep.method.label:<16} expected {rep.expected}  fitted {order}  "
              f"({len(rep.valid)}/{len(rep.rows)} rows in fit)")
    if args.plot:
        from .plotting import plot_convergence
        print(plot_convergence(reports, out / f"{problem}_convergence.png", title))
    return (1 if any(r.all_failed for r in reports) else 0), reports


def cmd_converge(args) -> int:
    params = {}
    if args.problem == "vdp":
        params["epsilon"] = args.eps[0]
    elif args.problem == "kdv":
        params["N"] = args.n
    else:
        params.update(lambda1=complex(args.lambda1), lambda2=complex(args.lambda2))
    code, _ = _converge(args, args.problem, params, args.out, args.problem)
    return code


def cmd_kdv(args) -> int:
    t_end = args.t_end or harness.DEFAULT_T_END["kdv"]
    steps = _ints(args.steps) if args.steps else [100, 200, 400, 800, 1600]
    rows = harness.run_kdv_efficiency(_methods(args), steps, N=args.n, t_end=t_end,
                                      parallel=args.parallel, repeats=args.repeats,
                                      out=args.out / f"kdv_N{args.n}_efficiency.csv", cache_dir=args.cache)
    for r in rows:
        par = "" if r.wall_ms_parallel is None else f"  parallel {r.wall_ms_parallel:.1f} ms"
        print(f"{r.method:<16} n={r.n_steps:<6} error {r.error:.3e}  serial {r.wall_ms_serial:.1f} ms{par}  {r.status}")
    if args.plot:
        from .plotting import plot_efficiency
        print(plot_efficiency(rows, args.out / f"kdv_N{args.n}_efficiency.png", f"KdV N={args.n}"))
    return 1 if all(r.status != harness.OK for r in rows) else 0


def cmd_vdp(args) -> int:
    eps = args.eps if args.eps_given else list(harness.VDP_EPSILONS)
    t_end = args.t_end or harness.DEFAULT_T_END["vdp"]
    rows = harness.run_vdp_sweep(_methods(args), _schedule(args, t_end), eps, args.splitting,
                                 out_dir=args.out, cache_dir=args.cache, repeats=args.repeats)
    for e, label, order, _, n_valid in rows:
        shown = "n/a" if order is None else f"{order:.3f}"
        print(f"eps={e:<8.1e} {label:<16} fitted {shown}  ({n_valid} rows in fit)")
    if args.plot:
        from .plotting import plot_order_sweep
        print(plot_order_sweep(rows, args.out / "vdp_orders.png"))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fimex", description=__doc__)
    ap.add_argument("--version", action="version", version=f"fimex {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("coeffs", help="export propagator and iterator coefficients")
    _add_method_args(p, q="2,3,4", variant="radau,radau-star")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--out", type=Path, help="directory (default: stdout)")
    p.set_defaults(func=cmd_coeffs)

    p = sub.add_parser("stability", help="scan stability regions S_hat(z1) or S_tilde(theta)")
    _add_method_args(p, kappa="0,1,2")
    p.add_argument("--z1", help='comma-separated z1 values, e.g. "0,3j,6@pi/2" (default: |z1| in {0,3,6} at arg 0, 3pi/2, pi/2)')
    p.add_argument("--theta", type=float, help="wedge angle for S_tilde instead of --z1")
    p.add_argument("--grid", help='"n" or "re_min,re_max,im_min,im_max,nx,ny" (default -8,8,-8,8,401,401)')
    p.add_argument("--out", type=Path, default=Path("fimex-out"))
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_stability)

    p = sub.add_parser("converge", help="convergence study with order fits")
    p.add_argument("--problem", choices=("dahlquist", "vdp", "kdv"), default="vdp")
    _add_method_args(p, q="3,4,5", kappa="0,1,2")
    p.add_argument("--splitting", default="semi-implicit",
                   choices=("semi-implicit", "linearly-implicit", "fully-implicit"))
    p.add_argument("--eps", type=_floats, default=[1.0])
    p.add_argument("--n", type=int, default=256, help="KdV Fourier modes")
    p.add_argument("--lambda1", default="-1")
    p.add_argument("--lambda2", default="0")
    p.add_argument("--t-end", type=float)
    _add_run_args(p)
    p.set_defaults(func=cmd_converge)

    p = sub.add_parser("kdv", help="KdV error against wall time")
    _add_method_args(p, q="5", kappa="2")
    p.add_argument("--n", type=int, default=256, help="Fourier modes (power of two)")
    p.add_argument("--t-end", type=float)
    _add_run_args(p)
    p.set_defaults(func=cmd_kdv)

    p = sub.add_parser("vdp", help="fitted order of Van der Pol runs across epsilon")
    _add_method_args(p, q="3,4,5", kappa="0,1,2")
    p.add_argument("--splitting", default="linearly-implicit",
                   choices=("semi-implicit", "linearly-implicit", "fully-implicit"))
    p.add_argument("--eps", type=_floats, default=None, help="comma-separated (default 1 .. 1e-8)")
    p.add_argument("--t-end", type=float)
    _add_run_args(p)
    p.set_defaults(func=cmd_vdp)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "command", None) == "vdp":
        args.eps_given = args.eps is not None
    try:
        return args.func(args)
    except (UnsupportedOrderError, ValueError) as exc:
        print(f"fimex: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
