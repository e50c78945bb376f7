"""Matplotlib figures written next to the CSV output (Agg backend, no display)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 4.0),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 7,
    "savefig.bbox": "tight",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_convergence(reports, path, title: str = "") -> Path:
    """Error against step size, one line per method; failed rows are dropped."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for rep in reports:
            pts = [(r.h, r.error) for r in rep.rows if np.isfinite(r.error) and r.error > 0]
            if not pts:
                continue
            h, e = zip(*pts)
            order = "n/a" if rep.order is None else f"{rep.order:.2f}"
            ax.loglog(h, e, "o-", ms=3, label=f"{rep.method.label}  p={order}")
        ax.set_xlabel("h")
        ax.set_ylabel("relative error")
        if title:
            ax.set_title(title)
        ax.legend(ncol=2)
        return _save(fig, path)


def plot_regions(scans, path, labels=None, title: str = "") -> Path:
    """Overlay the ``rho = 1`` contours of several scans."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        colors = plt.cm.viridis(np.linspace(0, 0.9, max(len(scans), 1)))
        for i, (scan, c) in enumerate(zip(scans, colors)):
            g = scan.grid
            ax.contourf(g.re, g.im, scan.mask.astype(float), levels=[0.5, 1.5], colors=[c], alpha=0.15)
            for j, seg in enumerate(scan.contours):
                lab = labels[i] if labels and j == 0 else None
                ax.plot(seg.real, seg.imag, color=c, lw=1, label=lab)
        ax.set_aspect("equal")
        ax.set_xlabel("Re z2")
        ax.set_ylabel("Im z2")
        if title:
            ax.set_title(title)
        if labels:
            ax.legend(loc="lower left")
        return _save(fig, path)


def plot_efficiency(rows, path, title: str = "") -> Path:
    """Error against serial (and parallel, when present) wall time."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for method in dict.fromkeys(r.method for r in rows):
            sel = [r for r in rows if r.method == method and np.isfinite(r.error)]
            if not sel:
                continue
            line, = ax.loglog([r.wall_ms_serial for r in sel], [r.error for r in sel],
                              "o-", ms=3, label=method)
            par = [r for r in sel if r.wall_ms_parallel is not None]
            if par:
                ax.loglog([r.wall_ms_parallel for r in par], [r.error_parallel for r in par],
                          "s--", ms=3, color=line.get_color(), label=f"{method} parallel")
        ax.set_xlabel("wall time [ms]")
        ax.set_ylabel("relative error")
        if title:
            ax.set_title(title)
        ax.legend()
        return _save(fig, path)


def plot_order_sweep(rows, path) -> Path:
    """Fitted order against epsilon from :func:`fimex.harness.run_vdp_sweep` rows."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for method in dict.fromkeys(r[1] for r in rows):
            sel = [r for r in rows if r[1] == method and r[2] is not None]
            ax.semilogx([r[0] for r in sel], [r[2] for r in sel], "o-", ms=3, label=method)
        ax.invert_xaxis()
        ax.set_xlabel("epsilon")
        ax.set_ylabel("fitted order")
        ax.legend(ncol=2)
        return _save(fig, path)
