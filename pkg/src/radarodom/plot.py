"""Top-down trajectory SVG and per-length error CSV."""

from __future__ import annotations

import csv
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

COLORS = ["#000000", "#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd"]


def trajectory_svg(trajectories, size=600, margin=30):
    """SVG text with one x-y polyline per named trajectory."""
    if not trajectories:
        raise ValueError("no trajectories to draw")
    xy = {k: t.positions()[:, :2] for k, t in trajectories.items()}
    allpts = np.concatenate(list(xy.values()))
    lo, hi = allpts.min(axis=0), allpts.max(axis=0)
    span = max(float((hi - lo).max()), 1e-6)
    scale = (size - 2 * margin) / span

    def px(p):
        # y axis points up in the plot
        return margin + (p[0] - lo[0]) * scale, size - margin - (p[1] - lo[1]) * scale

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
             f'viewBox="0 0 {size} {size}">',
             f'<rect width="{size}" height="{size}" fill="white"/>']
    for i, (name, pts) in enumerate(xy.items()):
        color = COLORS[i % len(COLORS)]
        coords = " ".join("{:.2f},{:.2f}".format(*px(p)) for p in pts)
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                     f'points="{coords}"><title>{escape(name)}</title></polyline>')
        parts.append(f'<text x="{margin}" y="{16 + 14 * i}" font-size="12" fill="{color}">'
                     f'{escape(name)}</text>')
    parts.append(f'<text x="{size - margin}" y="{size - 8}" font-size="10" text-anchor="end">'
                 f'{span:.1f} m across</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def length_table(report):
    """``[(length, t_rel, r_rel)]`` averaged over the sequences that reach
    each length."""
    acc = {}
    for _, length, t, r in report.rows():
        acc.setdefault(length, []).append((t, r))
    if not acc:
        raise ValueError("report has no per-length errors")
    return [(L, float(np.mean([v[0] for v in vals])), float(np.mean([v[1] for v in vals])))
            for L, vals in sorted(acc.items())]


def plot_emit(out_dir, trajectories=None, report=None, stem="odometry"):
    """Write ``<stem>_traj.svg`` and/or ``<stem>_errors.csv``; returns the
    written paths."""
    if not trajectories and report is None:
        raise ValueError("plot_emit: nothing to plot")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if trajectories:
        p = out / f"{stem}_traj.svg"
        p.write_text(trajectory_svg(trajectories))
        written.append(p)
    if report is not None:
        p = out / f"{stem}_errors.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["length_m", "t_rel", "r_rel"])
            for L, t, r in length_table(report):
                w.writerow([f"{L:g}", repr(t), repr(r)])
        written.append(p)
    return written
