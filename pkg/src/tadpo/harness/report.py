"""Text tables in the layout of the comparison table, CSV aggregation and standalone SVG charts."""
from __future__ import annotations

import html
import json
from pathlib import Path
from typing import Sequence

import numpy as np

METRICS = ("sr", "cp", "ms")
METHOD_LABELS = {
    "mppi_direct": "MPPI (generous)",
    "mppi_realtime": "MPPI (real-time cap)",
    "pure_pursuit": "Pure pursuit (dense)",
    "teacher_ppo": "PPO teacher (dense)",
    "teacher_mppi": "MPPI teacher",
    "teacher_pure_pursuit": "Pure-pursuit teacher",
    "tadpo": "TADPO",
    "ppo": "PPO",
    "dagger": "DAgger",
    "ppo_bc": "PPO+BC",
}


def summarize(rows: Sequence[dict]) -> dict[tuple[str, str], dict]:
    """Mean and standard deviation over seeds per (method, family)."""
    groups: dict[tuple[str, str], list[dict]] = {}
    for r in rows:
        groups.setdefault((r["method"], r["world_family"]), []).append(r)
    out = {}
    for key, rs in groups.items():
        out[key] = {m: float(np.mean([r[m] for r in rs])) for m in METRICS}
        out[key] |= {f"{m}_std": float(np.std([r[m] for r in rs])) for m in METRICS}
        out[key]["n_seeds"] = len(rs)
    return out


def render_table(rows: Sequence[dict], families: Sequence[str] | None = None,
                 methods: Sequence[str] | None = None) -> str:
    """Methods as rows, world families as column groups of sr / cp / ms (means over seeds)."""
    summary = summarize(rows)
    families = list(families or dict.fromkeys(f for _, f in summary))
    methods = list(methods or dict.fromkeys(m for m, _ in summary))
    label_w = max([len("method")] + [len(METHOD_LABELS.get(m, m)) for m in methods])
    cell = 6
    group_w = 3 * cell + 2
    head1 = " " * label_w + " | " + " | ".join(f.center(group_w) for f in families)
    head2 = "method".ljust(label_w) + " | " + " | ".join(
        " ".join(m.rjust(cell) for m in METRICS) for _ in families)
    lines = [head1, head2, "-" * len(head2)]
    for m in methods:
        cells = []
        for f in families:
            s = summary.get((m, f))
            cells.append(" ".join(f"{s[k]:{cell}.2f}" for k in METRICS) if s else " ".join("-".rjust(cell) for _ in METRICS))
        lines.append(METHOD_LABELS.get(m, m).ljust(label_w) + " | " + " | ".join(cells))
    return "\n".join(lines) + "\n"


def write_jsonl(path: str | Path, records: Sequence[dict]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


# -- SVG ------------------------------------------------------------------------

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def _scale(lo: float, hi: float, a: float, b: float):
    span = hi - lo if hi > lo else 1.0
    return lambda v: a + (v - lo) / span * (b - a)


def svg_line_chart(series: dict[str, tuple[Sequence[float], Sequence[float]]], title: str = "",
                   xlabel: str = "", ylabel: str = "", width: int = 640, height: int = 400) -> str:
    """Polyline chart, one line per named series; NaN/None points are skipped."""
    pad_l, pad_r, pad_t, pad_b = 60, 150, 30, 45
    pts = {k: [(float(x), float(y)) for x, y in zip(*v) if y is not None and np.isfinite(y)]
           for k, v in series.items()}
    allx = [p[0] for v in pts.values() for p in v] or [0.0, 1.0]
    ally = [p[1] for v in pts.values() for p in v] or [0.0, 1.0]
    sx = _scale(min(allx), max(allx), pad_l, width - pad_r)
    sy = _scale(min(ally), max(ally), height - pad_b, pad_t)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="18" text-anchor="middle">{html.escape(title)}</text>',
           f'<line x1="{pad_l}" y1="{height - pad_b}" x2="{width - pad_r}" y2="{height - pad_b}" stroke="black"/>',
           f'<line x1="{pad_l}" y1="{pad_t}" x2="{pad_l}" y2="{height - pad_b}" stroke="black"/>']
    for v in np.linspace(min(ally), max(ally), 5):
        out.append(f'<text x="{pad_l - 5}" y="{sy(v) + 4:.1f}" text-anchor="end">{v:.3g}</text>')
    for v in np.linspace(min(allx), max(allx), 5):
        out.append(f'<text x="{sx(v):.1f}" y="{height - pad_b + 15}" text-anchor="middle">{v:.3g}</text>')
    out.append(f'<text x="{(pad_l + width - pad_r) / 2:.1f}" y="{height - 8}" text-anchor="middle">{html.escape(xlabel)}</text>')
    out.append(f'<text x="14" y="{height / 2:.1f}" text-anchor="middle" transform="rotate(-90 14 {height / 2:.1f})">'
               f'{html.escape(ylabel)}</text>')
    for i, (name, p) in enumerate(pts.items()):
        color = _PALETTE[i % len(_PALETTE)]
        if p:
            coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in p)
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        y = pad_t + 16 * i
        out.append(f'<line x1="{width - pad_r + 10}" y1="{y}" x2="{width - pad_r + 30}" y2="{y}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{width - pad_r + 35}" y="{y + 4}">{html.escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def svg_world(world, trajectories: dict[str, Sequence[tuple[float, float]]] | None = None,
              width: int = 640) -> str:
    """Top-down view: obstacles, slow zones, sparse chain, dense plan and driven paths."""
    xmin, ymin, xmax, ymax = world.bounds
    scale = width / (xmax - xmin)
    height = int(round((ymax - ymin) * scale))
    tx = lambda x: (x - xmin) * scale  # noqa: E731
    ty = lambda y: (ymax - y) * scale  # noqa: E731
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">', f'<rect width="{width}" height="{height}" fill="white" stroke="black"/>']
    for x, y, r, _cap in world.slow_zones:
        out.append(f'<circle cx="{tx(x):.1f}" cy="{ty(y):.1f}" r="{r * scale:.1f}" fill="#fde9c9"/>')
    for x, y, r in world.obstacles:
        out.append(f'<circle cx="{tx(x):.1f}" cy="{ty(y):.1f}" r="{r * scale:.1f}" fill="#555"/>')

    def line(points, color, dash=""):
        coords = " ".join(f"{tx(x):.1f},{ty(y):.1f}" for x, y in points)
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        return f'<polyline fill="none" stroke="{color}" stroke-width="1.5"{extra} points="{coords}"/>'

    out.append(line(world.sparse_waypoints, "#999", "6,4"))
    if world.dense_plan:
        out.append(line(world.dense_plan, "#2ca02c", "2,2"))
    for i, (name, path) in enumerate((trajectories or {}).items()):
        out.append(line(path, _PALETTE[i % len(_PALETTE)]))
    gx, gy = world.goal
    out.append(f'<circle cx="{tx(gx):.1f}" cy="{ty(gy):.1f}" r="{world.goal_radius * scale:.1f}" '
               'fill="none" stroke="#d62728" stroke-width="2"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
