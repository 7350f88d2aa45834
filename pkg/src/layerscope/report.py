"""Static SVG figures and a self-contained HTML report.

All emitters are pure: identical inputs give byte-identical output. Numbers
are written with fixed precision and files are visited in sorted order.
"""
from __future__ import annotations

import csv
import html
import io
import json
import math
from pathlib import Path
from typing import Sequence

import numpy as np

from .analysis import Projection2D
from .probing import CSV_FIELDS, LayerProbeResult, PhaseMatrix, results_rows
from .tasks import TASKS

RED = "#d62728"
ORANGE = "#ff7f0e"
DARK_CYAN = "#008b8b"
GRAY = "#b0b0b0"
HEAT_BASE = "#08519c"

# role -> (shape, color); answer drawn last so it stays visible
MARKERS = {
    "answer": ("diamond", RED),
    "question": ("star", ORANGE),
    "supporting-fact": ("circle", DARK_CYAN),
}
OTHER_MARKER = ("circle", GRAY)
DRAW_ORDER = {"other": 0, "supporting-fact": 1, "question": 2, "answer": 3}

SENTENCE_PALETTE = ("#1f77b4", "#2ca02c", "#9467bd", "#8c564b", "#e377c2",
                    "#17becf", "#bcbd22", "#7f7f7f", "#aec7e8", "#98df8a")
CURVE_PALETTE = {"NEL": "#1f77b4", "COREF": "#2ca02c", "REL": "#9467bd", "QUES": "#ff7f0e", "SUP": "#d62728"}

W, H, PAD = 480, 400, 40


def _f(x: float) -> str:
    s = f"{x:.2f}"
    return "0.00" if s == "-0.00" else s


def marker_for(role: str) -> tuple[str, str]:
    return MARKERS.get(role, OTHER_MARKER)


def _shape(kind: str, cx: float, cy: float, color: str, r: float = 5.0) -> str:
    if kind == "diamond":
        pts = [(cx, cy - r * 1.4), (cx + r, cy), (cx, cy + r * 1.4), (cx - r, cy)]
        return f'<polygon class="diamond" points="{" ".join(f"{_f(x)},{_f(y)}" for x, y in pts)}" fill="{color}"'
    if kind == "star":
        pts = []
        for i in range(10):
            rad = r * 1.6 if i % 2 == 0 else r * 0.7
            a = -math.pi / 2 + i * math.pi / 5
            pts.append((cx + rad * math.cos(a), cy + rad * math.sin(a)))
        return f'<polygon class="star" points="{" ".join(f"{_f(x)},{_f(y)}" for x, y in pts)}" fill="{color}"'
    return f'<circle class="circle" cx="{_f(cx)}" cy="{_f(cy)}" r="{_f(r)}" fill="{color}"'


def _scaler(xs: np.ndarray, ys: np.ndarray):
    def span(v):
        lo, hi = float(np.min(v)), float(np.max(v))
        if hi - lo < 1e-12:
            lo, hi = lo - 1.0, hi + 1.0
        return lo, hi

    x0, x1 = span(xs)
    y0, y1 = span(ys)
    sx = lambda x: PAD + (x - x0) / (x1 - x0) * (W - 2 * PAD)
    sy = lambda y: H - PAD - (y - y0) / (y1 - y0) * (H - 2 * PAD)
    return sx, sy


def _svg_open(width: int, height: int, title: str, seed: int | None = None) -> list[str]:
    desc = [] if seed is None else [f"<desc>seed={seed}</desc>"]
    return [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f"<title>{html.escape(title)}</title>",
        *desc,
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>',
    ]


def emit_layer_scatter(projection: Projection2D, highlight_clusters: bool = False,
                       color_by: str = "role", seed: int | None = None) -> bytes:
    """Scatter of one layer's projected tokens.

    ``color_by="role"``: answer red diamond, question orange star, supporting
    fact dark cyan circle, everything else gray circle. ``color_by="sentence"``
    colors context tokens by sentence index instead.
    """
    if len(projection) == 0:
        raise ValueError("empty projection")
    xs, ys = np.asarray(projection.x), np.asarray(projection.y)
    sx, sy = _scaler(xs, ys)
    out = _svg_open(W, H, f"layer {projection.layer} ({projection.method})", seed)
    out.append(f'<text x="{W // 2}" y="20" text-anchor="middle" font-size="14">'
               f"Layer {projection.layer}</text>")
    if highlight_clusters and projection.clusters is not None:
        labels = np.asarray(projection.clusters)
        for c in sorted(set(labels.tolist())):
            idx = np.flatnonzero(labels == c)
            px = np.array([sx(xs[i]) for i in idx])
            py = np.array([sy(ys[i]) for i in idx])
            cx, cy = px.mean(), py.mean()
            r = float(np.max(np.hypot(px - cx, py - cy))) + 8.0
            out.append(f'<circle class="cluster" cx="{_f(cx)}" cy="{_f(cy)}" r="{_f(r)}" fill="none" '
                       f'stroke="#555555" stroke-dasharray="4,3"><title>cluster {c}</title></circle>')
    order = sorted(range(len(projection)),
                   key=lambda i: (DRAW_ORDER.get(projection.roles[i], 0), i))
    for i in order:
        role = projection.roles[i]
        kind, color = marker_for(role)
        if color_by == "sentence":
            s = projection.sentences[i] if projection.sentences else -1
            kind = "circle"
            color = SENTENCE_PALETTE[s % len(SENTENCE_PALETTE)] if s >= 0 else GRAY
        tok = projection.tokens[i] if projection.tokens else str(i)
        out.append(f"{_shape(kind, sx(xs[i]), sy(ys[i]), color)} data-role=\"{role}\">"
                   f"<title>{html.escape(tok)}</title></{'circle' if kind == 'circle' else 'polygon'}>")
    out.append("</svg>")
    return ("\n".join(out) + "\n").encode("utf-8")


def emit_probe_curves(results: Sequence[LayerProbeResult], seed: int | None = None) -> tuple[bytes, str]:
    """Macro-F1 over layers, one polyline per (task, model tag); returns (svg, csv)."""
    if not results:
        raise ValueError("no probe results")
    n_layers = max(len(r.scores) for r in results)
    width, height, left, bottom = 560, 380, 60, 50
    px = lambda i: left + i * (width - left - 150) / max(1, n_layers - 1)
    py = lambda v: height - bottom - v * (height - bottom - 30)
    out = _svg_open(width, height, "probe curves", seed)
    out.append(f'<line x1="{left}" y1="{_f(py(0))}" x2="{_f(px(n_layers - 1))}" y2="{_f(py(0))}" stroke="#000000"/>')
    out.append(f'<line x1="{left}" y1="{_f(py(0))}" x2="{left}" y2="{_f(py(1))}" stroke="#000000"/>')
    for i in range(n_layers):
        out.append(f'<text class="xtick" x="{_f(px(i))}" y="{_f(py(0) + 16)}" text-anchor="middle" '
                   f'font-size="11">{i}</text>')
    for v in (0.0, 0.25, 0.5, 0.75, 1.0):
        out.append(f'<text class="ytick" x="{left - 6}" y="{_f(py(v) + 4)}" text-anchor="end" '
                   f'font-size="11">{v:.2f}</text>')
    out.append(f'<text x="{_f((left + px(n_layers - 1)) / 2)}" y="{height - 12}" text-anchor="middle" '
               f'font-size="12">layer</text>')
    out.append(f'<text x="16" y="{_f(py(0.5))}" text-anchor="middle" font-size="12" '
               f'transform="rotate(-90 16 {_f(py(0.5))})">macro-F1</text>')
    ordered = sorted(results, key=lambda r: (TASKS.index(r.task) if r.task in TASKS else 99, r.task, r.model_tag))
    for j, r in enumerate(ordered):
        color = CURVE_PALETTE.get(r.task, "#333333")
        dash = "" if r.model_tag == "fine-tuned" else ' stroke-dasharray="5,4"'
        pts = " ".join(f"{_f(px(i))},{_f(py(v))}" for i, v in enumerate(r.scores))
        name = f"{r.task} ({r.model_tag})"
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"{dash}>'
                   f"<title>{html.escape(name)}</title></polyline>")
        ly = 40 + 16 * j
        lx = width - 140
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 18}" y2="{ly}" stroke="{color}" stroke-width="2"{dash}/>')
        out.append(f'<text class="legend" x="{lx + 22}" y="{ly + 4}" font-size="10">{html.escape(name)}</text>')
    out.append("</svg>")
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    w.writerows(results_rows(ordered))
    return ("\n".join(out) + "\n").encode("utf-8"), buf.getvalue()


def heat_color(value: float, base: str = HEAT_BASE) -> str:
    """Blend from white (0) to ``base`` (1)."""
    v = min(1.0, max(0.0, float(value)))
    rgb = [int(base[i:i + 2], 16) for i in (1, 3, 5)]
    mixed = [round(255 + (c - 255) * v) for c in rgb]
    return "#" + "".join(f"{c:02x}" for c in mixed)


def emit_phase_heatmap(matrix: PhaseMatrix, seed: int | None = None) -> bytes:
    rows = [t for t in TASKS if t in matrix.tasks] + [t for t in matrix.tasks if t not in TASKS]
    n_cols = matrix.values.shape[1]
    cw, ch, left, top = 56, 34, 70, 30
    width, height = left + cw * n_cols + 20, top + ch * len(rows) + 40
    out = _svg_open(width, height, "phase heatmap", seed)
    for r, task in enumerate(rows):
        i = matrix.tasks.index(task)
        y = top + r * ch
        out.append(f'<text class="rowlabel" x="{left - 8}" y="{y + ch // 2 + 4}" text-anchor="end" '
                   f'font-size="12">{html.escape(task)}</text>')
        for c in range(n_cols):
            v = float(matrix.values[i, c])
            out.append(f'<rect class="cell" x="{left + c * cw}" y="{y}" width="{cw}" height="{ch}" '
                       f'fill="{heat_color(v)}" stroke="#ffffff" data-value="{v:.4f}">'
                       f"<title>{html.escape(task)} layer {c}: {v:.3f}</title></rect>")
    for c in range(n_cols):
        out.append(f'<text x="{left + c * cw + cw // 2}" y="{top + ch * len(rows) + 16}" '
                   f'text-anchor="middle" font-size="11">{c}</text>')
    out.append(f'<text x="{left + cw * n_cols // 2}" y="{height - 6}" text-anchor="middle" '
               f'font-size="12">layer</text>')
    out.append("</svg>")
    return ("\n".join(out) + "\n").encode("utf-8")


# -- HTML report ------------------------------------------------------------------

EXPECTED = ("probes.csv", "probes.svg", "phases.svg")
CONFIG_SUFFIXES = (".cfg", ".conf", ".txt", ".json")


def _csv_table(text: str) -> str:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        return "<p>(empty)</p>"
    head = "".join(f"<th>{html.escape(c)}</th>" for c in rows[0])
    body = "".join("<tr>" + "".join(f"<td>{html.escape(c)}</td>" for c in r) + "</tr>" for r in rows[1:])
    return f"<table><thead><tr>{head}</tr></thead><tbody>{body}</tbody></table>"


def _strip_xml_decl(svg: str) -> str:
    return svg.split("?>", 1)[1].lstrip() if svg.startswith("<?xml") else svg


def assemble_report(run_dir) -> str:
    """One HTML document embedding every SVG, config echo and metric table under ``run_dir``."""
    root = Path(run_dir)
    files = sorted(p for p in root.rglob("*") if p.is_file() and p.name != "report.html") if root.exists() else []
    rel = lambda p: p.relative_to(root).as_posix()
    parts = ["<!DOCTYPE html>", '<html lang="en"><head><meta charset="utf-8">',
             f"<title>layerscope report: {html.escape(root.name)}</title>",
             "<style>body{font-family:sans-serif;margin:2em}table{border-collapse:collapse}"
             "td,th{border:1px solid #ccc;padding:2px 6px;font-size:12px}pre{background:#f6f6f6;padding:8px}"
             "figure{display:inline-block;margin:6px}</style></head><body>",
             f"<h1>Run {html.escape(root.name)}</h1>"]
    if not files:
        parts.append('<p class="notice">no artifacts</p></body></html>')
        return "\n".join(parts) + "\n"

    names = {p.name for p in files}
    missing = [e for e in EXPECTED if e not in names]
    if not any(n.startswith("scatter_layer_") for n in names):
        missing.append("scatter_layer_<n>.svg")
    if missing:
        parts.append("<h2>Missing artifacts</h2><ul>" +
                     "".join(f'<li class="missing">{html.escape(m)}</li>' for m in missing) + "</ul>")

    configs = [p for p in files if p.suffix in CONFIG_SUFFIXES and ("config" in p.name or p.suffix == ".cfg")]
    if configs:
        parts.append("<h2>Configuration</h2>")
        for p in configs:
            parts.append(f"<h3>{html.escape(rel(p))}</h3><pre>{html.escape(p.read_text(encoding='utf-8'))}</pre>")

    reports = [p for p in files if p.name.endswith("report.json")]
    if reports:
        parts.append("<h2>Training</h2>")
        for p in reports:
            data = json.loads(p.read_text(encoding="utf-8"))
            summary = {k: data[k] for k in ("head", "best_step", "best_dev", "test_accuracy", "config",
                                            "assumptions", "best_index", "cells") if k in data}
            parts.append(f"<h3>{html.escape(rel(p))}</h3><pre>{html.escape(json.dumps(summary, indent=2, sort_keys=True))}</pre>")

    tables = [p for p in files if p.suffix == ".csv"]
    if tables:
        parts.append("<h2>Metrics</h2>")
        for p in tables:
            parts.append(f"<h3>{html.escape(rel(p))}</h3>{_csv_table(p.read_text(encoding='utf-8'))}")

    svgs = [p for p in files if p.suffix == ".svg"]
    if svgs:
        parts.append("<h2>Figures</h2>")
        for p in svgs:
            parts.append(f"<figure>{_strip_xml_decl(p.read_text(encoding='utf-8'))}"
                         f"<figcaption>{html.escape(rel(p))}</figcaption></figure>")
    parts.append("</body></html>")
    return "\n".join(parts) + "\n"


def write_report(run_dir) -> Path:
    out = Path(run_dir) / "report.html"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(assemble_report(run_dir), encoding="utf-8")
    return out
