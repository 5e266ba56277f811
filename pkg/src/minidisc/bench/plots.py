"""Hand-written SVG charts. Every chart is a pure function of a CSV file."""
from __future__ import annotations

import csv
from pathlib import Path
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 520, 340
LEFT, RIGHT, TOP, BOTTOM = 60, 130, 36, 48
COLORS = ("#1f77b4", "#2ca02c", "#d62728", "#9467bd", "#ff7f0e")


def _num(s: str) -> float | None:
    return float(s) if s not in ("", None) else None


def _ticks(lo: float, hi: float, k: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    return [lo + (hi - lo) * i / (k - 1) for i in range(k)]


def _bounds(values: list[float]) -> tuple[float, float]:
    lo, hi = min(values), max(values)
    if hi - lo < 1e-9:
        lo, hi = lo - 0.5, hi + 0.5
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def _frame(title: str, xlabel: str, ylabel: str, xlo, xhi, ylo, yhi, x_ticks=True) -> list[str]:
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{LEFT + pw / 2:.1f}" y="20" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<line x1="{LEFT}" y1="{TOP + ph}" x2="{LEFT + pw}" y2="{TOP + ph}" stroke="black"/>',
        f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{TOP + ph}" stroke="black"/>',
        f'<text x="{LEFT + pw / 2:.1f}" y="{HEIGHT - 10}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="14" y="{TOP + ph / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 14 {TOP + ph / 2:.1f})">{escape(ylabel)}</text>',
    ]
    for v in _ticks(ylo, yhi):
        y = TOP + ph - (v - ylo) / (yhi - ylo) * ph
        out.append(f'<line x1="{LEFT - 4}" y1="{y:.1f}" x2="{LEFT}" y2="{y:.1f}" stroke="black"/>')
        out.append(f'<text x="{LEFT - 6}" y="{y + 4:.1f}" text-anchor="end">{v:.3f}</text>')
    if x_ticks:
        for v in _ticks(xlo, xhi):
            x = LEFT + (v - xlo) / (xhi - xlo) * pw
            out.append(f'<line x1="{x:.1f}" y1="{TOP + ph}" x2="{x:.1f}" y2="{TOP + ph + 4}" stroke="black"/>')
            out.append(f'<text x="{x:.1f}" y="{TOP + ph + 16}" text-anchor="middle">{v:.2f}</text>')
    return out


def line_chart(series: dict[str, list[tuple[float, float]]], title: str, xlabel: str,
               ylabel: str, highlight: float | None = None) -> str:
    """SVG text for one or more (x, y) series; ``highlight`` marks an x position."""
    pts = [p for s in series.values() for p in s]
    if not pts:
        raise ValueError("line_chart needs at least one point")
    xlo, xhi = _bounds([p[0] for p in pts])
    ylo, yhi = _bounds([p[1] for p in pts])
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def sx(x):
        return LEFT + (x - xlo) / (xhi - xlo) * pw

    def sy(y):
        return TOP + ph - (y - ylo) / (yhi - ylo) * ph

    out = _frame(title, xlabel, ylabel, xlo, xhi, ylo, yhi)
    if highlight is not None:
        out.append(f'<line x1="{sx(highlight):.1f}" y1="{TOP}" x2="{sx(highlight):.1f}" '
                   f'y2="{TOP + ph}" stroke="#888" stroke-dasharray="4 3"/>')
    for k, (name, s) in enumerate(series.items()):
        color = COLORS[k % len(COLORS)]
        s = sorted(s)
        path = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in s)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{path}"/>')
        for x, y in s:
            out.append(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="2.5" fill="{color}"/>')
        ly = TOP + 14 * k + 6
        out.append(f'<line x1="{WIDTH - RIGHT + 10}" y1="{ly}" x2="{WIDTH - RIGHT + 26}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{WIDTH - RIGHT + 30}" y="{ly + 4}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def bar_chart(groups: list[str], series: dict[str, list[float]], title: str, ylabel: str) -> str:
    """Grouped bars, one group per label in ``groups``."""
    if not groups:
        raise ValueError("bar_chart needs at least one group")
    ylo, yhi = 0.0, max(1.0, max(v for s in series.values() for v in s))
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM
    out = _frame(title, "layer", ylabel, 0, 1, ylo, yhi, x_ticks=False)
    slot = pw / len(groups)
    bw = slot * 0.8 / max(1, len(series))
    for g, label in enumerate(groups):
        out.append(f'<text x="{LEFT + slot * (g + 0.5):.1f}" y="{TOP + ph + 16}" '
                   f'text-anchor="middle">{escape(label)}</text>')
    for k, (name, vals) in enumerate(series.items()):
        color = COLORS[k % len(COLORS)]
        for g, v in enumerate(vals):
            x = LEFT + slot * g + slot * 0.1 + k * bw
            h = (v - ylo) / (yhi - ylo) * ph
            out.append(f'<rect x="{x:.1f}" y="{TOP + ph - h:.1f}" width="{bw:.1f}" height="{h:.1f}" '
                       f'fill="{color}"/>')
        ly = TOP + 14 * k + 6
        out.append(f'<rect x="{WIDTH - RIGHT + 10}" y="{ly - 5}" width="12" height="10" fill="{color}"/>')
        out.append(f'<text x="{WIDTH - RIGHT + 28}" y="{ly + 4}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _read(path: Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def candidate_charts(candidates_csv) -> dict[str, str]:
    """Chart name to SVG text for whatever columns the candidates table holds."""
    rows = _read(Path(candidates_csv))
    chosen = next((_num(r["achieved_scale"]) for r in rows if r.get("chosen") == "1"), None)

    def series(col):
        return [(_num(r["achieved_scale"]), _num(r[col])) for r in rows if _num(r.get(col, "")) is not None]

    charts = {}
    m_a, ta = series("metric"), series("ta_metric")
    if m_a or ta:
        s = {}
        if m_a:
            s["shared m_a"] = m_a
        if ta:
            s["standalone TA"] = ta
        charts["scale_metric"] = line_chart(s, "Candidate metric by scale", "scale", "dev accuracy",
                                            chosen)
    if series("t_lambda"):
        charts["scale_tradeoff"] = line_chart({"t_lambda": series("t_lambda")},
                                              "Tradeoff by scale", "scale", "t_lambda", chosen)
    if series("student_metric"):
        charts["scale_student"] = line_chart({"student via TA": series("student_metric")},
                                             "Student metric by TA scale", "TA scale",
                                             "dev accuracy", chosen)
    return charts


def structure_chart(structure_csv) -> str:
    rows = _read(Path(structure_csv))
    heads = [int(r["heads"]) / int(r["heads_total"]) for r in rows]
    neurons = [int(r["neurons"]) / int(r["neurons_total"]) for r in rows]
    return bar_chart([r["layer"] for r in rows], {"heads": heads, "neurons": neurons},
                     "Surviving structures of the chosen TA", "kept fraction")


def plot_run(run_dir) -> list[Path]:
    run_dir = Path(run_dir)
    written = []
    cand = run_dir / "candidates.csv"
    if cand.exists():
        for name, svg in candidate_charts(cand).items():
            p = run_dir / f"{name}.svg"
            p.write_text(svg)
            written.append(p)
    struct = run_dir / "structure.csv"
    if struct.exists():
        p = run_dir / "structure.svg"
        p.write_text(structure_chart(struct))
        written.append(p)
    return written
