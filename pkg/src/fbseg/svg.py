"""Minimal deterministic SVG line charts.

Hand-rolled rather than using a plotting library so identical inputs yield
byte-identical files.  Data series are the only <polyline> elements; axes,
ticks and reference lines are <line> elements.
"""

from __future__ import annotations

WIDTH, HEIGHT = 640, 440
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 64, 24, 40, 56

PALETTE = ["#d1495b", "#00798c", "#edae49", "#66a182", "#8d5a97",
           "#55586e", "#c97b63", "#2e4057"]
BASELINE_COLOR = "#1f4fd8"  # random performance: blue horizontal line


def _fmt(value: float) -> str:
    return f"{value:.3f}".rstrip("0").rstrip(".")


def _ticks(lo: float, hi: float, n: int = 5) -> list:
    if hi <= lo:
        hi = lo + 1.0
    step = (hi - lo) / (n - 1)
    return [lo + i * step for i in range(n)]


class LineChart:
    def __init__(self, title: str, xlabel: str, ylabel: str,
                 x_range=None, y_range=None):
        self.title = title
        self.xlabel = xlabel
        self.ylabel = ylabel
        self.series = []       # (label, points, color, dashed)
        self.hlines = []       # (label, y, color)
        self.x_range = x_range
        self.y_range = y_range

    def add_series(self, label: str, points, color: str | None = None,
                   dashed: bool = False) -> None:
        if color is None:
            color = PALETTE[len(self.series) % len(PALETTE)]
        self.series.append((label, list(points), color, dashed))

    def add_hline(self, label: str, y: float, color: str = BASELINE_COLOR) -> None:
        self.hlines.append((label, float(y), color))

    def _bounds(self):
        xs = [p[0] for _, pts, _, _ in self.series for p in pts]
        ys = [p[1] for _, pts, _, _ in self.series for p in pts]
        ys += [y for _, y, _ in self.hlines]
        if self.x_range:
            x_lo, x_hi = self.x_range
        else:
            x_lo, x_hi = (min(xs), max(xs)) if xs else (0.0, 1.0)
            if x_lo == x_hi:
                x_lo, x_hi = x_lo - 0.5, x_hi + 0.5
        if self.y_range:
            y_lo, y_hi = self.y_range
        else:
            y_lo, y_hi = (min(ys), max(ys)) if ys else (0.0, 1.0)
            if y_lo == y_hi:
                y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
            pad = 0.05 * (y_hi - y_lo)
            y_lo, y_hi = y_lo - pad, y_hi + pad
        return x_lo, x_hi, y_lo, y_hi

    def render(self) -> str:
        x_lo, x_hi, y_lo, y_hi = self._bounds()
        plot_w = WIDTH - MARGIN_L - MARGIN_R
        plot_h = HEIGHT - MARGIN_T - MARGIN_B

        def px(x):
            return MARGIN_L + (x - x_lo) / (x_hi - x_lo) * plot_w

        def py(y):
            return MARGIN_T + plot_h - (y - y_lo) / (y_hi - y_lo) * plot_h

        parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}">',
            f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
            f'<text x="{WIDTH // 2}" y="24" text-anchor="middle" '
            f'font-family="sans-serif" font-size="15">{self.title}</text>',
        ]
        # axes
        x0, y0 = _fmt(px(x_lo)), _fmt(py(y_lo))
        x1, y1 = _fmt(px(x_hi)), _fmt(py(y_hi))
        parts.append(f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>')
        parts.append(f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>')
        for tick in _ticks(x_lo, x_hi):
            tx = _fmt(px(tick))
            parts.append(f'<line x1="{tx}" y1="{y0}" x2="{tx}" '
                         f'y2="{_fmt(py(y_lo) + 5)}" stroke="black"/>')
            parts.append(f'<text x="{tx}" y="{_fmt(py(y_lo) + 20)}" text-anchor="middle" '
                         f'font-family="sans-serif" font-size="11">{_fmt(tick)}</text>')
        for tick in _ticks(y_lo, y_hi):
            ty = _fmt(py(tick))
            parts.append(f'<line x1="{_fmt(px(x_lo) - 5)}" y1="{ty}" x2="{x0}" '
                         f'y2="{ty}" stroke="black"/>')
            parts.append(f'<text x="{_fmt(px(x_lo) - 9)}" y="{_fmt(py(tick) + 4)}" '
                         f'text-anchor="end" font-family="sans-serif" font-size="11">'
                         f'{_fmt(tick)}</text>')
        parts.append(f'<text x="{WIDTH // 2}" y="{HEIGHT - 14}" text-anchor="middle" '
                     f'font-family="sans-serif" font-size="13">{self.xlabel}</text>')
        parts.append(f'<text x="18" y="{HEIGHT // 2}" text-anchor="middle" '
                     f'font-family="sans-serif" font-size="13" '
                     f'transform="rotate(-90 18 {HEIGHT // 2})">{self.ylabel}</text>')

        for label, y, color in self.hlines:
            ty = _fmt(py(y))
            parts.append(f'<line x1="{x0}" y1="{ty}" x2="{x1}" y2="{ty}" '
                         f'stroke="{color}" stroke-width="1.5" stroke-dasharray="6 3"/>')

        for label, points, color, dashed in self.series:
            if not points:
                continue
            coords = " ".join(f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in points)
            dash = ' stroke-dasharray="5 4"' if dashed else ""
            parts.append(f'<polyline points="{coords}" fill="none" '
                         f'stroke="{color}" stroke-width="1.8"{dash}/>')

        # legend
        legend_y = MARGIN_T + 6
        entries = [(label, color, False) for label, _, color, _ in self.series
                   if label] + [(label, color, True) for label, _, color in self.hlines if label]
        for i, (label, color, is_line) in enumerate(entries):
            ly = legend_y + 16 * i
            parts.append(f'<line x1="{WIDTH - 170}" y1="{ly}" x2="{WIDTH - 146}" '
                         f'y2="{ly}" stroke="{color}" stroke-width="2"/>')
            parts.append(f'<text x="{WIDTH - 140}" y="{ly + 4}" font-family="sans-serif" '
                         f'font-size="11">{label}</text>')
        parts.append("</svg>")
        return "\n".join(parts) + "\n"


def sweep_chart(rows, x_column: str, title: str, xlabel: str) -> str:
    """f1 curves per mode from sweep rows, plus the random-baseline line
    (drawn at the mean of the per-point baseline rows)."""
    chart = LineChart(title, xlabel, "f1 score", y_range=(0.0, 1.05))
    by_mode: dict = {}
    baselines = []
    for row in rows:
        if row["status"] != "ok" or row["mean_f1"] == "":
            continue
        x = float(row[x_column])
        y = float(row["mean_f1"])
        if row["mode"] == "random":
            baselines.append(y)
        else:
            by_mode.setdefault(row["mode"], {}).setdefault(x, []).append(y)
    for i, (mode, points) in enumerate(sorted(by_mode.items())):
        series = sorted((x, sum(ys) / len(ys)) for x, ys in points.items())
        chart.add_series(mode, series, PALETTE[i % len(PALETTE)])
    if baselines:
        chart.add_hline("random", sum(baselines) / len(baselines))
    return chart.render()


def pca_chart(projections, timesteps, feedforward_level: float | None,
              explained_ratio: float) -> str:
    """One polyline per instance over timesteps, plus a horizontal polyline
    for the single-pass model's projection when provided."""
    title = (f"Strongest-component trajectory "
             f"(explains {100 * explained_ratio:.0f}% of variance)")
    chart = LineChart(title, "timestep", "projection")
    for i, per_step in enumerate(projections):
        pts = list(zip(timesteps, per_step))
        chart.add_series("", pts, PALETTE[i % len(PALETTE)])
    if feedforward_level is not None:
        pts = [(timesteps[0], feedforward_level), (timesteps[-1], feedforward_level)]
        chart.add_series("feedforward", pts, BASELINE_COLOR, dashed=True)
    return chart.render()
