"""Self-contained SVG line/bar charts; no plotting dependency.

Each series is a list of (x, y, yerr) points; points with y=None render as
a failure marker. The CSV report stays the authoritative output, charts are
for quick inspection.
"""

from __future__ import annotations

from pathlib import Path

W, H = 720, 440
MARGIN = {"left": 70, "right": 30, "top": 48, "bottom": 58}
COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    span = hi - lo
    step = span / max(n - 1, 1)
    return [lo + i * step for i in range(n)]


class _Frame:
    def __init__(self, xlo, xhi, ylo, yhi):
        self.xlo, self.xhi = xlo, xhi
        self.ylo, self.yhi = ylo, yhi
        if self.xhi == self.xlo:
            self.xhi = self.xlo + 1.0
        if self.yhi == self.ylo:
            self.yhi = self.ylo + 1.0

    def px(self, x):
        inner = W - MARGIN["left"] - MARGIN["right"]
        return MARGIN["left"] + (x - self.xlo) / (self.xhi - self.xlo) * inner

    def py(self, y):
        inner = H - MARGIN["top"] - MARGIN["bottom"]
        return H - MARGIN["bottom"] - (y - self.ylo) / (self.yhi - self.ylo) * inner


def _axes(parts, frame, title, xlabel, ylabel, xtick_labels=None):
    parts.append(f'<rect width="{W}" height="{H}" fill="white"/>')
    x0, y0 = frame.px(frame.xlo), frame.py(frame.ylo)
    x1, y1 = frame.px(frame.xhi), frame.py(frame.yhi)
    parts.append(f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>')
    parts.append(f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>')
    parts.append(
        f'<text x="{W / 2}" y="24" text-anchor="middle" font-size="16" '
        f'font-family="sans-serif">{_esc(title)}</text>'
    )
    parts.append(
        f'<text x="{W / 2}" y="{H - 12}" text-anchor="middle" font-size="13" '
        f'font-family="sans-serif">{_esc(xlabel)}</text>'
    )
    parts.append(
        f'<text x="18" y="{H / 2}" text-anchor="middle" font-size="13" '
        f'font-family="sans-serif" transform="rotate(-90 18 {H / 2})">{_esc(ylabel)}</text>'
    )
    for yt in _ticks(frame.ylo, frame.yhi):
        parts.append(
            f'<line x1="{x0 - 4}" y1="{frame.py(yt)}" x2="{x0}" y2="{frame.py(yt)}" stroke="black"/>'
        )
        parts.append(
            f'<text x="{x0 - 8}" y="{frame.py(yt) + 4}" text-anchor="end" font-size="11" '
            f'font-family="sans-serif">{yt:.3g}</text>'
        )
    if xtick_labels is None:
        for xt in _ticks(frame.xlo, frame.xhi):
            parts.append(
                f'<line x1="{frame.px(xt)}" y1="{y0}" x2="{frame.px(xt)}" y2="{y0 + 4}" stroke="black"/>'
            )
            parts.append(
                f'<text x="{frame.px(xt)}" y="{y0 + 18}" text-anchor="middle" font-size="11" '
                f'font-family="sans-serif">{xt:.3g}</text>'
            )
    else:
        for x, label in xtick_labels:
            parts.append(
                f'<text x="{frame.px(x)}" y="{y0 + 18}" text-anchor="middle" font-size="11" '
                f'font-family="sans-serif">{_esc(label)}</text>'
            )


def _fail_marker(parts, x, y):
    parts.append(
        f'<path d="M {x - 5} {y - 5} L {x + 5} {y + 5} M {x - 5} {y + 5} L {x + 5} {y - 5}" '
        f'stroke="#d62728" stroke-width="2"/>'
    )


def render_line_chart(series: dict, path, title="", xlabel="", ylabel="") -> None:
    """series: {label: [(x, y_or_None, yerr), ...]}"""
    xs, ys = [], []
    for pts in series.values():
        for x, y, e in pts:
            xs.append(x)
            if y is not None:
                ys.extend([y - (e or 0.0), y + (e or 0.0)])
    if not xs:
        xs = [0.0, 1.0]
    if not ys:
        ys = [0.0, 1.0]
    pad = 0.05 * (max(ys) - min(ys) or 1.0)
    frame = _Frame(min(xs), max(xs), min(ys) - pad, max(ys) + pad)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}">']
    _axes(parts, frame, title, xlabel, ylabel)
    for i, (label, pts) in enumerate(series.items()):
        color = COLORS[i % len(COLORS)]
        coords = [(frame.px(x), frame.py(y)) for x, y, _ in pts if y is not None]
        if len(coords) > 1:
            d = " ".join(f"{px:.1f},{py:.1f}" for px, py in coords)
            parts.append(f'<polyline points="{d}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, y, e in pts:
            if y is None:
                _fail_marker(parts, frame.px(x), frame.py(frame.ylo))
                continue
            px, py = frame.px(x), frame.py(y)
            parts.append(f'<circle cx="{px:.1f}" cy="{py:.1f}" r="3.5" fill="{color}"/>')
            if e:
                parts.append(
                    f'<line x1="{px:.1f}" y1="{frame.py(y - e):.1f}" x2="{px:.1f}" '
                    f'y2="{frame.py(y + e):.1f}" stroke="{color}" stroke-width="1.5"/>'
                )
        ly = MARGIN["top"] + 16 * i
        parts.append(f'<rect x="{W - 160}" y="{ly - 9}" width="12" height="12" fill="{color}"/>')
        parts.append(
            f'<text x="{W - 142}" y="{ly + 1}" font-size="12" font-family="sans-serif">{_esc(label)}</text>'
        )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")


def render_bar_chart(bars: list, path, title="", xlabel="", ylabel="") -> None:
    """bars: [(label, mean_or_None, std), ...], one bar per category."""
    ys = [0.0]
    for _, m, s in bars:
        if m is not None:
            ys.extend([m - (s or 0.0), m + (s or 0.0)])
    pad = 0.05 * (max(ys) - min(ys) or 1.0)
    frame = _Frame(-0.5, len(bars) - 0.5, min(ys) - pad, max(ys) + pad)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}">']
    _axes(parts, frame, title, xlabel, ylabel,
          xtick_labels=[(i, label) for i, (label, _, _) in enumerate(bars)])
    width = 0.6 * (frame.px(1) - frame.px(0)) if len(bars) > 1 else 80
    y_zero = frame.py(max(frame.ylo, min(0.0, frame.yhi)))
    for i, (label, m, s) in enumerate(bars):
        cx = frame.px(i)
        if m is None:
            _fail_marker(parts, cx, frame.py(frame.ylo))
            continue
        top = frame.py(m)
        y = min(top, y_zero)
        h = abs(y_zero - top)
        parts.append(
            f'<rect x="{cx - width / 2:.1f}" y="{y:.1f}" width="{width:.1f}" height="{h:.1f}" '
            f'fill="{COLORS[i % len(COLORS)]}" fill-opacity="0.75"/>'
        )
        if s:
            parts.append(
                f'<line x1="{cx:.1f}" y1="{frame.py(m - s):.1f}" x2="{cx:.1f}" '
                f'y2="{frame.py(m + s):.1f}" stroke="black" stroke-width="1.5"/>'
            )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
