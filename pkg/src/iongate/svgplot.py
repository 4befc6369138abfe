"""Dependency-free SVG line plots.

Static polyline figures with linear or logarithmic axes, written as
standalone ``.svg`` files.  Output is deterministic: floats are formatted
with fixed precision and series are drawn in call order, so a plot of the
same data is byte-identical across runs and platforms.
"""

from __future__ import annotations

import math

# muted qualitative palette, ~colorblind safe
PALETTE = ("#2c6fbb", "#c8502a", "#3a9b4e", "#7b52ab", "#a0882f", "#37849c")

_MARGIN_L = 74
_MARGIN_R = 24
_MARGIN_T = 42
_MARGIN_B = 58


def _nice_step(span: float) -> float:
    """Tick step of the form {1,2,5}*10^k giving roughly 4-9 ticks."""
    if span <= 0:
        return 1.0
    raw = span / 5.0
    mag = 10.0 ** math.floor(math.log10(raw))
    for mult in (5.0, 2.0, 1.0):
        if mult * mag <= raw:
            return mult * mag
    return mag


def _linear_ticks(lo: float, hi: float) -> list[float]:
    step = _nice_step(hi - lo)
    first = math.ceil(lo / step - 1e-9) * step
    ticks = []
    v = first
    while v <= hi + 1e-9 * max(1.0, abs(hi)):
        ticks.append(0.0 if abs(v) < 0.5e-12 * step else v)
        v += step
    return ticks


def _log_ticks(lo: float, hi: float) -> list[float]:
    """Decade ticks; thinned when the range spans many decades."""
    d0 = math.ceil(math.log10(lo) - 1e-9)
    d1 = math.floor(math.log10(hi) + 1e-9)
    step = 1 + (d1 - d0) // 9
    return [10.0**d for d in range(d0, d1 + 1, step)]


def _fmt_tick(v: float) -> str:
    if v == 0:
        return "0"
    a = abs(v)
    if 1e-3 <= a < 1e4:
        s = f"{v:.6g}"
        return s
    exp = math.floor(math.log10(a))
    mant = v / 10.0**exp
    if abs(abs(mant) - 1.0) < 1e-9:
        sign = "-" if v < 0 else ""
        return f"{sign}1e{exp:d}"
    return f"{mant:.2g}e{exp:d}"


class _Axis:
    def __init__(self, values, log: bool, pad_frac: float = 0.05):
        vals = [v for v in values if not (isinstance(v, float) and math.isnan(v))]
        if log:
            vals = [v for v in vals if v > 0]
        if not vals:
            vals = [0.1, 1.0] if log else [0.0, 1.0]
        lo, hi = min(vals), max(vals)
        self.log = log
        if log:
            if lo == hi:
                lo, hi = lo / 2.0, hi * 2.0
            llo, lhi = math.log10(lo), math.log10(hi)
            pad = pad_frac * (lhi - llo) or 0.3
            self.lo, self.hi = llo - pad, lhi + pad
            self.ticks = _log_ticks(10.0**self.lo, 10.0**self.hi)
        else:
            if lo == hi:
                lo, hi = lo - 0.5, hi + 0.5
            pad = pad_frac * (hi - lo)
            self.lo, self.hi = lo - pad, hi + pad
            self.ticks = _linear_ticks(self.lo, self.hi)

    def frac(self, v: float) -> float | None:
        """Position in [0, 1], or None if the value cannot be drawn."""
        if self.log:
            if v <= 0:
                return None
            v = math.log10(v)
        return (v - self.lo) / (self.hi - self.lo)


def line_plot(
    series,
    path: str,
    *,
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
    logx: bool = False,
    logy: bool = False,
    width: int = 680,
    height: int = 440,
    markers: bool = True,
) -> None:
    """Write a polyline plot of ``series`` = [(label, xs, ys), ...] to ``path``.

    Points that cannot be placed (NaN, or non-positive on a log axis) break
    the polyline rather than being clamped.
    """
    all_x = [float(x) for _, xs, _ in series for x in xs]
    all_y = [float(y) for _, _, ys in series for y in ys]
    ax = _Axis(all_x, logx)
    ay = _Axis(all_y, logy)

    px0, px1 = _MARGIN_L, width - _MARGIN_R
    py0, py1 = height - _MARGIN_B, _MARGIN_T  # y grows downward in SVG

    def to_px(x: float, y: float) -> tuple[float, float] | None:
        fx, fy = ax.frac(x), ay.frac(y)
        if fx is None or fy is None or math.isnan(fx) or math.isnan(fy):
            return None
        return px0 + fx * (px1 - px0), py0 + fy * (py1 - py0)

    out = []
    out.append(
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">'
    )
    out.append(f'<rect width="{width}" height="{height}" fill="white"/>')
    out.append(
        '<g font-family="Helvetica,Arial,sans-serif" font-size="12" fill="#222">'
    )
    if title:
        out.append(
            f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" '
            f'font-size="14">{_esc(title)}</text>'
        )

    # frame and grid
    out.append(
        f'<rect x="{px0}" y="{py1}" width="{px1 - px0}" height="{py0 - py1}" '
        'fill="none" stroke="#444" stroke-width="1"/>'
    )
    for t in ax.ticks:
        f = ax.frac(t)
        if f is None or not 0.0 <= f <= 1.0:
            continue
        x = px0 + f * (px1 - px0)
        out.append(
            f'<line x1="{x:.2f}" y1="{py1}" x2="{x:.2f}" y2="{py0}" '
            'stroke="#ddd" stroke-width="0.7"/>'
        )
        out.append(
            f'<text x="{x:.2f}" y="{py0 + 18}" text-anchor="middle">'
            f"{_esc(_fmt_tick(t))}</text>"
        )
    for t in ay.ticks:
        f = ay.frac(t)
        if f is None or not 0.0 <= f <= 1.0:
            continue
        y = py0 + f * (py1 - py0)
        out.append(
            f'<line x1="{px0}" y1="{y:.2f}" x2="{px1}" y2="{y:.2f}" '
            'stroke="#ddd" stroke-width="0.7"/>'
        )
        out.append(
            f'<text x="{px0 - 6}" y="{y + 4:.2f}" text-anchor="end">'
            f"{_esc(_fmt_tick(t))}</text>"
        )
    if xlabel:
        out.append(
            f'<text x="{(px0 + px1) / 2:.1f}" y="{height - 14}" '
            f'text-anchor="middle">{_esc(xlabel)}</text>'
        )
    if ylabel:
        out.append(
            f'<text x="18" y="{(py0 + py1) / 2:.1f}" text-anchor="middle" '
            f'transform="rotate(-90 18 {(py0 + py1) / 2:.1f})">{_esc(ylabel)}</text>'
        )

    # data
    for k, (label, xs, ys) in enumerate(series):
        color = PALETTE[k % len(PALETTE)]
        runs: list[list[tuple[float, float]]] = [[]]
        for x, y in zip(xs, ys):
            p = to_px(float(x), float(y))
            if p is None:
                if runs[-1]:
                    runs.append([])
            else:
                runs[-1].append(p)
        for run in runs:
            if len(run) >= 2:
                pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in run)
                out.append(
                    f'<polyline points="{pts}" fill="none" stroke="{color}" '
                    'stroke-width="1.6"/>'
                )
            if markers:
                for x, y in run:
                    out.append(
                        f'<circle cx="{x:.2f}" cy="{y:.2f}" r="2.4" '
                        f'fill="{color}"/>'
                    )
        if label:
            ly = py1 + 16 + 16 * k
            out.append(
                f'<line x1="{px1 - 120}" y1="{ly - 4:.0f}" x2="{px1 - 96}" '
                f'y2="{ly - 4:.0f}" stroke="{color}" stroke-width="2"/>'
            )
            out.append(f'<text x="{px1 - 90}" y="{ly}">{_esc(label)}</text>')

    out.append("</g></svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(out) + "\n")


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
