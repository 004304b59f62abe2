"""Loss/accuracy curves from a metrics CSV as a standalone SVG."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

from .trainer import MetricsRow

__all__ = ["render_svg", "PLOTTED"]

PLOTTED = (("train_loss", "#1f77b4"), ("test_loss", "#ff7f0e"), ("train_acc", "#2ca02c"), ("test_acc", "#d62728"))

_W, _H, _PAD = 420, 300, 40


def _panel(rows: list[MetricsRow], keys, x0: int, title: str) -> list[str]:
    epochs = [r.epoch for r in rows]
    values = [getattr(r, k) for r in rows for k, _ in keys if math.isfinite(getattr(r, k))]
    lo, hi = (min(values), max(values)) if values else (0.0, 1.0)
    if hi == lo:
        hi = lo + 1.0
    e0, e1 = min(epochs), max(epochs)
    span = max(e1 - e0, 1)

    def px(e, v):
        return (x0 + _PAD + (e - e0) / span * (_W - 2 * _PAD),
                _PAD + (1 - (v - lo) / (hi - lo)) * (_H - 2 * _PAD))

    out = [
        f'<rect x="{x0 + _PAD}" y="{_PAD}" width="{_W - 2 * _PAD}" height="{_H - 2 * _PAD}" fill="none" stroke="#888"/>',
        f'<text x="{x0 + _W / 2}" y="{_PAD - 12}" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<text x="{x0 + _PAD - 4}" y="{_PAD + 4}" text-anchor="end" font-size="10">{hi:.3g}</text>',
        f'<text x="{x0 + _PAD - 4}" y="{_H - _PAD}" text-anchor="end" font-size="10">{lo:.3g}</text>',
        f'<text x="{x0 + _W / 2}" y="{_H - 10}" text-anchor="middle" font-size="10">epoch {e0}-{e1}</text>',
    ]
    for i, (k, colour) in enumerate(keys):
        pts = " ".join(f"{x:.1f},{y:.1f}" for x, y in (px(r.epoch, getattr(r, k)) for r in rows)
                       if math.isfinite(y))
        out.append(f'<polyline data-metric="{k}" fill="none" stroke="{colour}" stroke-width="1.5" points="{pts}"/>')
        out.append(f'<text x="{x0 + _W - _PAD}" y="{_PAD + 14 + 14 * i}" text-anchor="end" font-size="10" '
                   f'fill="{colour}">{k}</text>')
    return out


def render_svg(rows: list[MetricsRow]) -> str:
    if not rows:
        raise ValueError("metrics file has no rows to plot")
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{2 * _W}" height="{_H}" viewBox="0 0 {2 * _W} {_H}">',
             '<rect width="100%" height="100%" fill="white"/>']
    parts += _panel(rows, PLOTTED[:2], 0, "loss")
    parts += _panel(rows, PLOTTED[2:], _W, "accuracy")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
