"""Minimal figure output: SVG line/bar charts and PNG image strips."""
from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np
from PIL import Image


def svg_chart(xs, ys, title: str = "", xlabel: str = "", ylabel: str = "",
              kind: str = "line", width: int = 480, height: int = 320) -> str:
    """Render one series as an SVG string. Categorical ``xs`` are spaced evenly."""
    ys = [float("nan") if y is None else float(y) for y in ys]
    labels = [str(x) for x in xs]
    pad_l, pad_r, pad_t, pad_b = 60, 20, 30, 50
    w, h = width - pad_l - pad_r, height - pad_t - pad_b
    finite = [y for y in ys if np.isfinite(y)]
    lo = min(finite + [0.0])
    hi = max(finite + [1e-12])
    span = hi - lo or 1.0
    n = max(len(ys), 1)

    def px(i):
        return pad_l + (i + 0.5) * w / n

    def py(y):
        return pad_t + h - (y - lo) / span * h

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<line x1="{pad_l}" y1="{pad_t + h}" x2="{pad_l + w}" y2="{pad_t + h}" stroke="black"/>',
           f'<line x1="{pad_l}" y1="{pad_t}" x2="{pad_l}" y2="{pad_t + h}" stroke="black"/>']
    for frac in (0.0, 0.5, 1.0):
        yv = lo + frac * span
        out.append(f'<text x="{pad_l - 5}" y="{py(yv) + 4:.1f}" text-anchor="end">{yv:.3g}</text>')
    for i, lab in enumerate(labels):
        out.append(f'<text x="{px(i):.1f}" y="{pad_t + h + 15}" text-anchor="middle">{escape(lab)}</text>')
    if kind == "bar":
        bw = 0.6 * w / n
        for i, y in enumerate(ys):
            if np.isfinite(y):
                top = py(max(y, lo))
                out.append(f'<rect x="{px(i) - bw / 2:.1f}" y="{top:.1f}" width="{bw:.1f}" '
                           f'height="{pad_t + h - top:.1f}" fill="steelblue"/>')
    else:
        pts = " ".join(f"{px(i):.1f},{py(y):.1f}" for i, y in enumerate(ys) if np.isfinite(y))
        out.append(f'<polyline points="{pts}" fill="none" stroke="steelblue" stroke-width="2"/>')
        for i, y in enumerate(ys):
            if np.isfinite(y):
                out.append(f'<circle cx="{px(i):.1f}" cy="{py(y):.1f}" r="3" fill="steelblue"/>')
    out.append(f'<text x="{width / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>')
    out.append(f'<text x="{pad_l + w / 2}" y="{height - 8}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="14" y="{pad_t + h / 2}" text-anchor="middle" '
               f'transform="rotate(-90 14 {pad_t + h / 2})">{escape(ylabel)}</text>')
    out.append("</svg>")
    return "\n".join(out)


def write_svg(path, *args, **kwargs) -> None:
    with open(path, "w") as f:
        f.write(svg_chart(*args, **kwargs))


def to_uint8(img: np.ndarray, mean=None, std=None) -> np.ndarray:
    """[C, H, W] normalised float image -> [H, W, C] uint8."""
    x = np.asarray(img, dtype=np.float64)
    if mean is not None:
        x = x * np.asarray(std).reshape(-1, 1, 1) + np.asarray(mean).reshape(-1, 1, 1)
    x = np.clip(x, 0.0, 1.0)
    return np.round(x.transpose(1, 2, 0) * 255).astype(np.uint8)


def save_strip(path, images, mean=None, std=None, gap: int = 2) -> None:
    """Save [C, H, W] images side by side as a lossless PNG."""
    tiles = [to_uint8(im, mean, std) for im in images]
    h = max(t.shape[0] for t in tiles)
    w = sum(t.shape[1] for t in tiles) + gap * (len(tiles) - 1)
    canvas = np.full((h, w, 3), 255, dtype=np.uint8)
    x = 0
    for t in tiles:
        canvas[:t.shape[0], x:x + t.shape[1]] = t
        x += t.shape[1] + gap
    Image.fromarray(canvas).save(path, format="PNG")
