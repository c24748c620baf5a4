"""Human-inspectable artifacts: colorized instance maps and SVG loss curves."""
from __future__ import annotations

import colorsys
from pathlib import Path

import numpy as np
from PIL import Image


def _palette(n: int = 64) -> np.ndarray:
    # golden-ratio hue walk with alternating lightness; fixed, so colors are stable for diffing
    colors = []
    for i in range(n):
        hue = (i * 0.618033988749895) % 1.0
        light = 0.45 if i % 2 else 0.6
        r, g, b = colorsys.hls_to_rgb(hue, light, 0.85)
        colors.append((round(r * 255), round(g * 255), round(b * 255)))
    return np.array(colors, dtype=np.uint8)


PALETTE = _palette()


def color_index(ids: np.ndarray) -> np.ndarray:
    return (np.asarray(ids, dtype=np.int64) * 37) % len(PALETTE)


def colorize(labels: np.ndarray) -> np.ndarray:
    """Instance map -> RGB; background black, each id a palette color."""
    labels = np.asarray(labels)
    rgb = PALETTE[color_index(labels)]
    rgb[labels == 0] = 0
    return rgb


def save_colorized(path, labels: np.ndarray) -> None:
    Image.fromarray(colorize(labels), mode="RGB").save(path, format="PNG")


def loss_curve_svg(history: list, width: int = 480, height: int = 300) -> str:
    """Train/val loss per epoch as a standalone SVG document."""
    pad = 40
    epochs = [e["epoch"] for e in history]
    series = {
        "train": ([e["train_loss"] for e in history], "#1f77b4"),
        "val": ([e["val_loss"] for e in history], "#d62728"),
    }
    values = [v for vals, _ in series.values() for v in vals if np.isfinite(v)]
    lo, hi = (min(values), max(values)) if values else (0.0, 1.0)
    if hi == lo:
        hi = lo + 1.0
    x_max = max(epochs[-1] if epochs else 1, 2)

    def xy(ep, v):
        x = pad + (ep - 1) / (x_max - 1) * (width - 2 * pad)
        y = height - pad - (v - lo) / (hi - lo) * (height - 2 * pad)
        return f"{x:.1f},{y:.1f}"

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2:.0f}" y="{height - 8}" font-size="12" text-anchor="middle">epoch</text>',
        f'<text x="4" y="{pad - 8}" font-size="11">{hi:.4g}</text>',
        f'<text x="4" y="{height - pad}" font-size="11">{lo:.4g}</text>',
    ]
    for i, (name, (vals, color)) in enumerate(series.items()):
        pts = " ".join(xy(ep, v) for ep, v in zip(epochs, vals) if np.isfinite(v))
        if pts:
            parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        parts.append(f'<text x="{width - pad - 60}" y="{pad + 14 * (i + 1)}" font-size="12" fill="{color}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def save_loss_curve(path, history: list) -> None:
    Path(path).write_text(loss_curve_svg(history))
