"""Procedural product catalogue used for desk-scale end-to-end runs.

Each product is a flat "package" image: a background colour drawn from its
category's hue band, a few coloured blocks, stripes and discs.  Products in one
category therefore look alike at a glance and differ in their details.
"""
import colorsys
from pathlib import Path

import numpy as np

from .imaging import write_image


def _hsv(h, s, v):
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v), dtype=np.float64)


def make_product(rng, hue, size=64):
    h = w = size
    img = np.empty((h, w, 3))
    img[:] = _hsv(hue + rng.uniform(-0.04, 0.04), rng.uniform(0.4, 0.9), rng.uniform(0.5, 0.95))
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(int(rng.integers(3, 7))):
        color = _hsv(rng.random(), rng.uniform(0.3, 1.0), rng.uniform(0.2, 1.0))
        kind = rng.integers(3)
        if kind == 0:
            y0, x0 = rng.integers(0, h - 8), rng.integers(0, w - 8)
            y1, x1 = y0 + rng.integers(6, h // 2), x0 + rng.integers(6, w // 2)
            img[y0:y1, x0:x1] = color
        elif kind == 1:
            y0 = rng.integers(0, h - 4)
            img[y0:y0 + rng.integers(3, 10)] = color
        else:
            cy, cx, r = rng.integers(8, h - 8), rng.integers(8, w - 8), rng.integers(4, 14)
            img[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = color
    return np.clip(img, 0, 1).astype(np.float32)


def make_catalog(n_products, n_categories=5, seed=0, size=64):
    """Returns ``[(product_id, category_id, image), ...]`` with product ids
    ``p000, p001, ...`` spread round-robin over categories ``c0, c1, ...``."""
    rng = np.random.default_rng(seed)
    hues = (np.arange(n_categories) / n_categories + rng.uniform(0, 1)) % 1.0
    out = []
    for i in range(n_products):
        c = i % n_categories
        # quantise to 8 bits so in-memory and PNG copies are identical
        img = np.rint(make_product(rng, hues[c], size) * 255) / 255
        out.append((f"p{i:03d}", f"c{c}", img.astype(np.float32)))
    return out


def write_catalog(catalog, out_dir):
    """Write PNGs plus ``manifest.csv``; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "refs").mkdir(parents=True, exist_ok=True)
    lines = ["product_id,category_id,image_path"]
    for pid, cat, img in catalog:
        rel = f"refs/{pid}.png"
        write_image(out_dir / rel, img)
        lines.append(f"{pid},{cat},{rel}")
    manifest = out_dir / "manifest.csv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest
