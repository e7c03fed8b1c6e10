"""Procedural toy images: axis-aligned rectangles and isotropic blobs in [-1, 1]."""

from __future__ import annotations

import numpy as np

PALETTES = {"gray": 1, "color": 3}


def _render(rng: np.random.Generator, r: int, channels: int) -> np.ndarray:
    yy, xx = np.mgrid[0:r, 0:r].astype(np.float64) + 0.5
    img = np.empty((channels, r, r))
    img[:] = rng.uniform(-1.0, -0.3, size=(channels, 1, 1))
    for _ in range(rng.integers(1, 4)):
        color = rng.uniform(-0.2, 1.0, size=(channels, 1, 1))
        if rng.random() < 0.5:
            w, h = rng.uniform(0.2 * r, 0.6 * r, size=2)
            x0, y0 = rng.uniform(0, r - w), rng.uniform(0, r - h)
            mask = (xx >= x0) & (xx < x0 + w) & (yy >= y0) & (yy < y0 + h)
            img = np.where(mask, color, img)
        else:
            cx, cy = rng.uniform(0.2 * r, 0.8 * r, size=2)
            rad = rng.uniform(0.08 * r, 0.25 * r)
            alpha = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * rad * rad))
            img = img * (1.0 - alpha) + color * alpha
    return np.clip(img, -1.0, 1.0)


def gen_shapes(seed: int, count: int, resolution: int, palette: str = "gray") -> np.ndarray:
    """``[count, C, r, r]`` float32 images; image ``i`` depends only on ``(seed, i)``."""
    if palette not in PALETTES:
        raise ValueError(f"unknown palette {palette!r}; choose from {sorted(PALETTES)}")
    if count < 0 or resolution < 1:
        raise ValueError("count must be >= 0 and resolution >= 1")
    c = PALETTES[palette]
    out = np.empty((count, c, resolution, resolution), dtype=np.float32)
    for i in range(count):
        out[i] = _render(np.random.default_rng([seed, i]), resolution, c)
    return out
