"""Synthetic contour corpus: anti-aliased polygon scenes with exact boundaries.

Each scene layers a few random star-convex polygons over a background; every
region carries its own base intensity (alternating dark/light pools, so
adjacent regions always contrast) plus an oriented sinusoidal texture.
Rendering happens on a 4x supersampled grid and is box-averaged down, which
anti-aliases the region borders.  The ground truth marks the pixels where the
downsampled region-id map changes (1-pixel curves).

The texture amplitude is a free knob: raising it produces texture-heavy
variants of the same geometry (the per-scene random draws do not depend on
the amplitude), useful for probing texture-edge suppression.
"""

from __future__ import annotations

import numpy as np
from matplotlib.path import Path as MplPath

from .seeds import derive_seed

SUPERSAMPLE = 4


def _polygon_mask(verts: np.ndarray, size: int, ss: int) -> np.ndarray:
    n = size * ss
    coords = (np.arange(n) + 0.5) / ss
    xx, yy = np.meshgrid(coords, coords)
    pts = np.stack([xx.reshape(-1), yy.reshape(-1)], axis=1)
    path = MplPath(verts, closed=True)
    return path.contains_points(pts).reshape(n, n)


def _region_texture(rng, size: int, ss: int, amplitude: float) -> np.ndarray:
    """Oriented sinusoid with a 3 to 5.5 pixel period, in final-pixel units."""
    n = size * ss
    coords = (np.arange(n) + 0.5) / ss
    xx, yy = np.meshgrid(coords, coords)
    freq = rng.uniform(0.18, 0.33)
    angle = rng.uniform(0.0, np.pi)
    phase = rng.uniform(0.0, 2 * np.pi)
    fx = freq * np.cos(angle)
    fy = freq * np.sin(angle)
    amp = amplitude * rng.uniform(0.6, 1.0)
    return amp * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)


def make_scene(size: int, seed: int, texture_amp: float = 0.05,
               max_shapes: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Render one scene; returns (image, boundary truth), both (size, size, 1)."""
    rng = np.random.default_rng(seed)
    n_shapes = int(rng.integers(1, max_shapes + 1))
    ss = SUPERSAMPLE
    n = size * ss
    region_id = np.zeros((n, n), dtype=np.int32)
    for k in range(1, n_shapes + 1):
        cx = rng.uniform(0.25, 0.75) * size
        cy = rng.uniform(0.25, 0.75) * size
        radius = rng.uniform(0.14, 0.32) * size
        n_verts = int(rng.integers(4, 9))
        angles = np.sort(rng.uniform(0.0, 2 * np.pi, size=n_verts))
        radii = radius * rng.uniform(0.6, 1.0, size=n_verts)
        verts = np.stack(
            [cx + radii * np.cos(angles), cy + radii * np.sin(angles)], axis=1
        )
        region_id[_polygon_mask(verts, size, ss)] = k

    canvas = np.zeros((n, n))
    for k in range(n_shapes + 1):
        mask = region_id == k
        if not mask.any():
            continue
        # alternate dark/light pools so neighboring regions keep contrast
        if k % 2 == 0:
            base = rng.uniform(0.15, 0.4)
        else:
            base = rng.uniform(0.62, 0.88)
        tex = _region_texture(rng, size, ss, texture_amp)
        canvas[mask] = base + tex[mask]
    canvas = np.clip(canvas, 0.01, 0.99)

    image = canvas.reshape(size, ss, size, ss).mean(axis=(1, 3))
    ids = region_id[ss // 2::ss, ss // 2::ss]
    boundary = np.zeros((size, size))
    boundary[:, :-1][ids[:, :-1] != ids[:, 1:]] = 1.0
    boundary[:-1, :][ids[:-1, :] != ids[1:, :]] = 1.0
    return image[:, :, None], boundary[:, :, None]


def make_corpus(count: int, size: int, seed: int,
                texture_amp: float = 0.05) -> list[tuple[np.ndarray, np.ndarray]]:
    """Seeded list of (image, boundary truth) scenes."""
    return [
        make_scene(size, derive_seed(seed, "scene", i), texture_amp=texture_amp)
        for i in range(count)
    ]
