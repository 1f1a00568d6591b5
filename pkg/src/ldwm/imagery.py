"""Colour rendering of rasters and BEV labels for frame grids (PPM via Pillow)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

# off-road, road, route, ego
BEV_PALETTE = np.array([[20, 20, 20], [110, 110, 110], [60, 170, 90], [230, 200, 40]], dtype=np.uint8)


def raster_rgb(raster: np.ndarray) -> np.ndarray:
    """(S, S, 3) channels road/route-band/obstacle in [0, 1] -> uint8 RGB."""
    road, band, obst = (np.clip(raster[..., i], 0.0, 1.0) for i in range(3))
    r = 0.45 * road + 0.55 * obst
    g = 0.45 * road + 0.55 * band
    b = 0.45 * road
    return (np.stack([r, g, b], axis=-1) * 255 + 0.5).astype(np.uint8)


def bev_rgb(logits_or_labels: np.ndarray) -> np.ndarray:
    labels = logits_or_labels.argmax(axis=-1) if logits_or_labels.ndim == 3 else logits_or_labels
    return BEV_PALETTE[labels.astype(np.int64)]


def imagined_frame_grid(start_raster: np.ndarray, rasters: np.ndarray, bev_logits: np.ndarray,
                        scale: int = 4, gap: int = 2) -> np.ndarray:
    """Top row: observed start frame then decoded rasters; bottom row: decoded BEV."""
    s = start_raster.shape[0]
    k = rasters.shape[0]
    cell = s + gap
    grid = np.full((2 * cell + gap, (k + 1) * cell + gap, 3), 255, dtype=np.uint8)
    tiles_top = [raster_rgb(start_raster)] + [raster_rgb(r) for r in rasters]
    tiles_bottom = [None] + [bev_rgb(b) for b in bev_logits]
    for j in range(k + 1):
        x = gap + j * cell
        grid[gap:gap + s, x:x + s] = tiles_top[j]
        if tiles_bottom[j] is not None:
            grid[gap + cell:gap + cell + s, x:x + s] = tiles_bottom[j]
    return np.repeat(np.repeat(grid, scale, axis=0), scale, axis=1)


def write_ppm(path, rgb: np.ndarray) -> Path:
    from PIL import Image

    path = Path(path)
    Image.fromarray(rgb, mode="RGB").save(path, format="PPM")
    return path
