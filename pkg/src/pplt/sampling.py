"""Bilinear and nearest samplers on channel-first grids.

All samplers take continuous pixel coordinates where integer values are
pixel centres, and return an array of shape ``(C,) + coords.shape``.
"""

import numpy as np


def _as_chw(grid):
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim == 2:
        return grid[None]
    return grid


def bilinear_clamped(grid, rows, cols, wrap_cols=False):
    """Bilinear sample with edge clamping (rows) and optional column wrap.

    Weights always sum to one, so affine per-pixel transforms commute with
    this sampler.
    """
    grid = _as_chw(grid)
    _, h, w = grid.shape
    rows = np.clip(np.asarray(rows, dtype=np.float64), 0.0, h - 1)
    cols = np.asarray(cols, dtype=np.float64)
    if not wrap_cols:
        cols = np.clip(cols, 0.0, w - 1)

    r0 = np.floor(rows).astype(np.intp)
    c0 = np.floor(cols).astype(np.intp)
    fr = rows - r0
    fc = cols - c0
    r1 = np.minimum(r0 + 1, h - 1)
    if wrap_cols:
        c1 = (c0 + 1) % w
        c0 = c0 % w
    else:
        c1 = np.minimum(c0 + 1, w - 1)

    top = grid[:, r0, c0] * (1.0 - fc) + grid[:, r0, c1] * fc
    bot = grid[:, r1, c0] * (1.0 - fc) + grid[:, r1, c1] * fc
    return top * (1.0 - fr) + bot * fr


def bilinear_zero(grid, rows, cols):
    """Bilinear sample treating everything outside the grid as zero."""
    grid = _as_chw(grid)
    c, h, w = grid.shape
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    r0 = np.floor(rows).astype(np.intp)
    c0 = np.floor(cols).astype(np.intp)
    fr = rows - r0
    fc = cols - c0

    out = np.zeros((c,) + rows.shape)
    for dr, wr in ((0, 1.0 - fr), (1, fr)):
        for dc, wc in ((0, 1.0 - fc), (1, fc)):
            rr = r0 + dr
            cc = c0 + dc
            ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            vals = grid[:, np.where(ok, rr, 0), np.where(ok, cc, 0)]
            out += np.where(ok, wr * wc, 0.0) * vals
    return out


def nearest_index(rows, cols, shape):
    """Round to the nearest cell. Returns ``(r, c, inside)``; half rounds up."""
    h, w = shape
    r = np.floor(np.asarray(rows, dtype=np.float64) + 0.5).astype(np.intp)
    c = np.floor(np.asarray(cols, dtype=np.float64) + 0.5).astype(np.intp)
    inside = (r >= 0) & (r < h) & (c >= 0) & (c < w)
    return np.where(inside, r, 0), np.where(inside, c, 0), inside
