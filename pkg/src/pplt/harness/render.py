"""Flat-world panorama renderer for synthetic scenes.

Each ground pixel takes a base colour plus one additive tint per raster
channel, so pixel colour is an affine function of the class triple under
it. Above the horizon everything is sky.
"""

import numpy as np

from ..errors import InputError
from ..panosplit import EquirectImage, pano_pixel_to_angles

GROUND = np.array([0.30, 0.30, 0.30])
SKY = np.array([0.55, 0.70, 0.90])

# Tints are indexed by class; row 0 (background) adds nothing.
AREA_TINTS = np.array([[0, 0, 0], [0.35, 0.05, 0.0], [0.05, 0.05, 0.25], [0.0, 0.30, 0.0], [0.0, 0.10, 0.35]])
LINE_TINTS = np.array([[0, 0, 0], [0.30, 0.30, 0.30], [0.20, 0.15, 0.0], [0.10, 0.0, 0.20], [0.25, 0.0, 0.10]])
POINT_TINTS = np.array([[0, 0, 0], [0.0, 0.25, 0.05], [0.30, 0.30, 0.0], [0.25, 0.25, 0.25]])


def _tint(table, classes):
    idx = np.clip(classes, 0, len(table) - 1)
    return table[idx]


def render_panorama(raster, pose, height=64, camera_height_m=1.6, tints=None):
    """Equirectangular view from ``pose`` (cells, compass heading) over ``raster``.

    Rays that hit the ground outside the raster see bare ground.
    """
    if height < 2:
        raise InputError("panorama height must be >= 2")
    tints = tints or (AREA_TINTS, LINE_TINTS, POINT_TINTS)
    width = 2 * height
    mpp = raster.meters_per_px
    size = raster.size
    jj, ii = np.meshgrid(np.arange(width) + 0.0, np.arange(height) + 0.0)
    heading, elevation = pano_pixel_to_angles(width, height, jj, ii)
    ground = elevation < 0.0
    dist = camera_height_m / np.tan(np.radians(-np.where(ground, elevation, -45.0)))
    bearing = np.radians(heading + pose.theta_deg)
    cols = pose.u + dist * np.sin(bearing) / mpp
    rows = pose.v + dist * np.cos(bearing) / mpp
    c = np.floor(cols + 0.5).astype(np.intp)
    r = np.floor(rows + 0.5).astype(np.intp)
    inside = ground & (r >= 0) & (r < size) & (c >= 0) & (c < size)
    rc, cc = np.where(inside, r, 0), np.where(inside, c, 0)

    img = np.broadcast_to(SKY, (height, width, 3)).copy()
    img[ground] = GROUND
    colour = GROUND + sum(_tint(t, raster.classes[ch, rc, cc]) for ch, t in enumerate(tints))
    img[inside] = colour[inside]
    return EquirectImage(np.clip(img, 0.0, 1.0))


def tint_matrix(tints=None):
    """Stacked tints, one row per (channel, class) pair, in raster channel order."""
    tints = tints or (AREA_TINTS, LINE_TINTS, POINT_TINTS)
    return tuple(np.asarray(t, dtype=np.float64) for t in tints)


def raster_preview(raster, tints=None):
    """Top-down colour image of ``raster``, north up."""
    tints = tints or (AREA_TINTS, LINE_TINTS, POINT_TINTS)
    img = GROUND + sum(_tint(t, raster.classes[ch]) for ch, t in enumerate(tints))
    return np.clip(img[::-1], 0.0, 1.0)
