"""Perfect-feature BEV templates cut straight from a neural map."""

import numpy as np

from ..errors import InputError
from ..panosplit import BevFeature, cell_offsets, sector_mask
from ..sampling import bilinear_zero, nearest_index


def render_oracle_bev(nmap, pose, cfg, fov_deg=360.0, start_deg=0.0, order=1):
    """Camera-frame template of ``nmap`` seen from ``pose``.

    The valid sector covers camera-relative bearings ``[start, start + fov)``,
    i.e. world bearings ``[theta + start, theta + start + fov)``.
    """
    h, w = nmap.shape
    if not (0 <= pose.u <= w - 1 and 0 <= pose.v <= h - 1):
        raise InputError(f"pose ({pose.u}, {pose.v}) outside the {h} x {w} map")
    if abs(cfg.meters_per_cell - nmap.meters_per_px) > 1e-12:
        raise InputError("oracle template and map must share a resolution")

    east, north = cell_offsets(cfg)
    east = east / cfg.meters_per_cell
    north = north / cfg.meters_per_cell
    t = np.radians(pose.theta_deg)
    world_e = east * np.cos(t) + north * np.sin(t)
    world_n = -east * np.sin(t) + north * np.cos(t)
    cols = pose.u + world_e
    rows = pose.v + world_n
    inside = (cols >= 0) & (cols <= w - 1) & (rows >= 0) & (rows <= h - 1)
    mask = sector_mask(cfg, start_deg, fov_deg) & inside
    if order == 0:
        r, c, _ = nearest_index(rows, cols, (h, w))
        values = nmap.values[:, r, c]
    else:
        values = bilinear_zero(nmap.values, rows, cols)
    return BevFeature.masked(values, mask, cfg.meters_per_cell)
