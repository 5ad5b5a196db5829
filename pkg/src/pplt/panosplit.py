"""Split-undistort-merge geometry.

Conventions used throughout the package:

* Headings are compass degrees, clockwise from north. A panorama's column 0
  starts at heading -180 and headings grow left to right; row 0 starts at
  elevation +90.
* BEV and map grids are indexed ``[row, col]`` with rows growing *north* and
  columns growing *east*. A BEV grid's camera sits at the geometric centre,
  and its north axis is the panorama's reference heading (heading 0).
"""

import functools
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .errors import ConfigurationError, ConsistencyError, InputError
from .sampling import bilinear_clamped, nearest_index

SUPPORTED_SPLITS = (3, 4, 6, 9)
_EDGE_TOL = 1e-9  # sector edges project exactly onto the image border


def _check_pixels(pixels, what):
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim not in (2, 3) or (pixels.ndim == 3 and pixels.shape[2] not in (1, 3)):
        raise InputError(f"{what} pixels must be (H, W) or (H, W, 1|3), got {pixels.shape}")
    if pixels.shape[0] < 2 or pixels.shape[1] < 2:
        raise InputError(f"{what} is degenerate: {pixels.shape[:2]}")
    if not np.all(np.isfinite(pixels)):
        raise InputError(f"{what} contains non-finite pixels")
    if pixels.min() < 0.0 or pixels.max() > 1.0:
        raise InputError(f"{what} pixels must lie in [0, 1]")
    return pixels


def _channels_first(pixels):
    if pixels.ndim == 2:
        return pixels[None]
    return np.moveaxis(pixels, -1, 0)


def _channels_last(chw, like_ndim):
    if like_ndim == 2:
        return chw[0]
    return np.moveaxis(chw, 0, -1)


@dataclass(frozen=True, eq=False)
class EquirectImage:
    """Full 360 x 180 degree panorama, values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        pixels = _check_pixels(self.pixels, "panorama")
        if pixels.shape[1] != 2 * pixels.shape[0]:
            raise InputError(f"panorama width must be twice its height, got {pixels.shape[:2]}")
        object.__setattr__(self, "pixels", pixels)

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


@dataclass(frozen=True, eq=False)
class PinholeView:
    """Rectilinear view with a horizontal principal axis."""

    pixels: np.ndarray
    fov_deg: float
    yaw_offset_deg: float

    def __post_init__(self):
        object.__setattr__(self, "pixels", _check_pixels(self.pixels, "view"))
        if not 0.0 < self.fov_deg < 180.0:
            raise ConfigurationError(f"fov_deg must be in (0, 180), got {self.fov_deg}")
        object.__setattr__(self, "yaw_offset_deg", float(self.yaw_offset_deg) % 360.0)

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def focal_px(self):
        return view_focal(self.width, self.fov_deg)

    @property
    def axis_heading_deg(self):
        return self.yaw_offset_deg + 0.5 * self.fov_deg


@dataclass(frozen=True)
class BevConfig:
    grid_size: int = 33
    meters_per_cell: float = 0.5
    camera_height_m: float = 1.6
    max_range_m: float = 8.0

    def __post_init__(self):
        if self.grid_size < 1 or self.grid_size % 2 == 0:
            # Odd sizes keep the camera on a cell centre, so the rotation
            # centre and the matching anchor coincide.
            raise ConfigurationError("grid_size must be a positive odd number")
        if self.meters_per_cell <= 0 or self.camera_height_m <= 0 or self.max_range_m <= 0:
            raise ConfigurationError("meters_per_cell, camera_height_m and max_range_m must be > 0")
        if self.grid_size * self.meters_per_cell < 2 * self.max_range_m:
            raise ConfigurationError(
                f"grid of {self.grid_size} x {self.meters_per_cell} m cannot hold range {self.max_range_m} m"
            )

    @property
    def center(self):
        return 0.5 * (self.grid_size - 1)


@dataclass(frozen=True, eq=False)
class BevFeature:
    """C x G x G ground-plane features plus a validity mask."""

    values: np.ndarray
    mask: np.ndarray
    meters_per_cell: float

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        mask = np.asarray(self.mask, dtype=bool)
        if values.ndim != 3 or values.shape[1:] != mask.shape or mask.shape[0] != mask.shape[1]:
            raise InputError(f"BEV values {values.shape} and mask {mask.shape} are incompatible")
        if not np.all(np.isfinite(values)):
            raise InputError("BEV values must be finite")
        if np.any(values[:, ~mask] != 0.0):
            raise InputError("masked-out BEV cells must hold zero")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def masked(cls, values, mask, meters_per_cell):
        """Build a feature, zeroing every cell outside ``mask``."""
        mask = np.asarray(mask, dtype=bool)
        values = np.where(mask, np.asarray(values, dtype=np.float64), 0.0)
        return cls(values, mask, meters_per_cell)

    @property
    def channels(self):
        return self.values.shape[0]

    @property
    def grid_size(self):
        return self.mask.shape[0]


# -- camera models ---------------------------------------------------------


def view_focal(width, fov_deg):
    return 0.5 * width / np.tan(np.radians(0.5 * fov_deg))


def pano_pixel_to_angles(width, height, cols, rows):
    """Continuous panorama pixel coordinates -> (heading, elevation) degrees."""
    heading = (np.asarray(cols) + 0.5) * (360.0 / width) - 180.0
    elevation = 90.0 - (np.asarray(rows) + 0.5) * (180.0 / height)
    return heading, elevation


def angles_to_pano_pixel(width, height, heading, elevation):
    """Inverse of :func:`pano_pixel_to_angles`; heading is wrapped into the image."""
    heading = (np.asarray(heading, dtype=np.float64) + 180.0) % 360.0 - 180.0
    cols = (heading + 180.0) * (width / 360.0) - 0.5
    rows = (90.0 - np.asarray(elevation)) * (height / 180.0) - 0.5
    return cols, rows


def view_pixel_to_angles(width, height, fov_deg, axis_heading_deg, cols, rows):
    """Pinhole pixel -> ray (heading, elevation) in the panorama frame."""
    f = view_focal(width, fov_deg)
    right = np.asarray(cols, dtype=np.float64) - 0.5 * (width - 1)
    down = np.asarray(rows, dtype=np.float64) - 0.5 * (height - 1)
    heading = axis_heading_deg + np.degrees(np.arctan2(right, f))
    elevation = np.degrees(np.arctan2(-down, np.hypot(right, f)))
    return heading, elevation


def angles_to_view_pixel(width, height, fov_deg, axis_heading_deg, heading, elevation):
    """Ray -> pinhole pixel. Returns ``(cols, rows, in_front)``."""
    f = view_focal(width, fov_deg)
    delta = np.radians(np.asarray(heading, dtype=np.float64) - axis_heading_deg)
    el = np.radians(np.asarray(elevation, dtype=np.float64))
    horiz = np.cos(el)
    forward = horiz * np.cos(delta)
    right = horiz * np.sin(delta)
    down = -np.sin(el)
    in_front = forward > 0
    safe = np.where(in_front, forward, 1.0)
    cols = 0.5 * (width - 1) + f * right / safe
    rows = 0.5 * (height - 1) + f * down / safe
    return cols, rows, in_front


# -- SUM -------------------------------------------------------------------


def pano_to_views(pano, n_views=3, out_width=256, out_height=256):
    """Split ``pano`` into ``n_views`` undistorted pinhole views.

    View ``k`` covers panorama headings ``[k * fov, (k + 1) * fov)`` with its
    optical axis at the middle of that range.
    """
    if n_views not in SUPPORTED_SPLITS:
        raise ConfigurationError(f"n_views must be one of {SUPPORTED_SPLITS}, got {n_views}")
    if not isinstance(pano, EquirectImage):
        pano = EquirectImage(pano)
    if out_width < 2 or out_height < 2:
        raise InputError("output views must be at least 2 x 2 pixels")

    fov = 360.0 / n_views
    src = _channels_first(pano.pixels)
    rows, cols = np.mgrid[0:out_height, 0:out_width].astype(np.float64)
    views = []
    for k in range(n_views):
        heading, elevation = view_pixel_to_angles(out_width, out_height, fov, (k + 0.5) * fov, cols, rows)
        pc, pr = angles_to_pano_pixel(pano.width, pano.height, heading, elevation)
        sampled = bilinear_clamped(src, pr, pc, wrap_cols=True)
        pixels = np.clip(_channels_last(sampled, pano.pixels.ndim), 0.0, 1.0)
        views.append(PinholeView(pixels, fov, k * fov))
    return views


def cell_offsets(cfg):
    """East / north offsets (metres) of every BEV cell from the camera."""
    idx = (np.arange(cfg.grid_size) - cfg.center) * cfg.meters_per_cell
    north, east = np.meshgrid(idx, idx, indexing="ij")
    return east, north


def cell_azimuths(cfg):
    east, north = cell_offsets(cfg)
    return np.degrees(np.arctan2(east, north)) % 360.0


def disc_mask(cfg):
    """Cells within ``max_range_m``; the camera's own cell has no bearing and is excluded."""
    east, north = cell_offsets(cfg)
    dist = np.hypot(east, north)
    return (dist > 0) & (dist <= cfg.max_range_m)


def sector_mask(cfg, start_deg, fov_deg):
    """Disc cells whose azimuth lies in ``[start, start + fov)`` (mod 360)."""
    disc = disc_mask(cfg)
    if fov_deg >= 360.0:
        return disc
    az = cell_azimuths(cfg)
    lo = float(start_deg) % 360.0
    hi = lo + fov_deg
    if hi <= 360.0:
        inside = (az >= lo) & (az < hi)
    else:
        inside = (az >= lo) | (az < hi - 360.0)
    return disc & inside


def identity_embed(pixels):
    """Default per-pixel transform: the raw pixel channels."""
    return _channels_first(np.asarray(pixels, dtype=np.float64))


def view_to_bev(view, embed=None, cfg=None):
    """Inverse-perspective map a view's per-pixel features onto the ground.

    ``embed`` maps an ``(H, W[, ch])`` pixel array to ``(C, H, W)`` features.
    Each ground cell in the view's sector and range is projected through the
    pinhole model (camera ``camera_height_m`` above a flat ground) and the
    features are sampled bilinearly there. Cells that fall outside the image
    are masked.
    """
    cfg = cfg or BevConfig()
    embed = embed or identity_embed
    feats = np.asarray(embed(view.pixels), dtype=np.float64)
    if feats.ndim != 3 or feats.shape[1:] != view.pixels.shape[:2]:
        raise InputError(f"embed must return (C, {view.height}, {view.width}), got {feats.shape}")

    east, north = cell_offsets(cfg)
    sector = sector_mask(cfg, view.yaw_offset_deg, view.fov_deg)
    delta = np.radians(cell_azimuths(cfg) - view.axis_heading_deg)
    dist = np.hypot(east, north)
    forward = dist * np.cos(delta)
    right = dist * np.sin(delta)

    f = view.focal_px
    in_front = forward > 1e-12
    safe = np.where(in_front, forward, 1.0)
    cols = 0.5 * (view.width - 1) + f * right / safe
    rows = 0.5 * (view.height - 1) + f * cfg.camera_height_m / safe
    lo, hi_c, hi_r = -0.5 - _EDGE_TOL, view.width - 0.5 + _EDGE_TOL, view.height - 0.5 + _EDGE_TOL
    in_image = (cols >= lo) & (cols <= hi_c) & (rows >= lo) & (rows <= hi_r)
    mask = sector & in_front & in_image

    values = bilinear_clamped(feats, np.where(mask, rows, 0.0), np.where(mask, cols, 0.0))
    return BevFeature.masked(values, mask, cfg.meters_per_cell)


def _is_boundary(mask):
    padded = np.pad(mask, 1, constant_values=False)
    inner = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return mask & ~inner


def merge_bevs(bevs):
    """Union of sector features. Shared boundary cells go to the lowest index."""
    bevs = list(bevs)
    if not bevs:
        raise InputError("merge_bevs needs at least one input")
    first = bevs[0]
    for b in bevs[1:]:
        if b.values.shape != first.values.shape or b.meters_per_cell != first.meters_per_cell:
            raise InputError("all BEV features must share grid size, resolution and channels")

    masks = np.stack([b.mask for b in bevs])
    overlap = masks.sum(axis=0) > 1
    if overlap.any():
        for b in bevs:
            interior = b.mask & ~_is_boundary(b.mask)
            if np.any(interior & overlap):
                raise ConsistencyError("BEV masks overlap away from their boundaries")

    values = np.zeros_like(first.values)
    taken = np.zeros_like(first.mask)
    for b in bevs:
        claim = b.mask & ~taken
        values[:, claim] = b.values[:, claim]
        taken |= claim
    return BevFeature(values, taken, first.meters_per_cell)


# -- rotation --------------------------------------------------------------


@functools.lru_cache(maxsize=32)
def _rotation_operator(g, angles, order):
    k_count = len(angles)
    n = g * g
    ctr = 0.5 * (g - 1)
    grid = np.arange(n).reshape(g, g)
    src = np.empty((k_count, n), dtype=np.intp)
    rows_out, cols_out, weights = [], [], []
    nn, ee = np.meshgrid(np.arange(g) - ctr, np.arange(g) - ctr, indexing="ij")
    for i, a in enumerate(angles):
        # Residual turn in [0, 90) first, then an exact quarter-turn permutation.
        quarter = int(a // 90.0) % 4
        resid = a - 90.0 * quarter
        perm = np.rot90(grid, quarter).ravel()  # out[i] = residual_out[perm[i]]
        inv = np.empty(n, dtype=np.intp)
        inv[perm] = np.arange(n)
        base = i * n
        if resid == 0.0:
            src[i] = perm
            rows_out.append(base + np.arange(n))
            cols_out.append(perm)
            weights.append(np.ones(n))
            continue
        t = np.radians(resid)
        rows = (ee * np.sin(t) + nn * np.cos(t) + ctr).ravel()
        cols = (ee * np.cos(t) - nn * np.sin(t) + ctr).ravel()
        r, c, inside = nearest_index(rows, cols, (g, g))
        src[i] = np.where(inside, r * g + c, -1)[perm]
        if order == 0:
            hit = np.flatnonzero(inside)
            rows_out.append(base + inv[hit])
            cols_out.append((r * g + c)[hit])
            weights.append(np.ones(hit.size))
            continue
        r0 = np.floor(rows).astype(np.intp)
        c0 = np.floor(cols).astype(np.intp)
        fr, fc = rows - r0, cols - c0
        for dr, wr in ((0, 1.0 - fr), (1, fr)):
            for dc, wc in ((0, 1.0 - fc), (1, fc)):
                rr, cc = r0 + dr, c0 + dc
                ok = np.flatnonzero((rr >= 0) & (rr < g) & (cc >= 0) & (cc < g) & (wr * wc != 0.0))
                rows_out.append(base + inv[ok])
                cols_out.append((rr * g + cc)[ok])
                weights.append((wr * wc)[ok])
    op = sparse.csr_matrix(
        (np.concatenate(weights), (np.concatenate(rows_out), np.concatenate(cols_out))),
        shape=(k_count * n, n),
    )
    return op, src


def rotation_operator(grid_size, angles_deg, order=1):
    """Sparse linear map behind :func:`rotate_stack`.

    Returns ``(op, src)``: ``op`` has shape ``(K*G*G, G*G)`` and maps a
    flattened channel plane to its K rotated copies (before masking);
    ``src[k, j]`` is the nearest source cell of output cell ``j`` or -1.
    """
    angles = np.atleast_1d(np.asarray(angles_deg, dtype=np.float64)) % 360.0
    return _rotation_operator(int(grid_size), tuple(float(a) for a in angles), int(order))


def rotate_stack(bev, angles_deg, order=1):
    """Rotate ``bev`` clockwise (compass sense) by each angle.

    A cell at bearing ``a`` in the input ends up at bearing ``a + angle``.
    Returns ``(values (K, C, G, G), masks (K, G, G))``. Each angle is split
    into a residual in [0, 90) resampled with bilinear values (``order=1``)
    or nearest values (``order=0``) and a nearest-neighbour mask, followed by
    an exact quarter turn. Angles 90 degrees apart are therefore exact
    quarter turns of one another, and multiples of 90 are lattice-exact.
    Bilinear weights are renormalised over valid source cells, so cells
    outside the mask never dim the rim of the rotated template.
    """
    g = bev.grid_size
    op, src = rotation_operator(g, angles_deg, order)
    k_count = src.shape[0]
    flat_mask = bev.mask.ravel()
    masks = (src >= 0) & flat_mask[np.maximum(src, 0)]
    vals = op @ bev.values.reshape(bev.channels, -1).T  # (K*G*G, C)
    # renormalise over valid source cells; the nearest source carries weight >= 1/4
    weight = (op @ flat_mask.astype(np.float64)).reshape(k_count, g * g)
    scale = np.where(masks, 1.0 / np.where(masks, weight, 1.0), 0.0)
    vals = vals.reshape(k_count, g * g, -1) * scale[:, :, None]
    values = np.ascontiguousarray(np.moveaxis(vals, 2, 1)).reshape(k_count, -1, g, g)
    return values, masks.reshape(k_count, g, g)


def rotate_bev(bev, angle_deg, order=1):
    """Rotate a BEV feature about its grid centre; see :func:`rotate_stack`."""
    if float(angle_deg) == 0.0:
        return BevFeature(bev.values.copy(), bev.mask.copy(), bev.meters_per_cell)
    values, masks = rotate_stack(bev, [angle_deg], order=order)
    return BevFeature(values[0], masks[0], bev.meters_per_cell)
