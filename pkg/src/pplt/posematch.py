"""Exhaustive template matching over translations and heading bins."""

from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft

from .errors import InputError
from .panosplit import rotate_bev, rotate_stack
from .parallel import max_workers

SENTINEL = -1e9
TRAIN_ROTATIONS = 64
EVAL_ROTATIONS = 256

# Upper bound on the complex workspace of one FFT chunk, in bytes.
_FFT_CHUNK_BYTES = 64 * 2**20


def angle_bins(n_rotations):
    """Bin centres ``-180 + (k + 0.5) * 360 / K``; all lie inside (-180, 180]."""
    if n_rotations < 1:
        raise InputError("n_rotations must be >= 1")
    return -180.0 + (np.arange(n_rotations) + 0.5) * (360.0 / n_rotations)


@dataclass(frozen=True, eq=False)
class ScoreVolume:
    """H x W x K scores indexed ``[v, u, k]`` (map row, map column, heading bin)."""

    scores: np.ndarray
    angle_bins: np.ndarray
    meters_per_cell: float = 1.0
    anchor: tuple = (0.0, 0.0)

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        bins = np.asarray(self.angle_bins, dtype=np.float64)
        if s.ndim != 3 or s.shape[2] != bins.shape[0]:
            raise InputError(f"score volume {s.shape} does not match {bins.shape[0]} angle bins")
        if np.isnan(s).any() or np.isposinf(s).any():
            raise InputError("score volume contains NaN or +inf")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "angle_bins", bins)

    @property
    def shape(self):
        return self.scores.shape

    def with_scores(self, scores):
        return ScoreVolume(scores, self.angle_bins, self.meters_per_cell, self.anchor)


def _check_inputs(template, nmap, n_rotations):
    if template.channels != nmap.channels:
        raise InputError(f"template has {template.channels} channels, map has {nmap.channels}")
    h, w = nmap.shape
    if template.grid_size > h or template.grid_size > w:
        raise InputError(f"template {template.grid_size}^2 is larger than map {h} x {w}")
    if n_rotations < 1:
        raise InputError("n_rotations must be >= 1")


def rotated_templates(template, n_rotations):
    """Template rotated to every bin centre: ``(values (K,C,G,G), masks (K,G,G))``."""
    return rotate_stack(template, angle_bins(n_rotations))


def placement_bounds(masks, map_shape):
    """Placements whose rotated mask lies fully inside the map.

    Returns ``(valid (K, H, W) bool, counts (K,))``. The template's anchor
    cell is ``G // 2``.
    """
    k_count, g, _ = masks.shape
    h, w = map_shape
    ctr = g // 2
    valid = np.zeros((k_count, h, w), dtype=bool)
    counts = masks.reshape(k_count, -1).sum(axis=1)
    for k in range(k_count):
        if counts[k] == 0:
            valid[k] = True
            continue
        rows = np.flatnonzero(masks[k].any(axis=1))
        cols = np.flatnonzero(masks[k].any(axis=0))
        v0, v1 = ctr - rows[0], h - 1 - (rows[-1] - ctr)
        u0, u1 = ctr - cols[0], w - 1 - (cols[-1] - ctr)
        if v1 >= v0 and u1 >= u0:
            valid[k, max(v0, 0) : v1 + 1, max(u0, 0) : u1 + 1] = True
    return valid, counts


def _finish(sums, valid, counts, nmap, bins):
    """Normalise raw correlation sums (K, H, W) into a ScoreVolume."""
    denom = np.maximum(counts, 1)[:, None, None]
    scores = np.where(valid, sums / denom, SENTINEL)
    return ScoreVolume(np.moveaxis(scores, 0, -1), bins, nmap.meters_per_px, nmap.anchor)


def correlate_direct(values, maps):
    """Spatial-domain correlation sums, one shifted map slice per template cell.

    ``values`` is (K, C, G, G), ``maps`` is (C, H, W); returns (K, H, W)
    with ``out[k, v, u] = sum_{c,r,s} values[k,c,r,s] * maps[c, v+r-g, u+s-g]``.
    """
    k_count, _, g, _ = values.shape
    _, h, w = maps.shape
    ctr = g // 2
    padded = np.pad(maps, ((0, 0), (ctr, g - 1 - ctr), (ctr, g - 1 - ctr)))
    out = np.zeros((k_count, h, w))
    for k in range(k_count):
        for r, s in np.argwhere(np.any(values[k] != 0.0, axis=0)):
            out[k] += np.tensordot(values[k, :, r, s], padded[:, r : r + h, s : s + w], axes=1)
    return out


def fft_shape(map_shape, grid_size):
    """Transform size for :func:`correlate_fft`: no padding beyond the map.

    Circular wrap-around only reaches placements whose template leaves the
    map, and those are replaced by the sentinel anyway.
    """
    h, w = map_shape
    return (
        sfft.next_fast_len(max(h, grid_size), real=True),
        sfft.next_fast_len(max(w, grid_size), real=True),
    )


class MapSpectra:
    """Lazily computed transforms of a map and its quarter turns.

    Turn ``q`` holds the map rotated by ``q`` quarter turns the opposite way
    to templates, so a template rotated by ``q * 90`` degrees correlates
    against turn 0 exactly as the unrotated template correlates against
    turn ``q``. One instance can serve every match against the same map.
    """

    def __init__(self, maps, grid_size, workers=None):
        self.maps = np.asarray(maps, dtype=np.float64)
        self.grid_size = int(grid_size)
        self.workers = workers
        self._cache = {}

    def turned(self, q):
        return np.rot90(self.maps, -q, axes=(1, 2))

    def spectrum(self, q=0):
        if q not in self._cache:
            m = self.turned(q)
            n1, n2 = fft_shape(m.shape[1:], self.grid_size)
            self._cache[q] = sfft.rfft2(m, s=(n1, n2), workers=self.workers or max_workers())
        return self._cache[q]


def map_spectrum(maps, grid_size, workers=None):
    return MapSpectra(maps, grid_size, workers)


def template_spectra(values, n1, n2, workers=None):
    """Transforms of the flipped templates, zero-padded to (n1, n2)."""
    workers = workers or max_workers()
    flipped = values[:, :, ::-1, ::-1]
    # Row transform first so the all-zero padding rows are never touched.
    t_fft = sfft.rfft(flipped, n=n2, axis=-1, workers=workers)
    return sfft.fft(t_fft, n=n1, axis=-2, workers=workers, overwrite_x=True)


def _chunks(k_count, c, n1, n2):
    step = max(1, _FFT_CHUNK_BYTES // (16 * c * n1 * (n2 // 2 + 1)))
    return [(lo, min(lo + step, k_count)) for lo in range(0, k_count, step)]


def _correlate_chunk(t_fft, map_fft, g, h, w, n1, n2, workers):
    # Correlation as a convolution with the flipped template; the flip moves
    # the anchor from g // 2 to g - 1 - g // 2.
    lag = g - 1 - g // 2
    prod = np.einsum("kcij,cij->kij", t_fft, map_fft)
    conv = sfft.irfft2(prod, s=(n1, n2), workers=workers)
    return np.roll(conv, (-lag, -lag), axis=(1, 2))[:, :h, :w]


def correlate_fft(values, maps, map_fft=None, workers=None):
    """Frequency-domain equivalent of :func:`correlate_direct`.

    Exact (to rounding) wherever the template's non-zero cells stay inside
    the map; other placements carry wrap-around garbage.
    """
    k_count, c, g, _ = values.shape
    _, h, w = maps.shape
    n1, n2 = fft_shape((h, w), g)
    workers = workers or max_workers()
    if map_fft is None:
        map_fft = sfft.rfft2(maps, s=(n1, n2), workers=workers)
    out = np.empty((k_count, h, w))
    for lo, hi in _chunks(k_count, c, n1, n2):
        t_fft = template_spectra(values[lo:hi], n1, n2, workers)
        out[lo:hi] = _correlate_chunk(t_fft, map_fft, g, h, w, n1, n2, workers)
    return out


def match(template, nmap, n_rotations=EVAL_ROTATIONS):
    """Mean per-cell dot product of the rotated template at every placement.

    ``scores[v, u, k]`` compares the template rotated to ``angle_bins[k]``
    and anchored on map cell ``(v, u)``. Placements where the rotated mask
    leaves the map get :data:`SENTINEL`.
    """
    _check_inputs(template, nmap, n_rotations)
    bins = angle_bins(n_rotations)
    values, masks = rotated_templates(template, n_rotations)
    valid, counts = placement_bounds(masks, nmap.shape)
    sums = correlate_direct(values, nmap.values)
    return _finish(sums, valid, counts, nmap, bins)


def _quarter_turn_sums(values, spectra, n_rotations, workers):
    """Correlation sums for all bins from templates of the first quarter."""
    quarter = n_rotations // 4
    _, c, g, _ = values.shape
    maps = spectra.maps
    sums = np.empty((n_rotations,) + maps.shape[1:])
    workers = workers or max_workers()
    shapes = {q: spectra.turned(q).shape[1:] for q in range(4)}
    for lo, hi in _chunks(quarter, c, *fft_shape(maps.shape[1:], g)):
        t_cache = {}
        for q in range(4):
            h, w = shapes[q]
            n1, n2 = fft_shape((h, w), g)
            if (n1, n2) not in t_cache:
                t_cache[(n1, n2)] = template_spectra(values[lo:hi], n1, n2, workers)
            part = _correlate_chunk(t_cache[(n1, n2)], spectra.spectrum(q), g, h, w, n1, n2, workers)
            sums[q * quarter + lo : q * quarter + hi] = np.rot90(part, q, axes=(1, 2))
    return sums


def match_fft(template, nmap, n_rotations=EVAL_ROTATIONS, workers=None, map_fft=None):
    """Same contract as :func:`match`, via FFT correlation.

    When K is a multiple of 4 (and the grid is odd, so quarter turns keep
    the anchor cell fixed), bins ``k`` and ``k + K/4`` are exact quarter
    turns of each other, so only the first quarter of templates is
    transformed and correlated against four turned copies of the map.
    ``map_fft`` may carry a :class:`MapSpectra` of ``nmap`` for reuse.
    """
    _check_inputs(template, nmap, n_rotations)
    bins = angle_bins(n_rotations)
    spectra = map_fft if map_fft is not None else MapSpectra(nmap.values, template.grid_size, workers)
    if n_rotations % 4 == 0 and template.grid_size % 2 == 1:
        values, masks = rotate_stack(template, bins[: n_rotations // 4])
        masks = np.concatenate([np.rot90(masks, q, axes=(1, 2)) for q in range(4)])
        sums = _quarter_turn_sums(values, spectra, n_rotations, workers)
    else:
        values, masks = rotated_templates(template, n_rotations)
        sums = correlate_fft(values, nmap.values, map_fft=spectra.spectrum(0), workers=workers)
    valid, counts = placement_bounds(masks, nmap.shape)
    return _finish(sums, valid, counts, nmap, bins)


def rotation_shift_check(template, nmap, n_rotations, shift=1, atol=1e-5, matcher=None):
    """Does rotating the template by ``shift`` bins cyclically shift the heading axis?

    Holds on odd grids when ``shift * 360 / K`` is a multiple of 90 degrees.
    """
    matcher = matcher or match_fft
    base = matcher(template, nmap, n_rotations).scores
    turned = rotate_bev(template, shift * 360.0 / n_rotations)
    moved = matcher(turned, nmap, n_rotations).scores
    expected = np.roll(base, -shift, axis=2)
    sentinel_a = expected <= SENTINEL
    sentinel_b = moved <= SENTINEL
    if not np.array_equal(sentinel_a, sentinel_b):
        return False
    return bool(np.allclose(moved[~sentinel_b], expected[~sentinel_a], rtol=0.0, atol=atol))
