"""Engineered score-volume pairs for checking the direction of the fusion effect.

The panoramic volume pins position sharply but its heading profile is broad
and noisy. The pinhole volume is ambiguous in position (the true cell plus
decoys) but sharp in heading at each candidate. Fusion should borrow the
panorama's position to pick the pinhole's heading.
"""

from dataclasses import dataclass

import numpy as np

from ..posematch import ScoreVolume, angle_bins


@dataclass(frozen=True)
class TrendConfig:
    shape: tuple = (16, 16)
    n_rotations: int = 64
    pano_position_gain: float = 6.0
    pano_heading_gain: float = 1.0
    pano_heading_noise: float = 0.6
    pin_position_gain: float = 4.0
    pin_heading_gain: float = 8.0
    pin_heading_width_bins: float = 1.0
    n_decoys: int = 3
    noise: float = 0.2


def _bin_distance(k, center, n):
    d = np.abs(k - center) % n
    return np.minimum(d, n - d)


def trend_sample(seed, cfg=None):
    """Returns ``(s_pano, s_1, (v, u, k) ground-truth index)``."""
    cfg = cfg or TrendConfig()
    rng = np.random.default_rng(seed)
    h, w = cfg.shape
    n = cfg.n_rotations
    k = np.arange(n)
    v0, u0 = int(rng.integers(2, h - 2)), int(rng.integers(2, w - 2))
    k0 = int(rng.integers(n))
    vv, uu = np.mgrid[0:h, 0:w]

    near = np.exp(-((vv - v0) ** 2 + (uu - u0) ** 2) / 2.0)
    broad = np.cos(2 * np.pi * _bin_distance(k, k0, n) / n)
    pano = (
        cfg.pano_position_gain * near[:, :, None]
        + cfg.pano_heading_gain * broad[None, None, :]
        + cfg.pano_heading_noise * rng.standard_normal(n)[None, None, :]
        + cfg.noise * rng.standard_normal((h, w, n))
    )

    pin = cfg.noise * rng.standard_normal((h, w, n))
    cells = [(v0, u0, k0)]
    while len(cells) < cfg.n_decoys + 1:
        v, u = int(rng.integers(h)), int(rng.integers(w))
        if max(abs(v - v0), abs(u - u0)) > 3:
            cells.append((v, u, int(rng.integers(n))))
    for v, u, kc in cells:
        sharp = np.exp(-0.5 * (_bin_distance(k, kc, n) / cfg.pin_heading_width_bins) ** 2)
        pin[v, u, :] += cfg.pin_position_gain + cfg.pin_heading_gain * sharp

    bins = angle_bins(n)
    return ScoreVolume(pano, bins), ScoreVolume(pin, bins), (v0, u0, k0)


def bin_hit(pose, index, bins):
    """Did the pose land on the ground-truth heading bin?"""
    return bool(np.isclose(pose.theta_deg, bins[index[2]]))
