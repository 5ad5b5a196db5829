"""Position-orientation fusion of panoramic and pinhole score volumes.

Everything here works in log space on dense volumes. Sentinel scores from
out-of-map placements pass through as very negative ordinary values.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, InputError
from .posematch import SENTINEL, ScoreVolume

NORM_TOL = 1e-9


def logsumexp(x, axis=None):
    """Max-shifted log-sum-exp. Fully ``-inf`` slices yield ``-inf``."""
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def _check_normalized(logp, what):
    total = logsumexp(logp)
    if not abs(total) <= NORM_TOL:
        raise InputError(f"{what} is not normalised: LSE = {total!r}")


@dataclass(frozen=True, eq=False)
class LogProbVolume:
    logp: np.ndarray  # (H, W, K)
    angle_bins: np.ndarray
    meters_per_cell: float = 1.0
    anchor: tuple = (0.0, 0.0)

    def __post_init__(self):
        _check_normalized(self.logp, "log-probability volume")

    def as_scores(self):
        return ScoreVolume(self.logp, self.angle_bins, self.meters_per_cell, self.anchor)


@dataclass(frozen=True, eq=False)
class LogProbPlane:
    logp: np.ndarray  # (H, W)
    meters_per_cell: float = 1.0
    anchor: tuple = (0.0, 0.0)

    def __post_init__(self):
        _check_normalized(self.logp, "log-probability plane")


@dataclass(frozen=True, eq=False)
class LogProbAngle:
    logp: np.ndarray  # (K,)
    angle_bins: np.ndarray

    def __post_init__(self):
        _check_normalized(self.logp, "log-probability angle vector")


def squash(raw):
    return 0.5 * (1.0 + np.tanh(0.5 * raw))  # logistic, overflow-free


def unsquash(p):
    return float(np.log(p) - np.log1p(-p))


@dataclass(frozen=True)
class FusionParams:
    """Raw (unconstrained) blend weights; ``alpha``/``beta`` are their logistic squash."""

    alpha_raw: float = 0.0
    beta_raw: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.alpha_raw) and np.isfinite(self.beta_raw)):
            raise InputError("fusion raw parameters must be finite")

    @property
    def alpha(self):
        return float(squash(self.alpha_raw))

    @property
    def beta(self):
        return float(squash(self.beta_raw))

    @classmethod
    def from_weights(cls, alpha, beta):
        return cls(unsquash(alpha), unsquash(beta))


@dataclass(frozen=True)
class Pose:
    """Map column ``u`` (east), map row ``v`` (north) in cells, heading in (-180, 180]."""

    u: float
    v: float
    theta_deg: float
    score: float = float("nan")

    def position_m(self, meters_per_cell=1.0):
        return self.u * meters_per_cell, self.v * meters_per_cell


def wrap_heading(theta):
    """Map degrees into (-180, 180]."""
    t = np.mod(np.asarray(theta, dtype=np.float64), 360.0)
    t = np.where(t > 180.0, t - 360.0, t)
    return float(t) if np.ndim(t) == 0 else t


# -- normalisation and marginals ------------------------------------------


def log_softmax_volume(s):
    """Joint LogSoftmax over all H*W*K entries."""
    scores = s.scores
    if not np.any(scores > SENTINEL):
        raise DegenerateInputError("every entry of the score volume is a sentinel")
    m = scores.max()
    logp = scores - (m + np.log(np.sum(np.exp(scores - m))))
    return LogProbVolume(logp, s.angle_bins, s.meters_per_cell, s.anchor)


def lse_over_theta(p):
    """Marginalise headings: plane[v, u] = LSE_k p[v, u, k]."""
    return LogProbPlane(logsumexp(p.logp, axis=2), p.meters_per_cell, p.anchor)


def lse_over_xy(p):
    """Marginalise positions: angle[k] = LSE_{v,u} p[v, u, k]."""
    return LogProbAngle(logsumexp(p.logp.reshape(-1, p.logp.shape[2]), axis=0), p.angle_bins)


def fuse_stage1(logp1, prior_uv, alpha):
    """Blend pinhole log-probs with the spatial prior plane, broadcast along heading."""
    if logp1.logp.shape[:2] != prior_uv.logp.shape:
        raise InputError("spatial prior does not match the volume")
    fused = (1.0 - alpha) * logp1.logp + alpha * prior_uv.logp[:, :, None]
    return ScoreVolume(fused, logp1.angle_bins, logp1.meters_per_cell, logp1.anchor)


def fuse_stage2(logp_pano, prior_theta, beta):
    """Blend panoramic log-probs with the heading prior, broadcast over the grid."""
    if logp_pano.logp.shape[2] != prior_theta.logp.shape[0]:
        raise InputError("orientation prior does not match the volume")
    fused = (1.0 - beta) * logp_pano.logp + beta * prior_theta.logp[None, None, :]
    return ScoreVolume(fused, logp_pano.angle_bins, logp_pano.meters_per_cell, logp_pano.anchor)


# -- pose readout ----------------------------------------------------------


def argmax_pose(fused):
    """Maximum entry; ties go to the lowest row-major (v, u, k) index."""
    s = fused.scores
    if not np.any(np.isfinite(s)):
        raise DegenerateInputError("no finite entries to take an argmax over")
    flat = int(np.argmax(s))
    v, u, k = np.unravel_index(flat, s.shape)
    return Pose(float(u), float(v), float(fused.angle_bins[k]), float(s[v, u, k]))


# -- fusion strategies -----------------------------------------------------


def _check_pair(s_pano, s_1):
    if s_pano.scores.shape != s_1.scores.shape:
        raise InputError(f"volume shapes differ: {s_pano.scores.shape} vs {s_1.scores.shape}")
    if not np.array_equal(s_pano.angle_bins, s_1.angle_bins) or s_pano.meters_per_cell != s_1.meters_per_cell:
        raise InputError("volumes disagree on heading bins or resolution")


def pof_blend(s_pano, s_1, alpha, beta):
    """Two-stage fusion with explicit weights in [0, 1]. Returns ``(fused, pose)``."""
    _check_pair(s_pano, s_1)
    log_p_pano = log_softmax_volume(s_pano)
    prior_uv = lse_over_theta(log_p_pano)
    log_p1 = log_softmax_volume(s_1)
    s_1_prime = fuse_stage1(log_p1, prior_uv, alpha)
    log_p1_prime = log_softmax_volume(s_1_prime)
    prior_theta = lse_over_xy(log_p1_prime)
    fused = fuse_stage2(log_p_pano, prior_theta, beta)
    return fused, argmax_pose(fused)


def pof(s_pano, s_1, params=None):
    """Position-orientation fusion with learnable weights ``params``."""
    params = params or FusionParams()
    return pof_blend(s_pano, s_1, params.alpha, params.beta)


def fuse_prior_uv_only(s_pano, s_1, alpha=0.5):
    """Pinhole volume rectified by the panorama's spatial prior."""
    _check_pair(s_pano, s_1)
    prior_uv = lse_over_theta(log_softmax_volume(s_pano))
    rectified = log_softmax_volume(fuse_stage1(log_softmax_volume(s_1), prior_uv, alpha)).as_scores()
    return rectified, argmax_pose(rectified)


def fuse_prior_theta_only(s_pano, s_1, beta=0.5):
    """Panorama volume rectified by the pinhole's orientation prior."""
    _check_pair(s_pano, s_1)
    prior_theta = lse_over_xy(log_softmax_volume(s_1))
    fused = fuse_stage2(log_softmax_volume(s_pano), prior_theta, beta)
    return fused, argmax_pose(fused)


def no_fusion(s_pano, s_1=None):
    """Panoramic branch alone."""
    fused = log_softmax_volume(s_pano).as_scores()
    return fused, argmax_pose(fused)


STRATEGIES = ("pof", "prior-uv", "prior-theta", "none")


def fuse(strategy, s_pano, s_1, params=None):
    """Dispatch one of :data:`STRATEGIES`."""
    params = params or FusionParams()
    if strategy == "pof":
        return pof(s_pano, s_1, params)
    if strategy == "prior-uv":
        return fuse_prior_uv_only(s_pano, s_1, params.alpha)
    if strategy == "prior-theta":
        return fuse_prior_theta_only(s_pano, s_1, params.beta)
    if strategy == "none":
        return no_fusion(s_pano)
    raise InputError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")


# -- entropy ---------------------------------------------------------------


def shannon_entropy(img):
    """Entropy in bits of the 256-bin luminance histogram.

    RGB inputs are averaged over channels before quantisation.
    """
    pixels = np.asarray(getattr(img, "pixels", img), dtype=np.float64)
    if pixels.size == 0:
        raise InputError("entropy of an empty image")
    if pixels.ndim == 3:
        pixels = pixels.mean(axis=2)
    q = np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.intp)
    counts = np.bincount(q.ravel(), minlength=256)
    p = counts[counts > 0] / q.size
    return float(-np.sum(p * np.log2(p)))
