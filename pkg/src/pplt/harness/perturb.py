"""Image degradations: motion blur, exposure changes, sensor noise."""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..errors import InputError

KINDS = ("motion_blur", "over_exposure", "under_exposure", "additive_noise")


@dataclass(frozen=True)
class PerturbSpec:
    kind: str
    magnitude: float

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InputError(f"unknown perturbation {self.kind!r}; choose from {KINDS}")
        if not self.magnitude > 0:
            raise InputError("perturbation magnitude must be positive")
        if self.kind == "motion_blur" and float(self.magnitude) != int(self.magnitude):
            raise InputError("motion blur kernel size must be a whole number of pixels")


# Settings used for the robustness sweep.
MOTION_BLUR = PerturbSpec("motion_blur", 10)
OVER_EXPOSURE = PerturbSpec("over_exposure", 2.5)
UNDER_EXPOSURE = PerturbSpec("under_exposure", 0.25)


def perturb(img, spec, seed=0):
    """Apply ``spec`` to an (H, W[, ch]) image in [0, 1]; returns a new array.

    Blur is a horizontal box filter with edge replication; exposure scales
    and clips; noise is zero-mean Gaussian, clipped back to [0, 1].
    """
    pixels = np.asarray(getattr(img, "pixels", img), dtype=np.float64)
    if spec.kind == "motion_blur":
        size = int(spec.magnitude)
        if size == 1:
            return pixels.copy()
        weights = np.full(size, 1.0 / size)
        return ndimage.convolve1d(pixels, weights, axis=1, mode="nearest")
    if spec.kind in ("over_exposure", "under_exposure"):
        return np.clip(pixels * float(spec.magnitude), 0.0, 1.0)
    rng = np.random.default_rng(seed)
    return np.clip(pixels + rng.normal(0.0, float(spec.magnitude), pixels.shape), 0.0, 1.0)
