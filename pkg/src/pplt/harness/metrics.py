"""Position and orientation recall."""

from dataclasses import dataclass

import numpy as np

from ..errors import InputError

DEFAULT_DISTANCES_M = (1.0, 3.0, 5.0)
DEFAULT_ANGLES_DEG = (1.0, 3.0, 5.0)


@dataclass(frozen=True)
class RecallReport:
    pr_at: dict  # meters -> fraction
    or_at: dict  # degrees -> fraction
    n_samples: int

    def rows(self):
        """``(metric, threshold, recall, n)`` tuples, position first."""
        out = [("PR", t, r, self.n_samples) for t, r in sorted(self.pr_at.items())]
        out += [("OR", t, r, self.n_samples) for t, r in sorted(self.or_at.items())]
        return out


def angular_error(pred_deg, gt_deg):
    d = np.abs(np.asarray(pred_deg, dtype=np.float64) - np.asarray(gt_deg, dtype=np.float64)) % 360.0
    return np.minimum(d, 360.0 - d)


def pose_errors(preds, gts, meters_per_cell=1.0):
    """Per-sample ``(position error m, orientation error deg)``."""
    if len(preds) != len(gts):
        raise InputError(f"{len(preds)} predictions for {len(gts)} ground-truth poses")
    pu = np.array([p.u for p in preds], dtype=np.float64)
    pv = np.array([p.v for p in preds], dtype=np.float64)
    gu = np.array([g.u for g in gts], dtype=np.float64)
    gv = np.array([g.v for g in gts], dtype=np.float64)
    dist = np.hypot(pu - gu, pv - gv) * meters_per_cell
    ang = angular_error([p.theta_deg for p in preds], [g.theta_deg for g in gts])
    return dist, ang


def recall(preds, gts, d_thresholds_m=DEFAULT_DISTANCES_M, a_thresholds_deg=DEFAULT_ANGLES_DEG, meters_per_cell=1.0):
    """Fractions of samples within each (inclusive) threshold."""
    dist, ang = pose_errors(preds, gts, meters_per_cell)
    n = len(preds)

    def frac(err, t):
        return float(np.count_nonzero(err <= t)) / n if n else 0.0

    return RecallReport(
        {float(t): frac(dist, t) for t in d_thresholds_m},
        {float(t): frac(ang, t) for t in a_thresholds_deg},
        n,
    )
