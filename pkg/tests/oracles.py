"""Independent reference implementations used only by the tests.

Each one is written from the definitions, in the most literal form
available, and shares no code with the package beyond its data types.
"""

import math

import numpy as np


# -- fusion ----------------------------------------------------------------


def _lse(values):
    values = list(values)
    m = max(values)
    if m == -math.inf:
        return -math.inf
    return m + math.log(sum(math.exp(x - m) for x in values))


def log_softmax_loops(s):
    h, w, k = s.shape
    z = _lse(s[v, u, j] for v in range(h) for u in range(w) for j in range(k))
    out = np.empty_like(s, dtype=np.float64)
    for v in range(h):
        for u in range(w):
            for j in range(k):
                out[v, u, j] = s[v, u, j] - z
    return out


def plane_marginal_loops(p):
    h, w, k = p.shape
    return np.array([[_lse(p[v, u, j] for j in range(k)) for u in range(w)] for v in range(h)])


def angle_marginal_loops(p):
    h, w, k = p.shape
    return np.array([_lse(p[v, u, j] for v in range(h) for u in range(w)) for j in range(k)])


def pof_loops(s_pano, s_1, alpha, beta):
    """Two-stage fusion written entry by entry. Returns the fused log-scores."""
    h, w, k = s_pano.shape
    log_p_pano = log_softmax_loops(s_pano)
    prior_uv = plane_marginal_loops(log_p_pano)
    log_p1 = log_softmax_loops(s_1)
    s1p = np.empty_like(log_p1)
    for v in range(h):
        for u in range(w):
            for j in range(k):
                s1p[v, u, j] = (1.0 - alpha) * log_p1[v, u, j] + alpha * prior_uv[v, u]
    prior_theta = angle_marginal_loops(log_softmax_loops(s1p))
    fused = np.empty_like(log_p_pano)
    for v in range(h):
        for u in range(w):
            for j in range(k):
                fused[v, u, j] = (1.0 - beta) * log_p_pano[v, u, j] + beta * prior_theta[j]
    return fused


def prior_uv_loops(s_pano, s_1, alpha):
    h, w, k = s_pano.shape
    prior_uv = plane_marginal_loops(log_softmax_loops(s_pano))
    log_p1 = log_softmax_loops(s_1)
    s1p = np.array(
        [[[(1 - alpha) * log_p1[v, u, j] + alpha * prior_uv[v, u] for j in range(k)] for u in range(w)] for v in range(h)]
    )
    return log_softmax_loops(s1p)


def prior_theta_loops(s_pano, s_1, beta):
    h, w, k = s_pano.shape
    prior_theta = angle_marginal_loops(log_softmax_loops(s_1))
    log_p = log_softmax_loops(s_pano)
    return np.array(
        [[[(1 - beta) * log_p[v, u, j] + beta * prior_theta[j] for j in range(k)] for u in range(w)] for v in range(h)]
    )


def argmax_loops(s):
    best, where = -math.inf, None
    h, w, k = s.shape
    for v in range(h):
        for u in range(w):
            for j in range(k):
                if s[v, u, j] > best:
                    best, where = s[v, u, j], (v, u, j)
    return where


# -- matching --------------------------------------------------------------


def match_loops(values, masks, maps, sentinel):
    """Scores for pre-rotated templates by explicit placement enumeration.

    ``values`` (K, C, G, G) and ``masks`` (K, G, G) are the rotated
    templates; ``maps`` is (C, H, W). Anchor cell is ``G // 2``.
    """
    k_count, _, g, _ = values.shape
    _, h, w = maps.shape
    a = g // 2
    out = np.empty((h, w, k_count))
    for k in range(k_count):
        cells = [(r, s) for r in range(g) for s in range(g) if masks[k, r, s]]
        for v in range(h):
            for u in range(w):
                if not cells:
                    out[v, u, k] = 0.0
                    continue
                total, ok = 0.0, True
                for r, s in cells:
                    y, x = v + r - a, u + s - a
                    if not (0 <= y < h and 0 <= x < w):
                        ok = False
                        break
                    total += float(np.dot(values[k, :, r, s], maps[:, y, x]))
                out[v, u, k] = total / len(cells) if ok else sentinel
    return out


# -- geometry --------------------------------------------------------------


def view_ray_heading(width, height, fov_deg, axis_deg, col, row):
    """Heading and elevation of a view pixel's ray via an explicit 3-D vector."""
    f = 0.5 * width / math.tan(math.radians(0.5 * fov_deg))
    fwd, right, up = f, col - 0.5 * (width - 1), -(row - 0.5 * (height - 1))
    a = math.radians(axis_deg)
    # camera frame -> world (north, east, up), yaw clockwise from north
    north = fwd * math.cos(a) - right * math.sin(a)
    east = fwd * math.sin(a) + right * math.cos(a)
    heading = math.degrees(math.atan2(east, north))
    elevation = math.degrees(math.atan2(up, math.hypot(north, east)))
    return heading, elevation


def point_in_polygon(x, y, poly):
    """Even-odd ray casting."""
    inside = False
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        if (y1 > y) != (y2 > y):
            xc = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            if x < xc:
                inside = not inside
    return inside


# -- loss ------------------------------------------------------------------


def nll_loops(s, index):
    return -log_softmax_loops(s)[index]
