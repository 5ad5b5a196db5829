"""Procedural street scenes with ground-truth poses."""

from dataclasses import dataclass, field

import numpy as np

from ..errors import GenerationError, InputError
from ..mapforge import (
    AREA,
    LINE,
    POINT,
    Element,
    default_rules,
    local_to_latlon,
    rasterize,
)
from ..pof import Pose

DEFAULT_ANCHOR = (49.0069, 8.4037)


@dataclass(frozen=True)
class SceneDensity:
    roads: int = 3
    buildings: int = 14
    points: int = 40
    paths: int = 2
    fences: int = 2

    def scaled(self, s):
        return SceneDensity(*(int(round(s * getattr(self, f))) for f in self.__dataclass_fields__))


@dataclass(eq=False)
class SyntheticScene:
    raster: object  # RasterMap
    gt_poses: list
    seed: int
    elements: list = field(default_factory=list)

    @property
    def meters_per_px(self):
        return self.raster.meters_per_px


def _road_line(rng, half, horizontal):
    """A gently bent road crossing the whole extent."""
    offset = rng.uniform(-0.35, 0.35) * half
    ts = np.linspace(-half * 1.2, half * 1.2, 4)
    bend = offset + np.cumsum(rng.uniform(-0.12, 0.12, 4)) * half
    pts = np.stack([ts, bend], axis=1) if horizontal else np.stack([bend, ts], axis=1)
    return pts


def _seg_dist(p, a, b):
    ab = b - a
    t = np.clip(np.dot(p - a, ab) / max(np.dot(ab, ab), 1e-12), 0.0, 1.0)
    return float(np.linalg.norm(p - (a + t * ab)))


def _poly_dist(p, line):
    return min(_seg_dist(p, a, b) for a, b in zip(line[:-1], line[1:]))


def _rect(center, w, h, angle):
    c, s = np.cos(angle), np.sin(angle)
    corners = np.array([[-w, -h], [w, -h], [w, h], [-w, h]]) * 0.5
    rot = corners @ np.array([[c, s], [-s, c]])
    pts = rot + center
    return np.vstack([pts, pts[:1]])


def _inside_poly(p, poly):
    x, y = p
    xs, ys = poly[:-1, 0], poly[:-1, 1]
    xn, yn = np.roll(xs, -1), np.roll(ys, -1)
    cross = (ys <= y) != (yn <= y)
    xi = xs[cross] + (y - ys[cross]) * (xn[cross] - xs[cross]) / (yn[cross] - ys[cross])
    return int(np.sum(xi > x)) % 2 == 1


def synth_scene(
    seed,
    extent_m=64.0,
    density=None,
    meters_per_px=1.0,
    n_poses=4,
    margin_m=12.0,
    anchor=DEFAULT_ANCHOR,
    max_attempts=2000,
):
    """Generate a scene fully determined by ``seed``.

    Buildings are non-overlapping rectangles kept clear of roads; ground
    truth poses sit on road cells (at cell centres) at least ``margin_m``
    from the raster edge, with headings uniform in (-180, 180].
    """
    if extent_m <= 0:
        raise InputError("extent_m must be positive")
    density = density or SceneDensity()
    rng = np.random.default_rng(seed)
    half = 0.5 * extent_m
    rules = default_rules()
    road, path, fence = rules.index(LINE, "road"), rules.index(LINE, "path"), rules.index(LINE, "fence")
    building = rules.index(AREA, "building")
    grass, parking = rules.index(AREA, "grass"), rules.index(AREA, "parking")
    point_classes = [rules.index(POINT, n) for n in ("tree", "pole", "crossing")]

    roads = [_road_line(rng, half, horizontal=(i % 2 == 0)) for i in range(density.roads)]
    lines = [(road, r) for r in roads]
    for cls, n in ((path, density.paths), (fence, density.fences)):
        for _ in range(n):
            a = rng.uniform(-half, half, 2)
            b = a + rng.uniform(-0.4, 0.4, 2) * extent_m
            lines.append((cls, np.stack([a, b])))

    areas = []
    attempts = 0
    while len(areas) < density.buildings:
        attempts += 1
        if attempts > max_attempts:
            raise GenerationError(f"could not place {density.buildings} buildings in {extent_m} m")
        center = rng.uniform(-half, half, 2)
        w, h = rng.uniform(3.0, 10.0, 2)
        poly = _rect(center, w, h, rng.uniform(0, np.pi))
        radius = 0.5 * np.hypot(w, h)
        if any(_poly_dist(center, r) < radius + 2.0 for r in roads):
            continue
        if any(np.linalg.norm(center - c) < radius + rad + 1.0 for c, rad, _ in areas):
            continue
        cls = building if rng.uniform() < 0.75 else (grass if rng.uniform() < 0.5 else parking)
        areas.append((center, radius, (cls, poly)))

    points = []
    attempts = 0
    while len(points) < density.points:
        attempts += 1
        if attempts > max_attempts * 5:
            raise GenerationError(f"could not place {density.points} point features")
        p = rng.uniform(-half, half, 2)
        if any(_inside_poly(p, poly) for _, _, (_, poly) in areas):
            continue
        points.append((point_classes[int(rng.integers(len(point_classes)))], p))

    elements = []
    for _, _, (cls, poly) in areas:
        lat, lon = local_to_latlon(poly[:, 0], poly[:, 1], anchor)
        elements.append(Element(AREA, cls, np.stack([lat, lon], axis=1), closed=True))
    for cls, line in lines:
        lat, lon = local_to_latlon(line[:, 0], line[:, 1], anchor)
        elements.append(Element(LINE, cls, np.stack([lat, lon], axis=1)))
    for cls, p in points:
        lat, lon = local_to_latlon(p[0], p[1], anchor)
        elements.append(Element(POINT, cls, np.array([[lat, lon]])))

    raster = rasterize(elements, anchor, extent_m, meters_per_px, rules.classes)
    poses = _sample_poses(rng, raster, road, n_poses, margin_m, implicit_road=not roads)
    return SyntheticScene(raster, poses, seed, elements)


def _sample_poses(rng, raster, road_class, n, margin_m, implicit_road):
    """Uniform draws (with replacement) from eligible road cells."""
    size = raster.size
    lo = int(np.ceil(margin_m / raster.meters_per_px))
    hi = size - 1 - lo
    if hi < lo:
        raise GenerationError("margin leaves no room for poses")
    if implicit_road:
        road = np.zeros((size, size), dtype=bool)
        road[size // 2, :] = True
    else:
        road = raster.classes[LINE] == road_class
    ok = road & (raster.classes[AREA] == 0)
    inner = np.zeros_like(ok)
    inner[lo : hi + 1, lo : hi + 1] = True
    cells = np.argwhere(ok & inner)
    if len(cells) == 0:
        raise GenerationError("no road cell lies inside the pose margin")
    poses = []
    for _ in range(n):
        v, u = cells[int(rng.integers(len(cells)))]
        theta = 180.0 - rng.uniform(0.0, 360.0)
        poses.append(Pose(float(u), float(v), float(theta)))
    return poses
