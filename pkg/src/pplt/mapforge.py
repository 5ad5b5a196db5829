"""OpenStreetMap extract -> 3-channel class raster -> embedded neural map."""

import hashlib
import math
from dataclasses import dataclass, field
from xml.parsers import expat

import numpy as np

from .errors import (
    ConfigurationError,
    InputError,
    MissingClassError,
    OsmParseError,
    ValidationError,
)

EARTH_RADIUS_M = 6378137.0
AREA, LINE, POINT = 0, 1, 2
CHANNEL_NAMES = ("area", "line", "point")

# Keys / tags whose features are inherently polygons. Mapping them to the
# points channel is rejected.
AREA_KEYS = frozenset({"building", "landuse", "area"})
AREA_TAGS = frozenset({("natural", "water"), ("amenity", "parking"), ("leisure", "park")})

DEFAULT_RULES_TEXT = """\
building=* -> area:building
amenity=parking -> area:parking
landuse=grass -> area:grass
leisure=park -> area:grass
natural=water -> area:water
highway=motorway -> line:road
highway=trunk -> line:road
highway=primary -> line:road
highway=secondary -> line:road
highway=tertiary -> line:road
highway=residential -> line:road
highway=unclassified -> line:road
highway=service -> line:road
highway=footway -> line:path
highway=path -> line:path
highway=cycleway -> line:path
highway=pedestrian -> line:path
railway=rail -> line:rail
barrier=fence -> line:fence
natural=tree -> point:tree
highway=street_lamp -> point:pole
power=pole -> point:pole
highway=crossing -> point:crossing
"""


# -- scene -----------------------------------------------------------------


@dataclass
class Way:
    node_ids: list
    tags: dict = field(default_factory=dict)

    @property
    def closed(self):
        return len(self.node_ids) >= 4 and self.node_ids[0] == self.node_ids[-1]


@dataclass
class OsmScene:
    nodes: dict = field(default_factory=dict)  # id -> (lat, lon)
    ways: dict = field(default_factory=dict)  # id -> Way
    node_tags: dict = field(default_factory=dict)  # id -> {k: v}, tagged nodes only

    def validate(self):
        for wid, way in self.ways.items():
            for nid in way.node_ids:
                if nid not in self.nodes:
                    raise ValidationError(f"way {wid} references missing node id {nid}")


def parse_osm(data):
    """Parse the node / way / nd / tag subset of OSM XML.

    Anything else (relations, bounds, metadata attributes) is ignored.
    """
    if isinstance(data, str):
        data = data.encode("utf-8")
    scene = OsmScene()
    stack = []  # (kind, id) of the enclosing node / way
    parser = expat.ParserCreate()

    def start(name, attrs):
        try:
            if name == "node":
                nid = int(attrs["id"])
                scene.nodes[nid] = (float(attrs["lat"]), float(attrs["lon"]))
                stack.append(("node", nid))
            elif name == "way":
                wid = int(attrs["id"])
                scene.ways[wid] = Way([])
                stack.append(("way", wid))
            elif name == "nd" and stack and stack[-1][0] == "way":
                scene.ways[stack[-1][1]].node_ids.append(int(attrs["ref"]))
            elif name == "relation":
                stack.append(("relation", None))
            elif name == "tag" and stack:
                kind, eid = stack[-1]
                if kind == "way":
                    scene.ways[eid].tags[attrs["k"]] = attrs["v"]
                elif kind == "node":
                    scene.node_tags.setdefault(eid, {})[attrs["k"]] = attrs["v"]
        except (KeyError, ValueError) as exc:
            raise OsmParseError(f"bad <{name}> element: {exc}", parser.CurrentByteIndex) from None

    def end(name):
        if name in ("node", "way", "relation") and stack:
            stack.pop()

    parser.StartElementHandler = start
    parser.EndElementHandler = end
    try:
        parser.Parse(data, True)
    except expat.ExpatError as exc:
        raise OsmParseError(expat.ErrorString(exc.code), parser.ErrorByteIndex) from None
    scene.validate()
    return scene


# -- classification --------------------------------------------------------


@dataclass(frozen=True)
class Rule:
    key: str
    value: str  # "*" matches any value
    channel: int
    cls: str

    def matches(self, tags):
        if self.key not in tags:
            return False
        return self.value == "*" or tags[self.key] == self.value


@dataclass(frozen=True)
class RuleTable:
    rules: tuple
    classes: tuple  # per channel: ("background", name1, ...)

    def index(self, channel, name):
        return self.classes[channel].index(name)

    def n_classes(self, channel):
        return len(self.classes[channel])


def _parse_channel(text):
    text = text.strip().lower()
    if text.isdigit():
        ch = int(text)
    elif text.rstrip("s") in CHANNEL_NAMES:
        ch = CHANNEL_NAMES.index(text.rstrip("s"))
    else:
        raise ConfigurationError(f"unknown channel {text!r}")
    if ch not in (AREA, LINE, POINT):
        raise ConfigurationError(f"channel must be 0, 1 or 2, got {ch}")
    return ch


def make_rules(rules):
    """Build a validated :class:`RuleTable` from ``Rule`` objects."""
    rules = tuple(rules)
    if not rules:
        raise ConfigurationError("rule table is empty")
    classes = [["background"], ["background"], ["background"]]
    seen = {}
    for r in rules:
        if r.channel == POINT and (r.key in AREA_KEYS or (r.key, r.value) in AREA_TAGS):
            raise ConfigurationError(f"area tag {r.key}={r.value} cannot map to the points channel")
        if r.cls == "background":
            raise ConfigurationError("'background' is reserved for class index 0")
        if seen.setdefault(r.cls, r.channel) != r.channel:
            raise ConfigurationError(f"class {r.cls!r} assigned to two channels")
        if r.cls not in classes[r.channel]:
            classes[r.channel].append(r.cls)
    return RuleTable(rules, tuple(tuple(c) for c in classes))


def parse_rules(text):
    """Parse ``key=value -> channel:class`` lines; ``#`` starts a comment."""
    rules = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            lhs, rhs = (s.strip() for s in line.split("->"))
            key, value = (s.strip() for s in lhs.split("=", 1))
            channel, cls = (s.strip() for s in rhs.split(":", 1))
        except ValueError:
            raise ConfigurationError(f"rules line {lineno}: expected 'key=value -> channel:class'") from None
        rules.append(Rule(key, value, _parse_channel(channel), cls))
    return make_rules(rules)


def default_rules():
    return parse_rules(DEFAULT_RULES_TEXT)


@dataclass(frozen=True)
class Element:
    """One classified map element. ``coords`` is an (N, 2) array of (lat, lon)."""

    channel: int
    cls: int
    coords: np.ndarray
    closed: bool = False


def _first_match(rules, tags, channels):
    for r in rules.rules:
        if r.channel in channels and r.matches(tags):
            return r
    return None


def classify(scene, rules=None):
    """Assign each way / tagged node one (channel, class); unmatched are dropped.

    Closed ways take the first matching area or line rule; open ways only
    line rules; tagged nodes only point rules. Output follows document
    order: ways first, then nodes.
    """
    rules = rules or default_rules()
    if not rules.rules:
        raise ConfigurationError("rule table is empty")
    out = []
    for way in scene.ways.values():
        channels = (AREA, LINE) if way.closed else (LINE,)
        rule = _first_match(rules, way.tags, channels)
        if rule is None:
            continue
        coords = np.array([scene.nodes[n] for n in way.node_ids], dtype=np.float64)
        out.append(Element(rule.channel, rules.index(rule.channel, rule.cls), coords, way.closed))
    for nid, tags in scene.node_tags.items():
        rule = _first_match(rules, tags, (POINT,))
        if rule is None:
            continue
        coords = np.array([scene.nodes[nid]], dtype=np.float64)
        out.append(Element(POINT, rules.index(POINT, rule.cls), coords))
    return out


# -- projection & rasterization -------------------------------------------


def latlon_to_local(lat, lon, anchor):
    """Local tangent-plane (east, north) metres, scaled at the anchor latitude."""
    lat0, lon0 = anchor
    k = math.pi / 180.0 * EARTH_RADIUS_M
    east = (np.asarray(lon) - lon0) * k * math.cos(math.radians(lat0))
    north = (np.asarray(lat) - lat0) * k
    return east, north


def local_to_latlon(east, north, anchor):
    lat0, lon0 = anchor
    k = math.pi / 180.0 * EARTH_RADIUS_M
    lat = lat0 + np.asarray(north) / k
    lon = lon0 + np.asarray(east) / (k * math.cos(math.radians(lat0)))
    return lat, lon


@dataclass(frozen=True, eq=False)
class RasterMap:
    """3 x H x W class indices; rows grow north, cols grow east, anchor at the centre."""

    classes: np.ndarray
    meters_per_px: float
    anchor: tuple
    class_names: tuple = None

    def __post_init__(self):
        c = np.asarray(self.classes)
        if c.ndim != 3 or c.shape[0] != 3 or c.shape[1] != c.shape[2]:
            raise InputError(f"raster must be 3 x H x H, got {c.shape}")
        object.__setattr__(self, "classes", c.astype(np.int32))

    @property
    def size(self):
        return self.classes.shape[1]


def _local_pixels(coords, anchor, mpp, size):
    east, north = latlon_to_local(coords[:, 0], coords[:, 1], anchor)
    return east / mpp + 0.5 * size, north / mpp + 0.5 * size  # continuous (x, y)


def _fill_polygon(grid, value, xs, ys):
    """Even-odd scanline fill over pixel centres."""
    size = grid.shape[0]
    x0, y0 = xs, ys
    x1, y1 = np.roll(xs, -1), np.roll(ys, -1)
    lo = max(0, int(math.floor(ys.min() - 0.5)))
    hi = min(size - 1, int(math.ceil(ys.max() - 0.5)))
    for row in range(lo, hi + 1):
        yc = row + 0.5
        crosses = (y0 <= yc) != (y1 <= yc)
        if not crosses.any():
            continue
        xa, ya, xb, yb = x0[crosses], y0[crosses], x1[crosses], y1[crosses]
        xi = np.sort(xa + (yc - ya) * (xb - xa) / (yb - ya))
        for left, right in zip(xi[0::2], xi[1::2]):
            c0 = max(0, int(math.ceil(left - 0.5)))
            c1 = min(size - 1, int(math.ceil(right - 0.5)) - 1)
            if c1 >= c0:
                grid[row, c0 : c1 + 1] = value


def _stamp_polyline(grid, value, xs, ys):
    size = grid.shape[0]
    for xa, ya, xb, yb in zip(xs[:-1], ys[:-1], xs[1:], ys[1:]):
        n = int(math.ceil(2.0 * max(abs(xb - xa), abs(yb - ya)))) + 1
        t = np.linspace(0.0, 1.0, n + 1)
        cols = np.floor(xa + t * (xb - xa)).astype(np.intp)
        rows = np.floor(ya + t * (yb - ya)).astype(np.intp)
        ok = (cols >= 0) & (cols < size) & (rows >= 0) & (rows < size)
        grid[rows[ok], cols[ok]] = value


def rasterize(elements, anchor, extent_m, meters_per_px=0.5, class_names=None):
    """Draw classified elements into a square raster centred on ``anchor``.

    Pixel ``(row, col)`` covers east ``[(col - S/2) * mpp, (col + 1 - S/2) * mpp)``
    and the same in north for rows. Later elements overwrite earlier ones
    within a channel.
    """
    if extent_m <= 0 or meters_per_px <= 0:
        raise InputError("extent_m and meters_per_px must be positive")
    size = int(round(extent_m / meters_per_px))
    if size < 1:
        raise InputError("extent smaller than one pixel")
    classes = np.zeros((3, size, size), dtype=np.int32)
    for el in elements:
        xs, ys = _local_pixels(el.coords, anchor, meters_per_px, size)
        grid = classes[el.channel]
        if el.channel == AREA:
            _fill_polygon(grid, el.cls, xs, ys)
        elif el.channel == LINE:
            _stamp_polyline(grid, el.cls, xs, ys)
        else:
            c, r = int(math.floor(xs[0])), int(math.floor(ys[0]))
            if 0 <= r < size and 0 <= c < size:
                grid[r, c] = el.cls
    return RasterMap(classes, meters_per_px, tuple(anchor), class_names)


# -- embedding -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EmbeddingTable:
    """Per-channel class vectors; row 0 (background) is always zero."""

    vectors: tuple  # three arrays, (n_classes_ch, C)
    class_names: tuple = None

    def __post_init__(self):
        vecs = tuple(np.array(v, dtype=np.float64) for v in self.vectors)
        if len(vecs) != 3:
            raise ConfigurationError("embedding needs one table per raster channel")
        dim = vecs[0].shape[1]
        for v in vecs:
            if v.ndim != 2 or v.shape[1] != dim or v.shape[0] < 1:
                raise ConfigurationError("embedding tables must be (n_classes, C) with a shared C")
            if not np.all(np.isfinite(v)):
                raise ConfigurationError("embedding vectors must be finite")
            v[0] = 0.0
        object.__setattr__(self, "vectors", vecs)

    @property
    def dim(self):
        return self.vectors[0].shape[1]

    @property
    def embedding_id(self):
        h = hashlib.sha1()
        for v in self.vectors:
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()[:16]

    def scaled(self, s):
        return EmbeddingTable(tuple(s * v for v in self.vectors), self.class_names)

    @classmethod
    def random(cls, n_classes, dim, seed=0, scale=1.0):
        rng = np.random.default_rng(seed)
        return cls(tuple(scale * rng.standard_normal((n, dim)) for n in n_classes))

    @classmethod
    def one_hot(cls, n_classes):
        """Each non-background class gets its own unit axis."""
        dim = sum(n - 1 for n in n_classes)
        tables, offset = [], 0
        for n in n_classes:
            t = np.zeros((n, dim))
            t[np.arange(1, n), offset + np.arange(n - 1)] = 1.0
            tables.append(t)
            offset += n - 1
        return cls(tuple(tables))


@dataclass(frozen=True, eq=False)
class NeuralMap:
    values: np.ndarray  # (C, H, W)
    meters_per_px: float
    anchor: tuple
    embedding_id: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise InputError(f"neural map must be C x H x W, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InputError("neural map values must be finite")
        object.__setattr__(self, "values", v)

    @property
    def channels(self):
        return self.values.shape[0]

    @property
    def shape(self):
        return self.values.shape[1:]


def embed_map(raster, table):
    """Sum the three channels' class vectors at every pixel."""
    out = np.zeros((table.dim,) + raster.classes.shape[1:])
    for ch in range(3):
        idx = raster.classes[ch]
        n = table.vectors[ch].shape[0]
        bad = (idx < 0) | (idx >= n)
        if bad.any():
            missing = int(idx[bad][0])
            name = CHANNEL_NAMES[ch]
            if raster.class_names is not None and 0 <= missing < len(raster.class_names[ch]):
                name += f":{raster.class_names[ch][missing]}"
            raise MissingClassError(f"no embedding vector for class {missing} ({name})")
        out += np.moveaxis(table.vectors[ch][idx], -1, 0)
    return NeuralMap(out, raster.meters_per_px, raster.anchor, table.embedding_id)
