"""File formats: PPLT1 tensor containers, PNM images, pose lists, recall CSV.

A container is a sequence of records. Each record is one JSON header line
followed by the raw little-endian float32 payload it describes.
"""

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from ..errors import InputError
from ..learn import MAP_BLOCKS, TrainableState
from ..mapforge import EmbeddingTable, NeuralMap, RasterMap
from ..pof import FusionParams, Pose
from ..posematch import ScoreVolume

MAGIC = "PPLT1"
_F32 = np.dtype("<f4")


@dataclass
class Record:
    name: str
    array: np.ndarray
    meta: dict = field(default_factory=dict)


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    if isinstance(v, list):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    return v


def write_container(path, records):
    with open(path, "wb") as fh:
        for rec in records:
            arr = np.ascontiguousarray(np.asarray(rec.array, dtype=np.float64))
            header = {
                "magic": MAGIC,
                "name": rec.name,
                "dtype": "f32",
                "shape": list(arr.shape),
                "layout": "row-major",
                "meta": _jsonable(rec.meta),
            }
            fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
            fh.write(arr.astype(_F32).tobytes())


def read_container(path):
    with open(path, "rb") as fh:
        data = fh.read()
    records, pos = [], 0
    while pos < len(data):
        end = data.find(b"\n", pos)
        if end < 0:
            raise InputError(f"{path}: truncated record header at byte {pos}")
        try:
            header = json.loads(data[pos:end].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise InputError(f"{path}: bad record header at byte {pos}: {exc}") from None
        if header.get("magic") != MAGIC or header.get("dtype") != "f32" or header.get("layout") != "row-major":
            raise InputError(f"{path}: not a {MAGIC} f32 row-major record at byte {pos}")
        shape = tuple(int(s) for s in header["shape"])
        n = int(np.prod(shape, dtype=np.int64)) * _F32.itemsize
        payload = data[end + 1 : end + 1 + n]
        if len(payload) != n:
            raise InputError(f"{path}: record {header.get('name')!r} is truncated")
        arr = np.frombuffer(payload, dtype=_F32).astype(np.float64).reshape(shape)
        records.append(Record(header.get("name", ""), arr, header.get("meta", {})))
        pos = end + 1 + n
    return records


def read_record(path, name=None):
    records = read_container(path)
    if name is None:
        return records[0]
    for rec in records:
        if rec.name == name:
            return rec
    raise InputError(f"{path}: no record named {name!r}")


# -- typed records ---------------------------------------------------------


def score_record(volume, name="scores"):
    meta = {"angle_bins": volume.angle_bins, "meters_per_cell": volume.meters_per_cell, "anchor": volume.anchor}
    return Record(name, volume.scores, meta)


def score_from_record(rec):
    m = rec.meta
    return ScoreVolume(rec.array, np.asarray(m["angle_bins"]), float(m["meters_per_cell"]), tuple(m["anchor"]))


def raster_record(raster, name="raster"):
    meta = {"meters_per_px": raster.meters_per_px, "anchor": raster.anchor, "class_names": raster.class_names}
    return Record(name, raster.classes, meta)


def raster_from_record(rec):
    m = rec.meta
    names = tuple(tuple(c) for c in m["class_names"]) if m.get("class_names") else None
    return RasterMap(np.rint(rec.array).astype(np.int32), float(m["meters_per_px"]), tuple(m["anchor"]), names)


def neural_map_record(nmap, name="neural_map"):
    meta = {"meters_per_px": nmap.meters_per_px, "anchor": nmap.anchor, "embedding_id": nmap.embedding_id}
    return Record(name, nmap.values, meta)


def neural_map_from_record(rec):
    m = rec.meta
    return NeuralMap(rec.array, float(m["meters_per_px"]), tuple(m["anchor"]), m.get("embedding_id", ""))


def state_records(state, epoch=None, loss=None, learning_rate=None):
    """A trainable state as named records; values round to float32."""
    meta = {"epoch": epoch, "loss": loss, "learning_rate": learning_rate}
    recs = [Record("checkpoint", np.zeros(0), meta)]
    recs += [Record(name, v) for name, v in zip(MAP_BLOCKS, state.map_embedding.vectors)]
    recs.append(Record("pixel_weight", state.pixel_weight))
    recs.append(Record("pixel_bias", state.pixel_bias))
    recs.append(Record("fusion_raw", np.array([state.fusion.alpha_raw, state.fusion.beta_raw])))
    return recs


def state_from_records(records):
    by_name = {r.name: r.array for r in records}
    missing = [n for n in MAP_BLOCKS + ("pixel_weight", "pixel_bias", "fusion_raw") if n not in by_name]
    if missing:
        raise InputError(f"checkpoint lacks records {missing}")
    table = EmbeddingTable(tuple(by_name[n] for n in MAP_BLOCKS))
    a, b = by_name["fusion_raw"].reshape(-1)[:2]
    return TrainableState(table, by_name["pixel_weight"], by_name["pixel_bias"], FusionParams(float(a), float(b)))


def save_state(path, state, epoch=None, loss=None, learning_rate=None):
    write_container(path, state_records(state, epoch, loss, learning_rate))


def checkpoint_meta(path):
    return read_record(path, "checkpoint").meta


def load_state(path):
    return state_from_records(read_container(path))


def bev_records(bev, name="bev"):
    return [Record(name, bev.values, {"meters_per_cell": bev.meters_per_cell}), Record(name + "_mask", bev.mask)]


# -- PNM -------------------------------------------------------------------


def write_pnm(path, img, bits=8):
    """Binary PGM/PPM with a one-line header; values in [0, 1]."""
    px = np.asarray(img, dtype=np.float64)
    if px.ndim == 3 and px.shape[2] == 1:
        px = px[:, :, 0]
    if px.ndim not in (2, 3) or (px.ndim == 3 and px.shape[2] != 3):
        raise InputError(f"cannot write image of shape {px.shape} as PNM")
    if bits not in (8, 16):
        raise InputError("PNM depth must be 8 or 16 bits")
    maxval = 255 if bits == 8 else 65535
    magic = "P5" if px.ndim == 2 else "P6"
    q = np.rint(np.clip(px, 0.0, 1.0) * maxval).astype(">u1" if bits == 8 else ">u2")
    with open(path, "wb") as fh:
        fh.write(f"{magic} {px.shape[1]} {px.shape[0]} {maxval}\n".encode("ascii"))
        fh.write(q.tobytes())


def read_pnm(path):
    """Read a binary PGM/PPM (8- or 16-bit) into floats in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise InputError(f"{path}: truncated PNM header")
        tokens.append(data[start:pos].decode("ascii"))
    pos += 1  # single whitespace byte before the raster
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in ("P5", "P6") or not 0 < maxval < 65536:
        raise InputError(f"{path}: unsupported PNM variant {magic} maxval {maxval}")
    ch = 1 if magic == "P5" else 3
    dtype = ">u1" if maxval < 256 else ">u2"
    n = w * h * ch
    arr = np.frombuffer(data, dtype=dtype, count=n, offset=pos)
    arr = arr.reshape((h, w) if ch == 1 else (h, w, 3)).astype(np.float64) / maxval
    return arr


# -- pose lists and recall -------------------------------------------------


def write_poses(path, items, meters_per_cell=1.0):
    """``items`` is a sequence of ``(id, Pose)``; written as ``id u_m v_m theta_deg``."""
    with open(path, "w") as fh:
        for pid, pose in items:
            u, v = pose.position_m(meters_per_cell)
            fh.write(f"{pid} {u:.6f} {v:.6f} {pose.theta_deg:.6f}\n")


def parse_poses(text, meters_per_cell=1.0):
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise InputError(f"pose line {lineno}: expected 'id u_m v_m theta_deg', got {line!r}")
        try:
            u, v, t = (float(x) for x in parts[1:])
        except ValueError:
            raise InputError(f"pose line {lineno}: non-numeric field in {line!r}") from None
        out.append((parts[0], Pose(u / meters_per_cell, v / meters_per_cell, t)))
    return out


def read_poses(path, meters_per_cell=1.0):
    with open(path) as fh:
        return parse_poses(fh.read(), meters_per_cell)


def recall_csv(report):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["metric", "threshold", "recall", "n"])
    for metric, t, r, n in report.rows():
        writer.writerow([metric, f"{t:g}", f"{r:.6f}", n])
    return buf.getvalue()


def recall_table(report):
    lines = [f"{'metric':<8}{'threshold':>10}{'recall':>10}"]
    for metric, t, r, _ in report.rows():
        unit = "m" if metric == "PR" else "deg"
        lines.append(f"{metric:<8}{f'{t:g} {unit}':>10}{100 * r:>9.2f}%")
    lines.append(f"n = {report.n_samples}")
    return "\n".join(lines)
