"""Command-line entry point: ``pplt <subcommand> ...``."""

import argparse
import os
import sys

import numpy as np

from .errors import PpltError
from .harness import io as pio
from .harness.desk import DeskConfig, desk_samples, initial_state
from .harness.metrics import recall
from .harness.pipeline import localize
from .harness.render import raster_preview, render_panorama
from .harness.synth import SceneDensity, synth_scene
from .learn import TrainConfig, train, write_trace
from .mapforge import (
    classify,
    default_rules,
    embed_map,
    parse_osm,
    parse_rules,
    rasterize,
)
from .panosplit import BevConfig, EquirectImage, PinholeView, pano_to_views, view_to_bev
from .pof import STRATEGIES, FusionParams, fuse
from .posematch import EVAL_ROTATIONS, TRAIN_ROTATIONS


def _bev_config(args):
    return BevConfig(
        grid_size=args.grid, meters_per_cell=args.mpc, camera_height_m=args.camera_height, max_range_m=args.range
    )


def _add_bev_flags(p, grid=33, mpc=0.5, rng=8.0):
    p.add_argument("--grid", type=int, default=grid, help="BEV cells per side (odd)")
    p.add_argument("--mpc", type=float, default=mpc, help="metres per BEV cell")
    p.add_argument("--camera-height", type=float, default=1.6)
    p.add_argument("--range", type=float, default=rng, help="ground projection range in metres")


def _pose_line(pose, mpc):
    u, v = pose.position_m(mpc)
    return f"{u:.6f} {v:.6f} {pose.theta_deg:.6f} {pose.score:.9g}"


def _embedder(state):
    return state.pixel_embed if state is not None else None


def _load_state(path):
    return pio.load_state(path) if path else None


# -- subcommands -----------------------------------------------------------


def cmd_split(args):
    pano = EquirectImage(pio.read_pnm(args.pano))
    views = pano_to_views(pano, args.views, args.size, args.size)
    for k, view in enumerate(views):
        path = f"{args.out_prefix}{k}.pnm"
        pio.write_pnm(path, view.pixels, args.bits)
        print(f"{path} yaw={view.yaw_offset_deg:g} fov={view.fov_deg:g}")


def cmd_rasterize(args):
    with open(args.osm, "rb") as fh:
        scene = parse_osm(fh.read())
    rules = default_rules()
    if args.rules:
        with open(args.rules) as fh:
            rules = parse_rules(fh.read())
    elements = classify(scene, rules)
    if args.anchor:
        anchor = tuple(float(x) for x in args.anchor.split(","))
    elif scene.nodes:
        anchor = tuple(np.mean(np.array(list(scene.nodes.values())), axis=0))
    else:
        anchor = (0.0, 0.0)
    raster = rasterize(elements, anchor, args.extent, args.mpp, rules.classes)
    pio.write_container(args.out, [pio.raster_record(raster)])
    if args.preview:
        pio.write_pnm(args.preview, raster_preview(raster))
    print(f"{args.out}: {raster.size} x {raster.size} px, {len(elements)} elements")


def cmd_bev(args):
    pixels = pio.read_pnm(args.view)
    view = PinholeView(pixels, args.fov, args.yaw)
    state = _load_state(args.state)
    bev = view_to_bev(view, _embedder(state), _bev_config(args))
    pio.write_container(args.out, pio.bev_records(bev))
    print(f"{args.out}: {bev.channels} x {bev.grid_size} x {bev.grid_size}, {int(bev.mask.sum())} valid cells")


def _load_map(path, state):
    records = {r.name: r for r in pio.read_container(path)}
    if "neural_map" in records:
        return pio.neural_map_from_record(records["neural_map"])
    if "raster" in records:
        return embed_map(pio.raster_from_record(records["raster"]), state.map_embedding)
    raise PpltError(f"{path}: expected a 'raster' or 'neural_map' record")


def cmd_localize(args):
    state = _load_state(args.state) or initial_state(DeskConfig(channels=args.channels), seed=args.seed)
    nmap = _load_map(args.map, state)
    pano = EquirectImage(pio.read_pnm(args.pano))
    cfg = _bev_config(args)
    res = localize(pano, nmap, state, cfg, args.rotations, args.views, args.view_size, args.strategy)
    if args.out:
        pio.write_container(args.out, [pio.score_record(res.fused, "fused")])
    print(_pose_line(res.pose, nmap.meters_per_px))


def cmd_fuse(args):
    s_pano = pio.score_from_record(pio.read_record(args.pano_volume))
    s_1 = pio.score_from_record(pio.read_record(args.pin_volume))
    params = FusionParams.from_weights(args.alpha, args.beta)
    fused, pose = fuse(args.strategy, s_pano, s_1, params)
    if args.out:
        pio.write_container(args.out, [pio.score_record(fused, "fused")])
    print(_pose_line(pose, s_pano.meters_per_cell))


def cmd_eval(args):
    preds = dict(pio.read_poses(args.pred))
    gts = pio.read_poses(args.gt)
    missing = [pid for pid, _ in gts if pid not in preds]
    if missing:
        raise PpltError(f"no prediction for ids {missing[:5]}")
    report = recall([preds[pid] for pid, _ in gts], [g for _, g in gts])
    text = pio.recall_csv(report)
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    print(pio.recall_table(report))


def cmd_synth(args):
    os.makedirs(args.out_dir, exist_ok=True)
    density = SceneDensity().scaled(args.density)
    scene = synth_scene(args.seed, args.extent, density, args.mpp, args.poses, args.margin)
    mpp = scene.meters_per_px
    join = os.path.join
    pio.write_container(join(args.out_dir, "raster.pplt"), [pio.raster_record(scene.raster)])
    pio.write_pnm(join(args.out_dir, "raster.pnm"), raster_preview(scene.raster))
    items = [(f"{args.seed}_{i}", p) for i, p in enumerate(scene.gt_poses)]
    pio.write_poses(join(args.out_dir, "gt.txt"), items, mpp)
    for pid, pose in items:
        pano = render_panorama(scene.raster, pose, args.pano_height)
        pio.write_pnm(join(args.out_dir, f"pano_{pid}.pnm"), pano.pixels, args.bits)
    print(f"{args.out_dir}: {len(items)} poses on a {scene.raster.size} px raster")


def cmd_train(args):
    desk = DeskConfig(channels=args.channels, n_rotations=args.rotations)
    cfg = TrainConfig(
        learning_rate=args.learning_rate,
        batch_size=args.batch_size,
        max_epochs=args.max_epochs,
        plateau_patience=args.plateau_patience,
        plateau_factor=args.plateau_factor,
        rotations_train=args.rotations,
        adaptive=not args.plain_sgd,
        train_fusion=not args.freeze_fusion,
    )
    samples = desk_samples(args.samples, args.first_seed, desk)
    validation = desk_samples(args.validation, args.first_seed + args.samples, desk) if args.validation else None
    init = _load_state(args.init) or initial_state(desk, seed=args.seed)

    def log(row):
        print(
            f"epoch {row['epoch']:3d}  train {row['train_loss']:.6f}  val {row['val_loss']:.6f}  lr {row['learning_rate']:g}"
        )

    result = train(samples, cfg, args.seed, init, validation, log)
    best = result.trace[result.best_epoch]
    pio.save_state(args.out, result.state, result.best_epoch, best["val_loss"], result.trace[-1]["learning_rate"])
    if args.trace:
        write_trace(args.trace, result.trace)
    print(f"best epoch {result.best_epoch}; rate reductions at {result.reductions}; saved {args.out}")


# -- parser ----------------------------------------------------------------


def build_parser():
    ap = argparse.ArgumentParser(prog="pplt", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="panorama -> pinhole views")
    p.add_argument("pano")
    p.add_argument("--views", type=int, default=3)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--bits", type=int, choices=(8, 16), default=8)
    p.add_argument("--out-prefix", default="view_")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("rasterize", help="OSM XML -> raster container + preview")
    p.add_argument("osm")
    p.add_argument("--rules", help="rules file of 'key=value -> channel:class' lines")
    p.add_argument("--anchor", help="lat,lon of the raster centre (default: node centroid)")
    p.add_argument("--extent", type=float, default=64.0)
    p.add_argument("--mpp", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.add_argument("--preview")
    p.set_defaults(func=cmd_rasterize)

    p = sub.add_parser("bev", help="pinhole view -> BEV container")
    p.add_argument("view")
    p.add_argument("--fov", type=float, default=120.0)
    p.add_argument("--yaw", type=float, default=0.0, help="heading of the view's left edge")
    p.add_argument("--state", help="checkpoint whose pixel encoder to apply")
    p.add_argument("--out", required=True)
    _add_bev_flags(p)
    p.set_defaults(func=cmd_bev)

    p = sub.add_parser("localize", help="panorama + map -> pose line + fused container")
    p.add_argument("pano")
    p.add_argument("map", help="container holding a 'raster' or 'neural_map' record")
    p.add_argument("--state", help="checkpoint (default: random initialisation)")
    p.add_argument("--channels", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rotations", type=int, default=EVAL_ROTATIONS)
    p.add_argument("--strategy", choices=STRATEGIES, default="pof")
    p.add_argument("--views", type=int, default=3)
    p.add_argument("--view-size", type=int, default=96)
    p.add_argument("--out")
    _add_bev_flags(p, grid=17, mpc=1.0)
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("fuse", help="two score volumes -> pose")
    p.add_argument("pano_volume")
    p.add_argument("pin_volume")
    p.add_argument("--strategy", choices=STRATEGIES, default="pof")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--beta", type=float, default=0.5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help="predictions + ground truth -> recall CSV and table")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--csv", help="write the CSV here instead of stdout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="seed -> scene bundle")
    p.add_argument("seed", type=int)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--extent", type=float, default=64.0)
    p.add_argument("--density", type=float, default=1.0)
    p.add_argument("--mpp", type=float, default=1.0)
    p.add_argument("--poses", type=int, default=4)
    p.add_argument("--margin", type=float, default=12.0)
    p.add_argument("--pano-height", type=int, default=64)
    p.add_argument("--bits", type=int, choices=(8, 16), default=16)
    p.set_defaults(func=cmd_synth)

    d = TrainConfig()
    p = sub.add_parser("train", help="desk-scale training on synthetic scenes")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--trace", help="loss trace CSV")
    p.add_argument("--init", help="initial checkpoint")
    p.add_argument("--samples", type=int, default=50)
    p.add_argument("--validation", type=int, default=0)
    p.add_argument("--first-seed", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--channels", type=int, default=4)
    p.add_argument("--rotations", type=int, default=TRAIN_ROTATIONS)
    p.add_argument("--learning-rate", type=float, default=d.learning_rate)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--max-epochs", type=int, default=d.max_epochs)
    p.add_argument("--plateau-patience", type=int, default=d.plateau_patience)
    p.add_argument("--plateau-factor", type=float, default=d.plateau_factor)
    p.add_argument("--plain-sgd", action="store_true")
    p.add_argument("--freeze-fusion", action="store_true")
    p.set_defaults(func=cmd_train)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (PpltError, OSError) as exc:
        print(f"pplt {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
