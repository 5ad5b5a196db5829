"""End-to-end localization: panorama to fused pose, plus the oracle sweep."""

import time
from dataclasses import dataclass, field

import numpy as np

from ..mapforge import EmbeddingTable, embed_map
from ..panosplit import BevConfig, merge_bevs, pano_to_views, view_to_bev
from ..pof import FusionParams, fuse
from ..posematch import EVAL_ROTATIONS, MapSpectra, match_fft
from .metrics import recall
from .oracle import render_oracle_bev
from .synth import SceneDensity, synth_scene


@dataclass(eq=False)
class LocalizeResult:
    pose: object
    fused: object  # ScoreVolume
    s_pano: object
    s_1: object


def localize_templates(t_pano, t_1, nmap, n_rotations=EVAL_ROTATIONS, strategy="pof", params=None, workers=None):
    """Match both templates against ``nmap`` and fuse the two volumes."""
    spectrum = MapSpectra(nmap.values, t_pano.grid_size, workers)
    s_pano = match_fft(t_pano, nmap, n_rotations, workers=workers, map_fft=spectrum)
    s_1 = match_fft(t_1, nmap, n_rotations, workers=workers, map_fft=spectrum)
    fused, pose = fuse(strategy, s_pano, s_1, params or FusionParams())
    return LocalizeResult(pose, fused, s_pano, s_1)


def localize(
    pano, nmap, state, cfg=None, n_rotations=EVAL_ROTATIONS, n_views=3, view_size=96, strategy="pof", workers=None
):
    """Split, lift each view to BEV with the state's pixel encoder, merge, match, fuse.

    The pinhole branch is view 0, covering camera headings ``[0, 360 / n_views)``.
    """
    cfg = cfg or BevConfig()
    views = pano_to_views(pano, n_views, view_size, view_size)
    bevs = [view_to_bev(v, state.pixel_embed, cfg) for v in views]
    return localize_templates(merge_bevs(bevs), bevs[0], nmap, n_rotations, strategy, state.fusion, workers)


def oracle_templates(nmap, pose, cfg, n_views=3):
    """Perfect panoramic template and the matching view-0 sector template."""
    return render_oracle_bev(nmap, pose, cfg, 360.0), render_oracle_bev(nmap, pose, cfg, 360.0 / n_views, 0.0)


def localize_oracle(nmap, pose, cfg, n_rotations=EVAL_ROTATIONS, strategy="pof", params=None, n_views=3):
    t_pano, t_1 = oracle_templates(nmap, pose, cfg, n_views)
    return localize_templates(t_pano, t_1, nmap, n_rotations, strategy, params)


@dataclass(frozen=True)
class OracleSweepConfig:
    """Defaults sized so every heading is pinned to within one bin."""

    n_scenes: int = 200
    first_seed: int = 0
    extent_m: float = 72.0
    density_scale: float = 1.3
    grid_size: int = 41
    max_range_m: float = 20.0
    n_rotations: int = EVAL_ROTATIONS
    embed_dim: int = 8
    embed_seed: int = 1234
    strategy: str = "pof"

    @property
    def bev(self):
        return BevConfig(grid_size=self.grid_size, meters_per_cell=1.0, max_range_m=self.max_range_m)


@dataclass
class SweepResult:
    preds: list
    gts: list
    seeds: list
    elapsed_s: float
    cell_errors: np.ndarray
    heading_errors: np.ndarray
    report: object = None
    failures: list = field(default_factory=list)

    @property
    def n(self):
        return len(self.preds)


def heading_error(a, b):
    d = abs(a - b) % 360.0
    return min(d, 360.0 - d)


def run_oracle_sweep(cfg=None, progress=None):
    """Localize one oracle pose per seeded scene; collect per-sample errors."""
    cfg = cfg or OracleSweepConfig()
    bev = cfg.bev
    density = SceneDensity().scaled(cfg.density_scale)
    preds, gts, seeds, cell_err, head_err = [], [], [], [], []
    table = None
    tol = 360.0 / cfg.n_rotations
    failures = []
    start = time.perf_counter()
    for i in range(cfg.n_scenes):
        seed = cfg.first_seed + i
        scene = synth_scene(
            seed, extent_m=cfg.extent_m, density=density, meters_per_px=1.0, n_poses=1, margin_m=cfg.max_range_m + 1
        )
        if table is None:
            n_classes = [len(c) for c in scene.raster.class_names]
            table = EmbeddingTable.random(n_classes, cfg.embed_dim, seed=cfg.embed_seed)
        nmap = embed_map(scene.raster, table)
        gt = scene.gt_poses[0]
        pose = localize_oracle(nmap, gt, bev, cfg.n_rotations, cfg.strategy).pose
        ce = float(np.hypot(pose.u - gt.u, pose.v - gt.v))
        he = heading_error(pose.theta_deg, gt.theta_deg)
        preds.append(pose)
        gts.append(gt)
        seeds.append(seed)
        cell_err.append(ce)
        head_err.append(he)
        if ce > 0 or he > tol:
            failures.append((seed, ce, he))
        if progress:
            progress(i, seed, ce, he)
    elapsed = time.perf_counter() - start
    report = recall(preds, gts, meters_per_cell=1.0)
    return SweepResult(preds, gts, seeds, elapsed, np.array(cell_err), np.array(head_err), report, failures)
