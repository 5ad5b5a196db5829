"""Desk-scale training data and the oracle-free evaluation loop."""

from dataclasses import dataclass

from ..learn import TrainableState, make_sample
from ..mapforge import embed_map
from ..panosplit import BevConfig
from ..parallel import parallel_map
from .metrics import recall
from .pipeline import localize
from .render import render_panorama
from .synth import SceneDensity, synth_scene


@dataclass(frozen=True)
class DeskConfig:
    extent_m: float = 40.0
    density_scale: float = 0.5
    grid_size: int = 17
    max_range_m: float = 8.0
    pano_height: int = 48
    view_size: int = 48
    channels: int = 4
    n_rotations: int = 64
    init_scale: float = 1.0

    @property
    def bev(self):
        return BevConfig(grid_size=self.grid_size, meters_per_cell=1.0, max_range_m=self.max_range_m)


def desk_samples(n, first_seed=0, cfg=None):
    """One rendered panorama per seeded scene, wrapped as training samples.

    The panorama is kept on the sample (``sample.pano``) for evaluation
    through the full image pipeline.
    """
    cfg = cfg or DeskConfig()
    density = SceneDensity().scaled(cfg.density_scale)
    out = []
    for seed in range(first_seed, first_seed + n):
        scene = synth_scene(
            seed, extent_m=cfg.extent_m, density=density, meters_per_px=1.0, n_poses=1, margin_m=cfg.max_range_m + 1
        )
        gt = scene.gt_poses[0]
        pano = render_panorama(scene.raster, gt, height=cfg.pano_height, camera_height_m=cfg.bev.camera_height_m)
        out.append(make_sample(pano, scene.raster, gt, cfg.bev, view_size=cfg.view_size))
    return out


def initial_state(cfg=None, seed=0, class_counts=(5, 5, 4)):
    cfg = cfg or DeskConfig()
    return TrainableState.random(
        list(class_counts), cfg.channels, 3, seed=seed, map_scale=cfg.init_scale, pixel_scale=cfg.init_scale
    )


def localization_recall(state, samples, cfg=None, strategy="pof"):
    """Oracle-free recall: localize each stored panorama against its own map."""
    cfg = cfg or DeskConfig()

    def one(s):
        nmap = embed_map(s.raster, state.map_embedding)
        bev = cfg.bev
        return localize(s.pano, nmap, state, bev, cfg.n_rotations, view_size=cfg.view_size, strategy=strategy, workers=1)

    preds = [r.pose for r in parallel_map(one, samples)]
    return recall(preds, [s.gt for s in samples], meters_per_cell=1.0)


def cell_recall(state, samples, cfg=None, radius_cells=1.0):
    """Fraction of samples localised within ``radius_cells`` of the truth."""
    rep = localization_recall(state, samples, cfg)
    if radius_cells in rep.pr_at:
        return rep.pr_at[radius_cells]
    raise KeyError(radius_cells)
