import os
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pplt.errors import GenerationError, InputError
from pplt.harness.desk import DeskConfig, desk_samples, initial_state
from pplt.harness.io import (
    Record,
    bev_records,
    neural_map_from_record,
    neural_map_record,
    parse_poses,
    raster_from_record,
    raster_record,
    read_container,
    read_pnm,
    read_poses,
    recall_csv,
    recall_table,
    score_from_record,
    score_record,
    write_container,
    write_pnm,
    write_poses,
)
from pplt.harness.metrics import angular_error, recall
from pplt.harness.oracle import render_oracle_bev
from pplt.harness.perturb import MOTION_BLUR, OVER_EXPOSURE, UNDER_EXPOSURE, PerturbSpec, perturb
from pplt.harness.pipeline import localize, localize_oracle
from pplt.harness.synth import SceneDensity, synth_scene
from pplt.learn import TrainableState
from pplt.mapforge import AREA, EmbeddingTable, embed_map
from pplt.panosplit import BevConfig, disc_mask, rotate_bev
from pplt.parallel import max_workers, parallel_map
from pplt.pof import Pose
from pplt.posematch import SENTINEL, ScoreVolume, angle_bins

# -- scenes ----------------------------------------------------------------


def _table(raster, dim=4, seed=0):
    rng = np.random.default_rng(seed)
    counts = [int(raster.classes[c].max()) + 1 for c in range(3)]
    return EmbeddingTable(tuple(rng.standard_normal((max(n, 2), dim)) for n in counts))


def test_empty_density_gives_background_and_implicit_road():
    scene = synth_scene(3, extent_m=32.0, density=SceneDensity(0, 0, 0, 0, 0), n_poses=5, margin_m=4.0)
    assert not scene.raster.classes.any()
    mid = scene.raster.size // 2
    assert all(p.v == mid for p in scene.gt_poses)


def test_scenes_are_deterministic():
    a, b = synth_scene(17), synth_scene(17)
    assert np.array_equal(a.raster.classes, b.raster.classes)
    assert [p.__dict__ for p in a.gt_poses] == [p.__dict__ for p in b.gt_poses]
    assert not np.array_equal(a.raster.classes, synth_scene(18).raster.classes)


def test_poses_on_background_across_100_scenes():
    for seed in range(100):
        scene = synth_scene(seed)
        n = scene.raster.size
        for p in scene.gt_poses:
            assert 0 <= p.u < n and 0 <= p.v < n
            assert scene.raster.classes[AREA, int(p.v), int(p.u)] == 0
            assert -180.0 < p.theta_deg <= 180.0


def test_infeasible_density_and_bad_extent():
    with pytest.raises(GenerationError):
        synth_scene(0, extent_m=10.0, density=SceneDensity(buildings=200), max_attempts=50)
    with pytest.raises(InputError):
        synth_scene(0, extent_m=0.0)


# -- oracle templates ------------------------------------------------------


def test_full_circle_oracle_mask_is_disc():
    scene = synth_scene(2)
    nmap = embed_map(scene.raster, _table(scene.raster))
    cfg = BevConfig(grid_size=17, meters_per_cell=1.0, max_range_m=8.0)
    t = render_oracle_bev(nmap, scene.gt_poses[0], cfg, 360.0)
    assert np.array_equal(t.mask, disc_mask(cfg))


def test_heading_change_rotates_the_cut():
    scene = synth_scene(5, n_poses=1)
    nmap = embed_map(scene.raster, _table(scene.raster))
    cfg = BevConfig(grid_size=17, meters_per_cell=1.0, max_range_m=8.0)
    p = scene.gt_poses[0]
    a = render_oracle_bev(nmap, Pose(p.u, p.v, 0.0), cfg, 360.0, order=0)
    b = render_oracle_bev(nmap, Pose(p.u, p.v, 90.0), cfg, 360.0, order=0)
    assert np.array_equal(a.mask, b.mask)

    def cells(t):
        return Counter(map(tuple, np.round(t.values[:, t.mask].T, 12)))

    assert cells(a) == cells(b)
    # a quarter turn of the camera is an exact quarter turn of the template
    assert np.allclose(rotate_bev(b, 90.0).values, a.values)


def test_oracle_rejects_pose_outside_map():
    scene = synth_scene(1)
    nmap = embed_map(scene.raster, _table(scene.raster))
    with pytest.raises(InputError):
        render_oracle_bev(nmap, Pose(-1.0, 0.0, 0.0), BevConfig(9, 1.0, max_range_m=4.0))


def test_oracle_localization_single_scene():
    scene = synth_scene(8, extent_m=72.0, density=SceneDensity().scaled(1.3), margin_m=21.0)
    nmap = embed_map(scene.raster, _table(scene.raster, 8, 1234))
    cfg = BevConfig(grid_size=41, meters_per_cell=1.0, max_range_m=20.0)
    for p in scene.gt_poses:
        got = localize_oracle(nmap, p, cfg, 256).pose
        assert (got.u, got.v) == (p.u, p.v)
        assert angular_error(got.theta_deg, p.theta_deg) <= 360.0 / 256


# -- perturbations ---------------------------------------------------------


def test_over_exposure_clamps():
    out = perturb(np.full((4, 6), 0.5), OVER_EXPOSURE)
    assert np.array_equal(out, np.ones((4, 6)))
    assert OVER_EXPOSURE.magnitude == 2.5 and UNDER_EXPOSURE.magnitude == 0.25


def test_under_exposure_scales():
    out = perturb(np.full((2, 2, 3), 0.8), UNDER_EXPOSURE)
    assert np.array_equal(out, np.full((2, 2, 3), 0.8 * 0.25))


def test_unit_blur_is_identity(rng):
    img = rng.random((5, 7))
    assert np.array_equal(perturb(img, PerturbSpec("motion_blur", 1)), img)


def test_blur_10_streak():
    img = np.zeros((3, 40))
    img[1, 20] = 1.0
    out = perturb(img, MOTION_BLUR)
    row = out[1]
    assert np.count_nonzero(row) == 10
    np.testing.assert_allclose(row[row > 0], 0.1, rtol=0, atol=1e-15)
    assert np.all(out[[0, 2]] == 0.0)
    assert MOTION_BLUR.magnitude == 10


@pytest.mark.parametrize("spec", [MOTION_BLUR, OVER_EXPOSURE, UNDER_EXPOSURE, PerturbSpec("additive_noise", 0.05)])
def test_perturbations_are_bit_deterministic(rng, spec):
    img = rng.random((16, 32, 3))
    a = perturb(img, spec, seed=9)
    b = perturb(img.copy(), spec, seed=9)
    assert a.tobytes() == b.tobytes()


def test_noise_depends_on_seed(rng):
    img = np.full((8, 8), 0.5)
    spec = PerturbSpec("additive_noise", 0.1)
    assert not np.array_equal(perturb(img, spec, 1), perturb(img, spec, 2))
    out = perturb(img, spec, 1)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_bad_specs():
    for kind, mag in (("fog", 1.0), ("motion_blur", 0.0), ("motion_blur", 2.5), ("over_exposure", -1.0)):
        with pytest.raises(InputError):
            PerturbSpec(kind, mag)


# -- recall ----------------------------------------------------------------


def test_perfect_predictions():
    gts = [Pose(1.0, 2.0, 30.0), Pose(5.0, 0.0, -170.0)]
    rep = recall(gts, gts)
    assert set(rep.pr_at.values()) == {1.0} and set(rep.or_at.values()) == {1.0}
    assert rep.n_samples == 2


def test_two_meter_error():
    rep = recall([Pose(2.0, 0.0, 10.0)], [Pose(0.0, 0.0, 10.0)])
    assert rep.pr_at == {1.0: 0.0, 3.0: 1.0, 5.0: 1.0}
    assert rep.or_at == {1.0: 1.0, 3.0: 1.0, 5.0: 1.0}


def test_heading_wraparound():
    rep = recall([Pose(0, 0, 179.0)], [Pose(0, 0, -179.0)])
    assert rep.or_at == {1.0: 0.0, 3.0: 1.0, 5.0: 1.0}
    assert angular_error(179.0, -179.0) == 2.0


def test_thresholds_are_inclusive():
    rep = recall([Pose(3.0, 4.0, 3.0)], [Pose(0.0, 0.0, 0.0)], (5.0,), (3.0,))
    assert rep.pr_at[5.0] == 1.0 and rep.or_at[3.0] == 1.0


def test_cell_units():
    rep = recall([Pose(2.0, 0.0, 0.0)], [Pose(0.0, 0.0, 0.0)], meters_per_cell=0.5)
    assert rep.pr_at[1.0] == 1.0


def test_length_mismatch():
    with pytest.raises(InputError):
        recall([Pose(0, 0, 0)], [])


poses = st.builds(Pose, st.floats(-50, 50), st.floats(-50, 50), st.floats(-180, 180))


@given(st.lists(st.tuples(poses, poses), min_size=1, max_size=30))
def test_recall_monotone(pairs):
    preds, gts = zip(*pairs)
    rep = recall(list(preds), list(gts))
    pr = [rep.pr_at[t] for t in sorted(rep.pr_at)]
    orr = [rep.or_at[t] for t in sorted(rep.or_at)]
    assert pr == sorted(pr) and orr == sorted(orr)
    assert all(0.0 <= r <= 1.0 for r in pr + orr)


# -- files -----------------------------------------------------------------


def test_container_round_trip(tmp_path, rng):
    a = rng.standard_normal((2, 3, 4)).astype(np.float32).astype(np.float64)
    b = np.arange(5.0)
    path = tmp_path / "x.pplt"
    write_container(path, [Record("a", a, {"k": [1, 2], "s": "x"}), Record("b", b)])
    back = read_container(path)
    assert [r.name for r in back] == ["a", "b"]
    assert np.array_equal(back[0].array, a) and back[0].meta == {"k": [1, 2], "s": "x"}
    assert np.array_equal(back[1].array, b)


def test_container_header_and_payload(tmp_path):
    path = tmp_path / "h.pplt"
    write_container(path, [Record("v", np.array([[1.0, -2.0]]))])
    header, payload = path.read_bytes().split(b"\n", 1)
    assert b'"magic": "PPLT1"' in header and b'"dtype": "f32"' in header and b'"shape": [1, 2]' in header
    assert payload == np.array([1.0, -2.0], "<f4").tobytes()


def test_container_rejects_garbage(tmp_path):
    path = tmp_path / "bad.pplt"
    path.write_bytes(b'{"magic": "NOPE"}\n')
    with pytest.raises(InputError):
        read_container(path)
    write_container(path, [Record("v", np.zeros(8))])
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(InputError):
        read_container(path)


def test_typed_record_round_trips(tmp_path, rng):
    scene = synth_scene(4)
    nmap = embed_map(scene.raster, _table(scene.raster))
    vol = ScoreVolume(rng.standard_normal((3, 3, 4)).astype(np.float32), angle_bins(4), 0.5, (1.0, 2.0))
    bev = render_oracle_bev(nmap, scene.gt_poses[0], BevConfig(9, 1.0, max_range_m=4.0))
    path = tmp_path / "all.pplt"
    write_container(path, [raster_record(scene.raster), neural_map_record(nmap), score_record(vol), *bev_records(bev)])
    recs = {r.name: r for r in read_container(path)}
    assert np.array_equal(raster_from_record(recs["raster"]).classes, scene.raster.classes)
    np.testing.assert_allclose(neural_map_from_record(recs["neural_map"]).values, nmap.values, rtol=1e-6, atol=1e-6)
    v2 = score_from_record(recs["scores"])
    assert np.array_equal(v2.scores, vol.scores) and np.array_equal(v2.angle_bins, vol.angle_bins)
    assert np.array_equal(recs["bev_mask"].array.astype(bool), bev.mask)


@pytest.mark.parametrize("bits", [8, 16])
@pytest.mark.parametrize("shape", [(5, 7), (4, 6, 3)])
def test_pnm_round_trip(tmp_path, rng, bits, shape):
    maxval = 255 if bits == 8 else 65535
    img = rng.integers(0, maxval + 1, shape) / maxval
    path = tmp_path / "i.pnm"
    write_pnm(path, img, bits)
    assert np.array_equal(read_pnm(path), img)


def test_pnm_header_comment(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# made by hand\n2 1\n255\n\x00\xff")
    assert read_pnm(path).tolist() == [[0.0, 1.0]]


def test_pnm_rejects_other_formats(tmp_path):
    path = tmp_path / "a.pbm"
    path.write_bytes(b"P4 1 1 1\n\x00")
    with pytest.raises(InputError):
        read_pnm(path)
    with pytest.raises(InputError):
        write_pnm(path, np.zeros((2, 2)), bits=12)


def test_pose_file_round_trip(tmp_path):
    items = [("a", Pose(3.0, 4.5, -12.25)), ("b7", Pose(0.0, 10.0, 180.0))]
    path = tmp_path / "p.txt"
    write_poses(path, items, meters_per_cell=0.5)
    assert path.read_text().splitlines()[0] == "a 1.500000 2.250000 -12.250000"
    back = read_poses(path, meters_per_cell=0.5)
    assert [(i, p.u, p.v, p.theta_deg) for i, p in back] == [("a", 3.0, 4.5, -12.25), ("b7", 0.0, 10.0, 180.0)]


def test_pose_parse_errors():
    assert parse_poses("# header\n\nx 1 2 3  # trailing\n")[0][0] == "x"
    with pytest.raises(InputError):
        parse_poses("x 1 2\n")
    with pytest.raises(InputError):
        parse_poses("x 1 two 3\n")


def test_recall_csv_and_table():
    rep = recall([Pose(2.0, 0.0, 0.0), Pose(0, 0, 0)], [Pose(0.0, 0.0, 0.0)] * 2)
    lines = recall_csv(rep).splitlines()
    assert lines[0] == "metric,threshold,recall,n"
    assert lines[1] == "PR,1,0.500000,2"
    assert len(lines) == 7
    assert "50.00%" in recall_table(rep)


# -- pipeline --------------------------------------------------------------


@pytest.fixture(scope="module")
def desk():
    cfg = DeskConfig()
    return cfg, desk_samples(2, 0, cfg)[0]


def test_zero_panorama_gives_flat_volumes(desk):
    cfg, s = desk
    base = initial_state(cfg)
    zero = TrainableState(base.map_embedding, np.zeros_like(base.pixel_weight), np.zeros(cfg.channels))
    nmap = embed_map(s.raster, base.map_embedding)
    pano = type(s.pano)(np.zeros_like(s.pano.pixels))
    res = localize(pano, nmap, zero, cfg.bev, 64, view_size=cfg.view_size, strategy="none")
    valid = res.s_pano.scores > SENTINEL
    assert np.all(res.s_pano.scores[valid] == 0.0)
    # flat scores: the first valid placement in row-major (v, u, bin) order wins
    v, u, k = np.argwhere(valid)[0]
    assert (res.pose.v, res.pose.u, res.pose.theta_deg) == (v, u, angle_bins(64)[k])


def test_localize_is_deterministic(desk):
    cfg, s = desk
    state = initial_state(cfg, seed=2)
    nmap = embed_map(s.raster, state.map_embedding)
    a = localize(s.pano, nmap, state, cfg.bev, 64, view_size=cfg.view_size)
    b = localize(s.pano, nmap, state, cfg.bev, 64, view_size=cfg.view_size, workers=1)
    assert a.pose == b.pose
    assert np.array_equal(a.fused.scores, b.fused.scores)


def test_thread_cap_from_environment(monkeypatch):
    monkeypatch.setenv("PPLT_THREADS", "3")
    assert max_workers() == 3
    monkeypatch.setenv("PPLT_THREADS", "junk")
    assert max_workers() >= 1
    monkeypatch.delenv("PPLT_THREADS")
    assert max_workers() == len(os.sched_getaffinity(0))


def test_parallel_map_keeps_order():
    assert parallel_map(lambda x: x * x, range(20), workers=4) == [x * x for x in range(20)]
    assert parallel_map(str, [], workers=4) == []
