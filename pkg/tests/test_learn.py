import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import nll_loops
from pplt.errors import InputError, NumericalError
from pplt.harness.desk import DeskConfig, desk_samples, initial_state
from pplt.harness.io import checkpoint_meta, load_state, save_state
from pplt.learn import (
    MAP_BLOCKS,
    PlateauSchedule,
    TrainableState,
    TrainConfig,
    TrainingSample,
    backward,
    forward,
    fusion_backward,
    fusion_forward,
    grad_check,
    mean_loss,
    nll_loss,
    relative_error,
    snap_pose,
    train,
)
from pplt.mapforge import RasterMap
from pplt.pof import FusionParams, Pose, pof_blend
from pplt.posematch import ScoreVolume, angle_bins

K = 8
SMALL = DeskConfig(
    extent_m=24.0, density_scale=0.2, grid_size=7, max_range_m=3.0, pano_height=16, view_size=16, channels=2, n_rotations=K
)


@pytest.fixture(scope="module")
def samples():
    return desk_samples(6, 0, SMALL)


def vol(s):
    return ScoreVolume(np.asarray(s, float), angle_bins(s.shape[2]))


# -- loss ------------------------------------------------------------------


def test_confident_correct_volume_has_tiny_loss():
    s = np.zeros((3, 3, 4))
    s[1, 2, 0] = 40.0
    gt = Pose(2.0, 1.0, angle_bins(4)[0])
    assert nll_loss(vol(s), gt) < 1e-10


def test_uniform_volume_loss_is_log_n():
    s = np.zeros((3, 5, 8))
    assert abs(nll_loss(vol(s), Pose(1.0, 2.0, 10.0)) - math.log(120)) < 1e-12


def test_loss_against_loop_oracle(rng):
    s = rng.standard_normal((2, 2, 2))
    gt = Pose(1.0, 0.0, angle_bins(2)[1])
    assert abs(nll_loss(vol(s), gt) - nll_loops(s, (0, 1, 1))) < 1e-12


def test_loss_rejects_pose_outside_volume():
    with pytest.raises(InputError):
        nll_loss(vol(np.zeros((3, 3, 4))), Pose(3.0, 0.0, 0.0))
    with pytest.raises(InputError):
        nll_loss(vol(np.zeros((3, 3, 4))), Pose(0.0, -1.0, 0.0))


def test_snap_ties_go_to_lower_bin():
    # bins for K = 4 sit at -135, -45, 45, 135; 0 is equidistant from two
    assert snap_pose(Pose(0, 0, 0.0), (1, 1), 4)[2] == 1
    assert snap_pose(Pose(0, 0, 180.0), (1, 1), 4)[2] == 0
    assert snap_pose(Pose(0, 0, 44.0), (1, 1), 4)[2] == 2


@given(st.floats(-180, 180), st.integers(1, 64))
def test_snap_picks_a_nearest_bin(theta, k):
    bins = angle_bins(k)
    got = snap_pose(Pose(0, 0, theta), (1, 1), k)[2]
    dist = np.abs((bins - theta + 180) % 360 - 180)
    assert dist[got] <= dist.min() + 1e-9


# -- fusion gradients --------------------------------------------------------


def test_fusion_forward_matches_pof(rng):
    s_pano, s_1 = rng.standard_normal((2, 4, 4, 8))
    params = FusionParams.from_weights(0.3, 0.8)
    fw = fusion_forward(s_pano, s_1, params, (1, 2, 3))
    expected = pof_blend(vol(s_pano), vol(s_1), params.alpha, params.beta)[0].scores
    np.testing.assert_allclose(fw.fused, expected, atol=1e-12)


def test_alpha_gradient_vanishes_for_equal_heading_free_volumes(rng):
    # identical volumes whose probabilities do not depend on heading make
    # both stage-1 terms equal up to a constant, so alpha drops out
    plane = rng.standard_normal((4, 4, 1))
    s = np.repeat(plane, 8, axis=2)
    fw = fusion_forward(s, s.copy(), FusionParams(), (2, 1, 5))
    _, _, d_alpha, _ = fusion_backward(fw, FusionParams())
    assert abs(d_alpha) < 1e-10


def test_beta_gradient_vanishes_for_flat_volumes():
    s = np.zeros((3, 3, 8))
    fw = fusion_forward(s, s, FusionParams(), (0, 0, 0))
    g_pano, g_1, _, d_beta = fusion_backward(fw, FusionParams())
    assert abs(d_beta) < 1e-12
    assert abs(g_pano.sum()) < 1e-12 and abs(g_1.sum()) < 1e-12


def test_zero_pixel_transform_gives_zero_beta_gradient(samples):
    s = samples[0]
    state = initial_state(SMALL, seed=3)
    state = TrainableState(state.map_embedding, np.zeros_like(state.pixel_weight), np.zeros(SMALL.channels))
    # a full-disc template on both branches keeps the heading prior uniform
    twin = TrainingSample(s.pano_bev, s.pano_bev, s.raster, s.gt)
    fw = forward(state, twin, K)
    valid = fw.s_pano > -1e8
    assert np.all(fw.s_pano[valid] == 0.0)
    _, grads = backward(state, twin, K, fw)
    assert abs(grads["beta_raw"][0]) < 1e-12


@pytest.mark.parametrize("seed", range(3))
def test_fusion_backward_against_differences(seed):
    rng = np.random.default_rng(seed)
    s_pano, s_1 = 2 * rng.standard_normal((2, 3, 3, 4))
    params = FusionParams(0.4, -0.7)
    idx = (1, 2, 3)
    g_pano, g_1, d_a, d_b = fusion_backward(fusion_forward(s_pano, s_1, params, idx), params)
    h = 1e-5

    def loss(sp=s_pano, s1=s_1, p=params):
        return fusion_forward(sp, s1, p, idx).loss

    for arr, grad in ((s_pano, g_pano), (s_1, g_1)):
        for i in np.ndindex(arr.shape):
            old = arr[i]
            arr[i] = old + h
            up = loss()
            arr[i] = old - h
            down = loss()
            arr[i] = old
            assert abs((up - down) / (2 * h) - grad[i]) < 1e-8
    num_a = (loss(p=FusionParams(0.4 + h, -0.7)) - loss(p=FusionParams(0.4 - h, -0.7))) / (2 * h)
    num_b = (loss(p=FusionParams(0.4, -0.7 + h)) - loss(p=FusionParams(0.4, -0.7 - h))) / (2 * h)
    assert abs(num_a - d_a) < 1e-8 and abs(num_b - d_b) < 1e-8


def test_non_finite_scores_name_the_stage(rng):
    s = rng.standard_normal((2, 2, 2))
    s[0, 0, 0] = np.nan
    with pytest.raises(NumericalError, match="fusion"):
        fusion_forward(s, s, FusionParams(), (0, 0, 0))


# -- full gradient check ---------------------------------------------------


@pytest.mark.parametrize("seed", range(3))
def test_grad_check_small_fixture(samples, seed):
    rep = grad_check(initial_state(SMALL, seed=seed), samples[seed], 1e-4, K)
    assert rep.max_rel_error < 1e-5, rep
    n_free = sum(v.size - v.shape[1] for v in initial_state(SMALL).map_embedding.vectors) + 3 * 2 + 2 + 2
    assert rep.n_checked == n_free


def test_grad_check_constant_loss_is_exact(samples):
    # an all-background map scores zero whatever the pixel transform, so the
    # loss is constant along every pixel parameter
    s = samples[1]
    flat = RasterMap(np.zeros_like(s.raster.classes), 1.0, (0.0, 0.0))
    sample = TrainingSample(s.pano_bev, s.pin_bev, flat, s.gt)
    rep = grad_check(initial_state(SMALL, seed=5), sample, 1e-4, K, blocks=["pixel_weight", "pixel_bias"])
    assert rep.max_rel_error < 1e-8


def test_grad_check_epsilon_convergence(samples):
    state = initial_state(SMALL, seed=2)
    fine = grad_check(state, samples[2], 1e-4, K).max_rel_error
    coarse = grad_check(state, samples[2], 1e-3, K).max_rel_error
    assert fine <= coarse or fine < 1e-6


def test_grad_check_epsilon_range(samples):
    with pytest.raises(InputError):
        grad_check(initial_state(SMALL), samples[0], 1e-2, K)


def test_background_gradient_is_pinned(samples):
    _, grads = backward(initial_state(SMALL, seed=1), samples[0], K)
    for name in MAP_BLOCKS:
        assert np.all(grads[name][0] == 0.0)


def test_relative_error_floor():
    assert relative_error(0.0, 1e-9) == pytest.approx(1e-3)
    assert relative_error(2.0, 1.0) == 0.5


# -- training --------------------------------------------------------------


def test_one_sample_descent(samples):
    state = initial_state(SMALL, seed=0)
    res = train(samples[:1], TrainConfig(learning_rate=0.05, batch_size=1, max_epochs=5, rotations_train=K), init=state)
    assert res.trace[-1]["val_loss"] < res.trace[0]["val_loss"]
    assert mean_loss(res.state, samples[:1], K) < mean_loss(state, samples[:1], K)


def test_zero_learning_rate_leaves_state_unchanged(samples):
    state = initial_state(SMALL, seed=0)
    res = train(samples[:3], TrainConfig(learning_rate=0.0, max_epochs=3, rotations_train=K), init=state)
    after = res.state.parameters()
    for name, v in state.parameters().items():
        assert np.array_equal(after[name], v)
    vals = [row["val_loss"] for row in res.trace]
    assert vals == [vals[0]] * len(vals)
    assert res.reductions == [3]  # epoch 1 sets the best, 2 and 3 stall


def test_training_is_deterministic(samples):
    cfg = TrainConfig(learning_rate=0.05, batch_size=2, max_epochs=2, rotations_train=K)
    a = train(samples, cfg, seed=7, init=initial_state(SMALL))
    b = train(samples, cfg, seed=7, init=initial_state(SMALL))
    assert a.trace == b.trace
    for name, v in a.state.parameters().items():
        assert np.array_equal(b.state.parameters()[name], v)


def test_frozen_fusion_stays_put(samples):
    cfg = TrainConfig(learning_rate=0.1, max_epochs=2, rotations_train=K, train_fusion=False)
    res = train(samples[:2], cfg, init=initial_state(SMALL))
    assert res.state.fusion == FusionParams()


def test_train_config_validation():
    for bad in (dict(learning_rate=-1.0), dict(plateau_factor=1.0), dict(plateau_factor=0.0), dict(rotations_train=0)):
        with pytest.raises(InputError):
            TrainConfig(**bad)


def test_train_needs_data_and_state(samples):
    with pytest.raises(InputError):
        train([], init=initial_state(SMALL))
    with pytest.raises(InputError):
        train(samples[:1])


def test_plateau_contract():
    sched = PlateauSchedule(1.0, patience=2, factor=0.5)
    losses = [5.0, 4.0, 4.0, 4.5, 3.0, 3.0, 3.0, 3.0, 3.0]
    rates = []
    for epoch, loss in enumerate(losses, 1):
        rates.append(sched.learning_rate)
        sched.step(loss, epoch)
    # rate drops after two epochs without improvement, then the count restarts
    assert sched.reductions == [4, 7, 9]
    assert rates == [1.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.25, 0.25]
    assert sched.learning_rate == 0.125


# -- checkpoints -----------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    state = initial_state(SMALL, seed=4)
    state = TrainableState(state.map_embedding, state.pixel_weight, state.pixel_bias, FusionParams(0.25, -1.5))
    path = tmp_path / "ckpt.pplt"
    save_state(path, state, epoch=3, loss=1.25, learning_rate=0.01)
    back = load_state(path)
    for name, v in state.parameters().items():
        # stored at single precision
        np.testing.assert_allclose(back.parameters()[name], v, rtol=1e-6, atol=1e-7)
    meta = checkpoint_meta(path)
    assert meta["epoch"] == 3 and meta["loss"] == 1.25 and meta["learning_rate"] == 0.01
