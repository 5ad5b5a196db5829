"""Desk-scale differentiable localization: loss, hand-derived gradients, trainer.

The image encoder is a per-pixel affine map ``W @ pixel + b``. Bilinear BEV
sampling has weights summing to one, so the BEV of encoded pixels equals the
encoder applied to the BEV of raw pixels, with the bias carried by the mask.
Each sample therefore stores the raw pixel BEVs once, rotated to every bin,
and a forward pass only has to apply ``[W | b]`` to them.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft

from .errors import InputError, NumericalError, TrainingError
from .mapforge import EmbeddingTable, embed_map
from .panosplit import (
    BevConfig,
    BevFeature,
    merge_bevs,
    pano_to_views,
    rotate_stack,
    view_to_bev,
)
from .pof import FusionParams, Pose, logsumexp
from .posematch import (
    SENTINEL,
    TRAIN_ROTATIONS,
    ScoreVolume,
    angle_bins,
    fft_shape,
    placement_bounds,
)

MAP_BLOCKS = ("map_area", "map_line", "map_point")


@dataclass(eq=False)
class TrainableState:
    map_embedding: EmbeddingTable
    pixel_weight: np.ndarray  # (C, P)
    pixel_bias: np.ndarray  # (C,)
    fusion: FusionParams = field(default_factory=FusionParams)

    def __post_init__(self):
        self.pixel_weight = np.array(self.pixel_weight, dtype=np.float64)
        self.pixel_bias = np.array(self.pixel_bias, dtype=np.float64).reshape(-1)
        c = self.map_embedding.dim
        if self.pixel_weight.ndim != 2 or self.pixel_weight.shape[0] != c or self.pixel_bias.shape != (c,):
            raise InputError(
                f"pixel transform {self.pixel_weight.shape}/{self.pixel_bias.shape} does not produce {c} channels"
            )
        if not (np.all(np.isfinite(self.pixel_weight)) and np.all(np.isfinite(self.pixel_bias))):
            raise InputError("pixel transform must be finite")

    @property
    def channels(self):
        return self.map_embedding.dim

    @property
    def pixel_channels(self):
        return self.pixel_weight.shape[1]

    @property
    def augmented_weight(self):
        """``[W | b]``, shape (C, P + 1)."""
        return np.concatenate([self.pixel_weight, self.pixel_bias[:, None]], axis=1)

    def pixel_embed(self, pixels):
        px = np.asarray(pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.shape[2] != self.pixel_channels:
            raise InputError(f"pixel transform expects {self.pixel_channels} channels, got {px.shape[2]}")
        return np.einsum("cp,hwp->chw", self.pixel_weight, px) + self.pixel_bias[:, None, None]

    def parameters(self):
        """Named copies of every parameter block."""
        blocks = {name: v.copy() for name, v in zip(MAP_BLOCKS, self.map_embedding.vectors)}
        blocks["pixel_weight"] = self.pixel_weight.copy()
        blocks["pixel_bias"] = self.pixel_bias.copy()
        blocks["alpha_raw"] = np.array([self.fusion.alpha_raw])
        blocks["beta_raw"] = np.array([self.fusion.beta_raw])
        return blocks

    def with_parameters(self, blocks):
        table = EmbeddingTable(tuple(blocks[n] for n in MAP_BLOCKS), self.map_embedding.class_names)
        fusion = FusionParams(float(blocks["alpha_raw"][0]), float(blocks["beta_raw"][0]))
        return TrainableState(table, blocks["pixel_weight"], blocks["pixel_bias"], fusion)

    @classmethod
    def random(cls, n_classes, channels, pixel_channels=3, seed=0, map_scale=1.0, pixel_scale=1.0):
        rng = np.random.default_rng(seed)
        table = EmbeddingTable(tuple(map_scale * rng.standard_normal((n, channels)) for n in n_classes))
        weight = pixel_scale * rng.standard_normal((channels, pixel_channels))
        bias = pixel_scale * rng.standard_normal(channels)
        return cls(table, weight, bias)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    batch_size: int = 10
    max_epochs: int = 30
    plateau_patience: int = 2
    plateau_factor: float = 0.5
    rotations_train: int = TRAIN_ROTATIONS
    adaptive: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    train_fusion: bool = True

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise InputError("learning_rate must be >= 0")
        if not 0.0 < self.plateau_factor < 1.0:
            raise InputError("plateau_factor must lie in (0, 1)")
        if self.rotations_train < 1 or self.batch_size < 1 or self.max_epochs < 0 or self.plateau_patience < 1:
            raise InputError("rotations_train, batch_size, plateau_patience must be >= 1 and max_epochs >= 0")


# -- samples ---------------------------------------------------------------


@dataclass(eq=False)
class TrainingSample:
    """Raw pixel BEVs of one panorama, its map raster and ground-truth pose.

    ``pano_bev`` merges all views; ``pin_bev`` is view 0 alone. Both carry
    the raw pixel channels, not encoded features.
    """

    pano_bev: BevFeature
    pin_bev: BevFeature
    raster: object  # RasterMap
    gt: Pose
    pano: object = None  # source EquirectImage, if kept
    _bases: dict = field(default_factory=dict, repr=False)

    def bases(self, n_rotations):
        """Rotated ``[pixels, mask]`` stacks for both branches, cached per K."""
        if n_rotations not in self._bases:
            bins = angle_bins(n_rotations)
            out = []
            for bev in (self.pano_bev, self.pin_bev):
                aug = BevFeature(
                    np.concatenate([bev.values, bev.mask[None].astype(np.float64)]), bev.mask, bev.meters_per_cell
                )
                values, masks = rotate_stack(aug, bins)
                valid, counts = placement_bounds(masks, self.raster.classes.shape[1:])
                out.append((values, valid, counts))
            self._bases[n_rotations] = tuple(out)
        return self._bases[n_rotations]


def make_sample(pano, raster, gt, cfg=None, n_views=3, view_size=96):
    """Split ``pano``, lift every view's raw pixels to BEV and merge."""
    cfg = cfg or BevConfig()
    views = pano_to_views(pano, n_views, view_size, view_size)
    bevs = [view_to_bev(v, None, cfg) for v in views]
    return TrainingSample(merge_bevs(bevs), bevs[0], raster, gt, pano)


def snap_pose(gt, shape, n_rotations):
    """Ground-truth cell and heading bin; ties go to the lower bin."""
    h, w = shape
    u, v = int(round(gt.u)), int(round(gt.v))
    if not (0 <= u < w and 0 <= v < h):
        raise InputError(f"ground truth ({gt.u}, {gt.v}) lies outside the {h} x {w} volume")
    bins = angle_bins(n_rotations)
    diff = np.abs((bins - gt.theta_deg + 180.0) % 360.0 - 180.0)
    k = int(np.flatnonzero(diff <= diff.min() + 1e-9)[0])
    return v, u, k


def _log_softmax(x):
    m = x.max()
    return x - (m + math.log(np.sum(np.exp(x - m))))


def nll_loss(fused, gt):
    """Negative log-likelihood of the ground-truth pose bin."""
    scores = fused.scores if isinstance(fused, ScoreVolume) else np.asarray(fused)
    h, w, k = scores.shape
    v, u, kk = snap_pose(gt, (h, w), k)
    return float(max(-_log_softmax(scores)[v, u, kk], 0.0))


# -- forward / backward ----------------------------------------------------


def _placed_spectrum(t, n1, n2, g):
    """Spectrum of templates re-indexed so the anchor cell sits at lag 0."""
    pad = np.zeros(t.shape[:-2] + (n1, n2))
    pad[..., :g, :g] = t
    pad = np.roll(pad, (-(t.shape[-2] // 2), -(t.shape[-1] // 2)), axis=(-2, -1))
    return sfft.rfft2(pad)


@dataclass(eq=False)
class _Branch:
    values: np.ndarray  # rotated raw bases (K, P+1, G, G)
    valid: np.ndarray
    counts: np.ndarray
    t_fft: np.ndarray = None
    scores: np.ndarray = None  # (K, H, W)


@dataclass(eq=False)
class Forward:
    loss: float
    fused: np.ndarray  # (H, W, K)
    s_pano: np.ndarray
    s_1: np.ndarray
    pose_index: tuple
    cache: dict = field(repr=False, default_factory=dict)


def _check_finite(x, stage):
    if not np.all(np.isfinite(x)):
        raise NumericalError(stage, "non-finite values")


def _branch_scores(branch, weight, map_fft, shape, n1, n2):
    g = branch.values.shape[-1]
    t = np.einsum("cp,kpij->kcij", weight, branch.values)
    branch.t_fft = _placed_spectrum(t, n1, n2, g)
    sums = sfft.irfft2(np.einsum("kcij,cij->kij", branch.t_fft.conj(), map_fft), s=(n1, n2))
    h, w = shape
    sums = sums[:, :h, :w]
    denom = np.maximum(branch.counts, 1)[:, None, None]
    branch.scores = np.where(branch.valid, sums / denom, SENTINEL)
    return branch.scores


def forward(state, sample, n_rotations=TRAIN_ROTATIONS):
    """Loss and every intermediate needed by :func:`backward`."""
    nmap = embed_map(sample.raster, state.map_embedding)
    _check_finite(nmap.values, "embed_map")
    h, w = nmap.shape
    (pv, pvalid, pcounts), (qv, qvalid, qcounts) = sample.bases(n_rotations)
    g = pv.shape[-1]
    n1, n2 = fft_shape((h, w), g)
    map_fft = sfft.rfft2(nmap.values, s=(n1, n2))
    weight = state.augmented_weight
    pano = _Branch(pv, pvalid, pcounts)
    pin = _Branch(qv, qvalid, qcounts)
    s_pano = np.moveaxis(_branch_scores(pano, weight, map_fft, (h, w), n1, n2), 0, -1)
    s_1 = np.moveaxis(_branch_scores(pin, weight, map_fft, (h, w), n1, n2), 0, -1)
    _check_finite(s_pano, "match (panorama)")
    _check_finite(s_1, "match (pinhole)")
    idx = snap_pose(sample.gt, (h, w), n_rotations)
    fw = fusion_forward(s_pano, s_1, state.fusion, idx)
    fw.cache.update(nmap=nmap, map_fft=map_fft, n=(n1, n2), pano=pano, pin=pin)
    return fw


def fusion_forward(s_pano, s_1, params, idx):
    """Fusion and loss on raw (H, W, K) score volumes; ``idx`` is the target cell."""
    a, b = params.alpha, params.beta
    p = _log_softmax(s_pano)
    u_prior = logsumexp(p, axis=2)
    q = _log_softmax(s_1)
    s1p = (1.0 - a) * q + a * u_prior[:, :, None]
    qp = _log_softmax(s1p)
    t_prior = logsumexp(qp.reshape(-1, qp.shape[2]), axis=0)
    fused = (1.0 - b) * p + b * t_prior[None, None, :]
    _check_finite(fused, "fusion")
    lf = _log_softmax(fused)
    loss = float(-lf[idx])
    cache = dict(p=p, u=u_prior, q=q, qp=qp, t=t_prior, lf=lf)
    return Forward(loss, fused, s_pano, s_1, tuple(idx), cache)


def fusion_backward(fw, params):
    """Gradients of the loss w.r.t. both volumes and the raw fusion weights.

    Returns ``(g_pano, g_1, d_alpha_raw, d_beta_raw)``.
    """
    g_pano, g_s1, d_alpha, d_beta = _pof_backward(fw, params.alpha, params.beta)
    a, b = params.alpha, params.beta
    return g_pano, g_s1, d_alpha * a * (1.0 - a), d_beta * b * (1.0 - b)


def _pof_backward(fw, alpha, beta):
    c = fw.cache
    p, u, q, qp, t, lf = c["p"], c["u"], c["q"], c["qp"], c["t"], c["lf"]
    g_f = np.exp(lf)
    g_f[fw.pose_index] -= 1.0

    g_p = (1.0 - beta) * g_f
    g_t = beta * g_f.sum(axis=(0, 1))
    d_beta = float(np.sum(g_f * (t[None, None, :] - p)))

    g_qp = g_t[None, None, :] * np.exp(qp - t[None, None, :])
    g_s1p = g_qp - np.exp(qp) * g_qp.sum()
    g_q = (1.0 - alpha) * g_s1p
    g_u = alpha * g_s1p.sum(axis=2)
    d_alpha = float(np.sum(g_s1p * (u[:, :, None] - q)))

    g_s1 = g_q - np.exp(q) * g_q.sum()
    g_p = g_p + g_u[:, :, None] * np.exp(p - u[:, :, None])
    g_pano = g_p - np.exp(p) * g_p.sum()
    return g_pano, g_s1, d_alpha, d_beta


def _branch_backward(branch, g_s, map_fft, shape, n):
    """Adjoints of one match: ``(d_map (C, H, W), d_weight (C, P+1))``."""
    n1, n2 = n
    h, w = shape
    g_z = np.where(branch.valid, np.moveaxis(g_s, -1, 0) / np.maximum(branch.counts, 1)[:, None, None], 0.0)
    gz_fft = sfft.rfft2(g_z, s=(n1, n2))
    # map adjoint: convolution of the score gradient with each template
    d_map = sfft.irfft2(np.einsum("kij,kcij->cij", gz_fft, branch.t_fft), s=(n1, n2))[:, :h, :w]
    # template adjoint: correlation of the map with the score gradient
    d_t = sfft.irfft2(gz_fft.conj()[:, None] * map_fft[None], s=(n1, n2))
    g = branch.values.shape[-1]
    d_t = np.roll(d_t, (g // 2, g // 2), axis=(-2, -1))[..., :g, :g]
    d_weight = np.einsum("kcij,kpij->cp", d_t, branch.values)
    return d_map, d_weight


def backward(state, sample, n_rotations=TRAIN_ROTATIONS, fw=None):
    """Exact gradients of :func:`nll_loss` for every parameter block.

    Returns ``(loss, grads)`` with ``grads`` keyed like
    :meth:`TrainableState.parameters`; the raw fusion entries are
    derivatives with respect to the unsquashed parameters.
    """
    fw = fw or forward(state, sample, n_rotations)
    c = fw.cache
    alpha, beta = state.fusion.alpha, state.fusion.beta
    g_pano, g_s1, d_alpha, d_beta = _pof_backward(fw, alpha, beta)
    _check_finite(g_pano, "fusion backward")

    shape = c["nmap"].shape
    dm_a, dw_a = _branch_backward(c["pano"], g_pano, c["map_fft"], shape, c["n"])
    dm_b, dw_b = _branch_backward(c["pin"], g_s1, c["map_fft"], shape, c["n"])
    d_map = dm_a + dm_b
    d_weight = dw_a + dw_b
    _check_finite(d_map, "match backward")

    grads = {}
    classes = sample.raster.classes
    for ch, name in enumerate(MAP_BLOCKS):
        n_cls = state.map_embedding.vectors[ch].shape[0]
        flat = classes[ch].ravel()
        gtab = np.stack([np.bincount(flat, weights=d_map[j].ravel(), minlength=n_cls) for j in range(d_map.shape[0])], 1)
        gtab[0] = 0.0  # background is pinned to zero
        grads[name] = gtab
    grads["pixel_weight"] = d_weight[:, :-1]
    grads["pixel_bias"] = d_weight[:, -1]
    grads["alpha_raw"] = np.array([d_alpha * alpha * (1.0 - alpha)])
    grads["beta_raw"] = np.array([d_beta * beta * (1.0 - beta)])
    return fw.loss, grads


# -- finite-difference check -----------------------------------------------


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    worst_block: str
    worst_index: tuple
    per_block: dict
    n_checked: int


def relative_error(analytic, numeric, floor=1e-6):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(state, sample, epsilon=1e-4, n_rotations=TRAIN_ROTATIONS, floor=1e-6, blocks=None):
    """Central differences for every free parameter against :func:`backward`."""
    if not 1e-6 <= epsilon <= 1e-3:
        raise InputError("epsilon must lie in [1e-6, 1e-3]")
    _, grads = backward(state, sample, n_rotations)
    params = state.parameters()
    worst = (-1.0, None, None)
    per_block = {}
    n_checked = 0
    for name in blocks or params:
        arr = params[name]
        block_worst = 0.0
        for idx in np.ndindex(arr.shape):
            if name in MAP_BLOCKS and idx[0] == 0:
                continue
            orig = arr[idx]
            arr[idx] = orig + epsilon
            up = forward(state.with_parameters(params), sample, n_rotations).loss
            arr[idx] = orig - epsilon
            down = forward(state.with_parameters(params), sample, n_rotations).loss
            arr[idx] = orig
            numeric = (up - down) / (2.0 * epsilon)
            err = relative_error(float(grads[name][idx]), numeric, floor)
            n_checked += 1
            block_worst = max(block_worst, err)
            if err > worst[0]:
                worst = (err, name, idx)
        per_block[name] = block_worst
    return GradCheckReport(worst[0], worst[1], worst[2], per_block, n_checked)


# -- optimisation ----------------------------------------------------------


class PlateauSchedule:
    """Multiply the rate by ``factor`` once ``patience`` epochs pass without improvement."""

    def __init__(self, learning_rate, patience, factor, threshold=0.0):
        self.learning_rate = float(learning_rate)
        self.patience = int(patience)
        self.factor = float(factor)
        self.threshold = float(threshold)
        self.best = math.inf
        self.bad_epochs = 0
        self.reductions = []  # epochs at which the rate dropped

    def step(self, loss, epoch=None):
        """Record one epoch's validation loss; returns True if the rate dropped."""
        if loss < self.best - self.threshold:
            self.best = loss
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.learning_rate *= self.factor
            self.bad_epochs = 0
            self.reductions.append(epoch)
            return True
        return False


class _Adam:
    def __init__(self, cfg):
        self.cfg = cfg
        self.m = {}
        self.v = {}
        self.t = 0

    def update(self, params, grads, lr):
        self.t += 1
        cfg = self.cfg
        for name, g in grads.items():
            if not cfg.adaptive:
                params[name] = params[name] - lr * g
                continue
            m = self.m.get(name, 0.0) * cfg.beta1 + (1 - cfg.beta1) * g
            v = self.v.get(name, 0.0) * cfg.beta2 + (1 - cfg.beta2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - cfg.beta1**self.t)
            v_hat = v / (1 - cfg.beta2**self.t)
            params[name] = params[name] - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)


@dataclass
class TrainResult:
    state: TrainableState
    trace: list  # dicts: epoch, train_loss, val_loss, learning_rate
    best_epoch: int
    reductions: list


def mean_loss(state, samples, n_rotations):
    return float(np.mean([forward(state, s, n_rotations).loss for s in samples]))


def train(dataset, cfg=None, seed=0, init=None, validation=None, log=None):
    """Mini-batch first-order training with the plateau schedule.

    Deterministic given ``seed``. Returns the state with the best validation
    loss (the training set when ``validation`` is None).
    """
    dataset = list(dataset)
    if not dataset:
        raise InputError("train needs at least one sample")
    cfg = cfg or TrainConfig()
    validation = list(validation) if validation is not None else dataset
    rng = np.random.default_rng(seed)
    state = init
    if state is None:
        raise InputError("train needs an initial TrainableState")
    k = cfg.rotations_train
    schedule = PlateauSchedule(cfg.learning_rate, cfg.plateau_patience, cfg.plateau_factor)
    opt = _Adam(cfg)
    params = state.parameters()
    frozen = () if cfg.train_fusion else ("alpha_raw", "beta_raw")

    best_loss = mean_loss(state, validation, k)
    best_state, best_epoch = state, 0
    trace = [dict(epoch=0, train_loss=best_loss, val_loss=best_loss, learning_rate=schedule.learning_rate)]
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(dataset))
        losses = []
        for lo in range(0, len(order), cfg.batch_size):
            batch = [dataset[i] for i in order[lo : lo + cfg.batch_size]]
            current = state.with_parameters(params)
            total = {name: np.zeros_like(v) for name, v in params.items()}
            for s in batch:  # fixed order keeps accumulation deterministic
                loss, grads = backward(current, s, k)
                losses.append(loss)
                for name in total:
                    total[name] += grads[name]
            for name in frozen:
                total.pop(name)
            mean = {name: g / len(batch) for name, g in total.items()}
            if schedule.learning_rate > 0:
                opt.update(params, mean, schedule.learning_rate)
            if not all(np.all(np.isfinite(v)) for v in params.values()):
                raise TrainingError(epoch, "parameters diverged")
        state = state.with_parameters(params)
        train_loss = float(np.mean(losses))
        val_loss = mean_loss(state, validation, k)
        if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
            raise TrainingError(epoch, "loss is not finite")
        lr_used = schedule.learning_rate
        schedule.step(val_loss, epoch)
        trace.append(dict(epoch=epoch, train_loss=train_loss, val_loss=val_loss, learning_rate=lr_used))
        if log:
            log(trace[-1])
        if val_loss < best_loss:
            best_loss, best_state, best_epoch = val_loss, state, epoch
    return TrainResult(best_state, trace, best_epoch, list(schedule.reductions))


def write_trace(path, trace):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_loss", "learning_rate"])
        writer.writeheader()
        for row in trace:
            writer.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})
