"""Regional probabilistic SVF registration.

Two ways of producing the per-region velocity posteriors (mean and log
variance at half resolution):

* ``direct`` -- the posterior parameters are optimised per image pair.
* ``amortized`` -- a small 2-d multi-channel encoder-decoder predicts them
  from the region-masked image pair and is trained over a dataset.

``mode="ddir"`` keeps one velocity field per region and assembles the
decoded deformations through the fixed-image labels; ``mode="baseline"``
uses a single field for the whole image.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, backward
from .diffeo import DEFAULT_STEPS, DeformationBundle, integrate_svf
from .errors import ConfigError, EmptyDataset, InvalidPoint, NonFiniteLoss, ShapeError
from .grid import LabelGrid, ScalarGrid, VectorGrid, half_dims, resample_to, warp_labels_nearest
from .losses import LossWeights, combined_regularizer, kl, ncc, soft_dice, total_loss

log = logging.getLogger(__name__)

MODES = ("ddir", "baseline")
REGIMES = ("direct", "amortized")


@dataclass
class RegistrationConfig:
    mode: str = "ddir"
    regime: str = "direct"
    iterations: int = None        # direct: Adam steps; amortized: epochs
    lr: float = None
    weights: LossWeights = field(default_factory=LossWeights)
    steps: int = DEFAULT_STEPS
    seed: int = 0
    deterministic_inference: bool = True
    init_log_var: float = -10.0
    batch_size: int = 2
    base_width: int = 8

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.iterations is None:
            self.iterations = 300 if self.regime == "direct" else 200
        if self.lr is None:
            self.lr = 1e-2 if self.regime == "direct" else 1e-4
        self.validate()

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.steps < 1 or self.batch_size < 1 or self.base_width < 1:
            raise ConfigError("steps, batch_size and base_width must be >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown registration config keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class RegionalSVFParams:
    """Half-resolution posterior mean / log-variance, one pair per field."""

    mu: list
    log_var: list
    steps: int = DEFAULT_STEPS
    seed: int = 0

    def __post_init__(self):
        if len(self.mu) != len(self.log_var) or not self.mu:
            raise ShapeError("need one log_var per mu and at least one field")
        shape = np.shape(self.mu[0])
        for a in list(self.mu) + list(self.log_var):
            if np.shape(a) != shape:
                raise ShapeError("all regional parameters must share a shape")
            if not np.all(np.isfinite(a)):
                raise ValueError("parameters must be finite")

    @classmethod
    def init(cls, n_fields, image_dims, log_var=-10.0, steps=DEFAULT_STEPS, seed=0):
        shape = (len(image_dims),) + half_dims(image_dims)
        return cls(
            [np.zeros(shape) for _ in range(n_fields)],
            [np.full(shape, float(log_var)) for _ in range(n_fields)],
            steps,
            seed,
        )

    @property
    def region_count(self):
        return len(self.mu)

    def arrays(self):
        return list(self.mu) + list(self.log_var)


@dataclass
class RegistrationResult:
    bundle: DeformationBundle
    warped: ScalarGrid
    warped_labels: LabelGrid
    warped_probs: np.ndarray
    loss_trace: list
    components: dict
    params: object = None
    config: RegistrationConfig = None
    report: dict = None
    runtime_s: float = 0.0


# ---------------------------------------------------------------------------
# plain helpers


def split_by_region(img, labels):
    """One copy of ``img`` per region with voxels of other regions set to 0."""
    if img.dims != labels.dims:
        raise ShapeError(f"image dims {img.dims} != label dims {labels.dims}")
    return [
        ScalarGrid(np.where(labels.data == r, img.data, 0.0), img.spacing)
        for r in range(labels.region_count)
    ]


def sample_velocity(params, region, rng, deterministic=False):
    mu = params.mu[region]
    if deterministic:
        return VectorGrid(mu.copy())
    eps = rng.standard_normal(mu.shape)
    return VectorGrid(mu + np.exp(0.5 * params.log_var[region]) * eps)


def _unit_factors(half, full):
    return np.array([n_out / n_in for n_in, n_out in zip(half, full)]).reshape((-1,) + (1,) * len(full))


def decode_field(z, steps=DEFAULT_STEPS, out_dims=None):
    """Integrate a half-resolution velocity and bring the displacement to full resolution.

    The upsampled displacement is rescaled from half-res to full-res voxel
    units (factor 2 per axis for exact doubling).
    """
    out_dims = tuple(2 * n for n in z.dims) if out_dims is None else tuple(out_dims)
    if len(out_dims) != z.ndim:
        raise ShapeError(f"output dims {out_dims} do not match a {z.ndim}-d field")
    u_half = integrate_svf(z, steps)
    up = resample_to(u_half, out_dims)
    return VectorGrid(up.data * _unit_factors(z.dims, out_dims), None)


# ---------------------------------------------------------------------------
# tape pipeline


def _tape_sample(mu, log_var, rng, deterministic):
    if deterministic:
        return mu
    eps = rng.standard_normal(mu.shape)
    return mu + (log_var * 0.5).exp() * eps


def _tape_decode(z, steps, out_dims):
    half = z.shape[1:]
    u = z * (1.0 / 2.0 ** steps)
    for _ in range(steps):
        u = u + ad.warp(u, u)
    up = ad.resample(u, out_dims)
    return up * _unit_factors(half, out_dims)


@dataclass
class _Forward:
    sub_fields: list
    composed: ad.Node
    warped: ad.Node
    warped_probs: ad.Node
    ncc: ad.Node
    dice: ad.Node
    reg: ad.Node
    total: ad.Node

    def components(self):
        return {
            "ncc": float(self.ncc.value),
            "dice": float(self.dice.value),
            "kl": float(self.reg.value),
            "total": float(self.total.value),
        }


def _check_inputs(moving, fixed, labels_m, labels_f):
    dims = moving.dims
    for name, g in (("fixed", fixed), ("labels_m", labels_m), ("labels_f", labels_f)):
        if g.dims != dims:
            raise ShapeError(f"{name} dims {g.dims} != moving dims {dims}")
    if labels_m.region_count != labels_f.region_count:
        raise ShapeError("moving and fixed labels disagree on region_count")


def _pipeline(tape, mus, log_vars, moving, fixed, labels_m, labels_f, cfg, rng, deterministic):
    out_dims = moving.dims
    subs = []
    for mu, lv in zip(mus, log_vars):
        z = _tape_sample(mu, lv, rng, deterministic)
        subs.append(_tape_decode(z, cfg.steps, out_dims))
    composed = subs[0] if len(subs) == 1 else ad.select(subs, labels_f.data)
    warped = ad.warp(tape.constant(moving.data[None]), composed)
    probs = ad.warp(tape.constant(labels_m.onehot()), composed)
    ncc_n = ncc(warped, fixed.data[None])
    dice_n = soft_dice(probs, labels_f.onehot(), include=labels_f.present())
    reg = combined_regularizer([kl(mu, lv, cfg.weights.lambda_prior) for mu, lv in zip(mus, log_vars)])
    total = total_loss(ncc_n, dice_n, reg, cfg.weights)
    return _Forward(subs, composed, warped, probs, ncc_n, dice_n, reg, total)


def tape_objective(tape, mus, log_vars, moving, fixed, labels_m, labels_f, cfg, rng=None, deterministic=None):
    """Record the full objective for tape nodes ``mus`` / ``log_vars`` (one pair per field).

    Returns the forward record; ``.total`` is the scalar loss node.  Sampling
    is on whenever ``rng`` is given, unless ``deterministic`` says otherwise.
    """
    if deterministic is None:
        deterministic = rng is None
    return _pipeline(tape, mus, log_vars, moving, fixed, labels_m, labels_f, cfg, rng, deterministic)


def _bundle(fwd, labels_f, spacing):
    subs = [VectorGrid(s.value, spacing) for s in fwd.sub_fields]
    return DeformationBundle(subs, VectorGrid(fwd.composed.value, spacing), labels_f)


def _outputs(fwd, moving, labels_m, labels_f):
    bundle = _bundle(fwd, labels_f, moving.spacing)
    warped = ScalarGrid(fwd.warped.value[0], moving.spacing)
    warped_labels = warp_labels_nearest(labels_m, bundle.composed)
    return bundle, warped, warped_labels, fwd.warped_probs.value


def _forward_direct(params, moving, fixed, labels_m, labels_f, cfg, rng=None):
    _check_inputs(moving, fixed, labels_m, labels_f)
    expected = labels_f.region_count if cfg.mode == "ddir" else 1
    if params.region_count not in (expected, 1):
        raise ShapeError(f"{cfg.mode} expects {expected} regional fields, got {params.region_count}")
    if params.mu[0].shape != (moving.ndim,) + half_dims(moving.dims):
        raise ShapeError(f"parameter shape {params.mu[0].shape} does not match image dims {moving.dims}")
    deterministic = cfg.deterministic_inference or rng is None
    tape = Tape()
    mus = [tape.constant(m) for m in params.mu]
    lvs = [tape.constant(v) for v in params.log_var]
    fwd = _pipeline(tape, mus, lvs, moving, fixed, labels_m, labels_f, cfg, rng, deterministic)
    return (*_outputs(fwd, moving, labels_m, labels_f), fwd.components())


def forward_ddir(source, moving, fixed, labels_m, labels_f, cfg, rng=None):
    """Regional forward pass.

    ``source`` is a :class:`RegionalSVFParams` (direct) or
    :class:`ToyUNetWeights` (amortized).  Returns ``(bundle, warped,
    warped_label_probs, losses)``; losses is a dict with ``ncc``, ``dice``,
    ``kl`` and ``total``.
    """
    if cfg.mode != "ddir":
        cfg = RegistrationConfig.from_dict({**cfg.to_dict(), "mode": "ddir"})
    if isinstance(source, ToyUNetWeights):
        bundle, warped, _, probs, comps = predict_amortized(source, moving, fixed, labels_m, labels_f, cfg, rng)
        return bundle, warped, probs, comps
    bundle, warped, _, probs, comps = _forward_direct(source, moving, fixed, labels_m, labels_f, cfg, rng)
    return bundle, warped, probs, comps


def forward_baseline(source, moving, fixed, labels_m, labels_f, cfg, rng=None):
    """Single-field counterpart of :func:`forward_ddir` (one sub-field, no composition)."""
    if cfg.mode != "baseline":
        cfg = RegistrationConfig.from_dict({**cfg.to_dict(), "mode": "baseline"})
    if isinstance(source, ToyUNetWeights):
        bundle, warped, _, probs, comps = predict_amortized(source, moving, fixed, labels_m, labels_f, cfg, rng)
        return bundle, warped, probs, comps
    if source.region_count != 1:
        raise ShapeError("baseline takes exactly one velocity field")
    bundle, warped, _, probs, comps = _forward_direct(source, moving, fixed, labels_m, labels_f, cfg, rng)
    return bundle, warped, probs, comps


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam; returns ``(new_params, new_state)`` without touching the inputs."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and state must have the same length")
    t = state.t + 1
    new_p, new_m, new_v = [], [], []
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if np.shape(p) != np.shape(g) or np.shape(p) != np.shape(m):
            raise ShapeError(f"parameter {np.shape(p)} / gradient {np.shape(g)} shape mismatch")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        new_p.append(p - lr * (m / c1) / (np.sqrt(v / c2) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t)


# ---------------------------------------------------------------------------
# direct regime


def _finite_or_raise(value, trace):
    if not np.isfinite(value):
        raise NonFiniteLoss(f"non-finite loss after {len(trace)} iterations", trace)


def _training_forward(trace, *args):
    # an overflowing log-variance gives inf samples, which the warp rejects
    # before any loss exists; report it the same way as a non-finite loss
    try:
        return _pipeline(*args, deterministic=False)
    except InvalidPoint as err:
        raise NonFiniteLoss(f"non-finite deformation after {len(trace)} iterations", trace) from err


def register_direct(moving, fixed, labels_m, labels_f, cfg=None, callback=None):
    """Optimise the regional posteriors for one pair with Adam."""
    cfg = cfg or RegistrationConfig()
    _check_inputs(moving, fixed, labels_m, labels_f)
    start = time.perf_counter()
    n_fields = labels_f.region_count if cfg.mode == "ddir" else 1
    params = RegionalSVFParams.init(n_fields, moving.dims, cfg.init_log_var, cfg.steps, cfg.seed)
    arrays = params.arrays()
    state = AdamState.zeros_like(arrays)
    rng = np.random.default_rng(cfg.seed)
    trace, comps = [], []
    for it in range(cfg.iterations):
        tape = Tape()
        leaves = [tape.leaf(a) for a in arrays]
        mus, lvs = leaves[:n_fields], leaves[n_fields:]
        fwd = _training_forward(trace, tape, mus, lvs, moving, fixed, labels_m, labels_f, cfg, rng)
        loss = float(fwd.total.value)
        trace.append(loss)
        comps.append(fwd.components())
        _finite_or_raise(loss, trace)
        grads = backward(tape, fwd.total)
        arrays, state = adam_step(arrays, [grads[n] for n in leaves], state, cfg.lr)
        if callback is not None:
            callback(it, fwd)
    params = RegionalSVFParams(arrays[:n_fields], arrays[n_fields:], cfg.steps, cfg.seed)
    bundle, warped, warped_labels, probs, final = _forward_direct(
        params, moving, fixed, labels_m, labels_f, cfg, None if cfg.deterministic_inference else rng
    )
    return RegistrationResult(
        bundle, warped, warped_labels, probs, trace,
        {"trace": comps, "final": final}, params, cfg, runtime_s=time.perf_counter() - start,
    )


# ---------------------------------------------------------------------------
# amortized regime: toy 2-d multi-channel encoder-decoder


@dataclass
class ToyUNetWeights:
    tensors: dict
    mode: str = "ddir"
    width: int = 8
    region_count: int = 4
    ndim: int = 2

    def names(self):
        return sorted(self.tensors)


# (name, in-channel multiplier of width, out multiplier, stride); "in" -1 means image pair
_ENCODER = [("enc0", -1, 1, 1), ("enc1", 1, 2, 2), ("enc2", 2, 2, 2), ("enc3", 2, 2, 2), ("enc4", 2, 2, 2)]
_DECODER = [("dec3", 4, 2), ("dec2", 4, 2), ("dec1", 4, 1)]


def _he(rng, out_ch, in_ch, k=3):
    return rng.standard_normal((out_ch, in_ch, k, k)) * np.sqrt(2.0 / (in_ch * k * k))


def init_unet(cfg: RegistrationConfig, region_count=4, ndim=2):
    if ndim != 2:
        raise ConfigError("the amortized network is 2-d only")
    rng = np.random.default_rng(cfg.seed)
    w = cfg.base_width
    t = {}
    for ch in range(region_count):
        for name, cin, cout, _ in _ENCODER:
            i = 2 if cin < 0 else cin * w
            t[f"ch{ch}.{name}.w"] = _he(rng, cout * w, i)
            t[f"ch{ch}.{name}.b"] = np.zeros(cout * w)
        for name, cin, cout in _DECODER:
            t[f"ch{ch}.{name}.w"] = _he(rng, cout * w, cin * w)
            t[f"ch{ch}.{name}.b"] = np.zeros(cout * w)
    heads = range(region_count) if cfg.mode == "ddir" else [None]
    for ch in heads:
        prefix = f"ch{ch}.head" if ch is not None else "head"
        fin = w if ch is not None else w * region_count
        t[f"{prefix}.mu.w"] = rng.standard_normal((ndim, fin, 3, 3)) * 1e-3
        t[f"{prefix}.mu.b"] = np.zeros(ndim)
        t[f"{prefix}.logvar.w"] = np.zeros((ndim, fin, 3, 3))
        t[f"{prefix}.logvar.b"] = np.full(ndim, cfg.init_log_var)
    return ToyUNetWeights(t, cfg.mode, w, region_count, ndim)


def _unet_features(p, ch, x):
    skips = []
    h = x
    for name, _, _, stride in _ENCODER:
        h = ad.leaky_relu(ad.conv2d(h, p[f"ch{ch}.{name}.w"], p[f"ch{ch}.{name}.b"], stride=stride))
        skips.append(h)
    for name, skip in zip([n for n, _, _ in _DECODER], skips[-2:-5:-1]):
        up = ad.crop(ad.upsample(h), skip.shape[1:])
        h = ad.leaky_relu(ad.conv2d(ad.concat(up, skip), p[f"ch{ch}.{name}.w"], p[f"ch{ch}.{name}.b"]))
    return h


def _heads(p, prefix, feat):
    mu = ad.conv2d(feat, p[f"{prefix}.mu.w"], p[f"{prefix}.mu.b"])
    lv = ad.conv2d(feat, p[f"{prefix}.logvar.w"], p[f"{prefix}.logvar.b"])
    return mu, lv


def _network(tape, p, weights, moving, fixed, labels_m, labels_f):
    """Per-region posteriors predicted from the masked image pairs."""
    half = half_dims(moving.dims)
    mov = split_by_region(moving, labels_m)
    fix = split_by_region(fixed, labels_f)
    feats = []
    for ch in range(weights.region_count):
        x = tape.constant(np.stack([mov[ch].data, fix[ch].data]))
        f = _unet_features(p, ch, x)
        feats.append(ad.crop(f, half) if f.shape[1:] != half else f)
    if weights.mode == "ddir":
        heads = [_heads(p, f"ch{ch}.head", feats[ch]) for ch in range(weights.region_count)]
    else:
        heads = [_heads(p, "head", ad.concat(*feats))]
    return [h[0] for h in heads], [h[1] for h in heads]


def _check_net_inputs(moving, labels_f, weights):
    if moving.ndim != 2:
        raise ShapeError("the amortized network is 2-d only")
    if labels_f.region_count != weights.region_count:
        raise ShapeError("label region count does not match the network's channel count")


def predict_amortized(weights, moving, fixed, labels_m, labels_f, cfg=None, rng=None):
    """Inference with trained weights; returns ``(bundle, warped, warped_labels, probs, losses)``."""
    cfg = cfg or RegistrationConfig(mode=weights.mode, regime="amortized")
    _check_inputs(moving, fixed, labels_m, labels_f)
    _check_net_inputs(moving, labels_f, weights)
    tape = Tape()
    p = {k: tape.constant(v) for k, v in weights.tensors.items()}
    mus, lvs = _network(tape, p, weights, moving, fixed, labels_m, labels_f)
    deterministic = cfg.deterministic_inference or rng is None
    fwd = _pipeline(tape, mus, lvs, moving, fixed, labels_m, labels_f, cfg, rng, deterministic)
    return (*_outputs(fwd, moving, labels_m, labels_f), fwd.components())


def register_amortized(weights, pair_or_grids, cfg=None):
    moving, fixed, labels_m, labels_f = _unpack(pair_or_grids)
    start = time.perf_counter()
    bundle, warped, warped_labels, probs, comps = predict_amortized(weights, moving, fixed, labels_m, labels_f, cfg)
    return RegistrationResult(bundle, warped, warped_labels, probs, [comps["total"]], {"final": comps},
                              weights, cfg, runtime_s=time.perf_counter() - start)


def _unpack(pair):
    if isinstance(pair, (tuple, list)):
        return tuple(pair)
    return pair.moving, pair.fixed, pair.labels_m, pair.labels_f


def hard_dice(a, b, labels):
    out = []
    for lab in labels:
        sa, sb = a == lab, b == lab
        denom = sa.sum() + sb.sum()
        out.append(1.0 if denom == 0 else 2.0 * (sa & sb).sum() / denom)
    return float(np.mean(out))


def train_amortized(dataset, cfg=None, validation=None, foreground=(0, 1, 2), callback=None, val_every=1):
    """Minibatch Adam training of the multi-channel network.

    Returns ``(weights, history)``; ``history`` has one dict per epoch with
    the mean training loss and, when ``validation`` pairs are given, the
    average hard Dice over ``foreground`` labels before and after warping
    (every ``val_every`` epochs and always after the last one).
    """
    cfg = cfg or RegistrationConfig(regime="amortized")
    pairs = [_unpack(p) for p in dataset]
    if len(pairs) < 1:
        raise EmptyDataset("no training pairs")
    moving0, _, _, labels_f0 = pairs[0]
    for p in pairs:
        _check_inputs(*p)
        if p[0].dims != moving0.dims:
            raise ShapeError("all training pairs must share dims")
    weights = init_unet(cfg, labels_f0.region_count, moving0.ndim)
    names = weights.names()
    arrays = [weights.tensors[k] for k in names]
    state = AdamState.zeros_like(arrays)
    rng = np.random.default_rng(cfg.seed)
    history = []
    val_pre = None
    if validation:
        val_pre = float(np.mean([hard_dice(lm.data, lf.data, foreground) for _, _, lm, lf in map(_unpack, validation)]))
    for epoch in range(cfg.iterations):
        order = rng.permutation(len(pairs))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            tape = Tape()
            leaves = [tape.leaf(a) for a in arrays]
            p = dict(zip(names, leaves))
            totals = []
            for i in batch:
                moving, fixed, labels_m, labels_f = pairs[i]
                mus, lvs = _network(tape, p, weights, moving, fixed, labels_m, labels_f)
                fwd = _training_forward(losses, tape, mus, lvs, moving, fixed, labels_m, labels_f, cfg, rng)
                totals.append(fwd.total)
            loss = ad.mean_of(*totals)
            losses.append(float(loss.value))
            _finite_or_raise(losses[-1], losses)
            grads = backward(tape, loss)
            arrays, state = adam_step(arrays, [grads[n] for n in leaves], state, cfg.lr)
        weights = ToyUNetWeights(dict(zip(names, arrays)), weights.mode, weights.width, weights.region_count, weights.ndim)
        row = {"epoch": epoch, "loss": float(np.mean(losses))}
        if validation and ((epoch + 1) % val_every == 0 or epoch == cfg.iterations - 1):
            post = []
            for pair in validation:
                moving, fixed, labels_m, labels_f = _unpack(pair)
                _, _, warped_labels, _, _ = predict_amortized(weights, moving, fixed, labels_m, labels_f, cfg)
                post.append(hard_dice(warped_labels.data, labels_f.data, foreground))
            row["val_dice_pre"] = val_pre
            row["val_dice_post"] = float(np.mean(post))
        history.append(row)
        log.info("epoch %d %s", epoch, row)
        if callback is not None:
            callback(row)
    return weights, history
