"""Registration objective: global NCC, soft Dice, graph-Laplacian KL.

Each kernel has a plain numpy entry point (``ncc_loss`` etc.) and a tape
version (``ncc``, ``soft_dice``, ``kl``) that records the same forward
computation together with its analytic vector-Jacobian product.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff
from .errors import EmptyInput, NonPositivePrior, ShapeError, ZeroVariance

DICE_EPS = 1e-5


@dataclass
class LossWeights:
    lambda0: float = 20.0      # NCC
    lambda1: float = 200.0     # soft Dice
    lambda2: float = 0.1       # KL
    lambda_prior: float = 10.0  # precision scale of the Laplacian prior

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not v >= 0:
                raise ValueError(f"{name} must be >= 0, got {v}")

    def scaled(self, factor):
        return LossWeights(self.lambda0 * factor, self.lambda1 * factor, self.lambda2 * factor, self.lambda_prior)


def _arr(x):
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


# ---------------------------------------------------------------------------
# NCC


def _check_variance(a, which):
    var = a.var()
    if var < 1e-12 * max(float((a * a).mean()), 1e-300):
        raise ZeroVariance(f"{which} has (near) zero variance")


def _ncc_fwd(x, y):
    if x.shape != y.shape:
        raise ShapeError(f"ncc shapes differ: {x.shape} vs {y.shape}")
    if x.size < 2:
        raise ShapeError("ncc needs at least two voxels")
    _check_variance(x, "x")
    _check_variance(y, "y")
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = np.sqrt((xc * xc).sum())
    syy = np.sqrt((yc * yc).sum())
    rho = (xc * yc).sum() / (sxx * syy)
    return np.asarray(1.0 - rho), (xc, yc, sxx, syy, rho)


def _ncc_vjp(ctx, g, needs):
    xc, yc, sxx, syy, rho = ctx
    gx = -g * (yc / syy - rho * xc / sxx) / sxx if needs[0] else None
    gy = -g * (xc / sxx - rho * yc / syy) / syy if needs[1] else None
    return gx, gy


def ncc_loss(x, y):
    """``1 - pearson(x, y)`` over all voxels; range [0, 2]."""
    return float(_ncc_fwd(_arr(x), _arr(y))[0])


def ncc(x, y):
    tape = x.tape if isinstance(x, autodiff.Node) else y.tape
    return tape.record("ncc", x, y)


# ---------------------------------------------------------------------------
# soft Dice


def _dice_fwd(p, q, include=None):
    if p.shape != q.shape:
        raise ShapeError(f"dice shapes differ: {p.shape} vs {q.shape}")
    n_cls = p.shape[0]
    include = np.ones(n_cls, bool) if include is None else np.asarray(include, bool)
    if include.shape != (n_cls,):
        raise ShapeError("include mask must have one entry per class")
    if not include.any():
        raise EmptyInput("no classes to score")
    axes = tuple(range(1, p.ndim))
    inter = (p * q).sum(axis=axes)
    denom = (p * p).sum(axis=axes) + (q * q).sum(axis=axes) + DICE_EPS
    per_class = 1.0 - 2.0 * inter / denom
    loss = per_class[include].mean()
    return np.asarray(loss), (p, q, inter, denom, include)


def _dice_vjp(ctx, g, needs):
    p, q, inter, denom, include = ctx
    shape = (-1,) + (1,) * (p.ndim - 1)
    w = (g * include / include.sum()).reshape(shape)
    inter = inter.reshape(shape)
    denom = denom.reshape(shape)
    gp = -w * (2.0 * q / denom - 4.0 * inter * p / denom ** 2) if needs[0] else None
    gq = -w * (2.0 * p / denom - 4.0 * inter * q / denom ** 2) if needs[1] else None
    return gp, gq


def _stack(probs):
    if isinstance(probs, (list, tuple)):
        return np.stack([_arr(p) for p in probs])
    return _arr(probs)


def soft_dice_loss(warped_probs, target_onehot, include=None):
    """Mean over classes of ``1 - 2*sum(p*q) / (sum(p^2) + sum(q^2) + eps)``."""
    p, q = _stack(warped_probs), _stack(target_onehot)
    return float(_dice_fwd(p, q, include)[0])


def soft_dice(p, q, include=None):
    tape = p.tape if isinstance(p, autodiff.Node) else q.tape
    return tape.record("soft_dice", p, q, include=include)


# ---------------------------------------------------------------------------
# KL against a graph-Laplacian Gaussian prior


def degree(spatial_shape):
    """Neighbour count of every voxel on the 2d/4-connected (3d/6-connected) lattice."""
    deg = np.zeros(spatial_shape)
    for ax, n in enumerate(spatial_shape):
        if n < 2:
            continue
        lo = [slice(None)] * len(spatial_shape)
        hi = [slice(None)] * len(spatial_shape)
        lo[ax] = slice(0, n - 1)
        hi[ax] = slice(1, n)
        deg[tuple(lo)] += 1
        deg[tuple(hi)] += 1
    return deg


def _edge_diffs(mu):
    for ax in range(1, mu.ndim):
        if mu.shape[ax] > 1:
            yield ax, np.diff(mu, axis=ax)


def _kl_fwd(mu, log_var, lambda_prior):
    if mu.shape != log_var.shape:
        raise ShapeError(f"mu {mu.shape} and log_var {log_var.shape} differ")
    if not lambda_prior > 0:
        raise NonPositivePrior(f"lambda_prior must be > 0, got {lambda_prior}")
    n = mu.size
    deg = degree(mu.shape[1:])[None]
    var = np.exp(log_var)
    smooth = sum((d * d).sum() for _, d in _edge_diffs(mu))
    kl = (lambda_prior * (deg * var).sum() + lambda_prior * smooth - log_var.sum()) / (2.0 * n)
    return np.asarray(kl), (mu, var, deg, lambda_prior, n)


def _kl_vjp(ctx, g, needs):
    mu, var, deg, lam, n = ctx
    g_mu = g_lv = None
    if needs[0]:
        lap = np.zeros_like(mu)
        for ax, d in _edge_diffs(mu):
            lo = [slice(None)] * mu.ndim
            hi = [slice(None)] * mu.ndim
            lo[ax] = slice(0, mu.shape[ax] - 1)
            hi[ax] = slice(1, mu.shape[ax])
            lap[tuple(hi)] += d
            lap[tuple(lo)] -= d
        g_mu = g * lam * lap / n
    if needs[1]:
        g_lv = g * (lam * deg * var - 1.0) / (2.0 * n)
    return g_mu, g_lv


def kl_loss(mu, log_var, lambda_prior=10.0):
    """KL (up to a constant) between N(mu, diag(exp(log_var))) and N(0, (lambda_prior*L)^-1).

    ``L`` is the lattice graph Laplacian; component axis first.
    """
    return float(_kl_fwd(_arr(mu), _arr(log_var), float(lambda_prior))[0])


def kl(mu, log_var, lambda_prior=10.0):
    return mu.tape.record("kl", mu, log_var, lambda_prior=float(lambda_prior))


# ---------------------------------------------------------------------------


def combined_regularizer(values):
    values = list(values)
    if not values:
        raise EmptyInput("no regional KL values")
    if isinstance(values[0], autodiff.Node):
        return autodiff.mean_of(*values)
    return float(np.mean(values))


def total_loss(ncc_value, dice_value, l_r, w: LossWeights):
    """Weighted sum ``lambda0*ncc + lambda1*dice + lambda2*l_r`` (nodes or floats)."""
    if isinstance(ncc_value, autodiff.Node):
        return ncc_value * w.lambda0 + dice_value * w.lambda1 + l_r * w.lambda2
    return w.lambda0 * ncc_value + w.lambda1 * dice_value + w.lambda2 * l_r


autodiff.register_primitive("ncc", _ncc_fwd, _ncc_vjp)
autodiff.register_primitive("soft_dice", _dice_fwd, _dice_vjp)
autodiff.register_primitive("kl", _kl_fwd, _kl_vjp)
