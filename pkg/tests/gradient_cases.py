"""Finite-difference cases for every tape primitive.

Each case is ``(kind, f, x0)`` where ``f(tape, x)`` returns a scalar node
that depends on the leaf ``x`` through primitive ``kind``.  Outputs are
contracted with a fixed random weight so every output element matters.
Warp offsets keep a margin from integers (the interpolant has kinks there)
and leaky-relu inputs stay away from 0.
"""

import numpy as np

from ddir import autodiff as ad
from ddir import losses  # noqa: F401  (registers the loss primitives)
from ddir.losses import kl, ncc, soft_dice


def _weighted(tape, out, seed=99):
    w = np.random.default_rng(seed).uniform(-1, 1, out.shape)
    return (out * tape.constant(w)).sum()


def _off_integer(rng, shape, lo=-1.5, hi=1.5):
    base = rng.integers(int(np.floor(lo)), int(np.ceil(hi)), shape)
    return base + rng.uniform(0.05, 0.95, shape)


def cases():
    rng = np.random.default_rng(2024)
    C = rng.normal(size=(3, 4))
    out = []

    def add(kind, f, x0):
        out.append((kind, f, np.asarray(x0, dtype=np.float64)))

    add("add", lambda t, x: _weighted(t, x + C), rng.normal(size=(3, 4)))
    add("add", lambda t, x: _weighted(t, C + x), rng.normal(size=(3, 4)))
    add("sub", lambda t, x: _weighted(t, x - C), rng.normal(size=(3, 4)))
    add("sub", lambda t, x: _weighted(t, C - x), rng.normal(size=(3, 4)))
    add("mul", lambda t, x: _weighted(t, x * t.constant(C)), rng.normal(size=(3, 4)))
    add("mul", lambda t, x: _weighted(t, x * t.constant(C)), rng.normal(size=(1, 4)))  # broadcast
    add("scale", lambda t, x: _weighted(t, x * 2.5), rng.normal(size=(3, 4)))
    add("exp", lambda t, x: _weighted(t, x.exp()), rng.normal(size=(3, 4)))
    add("log", lambda t, x: _weighted(t, x.log()), rng.uniform(0.5, 2.0, (3, 4)))
    sign = rng.choice([-1.0, 1.0], (3, 4))
    add("leaky_relu", lambda t, x: _weighted(t, ad.leaky_relu(x)), sign * rng.uniform(0.1, 1.0, (3, 4)))
    add("sum", lambda t, x: (x * x).sum(), rng.normal(size=(3, 4)))
    add("mean", lambda t, x: (x * x).mean(), rng.normal(size=(3, 4)))
    add("mean_of", lambda t, x: ad.mean_of(_weighted(t, x), t.constant(2.0), (x * x).sum()), rng.normal(size=(3, 4)))
    add("concat", lambda t, x: _weighted(t, ad.concat(x, t.constant(C))), rng.normal(size=(2, 4)))

    labels = rng.integers(0, 3, (5, 6))
    fields = [rng.normal(size=(2, 5, 6)) for _ in range(3)]
    add("select", lambda t, x: _weighted(t, ad.select([t.constant(fields[0]), x, t.constant(fields[2])], labels)),
        rng.normal(size=(2, 5, 6)))

    img = rng.normal(size=(2, 6, 7))
    disp = _off_integer(rng, (2, 6, 7))
    add("warp", lambda t, x: _weighted(t, ad.warp(x, t.constant(disp))), img)          # image argument
    add("warp", lambda t, x: _weighted(t, ad.warp(t.constant(img), x)), disp)          # displacement argument
    img3 = rng.normal(size=(1, 4, 5, 3))
    disp3 = _off_integer(rng, (3, 4, 5, 3), -1.0, 1.0)
    add("warp", lambda t, x: _weighted(t, ad.warp(t.constant(img3), x)), disp3)        # 3-d
    add("resample", lambda t, x: _weighted(t, ad.resample(x, (7, 9))), rng.normal(size=(2, 4, 5)))
    add("resample", lambda t, x: _weighted(t, ad.resample(x, (3, 3))), rng.normal(size=(2, 5, 6)))

    xin = rng.normal(size=(2, 7, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    for stride in (1, 2):
        add("conv2d", lambda t, x, s=stride: _weighted(t, ad.conv2d(x, t.constant(w), t.constant(b), stride=s)), xin)
        add("conv2d", lambda t, x, s=stride: _weighted(t, ad.conv2d(t.constant(xin), x, t.constant(b), stride=s)), w)
        add("conv2d", lambda t, x, s=stride: _weighted(t, ad.conv2d(t.constant(xin), t.constant(w), x, stride=s)), b)
    add("upsample", lambda t, x: _weighted(t, ad.upsample(x)), rng.normal(size=(2, 3, 4)))
    add("crop", lambda t, x: _weighted(t, ad.crop(x, (3, 4))), rng.normal(size=(2, 5, 6)))

    y = rng.normal(size=(1, 6, 6))
    add("ncc", lambda t, x: ncc(x, t.constant(y)), rng.normal(size=(1, 6, 6)))
    add("ncc", lambda t, x: ncc(t.constant(y), x), rng.normal(size=(1, 6, 6)))
    q = rng.uniform(0, 1, (3, 5, 5))
    add("soft_dice", lambda t, x: soft_dice(x, t.constant(q)), rng.uniform(0, 1, (3, 5, 5)))
    add("soft_dice", lambda t, x: soft_dice(t.constant(q), x), rng.uniform(0, 1, (3, 5, 5)))
    add("soft_dice", lambda t, x: soft_dice(x, t.constant(q), include=[True, False, True]),
        rng.uniform(0, 1, (3, 5, 5)))
    lv = rng.uniform(-2, 0, (2, 4, 5))
    mu = rng.normal(size=(2, 4, 5))
    add("kl", lambda t, x: kl(x, t.constant(lv), 3.0), rng.normal(size=(2, 4, 5)))
    add("kl", lambda t, x: kl(t.constant(mu), x, 3.0), rng.uniform(-2, 0, (2, 4, 5)))
    add("kl", lambda t, x: kl(x, t.constant(lv[:, :, :, None].repeat(3, axis=3)), 1.0),
        rng.normal(size=(2, 4, 5, 3)))
    return out
