"""Dense grid containers and multilinear sampling.

Arrays are indexed ``data[i0, i1(, i2)]`` with axis 0 being x.  Vector
fields carry the component axis first, ``data[c, i0, i1(, i2)]``, and
component ``c`` is a displacement along array axis ``c`` in voxel units.
Out-of-domain lookups clamp to the nearest edge voxel.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidPoint, LabelOutOfRange, ShapeError

__all__ = [
    "ScalarGrid",
    "VectorGrid",
    "LabelGrid",
    "identity_coords",
    "sample_array",
    "sample_array_vjp",
    "interpolate_linear",
    "warp",
    "warp_array",
    "resample_to",
    "resample_half",
    "resample_double",
    "half_dims",
    "select_by_label",
    "warp_labels_nearest",
]


def _as_spacing(spacing, ndim):
    if spacing is None:
        return (1.0,) * ndim
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != ndim:
        raise ShapeError(f"spacing has {len(spacing)} entries for a {ndim}-d grid")
    if not all(s > 0 and math.isfinite(s) for s in spacing):
        raise ValueError(f"spacing must be strictly positive, got {spacing}")
    return spacing


@dataclass(frozen=True, eq=False)
class ScalarGrid:
    """One real value per voxel."""

    data: np.ndarray
    spacing: tuple = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim not in (2, 3) or data.size == 0:
            raise ShapeError(f"ScalarGrid needs a non-empty 2-d or 3-d array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("ScalarGrid values must be finite")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _as_spacing(self.spacing, data.ndim))

    @property
    def dims(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim


@dataclass(frozen=True, eq=False)
class VectorGrid:
    """A d-vector per voxel (velocity or displacement, voxel units)."""

    data: np.ndarray
    spacing: tuple = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim not in (3, 4) or data.shape[0] != data.ndim - 1 or data.size == 0:
            raise ShapeError(f"VectorGrid data must have shape (d, *dims) with d == len(dims), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("VectorGrid values must be finite")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _as_spacing(self.spacing, data.ndim - 1))

    @property
    def dims(self):
        return self.data.shape[1:]

    @property
    def ndim(self):
        return self.data.ndim - 1

    @classmethod
    def zeros(cls, dims, spacing=None):
        return cls(np.zeros((len(dims),) + tuple(dims)), spacing)

    def max_norm(self):
        return float(np.sqrt((self.data ** 2).sum(axis=0)).max())


@dataclass(frozen=True, eq=False)
class LabelGrid:
    """Per-voxel region label in ``0..region_count-1``."""

    data: np.ndarray
    spacing: tuple = None
    region_count: int = 4

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim not in (2, 3) or data.size == 0:
            raise ShapeError(f"LabelGrid needs a non-empty 2-d or 3-d array, got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.integer):
            if not np.array_equal(data, np.round(data)):
                raise ValueError("labels must be integers")
        if data.min() < 0 or data.max() >= self.region_count:
            raise LabelOutOfRange(
                f"labels span [{data.min()}, {data.max()}] but region_count is {self.region_count}"
            )
        object.__setattr__(self, "data", data.astype(np.uint8))
        object.__setattr__(self, "spacing", _as_spacing(self.spacing, data.ndim))

    @property
    def dims(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def onehot(self):
        """Float array of shape (R, *dims)."""
        r = np.arange(self.region_count).reshape((-1,) + (1,) * self.ndim)
        return (self.data[None] == r).astype(np.float64)

    def present(self):
        """Boolean per region: does the label occur at least once."""
        counts = np.bincount(self.data.ravel(), minlength=self.region_count)
        return counts > 0


# ---------------------------------------------------------------------------
# sampling kernel shared by the plain functions and the autodiff tape


def identity_coords(dims):
    return np.indices(tuple(dims), dtype=np.float64)


class _Stencil:
    """Corner indices and fractional offsets for a batch of sample points."""

    __slots__ = ("dims", "flat", "frac", "inside")

    def __init__(self, dims, coords):
        coords = np.asarray(coords, dtype=np.float64)
        if coords.shape[0] != len(dims):
            raise ShapeError(f"{coords.shape[0]}-d coordinates for a {len(dims)}-d grid")
        if not np.all(np.isfinite(coords)):
            raise InvalidPoint("sample coordinates must be finite")
        self.dims = tuple(dims)
        lo, hi, frac, inside = [], [], [], []
        for k, n in enumerate(self.dims):
            p = np.clip(coords[k], 0.0, n - 1.0)
            i0 = np.floor(p)
            frac.append(p - i0)
            i0 = i0.astype(np.intp)
            lo.append(i0)
            hi.append(np.minimum(i0 + 1, n - 1))
            # clamped coordinates have zero slope; p == n-1 has i0 == i1 already
            inside.append(coords[k] >= 0.0)
        self.frac = frac
        self.inside = inside
        self.flat = {}
        for bits in itertools.product((0, 1), repeat=len(self.dims)):
            idx = 0
            for k, b in enumerate(bits):
                idx = idx * self.dims[k] + (hi[k] if b else lo[k])
            self.flat[bits] = idx

    def gather(self, img):
        flat_img = img.reshape(img.shape[0], -1)
        return {bits: flat_img[:, idx] for bits, idx in self.flat.items()}

    def reduce(self, corners, diff_axis=None):
        vals = corners
        for k in range(len(self.dims)):
            f = self.frac[k]
            nxt = {}
            for bits in vals:
                if bits[0] == 1:
                    continue
                rest = bits[1:]
                a = vals[bits]
                b = vals[(1,) + rest]
                nxt[rest] = (b - a) if k == diff_axis else a + f * (b - a)
            vals = nxt
        return vals[()]

    def weights(self):
        out = {}
        for bits in self.flat:
            w = 1.0
            for k, b in enumerate(bits):
                w = w * (self.frac[k] if b else 1.0 - self.frac[k])
            out[bits] = w
        return out


def sample_array(img, coords, stencil=None):
    """Multilinear lookup of ``img`` (C, *dims) at ``coords`` (d, *out) -> (C, *out)."""
    st = stencil if stencil is not None else _Stencil(img.shape[1:], coords)
    return st.reduce(st.gather(img))


def sample_array_vjp(img, coords, grad_out, need_img=True, need_coords=True, stencil=None):
    """Vector-Jacobian products of :func:`sample_array`.

    Returns ``(grad_img, grad_coords)``; either may be ``None`` when not
    requested.  The coordinate derivative uses the right-limit slope at
    integer positions and is zero wherever the lookup is clamped.
    """
    st = stencil if stencil is not None else _Stencil(img.shape[1:], coords)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    grad_img = grad_coords = None
    if need_img:
        c = img.shape[0]
        n = int(np.prod(img.shape[1:]))
        grad_img = np.zeros((c, n))
        weights = st.weights()
        g = grad_out.reshape(c, -1)
        for bits, idx in st.flat.items():
            w = np.broadcast_to(weights[bits], grad_out.shape[1:]).ravel()
            idx = idx.ravel()
            for ch in range(c):
                grad_img[ch] += np.bincount(idx, weights=w * g[ch], minlength=n)
        grad_img = grad_img.reshape(img.shape)
    if need_coords:
        corners = st.gather(img)
        grad_coords = np.empty((len(st.dims),) + grad_out.shape[1:])
        for k in range(len(st.dims)):
            slope = st.reduce(corners, diff_axis=k)
            grad_coords[k] = (slope * grad_out).sum(axis=0) * st.inside[k]
    return grad_img, grad_coords


# ---------------------------------------------------------------------------
# grid-level operations


def _channels(g):
    if isinstance(g, ScalarGrid):
        return g.data[None], True
    if isinstance(g, VectorGrid):
        return g.data, False
    raise TypeError(f"expected ScalarGrid or VectorGrid, got {type(g).__name__}")


def _rewrap(like, arr, squeeze):
    return type(like)(arr[0] if squeeze else arr, like.spacing)


def interpolate_linear(g, p):
    """Value of ``g`` at the real voxel coordinate ``p`` (clamp-to-edge)."""
    arr, squeeze = _channels(g)
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    if p.shape[0] != g.ndim:
        raise ShapeError(f"point has {p.shape[0]} coordinates, grid is {g.ndim}-d")
    out = sample_array(arr, p.reshape(-1, 1))[:, 0]
    return float(out[0]) if squeeze else out


def warp_array(img, disp):
    """``out(x) = img(x + disp(x))`` for channel-first arrays."""
    if img.shape[1:] != disp.shape[1:]:
        raise ShapeError(f"image dims {img.shape[1:]} != displacement dims {disp.shape[1:]}")
    return sample_array(img, identity_coords(disp.shape[1:]) + disp)


def warp(img, u):
    """Resample ``img`` at ``x + u(x)``; vector images are warped componentwise."""
    if not isinstance(u, VectorGrid):
        raise TypeError("displacement must be a VectorGrid")
    arr, squeeze = _channels(img)
    if img.dims != u.dims:
        raise ShapeError(f"image dims {img.dims} != displacement dims {u.dims}")
    return _rewrap(img, warp_array(arr, u.data), squeeze)


def resample_coords(in_dims, out_dims):
    """Align-corners mapping: output voxel i -> input i*(n_in-1)/(n_out-1)."""
    axes = []
    for n_in, n_out in zip(in_dims, out_dims):
        if n_out == 1:
            axes.append(np.zeros(1))
        else:
            axes.append(np.arange(n_out) * ((n_in - 1) / (n_out - 1)))
    return np.stack(np.meshgrid(*axes, indexing="ij"))


def half_dims(dims):
    return tuple(-(-n // 2) for n in dims)


def resample_to(g, out_dims):
    arr, squeeze = _channels(g)
    out_dims = tuple(int(n) for n in out_dims)
    if len(out_dims) != g.ndim or min(out_dims) < 1:
        raise ShapeError(f"bad output dims {out_dims} for a {g.ndim}-d grid")
    out = sample_array(arr, resample_coords(g.dims, out_dims))
    # spacing follows the physical extent under the align-corners mapping
    spacing = tuple(
        s * (n_in - 1) / (n_out - 1) if n_out > 1 else s
        for s, n_in, n_out in zip(g.spacing, g.dims, out_dims)
    )
    return type(g)(out[0] if squeeze else out, spacing)


def _check_resizable(g):
    if min(g.dims) < 2:
        raise ShapeError(f"resampling needs at least 2 voxels per axis, got {g.dims}")


def resample_half(g):
    _check_resizable(g)
    return resample_to(g, half_dims(g.dims))


def resample_double(g):
    _check_resizable(g)
    return resample_to(g, tuple(2 * n for n in g.dims))


def select_by_label(fields, labels):
    """Per-voxel pick ``fields[labels[x]][:, x]``; returns ``(out, masks)``.

    ``fields`` are channel-first arrays sharing a shape whose spatial part
    equals ``labels.shape``.
    """
    labels = np.asarray(labels)
    if not fields:
        raise ShapeError("no fields to select from")
    if any(f.shape != fields[0].shape for f in fields):
        raise ShapeError("all fields must share a shape")
    if fields[0].shape[1:] != labels.shape:
        raise ShapeError(f"field dims {fields[0].shape[1:]} != label dims {labels.shape}")
    if labels.size and int(labels.max()) >= len(fields):
        raise LabelOutOfRange(f"label {int(labels.max())} but only {len(fields)} fields")
    out = np.zeros_like(fields[0])
    masks = []
    for r, f in enumerate(fields):
        m = labels == r
        np.copyto(out, f, where=m[None])
        masks.append(m)
    return out, masks


def warp_labels_nearest(labels, u):
    """Hard-label warp: ``labels(round(x + u(x)))`` with clamp-to-edge."""
    if labels.dims != u.dims:
        raise ShapeError(f"label dims {labels.dims} != displacement dims {u.dims}")
    coords = identity_coords(u.dims) + u.data
    idx = tuple(
        np.clip(np.floor(coords[k] + 0.5), 0, n - 1).astype(np.intp) for k, n in enumerate(u.dims)
    )
    return LabelGrid(labels.data[idx], labels.spacing, labels.region_count)
