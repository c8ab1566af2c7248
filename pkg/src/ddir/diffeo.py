"""Velocity-field exponentiation, composition, Jacobians and regional assembly."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .grid import LabelGrid, ScalarGrid, VectorGrid, select_by_label, warp_array

DEFAULT_STEPS = 7


class LargeVelocityWarning(RuntimeWarning):
    """Velocity exceeds dims/4 voxels; scaling and squaring may lose accuracy."""


@dataclass
class DeformationBundle:
    sub_fields: list
    composed: VectorGrid
    labels: LabelGrid = field(default=None, repr=False)

    @property
    def region_count(self):
        return len(self.sub_fields)


def _check_pair(a, b):
    if a.dims != b.dims:
        raise ShapeError(f"field dims {a.dims} != {b.dims}")


def compose_displacements(u_outer, u_inner):
    """Displacement of ``phi_outer o phi_inner``: ``u_inner(x) + u_outer(x + u_inner(x))``."""
    _check_pair(u_outer, u_inner)
    return VectorGrid(u_inner.data + warp_array(u_outer.data, u_inner.data), u_inner.spacing)


def velocity_bound_exceeded(v):
    limit = np.asarray(v.dims, dtype=np.float64) / 4.0
    peak = np.abs(v.data).reshape(v.ndim, -1).max(axis=1)
    return bool(np.any(peak >= limit))


def integrate_svf(v, steps=DEFAULT_STEPS):
    """Scaling and squaring: ``u = v / 2**steps``, then ``steps`` self-compositions."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if velocity_bound_exceeded(v):
        warnings.warn(f"velocity magnitude exceeds dims/4 on a {v.dims} grid", LargeVelocityWarning, stacklevel=2)
    u = v.data / 2.0 ** steps
    for _ in range(steps):
        u = u + warp_array(u, u)
    return VectorGrid(u, v.spacing)


def jacobian_determinant(u):
    """det(grad(x + u(x))) per voxel in voxel units.

    Central differences inside, one-sided at the borders.
    """
    if min(u.dims) < 3:
        raise ShapeError(f"jacobian needs >= 3 voxels per axis, got {u.dims}")
    d = u.ndim
    jac = np.empty(u.dims + (d, d))
    for c in range(d):
        grads = np.gradient(u.data[c], axis=tuple(range(d)))
        for k in range(d):
            jac[..., c, k] = grads[k] + (1.0 if c == k else 0.0)
    return ScalarGrid(np.linalg.det(jac), u.spacing)


def interior(dims):
    """Boolean mask excluding the outermost voxel layer."""
    mask = np.zeros(dims, bool)
    mask[tuple(slice(1, n - 1) for n in dims)] = True
    return mask


def compose_regional_fields(sub_fields, labels):
    """Discontinuous field taking ``sub_fields[labels(x)]`` at every voxel."""
    if not sub_fields:
        raise ShapeError("no sub-fields")
    for f in sub_fields:
        if f.dims != labels.dims:
            raise ShapeError(f"sub-field dims {f.dims} != label dims {labels.dims}")
    out, _ = select_by_label([f.data for f in sub_fields], labels.data)
    return VectorGrid(out, sub_fields[0].spacing)


def interface_jump(u, labels):
    """Neighbour-difference statistics split by whether the pair crosses a label boundary.

    Returns ``max_jump`` / ``mean_jump`` over cross-label pairs,
    ``intra_region_max_diff`` over same-label pairs and ``no_interface``
    (True when no cross-label pair exists; the cross statistics are then 0).
    """
    if u.dims != labels.dims:
        raise ShapeError(f"field dims {u.dims} != label dims {labels.dims}")
    cross, same = [], []
    for ax in range(u.ndim):
        if u.dims[ax] < 2:
            continue
        jump = np.sqrt((np.diff(u.data, axis=ax + 1) ** 2).sum(axis=0))
        differs = np.diff(labels.data.astype(np.int16), axis=ax) != 0
        cross.append(jump[differs])
        same.append(jump[~differs])
    cross = np.concatenate(cross) if cross else np.empty(0)
    same = np.concatenate(same) if same else np.empty(0)
    return {
        "max_jump": float(cross.max()) if cross.size else 0.0,
        "mean_jump": float(cross.mean()) if cross.size else 0.0,
        "intra_region_max_diff": float(same.max()) if same.size else 0.0,
        "no_interface": not cross.size,
    }
