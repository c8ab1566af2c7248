"""Segmentation overlap, surface distance, clinical-index analogues and field diagnostics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .diffeo import interface_jump, interior, jacobian_determinant
from .errors import EmptyRegion, ShapeError
from .grid import warp_labels_nearest
from .phantom import FOREGROUND, LVM, REGION_NAMES

MYOCARDIUM_DENSITY = 1.05  # g/ml


def _data(x):
    # grids carry .data; plain ndarrays also have a .data buffer, so check type first
    return x if isinstance(x, np.ndarray) else np.asarray(getattr(x, "data", x))


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"label shapes differ: {a.shape} vs {b.shape}")


def dice_score(a, b, label, return_flag=False):
    """Hard Dice of one label.  Both empty gives 1.0 (flagged), one empty gives 0.0."""
    a, b = _data(a), _data(b)
    _same_shape(a, b)
    sa, sb = a == label, b == label
    denom = int(sa.sum()) + int(sb.sum())
    both_empty = denom == 0
    value = 1.0 if both_empty else 2.0 * int((sa & sb).sum()) / denom
    return (value, both_empty) if return_flag else value


def _mask(labels, label):
    if label is None:
        return np.isin(labels, FOREGROUND)
    return labels == label


def boundary_points(mask):
    """Voxel indices of mask voxels touching a non-mask face neighbour or the image border."""
    edge = np.zeros_like(mask)
    padded = np.pad(mask, 1, constant_values=False)
    centre = tuple(slice(1, -1) for _ in mask.shape)
    for ax in range(mask.ndim):
        for shift in (-1, 1):
            sl = list(centre)
            sl[ax] = slice(1 + shift, padded.shape[ax] - 1 + shift)
            edge |= ~padded[tuple(sl)]
    return np.argwhere(mask & edge)


def hausdorff_mm(a, b, label=None, spacing=None, percentile=100.0):
    """Symmetric Hausdorff distance between label boundaries, in mm.

    ``label=None`` uses the union of the foreground labels.
    ``percentile < 100`` gives the robust variant (e.g. 95).
    """
    if spacing is None:
        spacing = getattr(a, "spacing", None) or (1.0,) * _data(a).ndim
    a, b = _data(a), _data(b)
    _same_shape(a, b)
    sp = np.asarray(spacing, dtype=np.float64)
    pa = boundary_points(_mask(a, label)) * sp
    pb = boundary_points(_mask(b, label)) * sp
    if not len(pa) or not len(pb):
        raise EmptyRegion(f"label {label} is empty in {'first' if not len(pa) else 'second'} grid")
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    return float(max(np.percentile(d_ab, percentile), np.percentile(d_ba, percentile)))


def region_volume_ml(labels, label, spacing=None):
    """Voxel count times voxel volume.  2-d grids count as a 1 mm thick slab."""
    if spacing is None:
        spacing = labels.spacing
    count = int((_data(labels) == label).sum())
    return count * float(np.prod(spacing)) / 1000.0


def lvm_mass_g(labels, spacing=None, density=MYOCARDIUM_DENSITY):
    return region_volume_ml(labels, LVM, spacing) * density


def folding_count(jac):
    """Interior voxels whose Jacobian determinant is <= 0."""
    det = _data(jac)
    return int((det[interior(det.shape)] <= 0).sum())


@dataclass
class EvalReport:
    dice: dict
    avg_dice: float
    hd_mm: float
    volumes_ml: dict
    lvm_mass_g: float
    folding: dict
    interface_jump: dict
    pre: dict
    post: dict
    reference: dict = field(default_factory=dict)
    delta: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _hd_or_none(a, b, label, spacing, percentile):
    try:
        return hausdorff_mm(a, b, label, spacing, percentile)
    except EmptyRegion:
        return None


def segmentation_metrics(labels, reference, spacing, regions=FOREGROUND, percentile=100.0, density=MYOCARDIUM_DENSITY):
    """Overlap, distance and clinical indices of ``labels`` against ``reference``."""
    names = {r: REGION_NAMES[r] for r in regions}
    dice, empty = {}, []
    for r in regions:
        value, both_empty = dice_score(labels, reference, r, return_flag=True)
        dice[names[r]] = value
        if both_empty:
            empty.append(names[r])
    return {
        "dice": dice,
        "avg_dice": float(np.mean(list(dice.values()))),
        "both_empty": empty,
        "hd_mm": _hd_or_none(labels, reference, None, spacing, percentile),
        "hd_mm_per_region": {names[r]: _hd_or_none(labels, reference, r, spacing, percentile) for r in regions},
        "volumes_ml": {names[r]: region_volume_ml(labels, r, spacing) for r in regions},
        "lvm_mass_g": lvm_mass_g(labels, spacing, density),
    }


def _grids(pair):
    if isinstance(pair, (tuple, list)):
        return tuple(pair)
    return pair.moving, pair.fixed, pair.labels_m, pair.labels_f


def evaluate_registration(result, pair, percentile=100.0, density=MYOCARDIUM_DENSITY):
    """Pre-registration metrics compare moving and fixed labels; post-registration
    metrics compare the nearest-neighbour warped moving labels with the fixed ones.
    The fixed labels provide the reference volumes.
    """
    _, _, labels_m, labels_f = _grids(pair)
    bundle = result.bundle if hasattr(result, "bundle") else result
    composed = bundle.composed
    if composed.dims != labels_f.dims or labels_m.dims != labels_f.dims:
        raise ShapeError("result field and pair grids have different dims")
    spacing = labels_f.spacing
    warped = warp_labels_nearest(labels_m, composed)
    pre = segmentation_metrics(labels_m.data, labels_f.data, spacing, percentile=percentile, density=density)
    post = segmentation_metrics(warped.data, labels_f.data, spacing, percentile=percentile, density=density)
    reference = {
        "volumes_ml": {REGION_NAMES[r]: region_volume_ml(labels_f, r) for r in FOREGROUND},
        "lvm_mass_g": lvm_mass_g(labels_f, density=density),
    }
    folding = {
        "sub_fields": [folding_count(jacobian_determinant(f)) for f in bundle.sub_fields],
        "composed": folding_count(jacobian_determinant(composed)),
    }
    delta = {
        "avg_dice": post["avg_dice"] - pre["avg_dice"],
        "hd_mm": None if pre["hd_mm"] is None or post["hd_mm"] is None else post["hd_mm"] - pre["hd_mm"],
    }
    return EvalReport(
        dice=post["dice"],
        avg_dice=post["avg_dice"],
        hd_mm=post["hd_mm"],
        volumes_ml=post["volumes_ml"],
        lvm_mass_g=post["lvm_mass_g"],
        folding=folding,
        interface_jump=interface_jump(composed, labels_f),
        pre=pre,
        post=post,
        reference=reference,
        delta=delta,
    )


def relative_error(value, reference):
    if reference == 0:
        return 0.0 if value == 0 else float("inf")
    return abs(value - reference) / abs(reference)


__all__ = [
    "EvalReport", "MYOCARDIUM_DENSITY", "boundary_points", "dice_score", "evaluate_registration",
    "folding_count", "hausdorff_mm", "lvm_mass_g", "region_volume_ml", "relative_error",
    "segmentation_metrics",
]
