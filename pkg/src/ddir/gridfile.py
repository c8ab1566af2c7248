"""GridFile on-disk format.

``<name>.json`` holds ``{"dims", "spacing", "channels", "dtype"}`` and
``<name>.raw`` holds little-endian values, x fastest, then y, then z, with
the channel index slowest (planar).  Scalar grids are one f32 channel,
vector grids d f32 channels, label grids one u8 channel.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .grid import LabelGrid, ScalarGrid, VectorGrid

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


def _stem(path):
    path = os.fspath(path)
    for ext in (".json", ".raw"):
        if path.endswith(ext):
            return path[: -len(ext)]
    return path


def write_grid(path, g, extra=None):
    """Write ``g`` as ``<path>.json`` + ``<path>.raw``; returns the stem."""
    stem = _stem(path)
    if isinstance(g, LabelGrid):
        channels, dtype, arr = 1, "u8", g.data[None]
    elif isinstance(g, VectorGrid):
        channels, dtype, arr = g.ndim, "f32", g.data
    elif isinstance(g, ScalarGrid):
        channels, dtype, arr = 1, "f32", g.data[None]
    else:
        raise TypeError(f"cannot serialise {type(g).__name__}")
    header = {
        "dims": list(g.dims),
        "spacing": list(g.spacing),
        "channels": channels,
        "dtype": dtype,
    }
    if isinstance(g, LabelGrid):
        header["region_count"] = g.region_count
    if extra:
        header.update(extra)
    # x-fastest per channel == Fortran order of the spatial block
    payload = b"".join(
        np.asarray(arr[c], dtype=_DTYPES[dtype]).ravel(order="F").tobytes() for c in range(channels)
    )
    with open(stem + ".json", "w") as fh:
        json.dump(header, fh, indent=1)
    with open(stem + ".raw", "wb") as fh:
        fh.write(payload)
    return stem


def read_header(path):
    with open(_stem(path) + ".json") as fh:
        return json.load(fh)


def read_grid(path, kind=None):
    """Load a GridFile.

    ``kind`` may be ``"scalar"``, ``"vector"`` or ``"label"``; by default it
    is inferred from dtype and channel count.
    """
    stem = _stem(path)
    header = read_header(stem)
    dims = tuple(int(n) for n in header["dims"])
    channels = int(header["channels"])
    dtype = _DTYPES[header["dtype"]]
    raw = np.fromfile(stem + ".raw", dtype=dtype)
    n = int(np.prod(dims))
    if raw.size != channels * n:
        raise ValueError(f"{stem}.raw holds {raw.size} values, header implies {channels * n}")
    arr = np.stack([raw[c * n:(c + 1) * n].reshape(dims, order="F") for c in range(channels)])
    if kind is None:
        if header["dtype"] == "u8":
            kind = "label"
        elif channels == len(dims) and channels > 1:
            kind = "vector"
        else:
            kind = "scalar"
    spacing = header.get("spacing")
    if kind == "label":
        return LabelGrid(arr[0], spacing, region_count=int(header.get("region_count", 4)))
    if kind == "vector":
        return VectorGrid(arr.astype(np.float64), spacing)
    if kind == "scalar":
        if channels != 1:
            raise ValueError(f"{stem}: scalar grid with {channels} channels")
        return ScalarGrid(arr[0].astype(np.float64), spacing)
    raise ValueError(f"unknown grid kind {kind!r}")


def write_array(path, arr, spacing=None, role=None):
    """Store a raw parameter tensor (any rank) as a single-channel f32 GridFile.

    Network kernels are not grids, so their shape is recorded verbatim.
    """
    arr = np.asarray(arr, dtype=np.float64)
    stem = _stem(path)
    header = {"dims": list(arr.shape) if arr.ndim else [1], "spacing": spacing or [1.0] * max(arr.ndim, 1),
              "channels": 1, "dtype": "f32", "tensor": True}
    if role:
        header["role"] = role
    with open(stem + ".json", "w") as fh:
        json.dump(header, fh, indent=1)
    with open(stem + ".raw", "wb") as fh:
        fh.write(np.asarray(arr, dtype="<f4").ravel(order="F").tobytes())
    return stem


def read_array(path):
    stem = _stem(path)
    header = read_header(stem)
    dims = tuple(int(n) for n in header["dims"])
    raw = np.fromfile(stem + ".raw", dtype="<f4")
    return raw.reshape(dims, order="F").astype(np.float64)
