import json

import numpy as np
import pytest

from ddir.grid import LabelGrid, ScalarGrid, VectorGrid
from ddir.gridfile import read_array, read_grid, read_header, write_array, write_grid


def test_layout_is_x_fastest_channel_slowest(tmp_path):
    data = np.arange(6, dtype=float).reshape(2, 3)  # data[x, y]
    write_grid(tmp_path / "g", ScalarGrid(data, spacing=(1.5, 2.0)))
    header = json.loads((tmp_path / "g.json").read_text())
    assert header == {"dims": [2, 3], "spacing": [1.5, 2.0], "channels": 1, "dtype": "f32"}
    raw = np.frombuffer((tmp_path / "g.raw").read_bytes(), dtype="<f4")
    # x varies fastest
    assert raw.tolist() == [data[0, 0], data[1, 0], data[0, 1], data[1, 1], data[0, 2], data[1, 2]]


def test_vector_planar_channels(tmp_path):
    v = np.stack([np.zeros((2, 2)), np.ones((2, 2))])
    write_grid(tmp_path / "v", VectorGrid(v))
    raw = np.frombuffer((tmp_path / "v.raw").read_bytes(), dtype="<f4")
    assert raw.tolist() == [0, 0, 0, 0, 1, 1, 1, 1]
    assert read_header(tmp_path / "v")["channels"] == 2


@pytest.mark.parametrize("ndim", [2, 3])
def test_roundtrip(tmp_path, ndim):
    rng = np.random.default_rng(ndim)
    dims = (5, 4, 3)[:ndim]
    s = ScalarGrid(rng.normal(size=dims).astype(np.float32).astype(float))
    v = VectorGrid(rng.normal(size=(ndim,) + dims).astype(np.float32).astype(float))
    lab = LabelGrid(rng.integers(0, 4, size=dims))
    for name, g in (("s", s), ("v", v), ("l", lab)):
        write_grid(tmp_path / name, g)
        back = read_grid(tmp_path / f"{name}.json")
        assert type(back) is type(g)
        assert np.array_equal(back.data, g.data)
        assert back.spacing == g.spacing


def test_size_mismatch_rejected(tmp_path):
    write_grid(tmp_path / "g", ScalarGrid(np.zeros((3, 3))))
    (tmp_path / "g.raw").write_bytes(b"\0" * 8)
    with pytest.raises(ValueError):
        read_grid(tmp_path / "g")


def test_tensor_roundtrip(tmp_path):
    w = np.random.default_rng(0).normal(size=(4, 2, 3, 3)).astype(np.float32).astype(float)
    write_array(tmp_path / "w", w, role="weight")
    assert read_header(tmp_path / "w")["tensor"] is True
    assert np.array_equal(read_array(tmp_path / "w"), w)
