import csv
import json
import logging
import os
import subprocess
import sys

import numpy as np
import pytest

from ddir.cli import bluewhitered, main
from ddir.gridfile import read_grid, read_header, write_grid
from ddir.grid import ScalarGrid


def run(*argv):
    return main([str(a) for a in argv])


def raw_bytes(d):
    out = {}
    for root, _, files in os.walk(d):
        for f in files:
            if f.endswith(".raw"):
                p = os.path.join(root, f)
                with open(p, "rb") as fh:
                    out[os.path.relpath(p, d)] = fh.read()
    return out


def listing(d):
    return sorted(os.path.relpath(os.path.join(r, f), d) for r, _, fs in os.walk(d) for f in fs)


@pytest.fixture(scope="module")
def toy_pair(tmp_path_factory):
    out = tmp_path_factory.mktemp("ph") / "pairs"
    assert run("phantom", "--preset", "toy32", "--n", 2, "--seed", 3, "--out", out) == 0
    return out


def pair_args(d, moving="moving", fixed="fixed"):
    return ["--moving", d / moving, "--fixed", d / fixed,
            "--moving-labels", d / "moving_labels", "--fixed-labels", d / "fixed_labels"]


def test_phantom_file_contract(toy_pair):
    names = set(listing(toy_pair / "pair_000"))
    for stem in ("moving", "fixed", "moving_labels", "fixed_labels", "gt_composed",
                 "gt_sub_field_0", "gt_sub_field_3"):
        assert {stem + ".json", stem + ".raw"} <= names
    man = json.loads((toy_pair / "manifest.json").read_text())
    assert man["command"] == "phantom" and man["seed"] == 3
    assert man["config"]["dims"] == [32, 32]
    assert not [n for n in os.listdir(toy_pair) if n.startswith(".partial")]


def test_phantom_rerun_is_byte_identical(toy_pair, tmp_path):
    assert run("phantom", "--preset", "toy32", "--n", 2, "--seed", 3, "--out", tmp_path / "again") == 0
    assert raw_bytes(toy_pair) == raw_bytes(tmp_path / "again")
    assert run("replay", "--manifest", toy_pair / "manifest.json", "--out", tmp_path / "replayed") == 0
    assert raw_bytes(toy_pair) == raw_bytes(tmp_path / "replayed")


def test_phantom_invalid_radii(tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"lvbp_radius": 0.3, "lvm_radius": 0.2}))
    out = tmp_path / "out"
    assert run("phantom", "--config", cfg, "--out", out) == 2
    assert not out.exists()
    cfg.write_text("{not json")
    assert run("phantom", "--config", cfg, "--out", out) == 2
    assert not out.exists()


def test_register_writes_all_outputs(toy_pair, tmp_path):
    d = toy_pair / "pair_000"
    out = tmp_path / "reg"
    assert run("register", *pair_args(d), "--iterations", 20, "--out", out) == 0
    names = set(listing(out))
    for stem in ("warped", "warped_labels", "composed", "jacobian", "sub_field_0", "sub_field_3"):
        assert stem + ".json" in names and stem + ".raw" in names
    assert {"loss_trace.csv", "report.json", "manifest.json"} <= names
    assert read_header(out / "composed")["sub_fields"] == 4
    with open(out / "loss_trace.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 20 and all(np.isfinite(float(r["total"])) for r in rows)
    # eval reproduces the report, with and without --pair
    assert run("eval", "--result", out, "--pair", d, "--out", tmp_path / "a.json") == 0
    assert run("eval", "--result", out, "--out", tmp_path / "b.json") == 0
    ref = (out / "report.json").read_bytes()
    assert (tmp_path / "a.json").read_bytes() == ref == (tmp_path / "b.json").read_bytes()


def test_register_identical_pair(toy_pair, tmp_path):
    d = toy_pair / "pair_001"
    out = tmp_path / "same"
    assert run("register", *pair_args(d, fixed="moving"), "--fixed-labels", d / "moving_labels", "--out", out) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["pre"]["avg_dice"] == 1.0
    assert rep["post"]["avg_dice"] >= 0.99


def test_register_baseline_single_field(toy_pair, tmp_path):
    out = tmp_path / "base"
    assert run("register", *pair_args(toy_pair / "pair_000"), "--mode", "baseline", "--iterations", 5, "--out", out) == 0
    assert read_header(out / "composed")["sub_fields"] == 1
    assert (out / "sub_field_0.json").exists() and not (out / "sub_field_1.json").exists()


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_register_error_codes(toy_pair, tmp_path, caplog):
    d = toy_pair / "pair_000"
    missing = tmp_path / "nowhere" / "labels"
    with caplog.at_level(logging.ERROR):
        code = run("register", *pair_args(d), "--fixed-labels", missing, "--out", tmp_path / "r1")
    assert code == 3
    assert str(missing) in caplog.text
    assert not (tmp_path / "r1").exists()
    small = tmp_path / "small"
    write_grid(small, ScalarGrid(np.zeros((16, 16)), (1.5, 1.5)))
    assert run("register", *pair_args(d), "--moving", small, "--out", tmp_path / "r2") == 4
    assert run("register", *pair_args(d), "--lr", 1e6, "--iterations", 30, "--out", tmp_path / "r3") == 5
    assert run("register", *pair_args(d), "--lr", -1, "--out", tmp_path / "r4") == 2
    assert not any((tmp_path / n).exists() for n in ("r2", "r3", "r4"))


def test_train_smoke_and_amortized_register(toy_pair, tmp_path):
    w = tmp_path / "w"
    assert run("train", "--data", toy_pair, "--validation", toy_pair, "--iterations", 1, "--out", w) == 0
    with open(w / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1
    assert all(np.isfinite(float(v)) for k, v in rows[0].items())
    assert json.loads((w / "weights.json").read_text())["mode"] == "ddir"
    out = tmp_path / "amort"
    assert run("register", *pair_args(toy_pair / "pair_000"), "--weights", w, "--out", out) == 0
    assert read_header(out / "composed")["sub_fields"] == 4
    assert run("train", "--data", tmp_path / "empty", "--out", tmp_path / "w2") == 3


def test_view_constant_grid(tmp_path):
    g = tmp_path / "const"
    write_grid(g, ScalarGrid(np.full((7, 5), 2.5)))
    img = tmp_path / "c.pgm"
    assert run("view", "--grid", g, "--out", img) == 0
    data = img.read_bytes()
    assert data.startswith(b"P5\n7 5\n255\n")
    pixels = np.frombuffer(data[len(b"P5\n7 5\n255\n"):], np.uint8)
    assert pixels.size == 35 and np.all(pixels == pixels[0])
    side = json.loads((tmp_path / "c.pgm.json").read_text())
    assert side["min"] == side["max"] == 2.5
    assert run("view", "--grid", g, "--slice", 3, "--out", tmp_path / "bad.pgm") == 4
    assert not (tmp_path / "bad.pgm").exists()


def test_view_jacobian_uses_colormap(toy_pair, tmp_path):
    out = tmp_path / "reg"
    assert run("register", *pair_args(toy_pair / "pair_000"), "--iterations", 3, "--out", out) == 0
    assert run("view", "--grid", out / "jacobian", "--out", tmp_path / "j.ppm") == 0
    assert (tmp_path / "j.ppm").read_bytes().startswith(b"P6\n32 32\n")
    assert run("view", "--grid", out / "composed", "--channel", -1, "--out", tmp_path / "m.ppm") == 0
    assert run("view", "--grid", out / "composed", "--channel", 2, "--out", tmp_path / "x.pgm") == 4
    assert np.allclose(bluewhitered(np.array([0.0, 0.5, 1.0])), [[0, 0, 1], [1, 1, 1], [1, 0, 0]])


def test_threads_env(toy_pair, tmp_path, monkeypatch):
    monkeypatch.setenv("DDIR_THREADS", "1")
    assert run("view", "--grid", toy_pair / "pair_000" / "fixed", "--out", tmp_path / "f.pgm") == 0
    monkeypatch.setenv("DDIR_THREADS", "many")
    assert run("view", "--grid", toy_pair / "pair_000" / "fixed", "--out", tmp_path / "g.pgm") == 2
    assert run("--threads", 0, "view", "--grid", toy_pair / "pair_000" / "fixed", "--out", tmp_path / "h.pgm") == 2


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "ddir.cli", "phantom", "--preset", "toy32", "--out", str(tmp_path / "p")],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert read_grid(tmp_path / "p" / "pair_000" / "fixed").dims == (32, 32)
