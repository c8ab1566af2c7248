import numpy as np
import pytest

from ddir.diffeo import interface_jump, jacobian_determinant
from ddir.errors import ConfigError
from ddir.evaluation import dice_score
from ddir.grid import warp, warp_labels_nearest
from ddir.phantom import (
    BACKGROUND,
    FOREGROUND,
    PhantomConfig,
    derived_seed,
    generate_phantom,
    phantom_dataset,
)


def avg_fg_dice(pair):
    return np.mean([dice_score(pair.labels_m, pair.labels_f, r) for r in FOREGROUND])


def test_zero_amplitude_gives_identical_pair():
    pair = generate_phantom(PhantomConfig(amplitude=0, contraction=0, noise=0))
    assert np.array_equal(pair.moving.data, pair.fixed.data)
    assert np.array_equal(pair.labels_m.data, pair.labels_f.data)


def test_same_seed_is_bit_identical():
    a, b = generate_phantom(PhantomConfig(seed=5)), generate_phantom(PhantomConfig(seed=5))
    assert np.array_equal(a.fixed.data, b.fixed.data)
    assert np.array_equal(a.gt.composed.data, b.gt.composed.data)
    c = generate_phantom(PhantomConfig(seed=6))
    assert not np.array_equal(a.fixed.data, c.fixed.data)


def test_construction_invariants():
    pair = generate_phantom(PhantomConfig(noise=0, seed=2))
    assert np.array_equal(pair.fixed.data, warp(pair.moving, pair.gt.composed).data)
    assert np.array_equal(pair.labels_f.data, warp_labels_nearest(pair.labels_m, pair.gt.composed).data)
    noisy = generate_phantom(PhantomConfig(noise=0.01, seed=2))
    resid = noisy.fixed.data - pair.fixed.data
    assert 0.005 < resid.std() < 0.015
    assert np.array_equal(noisy.moving.data, pair.moving.data)


def test_intensities_and_partition():
    cfg = PhantomConfig(seed=0)
    pair = generate_phantom(cfg)
    assert set(np.unique(pair.labels_m.data)) == {0, 1, 2, 3}
    for r, name in enumerate(("LVBP", "LVM", "RV", "background")):
        assert np.all(pair.moving.data[pair.labels_m.data == r] == cfg.intensities[name])
    assert pair.moving.spacing == (1.5, 1.5)


def test_default_pre_registration_dice_in_band():
    for seed in range(10):
        d = avg_fg_dice(generate_phantom(PhantomConfig(seed=seed)))
        assert 0.4 <= d <= 0.8, (seed, d)


def test_ground_truth_fields_diffeomorphic_and_discontinuous():
    for seed in range(5):
        pair = generate_phantom(PhantomConfig(seed=seed))
        for f in pair.gt.sub_fields:
            assert jacobian_determinant(f).data.min() > 0
        assert interface_jump(pair.gt.composed, pair.labels_m)["max_jump"] > 0


def test_label_histogram_stable_across_seeds():
    counts = np.array([np.bincount(generate_phantom(PhantomConfig(seed=s)).labels_f.data.ravel(), minlength=4)
                       for s in range(10)])
    mean = counts.mean(axis=0)
    assert np.all(np.abs(counts - mean) <= 0.2 * mean)


def test_three_dimensional_phantom():
    cfg = PhantomConfig(dims=(24, 24, 6), amplitude=1.0, contraction=1.0, smoothing=3, border=1)
    pair = generate_phantom(cfg)
    assert pair.fixed.dims == (24, 24, 6)
    assert pair.fixed.spacing == (1.5, 1.5, 3.15)
    assert len(pair.gt.sub_fields) == 4 and pair.gt.composed.ndim == 3


@pytest.mark.parametrize("bad", [
    {"lvbp_radius": 0.3, "lvm_radius": 0.2},
    {"amplitude": -1.0},
    {"noise": -0.1},
    {"amplitude": 8.0, "contraction": 8.0},
    {"dims": (64,)},
    {"rv_radius": 0.1, "rv_offset": 0.0},
])
def test_invalid_config(bad):
    with pytest.raises(ConfigError):
        PhantomConfig(**bad)


def test_config_roundtrip_and_presets():
    cfg = PhantomConfig.preset("toy32", seed=3)
    assert cfg.dims == (32, 32)
    assert PhantomConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        PhantomConfig.from_dict({"radius": 1})
    with pytest.raises(ConfigError):
        PhantomConfig.preset("huge")


def test_dataset_seeds():
    base = PhantomConfig(seed=11)
    one = phantom_dataset(1, base)
    ref = generate_phantom(PhantomConfig(seed=derived_seed(11, 0)))
    assert np.array_equal(one[0].fixed.data, ref.fixed.data)
    pairs = phantom_dataset(4, base)
    fixed = [p.fixed.data for p in pairs]
    for i in range(4):
        for j in range(i + 1, 4):
            assert not np.array_equal(fixed[i], fixed[j])
    again = phantom_dataset(4, base)
    assert all(np.array_equal(a.fixed.data, b.fixed.data) for a, b in zip(pairs, again))
    with pytest.raises(ConfigError):
        phantom_dataset(0, base)


def test_background_is_largest_region():
    pair = generate_phantom(PhantomConfig())
    counts = np.bincount(pair.labels_m.data.ravel(), minlength=4)
    assert counts.argmax() == BACKGROUND
