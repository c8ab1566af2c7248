"""Synthetic short-axis cardiac phantoms with known regional deformations.

The moving image is a piecewise-constant cartoon of a short-axis slice:
blood-pool disk, myocardial annulus, right-ventricle crescent and
background.  Each region gets its own smooth random velocity field; the
fields are integrated, assembled through the moving-space labels and used
to resample the moving image into the fixed image.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.ndimage import uniform_filter

from .diffeo import DeformationBundle, compose_regional_fields, integrate_svf
from .errors import ConfigError
from .grid import LabelGrid, ScalarGrid, VectorGrid, identity_coords, warp, warp_labels_nearest

LVBP, LVM, RV, BACKGROUND = 0, 1, 2, 3
REGION_NAMES = ("LVBP", "LVM", "RV", "background")
FOREGROUND = (LVBP, LVM, RV)

# named parameter sets; "toy32" scales the deformation to the 32x32 training grids
PRESETS = {
    "default": {},
    "toy32": {"dims": (32, 32), "amplitude": 1.5, "contraction": 1.5, "smoothing": 5, "center_jitter": 1.0},
}


@dataclass
class PhantomConfig:
    dims: tuple = (64, 64)
    spacing: tuple = None
    # radii and offsets are fractions of the smaller in-plane size
    lvbp_radius: float = 0.13
    lvm_radius: float = 0.24
    rv_radius: float = 0.30
    rv_offset: float = 0.08       # distance of the RV disk centre from the LV centre
    intensities: dict = field(
        default_factory=lambda: {"background": 0.2, "RV": 0.6, "LVM": 0.5, "LVBP": 0.9}
    )
    amplitude: float = 3.0        # max random velocity per region, voxels
    contraction: float = 3.0      # radial component on LVBP/LVM at the LVM rim, voxels
    smoothing: int = 9            # box width; three passes approximate a Gaussian
    border: int = 2               # velocity forced to zero this close to the border
    noise: float = 0.01
    center_jitter: float = 0.0    # random shift of the heart centre, voxels
    steps: int = 7
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(n) for n in self.dims)
        if self.spacing is None:
            self.spacing = (1.5, 1.5, 3.15)[: len(self.dims)]
        self.spacing = tuple(float(s) for s in self.spacing)
        self.validate()

    def validate(self):
        if len(self.dims) not in (2, 3) or min(self.dims) < 4:
            raise ConfigError(f"dims must be 2-d or 3-d with >= 4 voxels per axis, got {self.dims}")
        if len(self.spacing) != len(self.dims) or min(self.spacing) <= 0:
            raise ConfigError(f"spacing {self.spacing} does not match dims {self.dims}")
        if not 0 < self.lvbp_radius < self.lvm_radius:
            raise ConfigError("radii must satisfy 0 < lvbp_radius < lvm_radius")
        if not self.rv_radius + self.rv_offset > self.lvm_radius:
            raise ConfigError("RV disk must reach beyond the myocardium (rv_radius + rv_offset > lvm_radius)")
        if self.amplitude < 0 or self.contraction < 0 or self.noise < 0 or self.center_jitter < 0:
            raise ConfigError("amplitude, contraction, noise and center_jitter must be >= 0")
        if self.smoothing < 1 or self.steps < 1 or self.border < 0:
            raise ConfigError("smoothing and steps must be >= 1, border >= 0")
        if self.amplitude + self.contraction > self.max_amplitude():
            raise ConfigError(
                f"amplitude + contraction = {self.amplitude + self.contraction} exceeds "
                f"{self.max_amplitude():.2f} voxels for smoothing {self.smoothing}"
            )
        missing = set(REGION_NAMES) - set(self.intensities)
        if missing:
            raise ConfigError(f"missing intensities for {sorted(missing)}")

    def max_amplitude(self):
        # keeps per-region velocity gradients well below 1 so the flows stay diffeomorphic
        return float(self.smoothing)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def preset(cls, name, **overrides):
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(**{**PRESETS[name], **overrides})

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown phantom config keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class PhantomPair:
    moving: ScalarGrid
    fixed: ScalarGrid
    labels_m: LabelGrid
    labels_f: LabelGrid
    gt: DeformationBundle
    seed: int = 0


def heart_center(cfg, rng=None):
    c = np.array([0.55 * cfg.dims[0], 0.5 * cfg.dims[1]])
    if rng is not None and cfg.center_jitter > 0:
        c = c + rng.uniform(-cfg.center_jitter, cfg.center_jitter, 2)
    return c


def phantom_labels(cfg, center=None):
    """Label map of the undeformed anatomy (extruded along z in 3-d)."""
    size = min(cfg.dims[:2])
    c = heart_center(cfg) if center is None else np.asarray(center)
    x = identity_coords(cfg.dims)
    r_lv = np.hypot(x[0] - c[0], x[1] - c[1])
    rv_c = c - np.array([cfg.rv_offset * size, 0.0])
    r_rv = np.hypot(x[0] - rv_c[0], x[1] - rv_c[1])
    labels = np.full(cfg.dims, BACKGROUND, np.uint8)
    # blunt crescent: cut the horns where they would thin out to single voxels
    rv = (r_rv <= cfg.rv_radius * size) & (np.abs(x[1] - c[1]) <= 0.8 * cfg.lvm_radius * size)
    labels[rv] = RV
    labels[r_lv <= cfg.lvm_radius * size] = LVM
    labels[r_lv <= cfg.lvbp_radius * size] = LVBP
    return LabelGrid(labels, cfg.spacing)


def phantom_image(labels, cfg):
    img = np.empty(labels.dims)
    for r, name in enumerate(REGION_NAMES):
        img[labels.data == r] = cfg.intensities[name]
    return ScalarGrid(img, labels.spacing)


def border_window(dims, border):
    """1 in the interior, ramping linearly to 0 within ``border`` voxels of every face."""
    win = np.ones(dims)
    for ax, n in enumerate(dims):
        i = np.arange(n, dtype=np.float64)
        dist = np.minimum(i, n - 1 - i)
        ramp = np.clip((dist - border) / max(border, 1), 0.0, 1.0) if border > 0 else np.ones(n)
        shape = [1] * len(dims)
        shape[ax] = n
        win = win * ramp.reshape(shape)
    return win


def smooth_noise(rng, dims, width):
    """Vector white noise blurred by three box passes."""
    d = len(dims)
    v = rng.standard_normal((d,) + tuple(dims))
    for c in range(d):
        for _ in range(3):
            v[c] = uniform_filter(v[c], size=width, mode="nearest")
    return v


def _regional_velocity(rng, cfg, center, region):
    d = len(cfg.dims)
    win = border_window(cfg.dims, cfg.border)
    v = np.zeros((d,) + cfg.dims)
    if cfg.amplitude > 0:
        noise = smooth_noise(rng, cfg.dims, cfg.smoothing)
        peak = np.sqrt((noise ** 2).sum(axis=0)).max()
        v += noise * (cfg.amplitude / peak)
    if cfg.contraction > 0 and region in (LVBP, LVM):
        x = identity_coords(cfg.dims)
        rim = cfg.lvm_radius * min(cfg.dims[:2])
        dx, dy = x[0] - center[0], x[1] - center[1]
        # outward lookup makes the fixed-frame ventricle smaller; fades beyond the rim
        profile = cfg.contraction / rim * np.exp(0.5 - 0.5 * (dx * dx + dy * dy) / rim ** 2)
        v[0] += profile * dx
        v[1] += profile * dy
    return v * win[None]


def generate_phantom(cfg: PhantomConfig) -> PhantomPair:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    center = heart_center(cfg, rng)
    labels_m = phantom_labels(cfg, center)
    moving = phantom_image(labels_m, cfg)
    sub_fields = []
    for r in range(len(REGION_NAMES)):
        v = VectorGrid(_regional_velocity(rng, cfg, center, r), cfg.spacing)
        sub_fields.append(integrate_svf(v, cfg.steps))
    composed = compose_regional_fields(sub_fields, labels_m)
    fixed = warp(moving, composed)
    if cfg.noise > 0:
        fixed = ScalarGrid(fixed.data + rng.normal(0.0, cfg.noise, cfg.dims), cfg.spacing)
    labels_f = warp_labels_nearest(labels_m, composed)
    gt = DeformationBundle(sub_fields, composed, labels_m)
    return PhantomPair(moving, fixed, labels_m, labels_f, gt, cfg.seed)


def derived_seed(base_seed, index):
    """Independent integer seed for dataset member ``index``."""
    child = np.random.SeedSequence(base_seed).spawn(index + 1)[index]
    return int(child.generate_state(1)[0])


def phantom_dataset(n, base_cfg: PhantomConfig, seed=None):
    if n < 1:
        raise ConfigError("dataset size must be >= 1")
    base_seed = base_cfg.seed if seed is None else seed
    return [generate_phantom(replace(base_cfg, seed=derived_seed(base_seed, i))) for i in range(n)]
