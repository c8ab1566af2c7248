"""Command-line driver: phantom, register, train, eval, view, replay.

Every command writes into ``--out`` through a staging directory, so a
failure leaves nothing behind, and drops a ``manifest.json`` describing the
job.  ``ddir replay --manifest M --out D`` re-runs the recorded job.

Exit codes: 0 ok, 2 configuration, 3 I/O, 4 shape or label mismatch,
5 non-finite or degenerate loss.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import replace

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .diffeo import DeformationBundle, jacobian_determinant
from .errors import ConfigError, EmptyDataset, LabelOutOfRange, NonFiniteLoss, ShapeError, ZeroVariance
from .evaluation import evaluate_registration
from .gridfile import read_array, read_grid, read_header, write_array, write_grid
from .losses import LossWeights
from .phantom import PRESETS, PhantomConfig, phantom_dataset
from .registration import (
    RegistrationConfig,
    ToyUNetWeights,
    register_amortized,
    register_direct,
    train_amortized,
)

log = logging.getLogger("ddir")

THREADS_ENV = "DDIR_THREADS"
MANIFEST = "manifest.json"
PAIR_FILES = ("moving", "fixed", "moving_labels", "fixed_labels")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_SHAPE, EXIT_LOSS = 0, 2, 3, 4, 5


class CLIError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# staging and manifests


@contextlib.contextmanager
def staged_dir(out):
    """Yield a scratch directory inside ``out``; its files move into ``out`` on success.

    On failure the scratch directory is removed, and so is ``out`` if this
    call created it.
    """
    created = not os.path.exists(out)
    try:
        os.makedirs(out, exist_ok=True)
    except OSError as e:
        raise CLIError(f"cannot create output directory {out}: {e}", EXIT_IO) from e
    stage = tempfile.mkdtemp(prefix=".partial-", dir=out)
    try:
        yield stage
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        if created:
            shutil.rmtree(out, ignore_errors=True)
        raise
    for name in sorted(os.listdir(stage)):
        dst = os.path.join(out, name)
        if os.path.isdir(dst):
            shutil.rmtree(dst)
        os.replace(os.path.join(stage, name), dst)
    os.rmdir(stage)


@contextlib.contextmanager
def staged_file(path):
    """Yield a temporary path next to ``path``; renamed onto it on success."""
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise CLIError(f"output directory {parent} does not exist", EXIT_IO)
    fd, tmp = tempfile.mkstemp(prefix=".partial-", dir=parent)
    os.close(fd)
    try:
        yield tmp
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.remove(tmp)
        raise
    os.replace(tmp, path)


_PATH_ARGS = ("moving", "fixed", "moving_labels", "fixed_labels", "weights", "data", "validation",
              "result", "pair", "grid")


def _job_args(args):
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in ("out", "verbose", "resolved_config"):
            continue
        # absolute input paths let a manifest be replayed from any working directory
        out[k] = os.path.abspath(v) if k in _PATH_ARGS and isinstance(v, str) else v
    return out


def write_manifest(directory, args, config=None, inputs=None, path=None):
    """Write the job manifest into ``directory`` (or to ``path`` for single-file outputs)."""
    manifest = {
        "command": args.command,
        "args": _job_args(args),
        "inputs": inputs or {},
        "out": os.path.abspath(args.out),
        "config": config,
        "seed": getattr(args, "seed", None),
        "version": __version__,
    }
    _write_json(path or os.path.join(directory, MANIFEST), manifest)
    return manifest


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# config loading and overrides


def _load_json(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as e:
        raise CLIError(f"cannot read config {path}: {e}", EXIT_IO) from e
    except json.JSONDecodeError as e:
        raise CLIError(f"config {path} is not valid JSON: {e}", EXIT_CONFIG) from e


def _config_dict(args):
    # a replayed job carries the config resolved by the original run
    resolved = getattr(args, "resolved_config", None)
    if resolved is not None:
        return dict(resolved)
    return _load_json(getattr(args, "config", None))


def _registration_config(args, **fixed):
    d = _config_dict(args)
    d.update(fixed)
    w = dict(d.get("weights") or {})
    for flag, key in (("lambda0", "lambda0"), ("lambda1", "lambda1"), ("lambda2", "lambda2"),
                      ("lambda_prior", "lambda_prior")):
        if getattr(args, flag, None) is not None:
            w[key] = getattr(args, flag)
    d["weights"] = w
    for flag, key in (("seed", "seed"), ("k_steps", "steps"), ("iterations", "iterations"), ("lr", "lr"),
                      ("mode", "mode")):
        if getattr(args, flag, None) is not None:
            d[key] = getattr(args, flag)
    try:
        if set(w) - set(LossWeights.__dataclass_fields__):
            raise ConfigError(f"unknown loss weight keys {sorted(set(w) - set(LossWeights.__dataclass_fields__))}")
        return RegistrationConfig.from_dict(d)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def _phantom_config(args):
    d = _config_dict(args)
    if getattr(args, "preset", None):
        if args.preset not in PRESETS:
            raise ConfigError(f"unknown preset {args.preset!r}")
        d = {**PRESETS[args.preset], **d}
    if args.seed is not None:
        d["seed"] = args.seed
    if args.k_steps is not None:
        d["steps"] = args.k_steps
    try:
        return PhantomConfig.from_dict(d)
    except TypeError as e:
        raise ConfigError(str(e)) from e


# ---------------------------------------------------------------------------
# grid I/O helpers


def _read(path, kind):
    try:
        return read_grid(path, kind)
    except FileNotFoundError as e:
        raise CLIError(f"missing input {e.filename or path}", EXIT_IO) from e
    except (LabelOutOfRange, ShapeError):
        raise
    except (OSError, ValueError, KeyError) as e:
        raise CLIError(f"cannot read grid {path}: {e}", EXIT_IO) from e


def _read_pair_dir(d):
    paths = {name: os.path.join(d, name) for name in PAIR_FILES}
    kinds = ("scalar", "scalar", "label", "label")
    return tuple(_read(paths[n], k) for n, k in zip(PAIR_FILES, kinds)), paths


def _pair_dirs(data):
    if not os.path.isdir(data):
        raise CLIError(f"data directory {data} does not exist", EXIT_IO)
    dirs = sorted(os.path.join(data, n) for n in os.listdir(data)
                  if os.path.isfile(os.path.join(data, n, "moving.json")))
    if not dirs:
        raise CLIError(f"no pairs found under {data}", EXIT_IO)
    return dirs


def write_pair(d, pair):
    os.makedirs(d, exist_ok=True)
    write_grid(os.path.join(d, "moving"), pair.moving)
    write_grid(os.path.join(d, "fixed"), pair.fixed)
    write_grid(os.path.join(d, "moving_labels"), pair.labels_m)
    write_grid(os.path.join(d, "fixed_labels"), pair.labels_f)
    write_grid(os.path.join(d, "gt_composed"), pair.gt.composed)
    for r, f in enumerate(pair.gt.sub_fields):
        write_grid(os.path.join(d, f"gt_sub_field_{r}"), f)


def _read_fields(d):
    header = read_header(os.path.join(d, "composed"))
    n = int(header.get("sub_fields", 0))
    subs = [_read(os.path.join(d, f"sub_field_{r}"), "vector") for r in range(n)]
    return DeformationBundle(subs, _read(os.path.join(d, "composed"), "vector"))


def _report(bundle, labels_m, labels_f):
    return evaluate_registration(bundle, (None, None, labels_m, labels_f)).to_dict()


# ---------------------------------------------------------------------------
# commands


def cmd_phantom(args):
    cfg = _phantom_config(args)
    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    pairs = phantom_dataset(args.n, cfg)
    with staged_dir(args.out) as stage:
        for i, pair in enumerate(pairs):
            write_pair(os.path.join(stage, f"pair_{i:03d}"), pair)
        write_manifest(stage, args, config=cfg.to_dict())
    return EXIT_OK


def _check_pair(moving, fixed, labels_m, labels_f):
    dims = {moving.dims, fixed.dims, labels_m.dims, labels_f.dims}
    if len(dims) != 1:
        raise ShapeError(f"input grids have different dims: {sorted(dims)}")
    if labels_m.region_count != labels_f.region_count:
        raise ShapeError("moving and fixed labels declare different region counts")


def load_weights(d):
    try:
        with open(os.path.join(d, "weights.json")) as fh:
            meta = json.load(fh)
    except OSError as e:
        raise CLIError(f"cannot read weights in {d}: {e}", EXIT_IO) from e
    tensors = {name: read_array(os.path.join(d, "tensors", name)) for name in meta["tensors"]}
    return ToyUNetWeights(tensors, meta["mode"], meta["width"], meta["region_count"], meta["ndim"]), meta


def save_weights(d, weights, cfg):
    os.makedirs(os.path.join(d, "tensors"), exist_ok=True)
    for name in weights.names():
        write_array(os.path.join(d, "tensors", name), weights.tensors[name], role="weight")
    meta = {"mode": weights.mode, "width": weights.width, "region_count": weights.region_count,
            "ndim": weights.ndim, "tensors": weights.names(), "config": cfg.to_dict()}
    _write_json(os.path.join(d, "weights.json"), meta)


def cmd_register(args):
    inputs = {"moving": args.moving, "fixed": args.fixed,
              "moving_labels": args.moving_labels, "fixed_labels": args.fixed_labels}
    if args.weights:
        weights, meta = load_weights(args.weights)
        inputs["weights"] = args.weights
        cfg = _registration_config(args, **{**meta["config"], "mode": weights.mode, "regime": "amortized"})
    else:
        cfg = _registration_config(args, regime="direct")
    moving = _read(args.moving, "scalar")
    fixed = _read(args.fixed, "scalar")
    labels_m = _read(args.moving_labels, "label")
    labels_f = _read(args.fixed_labels, "label")
    _check_pair(moving, fixed, labels_m, labels_f)
    if args.weights:
        res = register_amortized(weights, (moving, fixed, labels_m, labels_f), cfg)
    else:
        res = register_direct(moving, fixed, labels_m, labels_f, cfg)
    with staged_dir(args.out) as stage:
        write_grid(os.path.join(stage, "warped"), res.warped)
        write_grid(os.path.join(stage, "warped_labels"), res.warped_labels)
        write_grid(os.path.join(stage, "composed"), res.bundle.composed,
                   extra={"sub_fields": res.bundle.region_count, "mode": cfg.mode})
        for r, f in enumerate(res.bundle.sub_fields):
            write_grid(os.path.join(stage, f"sub_field_{r}"), f)
        write_grid(os.path.join(stage, "jacobian"), jacobian_determinant(res.bundle.composed),
                   extra={"role": "jacobian"})
        with open(os.path.join(stage, "loss_trace.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "total"])
            for i, v in enumerate(res.loss_trace):
                w.writerow([i, repr(float(v))])
        # evaluate the fields as stored (f32) so that `ddir eval` reproduces this report exactly
        report = _report(_read_fields(stage), labels_m, labels_f)
        _write_json(os.path.join(stage, "report.json"), report)
        write_manifest(stage, args, config=cfg.to_dict(), inputs=inputs)
    return EXIT_OK


def cmd_train(args):
    cfg = _registration_config(args, regime="amortized")
    if args.batch_size is not None:
        cfg = replace(cfg, batch_size=args.batch_size)
    dirs = _pair_dirs(args.data)
    pairs = []
    for d in dirs:
        grids, _ = _read_pair_dir(d)
        _check_pair(*grids)
        pairs.append(grids)
    validation = None
    if args.validation:
        validation = [_read_pair_dir(d)[0] for d in _pair_dirs(args.validation)]
    weights, history = train_amortized(pairs, cfg, validation=validation)
    with staged_dir(args.out) as stage:
        save_weights(stage, weights, cfg)
        cols = ["epoch", "loss", "val_dice_pre", "val_dice_post"]
        with open(os.path.join(stage, "metrics.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for row in history:
                w.writerow([row["epoch"]] + [repr(float(row[c])) if c in row else "" for c in cols[1:]])
        write_manifest(stage, args, config=cfg.to_dict(), inputs={"data": dirs})
    return EXIT_OK


def cmd_eval(args):
    if not os.path.isdir(args.result):
        raise CLIError(f"result directory {args.result} does not exist", EXIT_IO)
    bundle = _read_fields(args.result)
    if args.pair:
        labels_m = _read(os.path.join(args.pair, "moving_labels"), "label")
        labels_f = _read(os.path.join(args.pair, "fixed_labels"), "label")
    else:
        try:
            with open(os.path.join(args.result, MANIFEST)) as fh:
                inputs = json.load(fh)["inputs"]
        except (OSError, KeyError, json.JSONDecodeError) as e:
            raise CLIError(f"--pair not given and {args.result} has no usable manifest: {e}", EXIT_IO) from e
        labels_m = _read(inputs["moving_labels"], "label")
        labels_f = _read(inputs["fixed_labels"], "label")
    report = _report(bundle, labels_m, labels_f)
    with staged_file(args.out) as tmp, staged_file(args.out + ".manifest.json") as tmp_man:
        _write_json(tmp, report)
        write_manifest(None, args, path=tmp_man)
    return EXIT_OK


def bluewhitered(t):
    """RGB in [0,1] for t in [0,1]: blue at 0, white at 0.5, red at 1."""
    t = np.clip(t, 0.0, 1.0)
    lo = np.minimum(2.0 * t, 1.0)
    hi = np.minimum(2.0 - 2.0 * t, 1.0)
    return np.stack([lo, np.minimum(lo, hi), hi], axis=-1)


def render_slice(path, slice_index=0, channel=0, colormap="auto"):
    """Returns ``(pixels, info)``; pixels are uint8 (H, W) or (H, W, 3), rows along y."""
    header = read_header(path)
    g = _read(path, None)
    data = g.data
    if data.ndim == len(header["dims"]) + 1:
        if channel == -1:
            data = np.sqrt((data ** 2).sum(axis=0))
        elif not 0 <= channel < data.shape[0]:
            raise ShapeError(f"channel {channel} out of range for {data.shape[0]} channels")
        else:
            data = data[channel]
    elif channel not in (0, -1):
        raise ShapeError(f"channel {channel} out of range for a single-channel grid")
    if data.ndim == 3:
        if not 0 <= slice_index < data.shape[2]:
            raise ShapeError(f"slice {slice_index} out of range for depth {data.shape[2]}")
        data = data[:, :, slice_index]
    elif slice_index != 0:
        raise ShapeError(f"slice {slice_index} out of range for a 2-d grid")
    data = np.asarray(data, dtype=np.float64)
    lo, hi = float(data.min()), float(data.max())
    t = np.full(data.shape, 0.5) if hi == lo else (data - lo) / (hi - lo)
    if colormap == "auto":
        colormap = "bwr" if header.get("role") == "jacobian" or channel == -1 else "gray"
    img = t.T  # rows = y, columns = x
    if colormap == "bwr":
        pixels = np.round(bluewhitered(img) * 255).astype(np.uint8)
    else:
        pixels = np.round(img * 255).astype(np.uint8)
    info = {"min": lo, "max": hi, "colormap": colormap, "slice": slice_index, "channel": channel}
    return pixels, info


def write_pnm(path, pixels):
    h, w = pixels.shape[:2]
    magic = b"P6" if pixels.ndim == 3 else b"P5"
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(pixels).tobytes())


def cmd_view(args):
    pixels, info = render_slice(args.grid, args.slice, args.channel, args.colormap)
    info["grid"] = os.path.abspath(args.grid)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    if not os.path.isdir(out_dir):
        raise CLIError(f"output directory {out_dir} does not exist", EXIT_IO)
    with staged_file(args.out) as tmp_img, staged_file(args.out + ".json") as tmp_json, \
            staged_file(args.out + ".manifest.json") as tmp_man:
        write_pnm(tmp_img, pixels)
        _write_json(tmp_json, info)
        write_manifest(None, args, path=tmp_man)
    return EXIT_OK


def cmd_replay(args):
    try:
        with open(args.manifest) as fh:
            manifest = json.load(fh)
    except OSError as e:
        raise CLIError(f"cannot read manifest {args.manifest}: {e}", EXIT_IO) from e
    except json.JSONDecodeError as e:
        raise CLIError(f"manifest {args.manifest} is not valid JSON: {e}", EXIT_CONFIG) from e
    recorded = dict(manifest.get("args") or {})
    command = manifest.get("command")
    if command not in COMMANDS or command == "replay":
        raise CLIError(f"manifest names unknown command {command!r}", EXIT_CONFIG)
    ns = argparse.Namespace(**recorded)
    ns.resolved_config = manifest.get("config")
    ns.command, ns.out, ns.verbose = command, args.out, args.verbose
    return COMMANDS[command](ns)


COMMANDS = {
    "phantom": cmd_phantom,
    "register": cmd_register,
    "train": cmd_train,
    "eval": cmd_eval,
    "view": cmd_view,
    "replay": cmd_replay,
}


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p, registration=True):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--k-steps", type=int, dest="k_steps", help="scaling-and-squaring steps")
    if registration:
        p.add_argument("--lambda0", type=float, help="image similarity weight")
        p.add_argument("--lambda1", type=float, help="segmentation overlap weight")
        p.add_argument("--lambda2", type=float, help="regulariser weight")
        p.add_argument("--lambda-prior", type=float, dest="lambda_prior")
        p.add_argument("--iterations", type=int, help="optimiser steps (register) or epochs (train)")
        p.add_argument("--lr", type=float)


def build_parser():
    parser = argparse.ArgumentParser(prog="ddir", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=None,
                        help=f"cap on BLAS/OpenMP threads (default ${THREADS_ENV} or library default)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate synthetic pairs")
    _add_common(p, registration=False)
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--preset", choices=sorted(PRESETS), help="named base config; --config keys override it")
    p.add_argument("--out", required=True)

    p = sub.add_parser("register", help="register one pair")
    p.add_argument("--moving", required=True)
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving-labels", required=True, dest="moving_labels")
    p.add_argument("--fixed-labels", required=True, dest="fixed_labels")
    p.add_argument("--mode", choices=("ddir", "baseline"))
    p.add_argument("--weights", help="trained network directory (amortized inference)")
    _add_common(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train the amortized network")
    p.add_argument("--data", required=True)
    p.add_argument("--validation")
    p.add_argument("--mode", choices=("ddir", "baseline"))
    p.add_argument("--batch-size", type=int, dest="batch_size")
    _add_common(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="evaluate a registration output directory")
    p.add_argument("--result", required=True)
    p.add_argument("--pair", help="directory with moving_labels / fixed_labels (default: from the manifest)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("view", help="render one slice as PGM/PPM")
    p.add_argument("--grid", required=True)
    p.add_argument("--slice", type=int, default=0)
    p.add_argument("--channel", type=int, default=0, help="vector component, or -1 for magnitude")
    p.add_argument("--colormap", choices=("auto", "gray", "bwr"), default="auto")
    p.add_argument("--out", required=True)

    p = sub.add_parser("replay", help="re-run the job recorded in a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    return parser


def _thread_count(args):
    if args.threads is not None:
        return args.threads
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise CLIError(f"{THREADS_ENV}={env!r} is not an integer", EXIT_CONFIG) from None
    return None


def run(args):
    try:
        threads = _thread_count(args)
        if threads is not None and threads < 1:
            raise CLIError("--threads must be >= 1", EXIT_CONFIG)
        with threadpool_limits(limits=threads):
            return COMMANDS[args.command](args)
    except CLIError as e:
        log.error("%s", e)
        return e.code
    except (ConfigError, EmptyDataset) as e:
        log.error("configuration error: %s", e)
        return EXIT_CONFIG
    except (ShapeError, LabelOutOfRange) as e:
        log.error("shape/label mismatch: %s", e)
        return EXIT_SHAPE
    except (NonFiniteLoss, ZeroVariance) as e:
        log.error("loss failure: %s", e)
        return EXIT_LOSS
    except OSError as e:
        log.error("I/O error: %s", e)
        return EXIT_IO


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    return run(args)


if __name__ == "__main__":
    sys.exit(main())
