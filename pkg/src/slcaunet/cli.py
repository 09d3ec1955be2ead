"""Command-line entry point: ``slcaunet {phantom,train,segment,evaluate,gradcheck}``.

Run configuration is one JSON document with optional ``network``, ``train``
and ``phantom`` sections whose keys mirror :class:`NetworkConfig`,
:class:`TrainConfig` and :class:`PhantomSpec`.  Unknown keys are rejected.
Command-line flags take precedence over the file, which takes precedence
over the built-in defaults.

Exit codes: 0 ok, 2 configuration/shape error, 3 I/O error, 4 numeric
failure, 5 verification failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import metrics
from .data import (
    LabelVolume,
    PhantomError,
    PhantomSpec,
    SvolError,
    generate_phantom,
    normalize,
    read_svol,
    split,
    write_svol,
)
from .network import ConfigError, NetworkConfig, build, check_input, segment
from .tensorcore import NonFiniteError, ShapeError
from .train import (
    CheckpointError,
    NumericError,
    Sample,
    TrainConfig,
    fit,
    load_checkpoint,
    save_checkpoint,
)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4, 5

IMAGE_SUFFIX = ".img.svol"
LABEL_SUFFIX = ".lbl.svol"

# overlay colours per label: necrosis red, edema green, enhancing yellow
LABEL_COLORS = {1: (255, 0, 0), 2: (0, 200, 0), 3: (255, 255, 0)}
OVERLAY_ALPHA = 0.5


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    phantom: PhantomSpec = field(default_factory=PhantomSpec)

    SECTIONS = ("network", "train", "phantom")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        unknown = set(d) - set(cls.SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        for name in cls.SECTIONS:
            if not isinstance(d.get(name, {}), dict):
                raise ConfigError(f"config section {name!r} must be an object")
        try:
            net = NetworkConfig.from_dict(d.get("network", {}))
            tr = TrainConfig.from_dict(d.get("train", {}))
            ph = PhantomSpec.from_dict(d.get("phantom", {}))
        except (TypeError, PhantomError) as e:
            raise ConfigError(str(e)) from None
        return cls(net, tr, ph)

    def validate(self) -> "RunConfig":
        try:
            self.network.validate()
            self.train.validate()
            self.phantom.validate(self.network.divisor)
        except (PhantomError, TypeError) as e:
            raise ConfigError(str(e)) from None
        return self


def load_run_config(path: Optional[str], overrides: Optional[dict] = None) -> RunConfig:
    """Read ``path`` (or start from defaults), apply flag overrides, validate."""
    doc: dict = {}
    if path is not None:
        try:
            with open(path) as f:
                doc = json.load(f)
        except OSError as e:
            raise CliError(f"cannot read config {path}: {e}", EXIT_IO) from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from None
    if overrides:
        doc = dict(doc)
        for section, values in overrides.items():
            merged = dict(doc.get(section, {}) if isinstance(doc.get(section, {}), dict) else {})
            merged.update(values)
            doc[section] = merged
    return RunConfig.from_dict(doc).validate()


def _log(msg: str) -> None:
    print(msg, flush=True)


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr, flush=True)


# ------------------------------------------------------------------ phantom

def _case_name(i: int) -> str:
    return f"case_{i:04d}"


def _check_nesting(labels: np.ndarray) -> None:
    m = metrics.region_masks(labels)
    if (m["ET"] & ~m["TC"]).any() or (m["TC"] & ~m["WT"]).any():
        raise CliError("generated labels violate ET <= TC <= WT nesting", EXIT_VERIFY)


def cmd_phantom(args) -> int:
    overrides = {"phantom": {"seed": args.seed}} if args.seed is not None else None
    rc = load_run_config(args.config, overrides)
    if args.count < 0:
        raise ConfigError("--count must be >= 0")
    out = Path(args.out_dir)
    if not out.is_dir():
        raise CliError(f"output directory {out} does not exist", EXIT_IO)
    written: list[Path] = []
    try:
        for i in range(args.count):
            spec = replace(rc.phantom, seed=rc.phantom.seed + i)
            img, lab = generate_phantom(spec)
            _check_nesting(lab.labels)
            name = _case_name(i)
            for suffix, value in ((IMAGE_SUFFIX, img), (LABEL_SUFFIX, lab)):
                path = out / f"{name}{suffix}"
                write_svol(path, value)
                written.append(path)
            counts = np.bincount(lab.labels.reshape(-1), minlength=4).tolist()
            _log(f"{name} seed={spec.seed} shape={list(lab.shape)} label_counts={counts}")
    except BaseException:
        for p in written:
            p.unlink(missing_ok=True)
        raise
    return EXIT_OK


# ------------------------------------------------------------------ dataset helpers

def list_cases(directory, suffix: str) -> dict[str, Path]:
    d = Path(directory)
    if not d.is_dir():
        raise CliError(f"directory {d} does not exist", EXIT_IO)
    return {p.name[: -len(suffix)]: p for p in sorted(d.iterdir()) if p.name.endswith(suffix)}


def load_samples(data_dir, dtype) -> tuple[list[str], list[Sample]]:
    images = list_cases(data_dir, IMAGE_SUFFIX)
    labels = list_cases(data_dir, LABEL_SUFFIX)
    missing = sorted(set(images) ^ set(labels))
    if missing:
        raise CliError(f"cases without both image and label files: {missing}", EXIT_IO)
    if not images:
        raise CliError(f"no *{IMAGE_SUFFIX} cases in {data_dir}", EXIT_IO)
    ids = sorted(images)
    samples = []
    for cid in ids:
        img = read_svol(images[cid], expect="image")
        lab = read_svol(labels[cid], expect="labels")
        if img.shape != lab.shape:
            raise CliError(f"{cid}: image {list(img.shape)} and labels {list(lab.shape)} disagree", EXIT_IO)
        samples.append(Sample(normalize(img).data.astype(dtype), lab.labels))
    return ids, samples


# ------------------------------------------------------------------ train

def _history_path(checkpoint: Path) -> Path:
    return checkpoint.with_name(checkpoint.name + ".history.csv")


def _atomic_text(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=path.parent)
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def cmd_train(args) -> int:
    overrides: dict = {}
    for key in ("steps", "lr", "seed"):
        if getattr(args, key) is not None:
            overrides.setdefault("train", {})[key] = getattr(args, key)
    rc = load_run_config(args.config, overrides)
    ids, samples = load_samples(args.data_dir, rc.network.dtype)
    for cid, s in zip(ids, samples):
        if s.image.shape[0] != rc.network.in_channels or s.labels.ndim != rc.network.spatial_rank:
            raise ConfigError(f"{cid}: volume {list(s.image.shape)} does not fit the network input")
        if any(n % rc.network.divisor for n in s.labels.shape):
            raise ConfigError(f"{cid}: spatial extents {list(s.labels.shape)} must be multiples of "
                              f"{rc.network.divisor}")
    out = Path(args.out)
    if not out.parent.is_dir():
        raise CliError(f"output directory {out.parent} does not exist", EXIT_IO)

    # held-out validation when there are enough cases, otherwise report on the training set
    if len(ids) >= 5:
        tr_ids, va_ids, _ = split(ids, (0.8, 0.2, 0.0), seed=rc.train.seed)
    else:
        tr_ids, va_ids = list(ids), []
    by_id = dict(zip(ids, samples))
    train_set = [by_id[i] for i in tr_ids]
    val_set = [by_id[i] for i in va_ids]

    net = build(rc.network)
    _log(f"training on {len(train_set)} case(s), validating on {len(val_set) or len(train_set)}"
         f"{'' if val_set else ' (training set)'}; {net.num_parameters()} parameters")
    log = _log if args.verbose else None
    ck, history = fit(net, train_set, rc.train, val=val_set or None, log=log)
    try:
        save_checkpoint(net, out, ck.step, ck.rng_state)
        _atomic_text(_history_path(out), history.to_csv())
    except BaseException:
        out.unlink(missing_ok=True)
        raise

    report_on = val_set or train_set
    report_ids = va_ids or tr_ids
    reports = []
    for cid, s in zip(report_ids, report_on):
        pred = segment(net, s.image)
        reports.append(metrics.evaluate(pred, s.labels, case_id=cid))
    if history.losses:
        _log(f"final loss {history.losses[-1][1]:.6f}")
    _log(metrics.format_table(metrics.mean_rows(reports)))
    return EXIT_OK


# ------------------------------------------------------------------ segment

def _to_u8(slice2d: np.ndarray) -> np.ndarray:
    lo, hi = float(slice2d.min()), float(slice2d.max())
    if hi <= lo:
        return np.zeros(slice2d.shape, dtype=np.uint8)
    return np.round((slice2d - lo) / (hi - lo) * 255).astype(np.uint8)


def overlay_rgb(background: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Grey background with labels 1/2/3 alpha-blended in their colours."""
    grey = _to_u8(background).astype(np.float64)
    rgb = np.repeat(grey[..., None], 3, axis=-1)
    for lab, color in LABEL_COLORS.items():
        m = labels == lab
        rgb[m] = (1 - OVERLAY_ALPHA) * rgb[m] + OVERLAY_ALPHA * np.asarray(color, dtype=np.float64)
    return np.round(rgb).astype(np.uint8)


def encode_ppm(rgb: np.ndarray) -> bytes:
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes()


def write_overlays(directory: Path, image: np.ndarray, labels: np.ndarray) -> list[Path]:
    """One P6 pixmap per axial slice (first spatial axis) over the FLAIR channel."""
    flair = image[0]
    slices = [(flair, labels)] if labels.ndim == 2 else [(flair[k], labels[k]) for k in range(labels.shape[0])]
    paths = []
    for k, (bg, lab) in enumerate(slices):
        p = directory / f"slice_{k:04d}.ppm"
        _atomic_bytes(p, encode_ppm(overlay_rgb(bg, lab)))
        paths.append(p)
    return paths


def _atomic_bytes(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def cmd_segment(args) -> int:
    net = load_checkpoint(args.checkpoint)
    vol = read_svol(args.input, expect="image")
    check_input(net, vol.data.shape)
    out = Path(args.out)
    if not out.parent.is_dir():
        raise CliError(f"output directory {out.parent} does not exist", EXIT_IO)
    overlay_dir = Path(args.overlay_dir) if args.overlay_dir else None
    if overlay_dir is not None:
        overlay_dir.mkdir(parents=True, exist_ok=True)
    norm = normalize(vol)
    pred = segment(net, norm.data.astype(net.dtype))
    result = LabelVolume(pred.labels, vol.spacing)
    written: list[Path] = []
    try:
        write_svol(out, result)
        written.append(out)
        if overlay_dir is not None:
            written += write_overlays(overlay_dir, vol.data, result.labels)
    except BaseException:
        for p in written:
            p.unlink(missing_ok=True)
        raise
    counts = np.bincount(result.labels.reshape(-1), minlength=4).tolist()
    _log(f"wrote {out} label_counts={counts}"
         + (f" overlays={len(written) - 1}" if overlay_dir is not None else ""))
    return EXIT_OK


# ------------------------------------------------------------------ evaluate

def cmd_evaluate(args) -> int:
    preds = list_cases(args.pred, LABEL_SUFFIX)
    gts = list_cases(args.gt, LABEL_SUFFIX)
    if not gts:
        raise CliError(f"no *{LABEL_SUFFIX} files in {args.gt}", EXIT_IO)
    missing_pred = sorted(set(gts) - set(preds))
    missing_gt = sorted(set(preds) - set(gts))
    if missing_pred or missing_gt:
        parts = []
        if missing_pred:
            parts.append(f"no prediction for: {', '.join(missing_pred)}")
        if missing_gt:
            parts.append(f"no reference for: {', '.join(missing_gt)}")
        raise ConfigError("unmatched case ids; " + "; ".join(parts))
    reports = []
    for cid in sorted(gts):
        gt = read_svol(gts[cid], expect="labels")
        pred = read_svol(preds[cid], expect="labels")
        if pred.shape != gt.shape:
            raise ConfigError(f"{cid}: prediction shape {list(pred.shape)} != reference {list(gt.shape)}")
        reports.append(metrics.evaluate(pred, gt, spacing=gt.spacing, case_id=cid))
    out = Path(args.out)
    if not out.parent.is_dir():
        raise CliError(f"output directory {out.parent} does not exist", EXIT_IO)
    _atomic_text(out, metrics.report_csv(reports))
    _log(metrics.format_table(metrics.mean_rows(reports)))
    return EXIT_OK


# ------------------------------------------------------------------ gradcheck

def cmd_gradcheck(args) -> int:
    from .gradsuite import REGISTRY, TOLERANCE, run_suite

    rc = load_run_config(args.config)
    faults = set(args.inject_fault or ())
    if faults - set(REGISTRY):
        raise ConfigError(f"unknown components {sorted(faults - set(REGISTRY))}")
    results = run_suite(seed=rc.network.seed, rank=rc.network.spatial_rank, faults=faults, log=_log)
    failed = [r.name for r in results if not r.passed]
    if failed:
        _err(f"gradient check above {TOLERANCE:g} for: {', '.join(failed)}")
        return EXIT_VERIFY
    _log(f"all {len(results)} components below {TOLERANCE:g}")
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slcaunet", description="SLCA-UNet segmentation toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("phantom", help="generate synthetic phantom cases")
    sp.add_argument("--config", help="run config JSON (phantom section is used)")
    sp.add_argument("--out-dir", required=True, help="existing directory for the .svol files")
    sp.add_argument("--count", type=int, default=1, help="number of cases; case i uses seed + i")
    sp.add_argument("--seed", type=int, help="override phantom.seed")
    sp.set_defaults(func=cmd_phantom)

    sp = sub.add_parser("train", help="train a network on a directory of cases")
    sp.add_argument("--config", help="run config JSON")
    sp.add_argument("--data-dir", required=True, help="directory of case_*.img.svol / .lbl.svol pairs")
    sp.add_argument("--out", required=True, help="checkpoint path; history goes to <out>.history.csv")
    sp.add_argument("--steps", type=int, help="override train.steps")
    sp.add_argument("--lr", type=float, help="override train.lr")
    sp.add_argument("--seed", type=int, help="override train.seed")
    sp.add_argument("--verbose", action="store_true", help="print the loss of every step")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("segment", help="predict labels for one image volume")
    sp.add_argument("--checkpoint", required=True, help="checkpoint written by train")
    sp.add_argument("--in", dest="input", required=True, help="input image .svol")
    sp.add_argument("--out", required=True, help="output label .svol")
    sp.add_argument("--overlay-dir", help="write one P6 overlay per axial slice here")
    sp.set_defaults(func=cmd_segment)

    sp = sub.add_parser("evaluate", help="score predicted label volumes against references")
    sp.add_argument("--pred", required=True, help="directory of predicted <id>.lbl.svol files")
    sp.add_argument("--gt", required=True, help="directory of reference <id>.lbl.svol files")
    sp.add_argument("--out", required=True, help="CSV report path")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every block and a small network")
    sp.add_argument("--config", help="run config JSON (network.seed and spatial_rank are used)")
    sp.add_argument("--inject-fault", action="append", help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        _err(str(e))
        return e.code
    except (ConfigError, ShapeError, PhantomError) as e:
        _err(str(e))
        return EXIT_CONFIG
    except (NumericError, NonFiniteError, FloatingPointError) as e:
        _err(str(e))
        return EXIT_NUMERIC
    except (SvolError, CheckpointError, OSError) as e:
        _err(str(e))
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
