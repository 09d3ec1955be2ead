"""Losses, optimizers, the training loop and checkpoint serialization.

Checkpoint layout (little-endian)::

    8 bytes   magic b"SLCKPT\\0\\0"
    u32       format version
    u32, ...  length-prefixed network config JSON (canonical, sorted keys)
    32 bytes  sha256 of the config JSON
    u64       training step counter
    u32, ...  length-prefixed RNG state JSON
    u32       parameter count P
    P times:  u16 name length, name, u8 rank, rank*u32 dims, f32 values
    u32, ...  length-prefixed optimizer JSON ({} when absent)
              then, for each optimizer slot, P f32 arrays in parameter order
    u32       crc32 of every preceding byte
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import struct
import tempfile
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .metrics import evaluate
from .network import ConfigError, Network, NetworkConfig, argmax_labels, build, forward
from .tensorcore import (
    GradTape,
    Tensor,
    backward,
    clamp_min,
    index,
    log,
    no_grad,
)

CHECKPOINT_MAGIC = b"SLCKPT\x00\x00"
CHECKPOINT_VERSION = 1
SOFT_DICE_EPS = 1e-5
CE_FLOOR = 1e-12


class NumericError(ArithmeticError):
    """Training produced a non-finite loss."""


class CheckpointError(IOError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


# ---------------------------------------------------------------- losses

def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float64) -> np.ndarray:
    labels = np.asarray(getattr(labels, "labels", labels))
    out = np.zeros((num_classes,) + labels.shape, dtype=dtype)
    for c in range(num_classes):
        out[c] = labels == c
    return out


def soft_dice_loss(probs: Tensor, gt, eps: float = SOFT_DICE_EPS) -> Tensor:
    """1 - mean over foreground classes of (2 sum(p g) + eps) / (sum p + sum g + eps)."""
    g = one_hot(gt, probs.shape[0], probs.dtype)
    if g.shape != probs.shape:
        raise ValueError(f"probabilities {list(probs.shape)} do not match labels {list(g.shape[1:])}")
    axes = tuple(range(1, probs.ndim))
    pf = index(probs, slice(1, None))
    gf = g[1:]
    inter = (pf * gf).sum(axes)
    denom = pf.sum(axes) + gf.sum(axis=axes)
    dsc = (inter * 2.0 + eps) / (denom + eps)
    return 1.0 - dsc.mean()


def cross_entropy_loss(probs: Tensor, gt, floor: float = CE_FLOOR) -> Tensor:
    """Mean over voxels of -log p[true class], with p clamped at ``floor``."""
    g = one_hot(gt, probs.shape[0], probs.dtype)
    if g.shape != probs.shape:
        raise ValueError(f"probabilities {list(probs.shape)} do not match labels {list(g.shape[1:])}")
    p_true = (probs * g).sum(0)
    return -log(clamp_min(p_true, floor)).mean()


def dice_plus_ce_loss(probs: Tensor, gt) -> Tensor:
    return soft_dice_loss(probs, gt) + cross_entropy_loss(probs, gt)


LOSSES: dict[str, Callable] = {
    "dice": soft_dice_loss,
    "cross_entropy": cross_entropy_loss,
    "dice_plus_ce": dice_plus_ce_loss,
}


# ------------------------------------------------------------ optimizers

class Optimizer:
    name = ""
    slots: tuple = ()

    def __init__(self, params: Sequence[Tensor], lr: float):
        if lr < 0:
            raise ValueError("learning rate must be >= 0")
        self.params = list(params)
        self.lr = lr
        self.t = 0
        self.state = {s: [np.zeros_like(p.data) for p in self.params] for s in self.slots}

    def step(self, grads: Sequence[np.ndarray]) -> None:
        raise NotImplementedError

    def hyper(self) -> dict:
        return {"lr": self.lr}

    def state_dict(self) -> dict:
        return {"name": self.name, "t": self.t, "hyper": self.hyper(), "slots": list(self.slots)}

    def load_state(self, t: int, arrays: dict) -> None:
        self.t = t
        for s in self.slots:
            self.state[s] = [a.astype(p.dtype).reshape(p.shape) for a, p in zip(arrays[s], self.params)]


class SGD(Optimizer):
    name = "sgd"

    def step(self, grads):
        self.t += 1
        for p, g in zip(self.params, grads):
            p.data -= (self.lr * g).astype(p.dtype, copy=False)


class SGDMomentum(Optimizer):
    name = "sgd_momentum"
    slots = ("velocity",)

    def __init__(self, params, lr, momentum: float = 0.9):
        super().__init__(params, lr)
        self.momentum = momentum

    def hyper(self):
        return {"lr": self.lr, "momentum": self.momentum}

    def step(self, grads):
        self.t += 1
        for p, g, v in zip(self.params, grads, self.state["velocity"]):
            v *= self.momentum
            v += g
            p.data -= (self.lr * v).astype(p.dtype, copy=False)


class Adam(Optimizer):
    name = "adam"
    slots = ("m", "v")

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def hyper(self):
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}

    def step(self, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.state["m"], self.state["v"]):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.dtype, copy=False)


def make_optimizer(name: str, params, cfg: "TrainConfig") -> Optimizer:
    if name == "sgd":
        return SGD(params, cfg.lr)
    if name == "sgd_momentum":
        return SGDMomentum(params, cfg.lr, cfg.momentum)
    if name == "adam":
        return Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    raise ValueError(f"unknown optimizer {name!r}")


# ---------------------------------------------------------------- config

@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 1
    lr: float = 1e-3
    optimizer: str = "adam"
    loss: str = "dice_plus_ce"
    seed: int = 0
    deterministic: bool = True
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_path: Optional[str] = None
    checkpoint_interval: int = 0
    val_every_epochs: int = 1

    def validate(self) -> "TrainConfig":
        problems = []
        if self.steps < 0:
            problems.append("steps must be >= 0")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if not self.lr >= 0:
            problems.append("lr must be >= 0")
        if self.optimizer not in ("sgd", "sgd_momentum", "adam"):
            problems.append(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in LOSSES:
            problems.append(f"unknown loss {self.loss!r}")
        if self.checkpoint_interval < 0 or self.val_every_epochs < 0:
            problems.append("intervals must be >= 0")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- training

@dataclass
class Sample:
    image: np.ndarray  # [C, S...], already normalized
    labels: np.ndarray  # [S...]


def train_step(net: Network, batch: Sequence[Sample], optimizer: Optimizer, loss_name: str = "dice_plus_ce",
               step_index: int = 0) -> float:
    """One forward/backward/update over ``batch``; returns the mean loss."""
    loss_fn = LOSSES[loss_name]
    params = net.parameters()
    tape = GradTape(params)
    tape.zero()
    total = 0.0
    for s in batch:
        probs = forward(net, Tensor(np.asarray(s.image, dtype=net.dtype)))
        loss = loss_fn(probs, s.labels)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss {value} at step {step_index}")
        backward(loss * (1.0 / len(batch)), tape)
        total += value
    optimizer.step([tape.grad(p) for p in params])
    return total / len(batch)


@dataclass
class History:
    losses: list = field(default_factory=list)  # (step, loss)
    val: list = field(default_factory=list)  # (step, epoch, wt, tc, et)

    def to_csv(self) -> str:
        val_at = {v[0]: v for v in self.val}
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss", "val_dice_wt", "val_dice_tc", "val_dice_et"])
        for step, loss in self.losses:
            v = val_at.get(step)
            w.writerow([step, repr(loss)] + ([repr(x) for x in v[2:]] if v else ["", "", ""]))
        return buf.getvalue()


def mean_dice(net: Network, samples: Sequence[Sample]) -> tuple[float, float, float]:
    scores = []
    for s in samples:
        with no_grad():
            probs = forward(net, Tensor(np.asarray(s.image, dtype=net.dtype)))
        rep = evaluate(argmax_labels(probs.data), s.labels)
        scores.append([rep["WT"].dice, rep["TC"].dice, rep["ET"].dice])
    return tuple(float(x) for x in np.mean(scores, axis=0))


def fit(net: Network, dataset: Sequence[Sample], cfg: TrainConfig, val: Optional[Sequence[Sample]] = None,
        resume: Optional["Checkpoint"] = None, log: Optional[Callable[[str], None]] = None):
    """Train ``net`` in place.  Returns ``(final Checkpoint, History)``.

    Batches are drawn without replacement per step from a seeded generator
    whose state is stored in every checkpoint, so resuming continues the
    exact sample sequence.
    """
    cfg.validate()
    if not dataset:
        raise ValueError("fit needs a non-empty dataset")
    optimizer = make_optimizer(cfg.optimizer, net.parameters(), cfg)
    rng = np.random.default_rng(cfg.seed)
    start = 0
    if resume is not None:
        resume.restore_into(net, optimizer)
        rng.bit_generator.state = resume.rng_state
        start = resume.step
    history = History()
    steps_per_epoch = max(1, math.ceil(len(dataset) / cfg.batch_size))
    k = min(cfg.batch_size, len(dataset))
    for step in range(start, cfg.steps):
        idx = rng.choice(len(dataset), size=k, replace=False)
        loss = train_step(net, [dataset[i] for i in idx], optimizer, cfg.loss, step)
        history.losses.append((step + 1, loss))
        if log is not None:
            log(f"step {step + 1} loss {loss:.6f}")
        epoch_done = (step + 1) % steps_per_epoch == 0
        if val and cfg.val_every_epochs and epoch_done and ((step + 1) // steps_per_epoch) % cfg.val_every_epochs == 0:
            wt, tc, et = mean_dice(net, val)
            history.val.append((step + 1, (step + 1) // steps_per_epoch, wt, tc, et))
        if cfg.checkpoint_path and cfg.checkpoint_interval and (step + 1) % cfg.checkpoint_interval == 0:
            save_checkpoint(net, cfg.checkpoint_path, step + 1, rng.bit_generator.state, optimizer)
    final_step = max(start, cfg.steps)
    ckpt = Checkpoint.capture(net, final_step, rng.bit_generator.state, optimizer)
    return ckpt, history


# ------------------------------------------------------------ checkpoints

@dataclass
class Checkpoint:
    config: NetworkConfig
    params: list  # (name, float32 array)
    step: int = 0
    rng_state: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)  # state_dict() plus "arrays": {slot: [arrays]}
    version: int = CHECKPOINT_VERSION

    @classmethod
    def capture(cls, net: Network, step: int = 0, rng_state: Optional[dict] = None,
                optimizer: Optional[Optimizer] = None) -> "Checkpoint":
        params = [(n, np.array(p.data, dtype="<f4")) for n, p in net.named_parameters()]
        opt = {}
        if optimizer is not None:
            opt = dict(optimizer.state_dict())
            opt["arrays"] = {s: [np.array(a, dtype="<f4") for a in optimizer.state[s]] for s in optimizer.slots}
        return cls(NetworkConfig(**asdict(net.cfg)), params, step, dict(rng_state or {}), opt)

    def to_network(self) -> Network:
        net = build(self.config)
        self.restore_into(net)
        return net

    def restore_into(self, net: Network, optimizer: Optional[Optimizer] = None) -> None:
        if net.cfg.digest() != self.config.digest():
            raise ConfigMismatchError("checkpoint config hash does not match the target network")
        named = net.named_parameters()
        if [n for n, _ in named] != [n for n, _ in self.params]:
            raise ConfigMismatchError("parameter names differ from the target network")
        for (_, p), (name, arr) in zip(named, self.params):
            if arr.shape != p.shape:
                raise ConfigMismatchError(f"parameter {name}: checkpoint {arr.shape} vs network {p.shape}")
            p.data[...] = arr
        if optimizer is not None and self.optimizer:
            if self.optimizer.get("name") != optimizer.name:
                raise ConfigMismatchError(
                    f"checkpoint optimizer {self.optimizer.get('name')!r} != {optimizer.name!r}")
            optimizer.load_state(int(self.optimizer["t"]), self.optimizer.get("arrays", {}))


def _lp(b: bytes) -> bytes:
    return struct.pack("<I", len(b)) + b


def encode_checkpoint(ck: Checkpoint) -> bytes:
    cfg_json = ck.config.canonical_json().encode()
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<I", ck.version)
    out += _lp(cfg_json)
    out += ck.config.digest()
    out += struct.pack("<Q", ck.step)
    out += _lp(json.dumps(ck.rng_state, sort_keys=True).encode())
    out += struct.pack("<I", len(ck.params))
    for name, arr in ck.params:
        nb = name.encode()
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    opt_meta = {k: v for k, v in ck.optimizer.items() if k != "arrays"}
    out += _lp(json.dumps(opt_meta, sort_keys=True).encode())
    arrays = ck.optimizer.get("arrays", {})
    for slot in opt_meta.get("slots", []):
        for a in arrays[slot]:
            out += np.ascontiguousarray(a, dtype="<f4").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptCheckpointError(f"truncated checkpoint at byte {self.pos} (need {n} more)")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def lp(self) -> bytes:
        (n,) = self.unpack("<I")
        return self.take(n)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError("not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, expected {CHECKPOINT_VERSION}")
    cfg_json = r.lp()
    digest = r.take(32)
    try:
        cfg = NetworkConfig.from_dict(json.loads(cfg_json))
    except (ValueError, TypeError) as exc:
        raise ConfigMismatchError(f"unreadable network config: {exc}") from exc
    if cfg.digest() != digest or cfg.canonical_json().encode() != cfg_json:
        raise ConfigMismatchError("stored config does not match its hash")
    (step,) = r.unpack("<Q")
    try:
        rng_state = json.loads(r.lp())
    except ValueError as exc:
        raise CorruptCheckpointError("unreadable RNG state") from exc
    (count,) = r.unpack("<I")
    params = []
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        n = int(np.prod(dims)) if rank else 1
        params.append((name, np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims).copy()))
    try:
        opt = json.loads(r.lp())
    except ValueError as exc:
        raise CorruptCheckpointError("unreadable optimizer state") from exc
    if opt:
        opt["arrays"] = {}
        for slot in opt.get("slots", []):
            opt["arrays"][slot] = [np.frombuffer(r.take(4 * a.size), dtype="<f4").reshape(a.shape).copy()
                                   for _, a in params]
    body_end = r.pos
    (crc,) = r.unpack("<I")
    if r.pos != len(buf):
        raise CorruptCheckpointError(f"{len(buf) - r.pos} trailing bytes after checkpoint")
    if zlib.crc32(buf[:body_end]) != crc:
        raise CorruptCheckpointError("checksum mismatch")
    return Checkpoint(cfg, params, step, rng_state, opt, version)


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=".ckpt-", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_checkpoint(ck: Checkpoint, path) -> None:
    _atomic_write(path, encode_checkpoint(ck))


def save_checkpoint(net: Network, path, step: int = 0, rng_state: Optional[dict] = None,
                    optimizer: Optional[Optimizer] = None) -> Checkpoint:
    ck = Checkpoint.capture(net, step, rng_state, optimizer)
    write_checkpoint(ck, path)
    return ck


def read_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        return decode_checkpoint(f.read())


def load_checkpoint(path, expected: Optional[NetworkConfig] = None) -> Network:
    """Rebuild the network stored at ``path``.

    With ``expected``, a checkpoint for a different architecture is rejected.
    """
    ck = read_checkpoint(path)
    if expected is not None and expected.digest() != ck.config.digest():
        raise ConfigMismatchError("checkpoint was written for a different network config")
    return ck.to_network()
