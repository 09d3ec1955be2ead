"""SLCA-UNet encoder-decoder assembly, inference and parameter accounting.

Dataflow for ``L`` levels with widths ``w_l = base_width * 2**(l-1)``::

    e_1 = RDB(x, s=1)            e_l = RDB(e_{l-1}, s=2)   l = 2..L
    M_1, M_2, M_3 = e_L, e_{L-1}, e_{L-2}  (indices clamped at 1)
    F, G = layered_channel_attention(M_1, M_2, M_3)      # at M_3's resolution
    d_L = e_L + linear_resample(F, shape(e_L))            # bottleneck
    d_l = conv_relu(conv_relu(concat(up(d_{l+1}), SC_l(e_l))))   l = L-1..1
    probs = softmax_channels(conv1x1(d_1))

Parameter enumeration order (the checkpoint contract): ``enc1..encL``,
``skip1..skip{L-1}``, ``attn``, ``dec{L-1}..dec1``, ``head``; inside each
block the order of its ``named_parameters``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Iterator, Optional

import numpy as np

from .blocks import (
    LayeredAttentionParams,
    ResidualDenseParams,
    StackedConvParams,
    group_hidden_width,
    layered_channel_attention,
    residual_dense_block,
    stacked_convolution,
)
from .tensorcore import (
    ConvParams,
    ShapeError,
    Tensor,
    concat_channels,
    conv,
    eltwise_add,
    no_grad,
    resample,
    softmax,
)

MAX_WIDTH = 1024


class ConfigError(ValueError):
    """Inconsistent network configuration."""


@dataclass
class NetworkConfig:
    spatial_rank: int = 3
    in_channels: int = 4
    num_classes: int = 4
    levels: int = 4
    base_width: int = 8
    stacked_depth: int = 2
    dilations: tuple = (1, 2)
    se_ratio: int = 4
    residual_c1: str = "off"
    seed: int = 0
    dtype: str = "float32"
    upsample_mode: str = "nearest"
    align_mode: str = "nearest"

    def __post_init__(self):
        self.dilations = tuple(int(d) for d in self.dilations)

    def validate(self) -> "NetworkConfig":
        problems = []
        if self.spatial_rank not in (2, 3):
            problems.append(f"spatial_rank must be 2 or 3, got {self.spatial_rank}")
        if self.levels < 2:
            problems.append(f"levels must be >= 2, got {self.levels}")
        if self.num_classes < 2:
            problems.append(f"num_classes must be >= 2, got {self.num_classes}")
        if self.in_channels < 1:
            problems.append("in_channels must be >= 1")
        if self.base_width < 1:
            problems.append("base_width must be >= 1")
        elif self.levels >= 2 and self.bottleneck_width > MAX_WIDTH:
            problems.append(f"bottleneck width {self.bottleneck_width} exceeds budget {MAX_WIDTH}")
        if self.stacked_depth < 1:
            problems.append("stacked_depth must be >= 1")
        if len(self.dilations) != 2 or min(self.dilations) < 1:
            problems.append(f"dilations must be two rates >= 1, got {self.dilations}")
        if self.se_ratio < 1:
            problems.append("se_ratio must be >= 1")
        elif self.base_width >= 1 and self.levels >= 2 and self.bottleneck_width % self.se_ratio:
            problems.append(f"se_ratio {self.se_ratio} does not divide attention width {self.bottleneck_width}")
        if self.residual_c1 not in ("off", "add"):
            problems.append(f"residual_c1 must be 'off' or 'add', got {self.residual_c1!r}")
        if self.dtype not in ("float32", "float64"):
            problems.append(f"dtype must be float32 or float64, got {self.dtype!r}")
        for key in ("upsample_mode", "align_mode"):
            if getattr(self, key) not in ("nearest", "trilinear"):
                problems.append(f"{key} must be nearest or trilinear")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    @property
    def widths(self) -> list[int]:
        return [self.base_width * 2 ** l for l in range(self.levels)]

    @property
    def bottleneck_width(self) -> int:
        return self.base_width * 2 ** (self.levels - 1)

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels - 1)

    def attention_levels(self) -> list[int]:
        """Encoder level (1-based) feeding M_1 (high), M_2 (low), M_3 (detailed)."""
        return [max(1, self.levels - i) for i in range(3)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilations"] = list(self.dilations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> bytes:
        return hashlib.sha256(self.canonical_json().encode()).digest()


@dataclass
class DecoderParams:
    conv1: ConvParams
    conv2: ConvParams

    def named_parameters(self, prefix: str = ""):
        for name in ("conv1", "conv2"):
            cp = getattr(self, name)
            yield f"{prefix}{name}.kernels", cp.kernels
            yield f"{prefix}{name}.bias", cp.bias


@dataclass
class Network:
    cfg: NetworkConfig
    encoder: list[ResidualDenseParams]
    skips: list[StackedConvParams]
    attention: LayeredAttentionParams
    decoder: list[DecoderParams]  # decoder[l-1] serves level l
    head: ConvParams
    _named: list = field(default_factory=list, repr=False)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        if not self._named:
            named = []
            for l, enc in enumerate(self.encoder, start=1):
                named.extend(enc.named_parameters(f"enc{l}."))
            for l, sk in enumerate(self.skips, start=1):
                named.extend(sk.named_parameters(f"skip{l}."))
            named.extend(self.attention.named_parameters("attn."))
            for l in range(len(self.decoder), 0, -1):
                named.extend(self.decoder[l - 1].named_parameters(f"dec{l}."))
            named.append(("head.kernels", self.head.kernels))
            named.append(("head.bias", self.head.bias))
            self._named = named
        return self._named

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    @property
    def dtype(self):
        return np.dtype(self.cfg.dtype)

    def __call__(self, x) -> Tensor:
        return forward(self, x)


def build(cfg: NetworkConfig) -> Network:
    """Instantiate all parameters from ``cfg.seed`` in enumeration order."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    dt = np.dtype(cfg.dtype)
    rank, widths, L = cfg.spatial_rank, cfg.widths, cfg.levels

    encoder = []
    for l in range(L):
        c_in = cfg.in_channels if l == 0 else widths[l - 1]
        encoder.append(ResidualDenseParams.init(rng, c_in, widths[l], rank, stride=1 if l == 0 else 2,
                                                residual_c1=cfg.residual_c1, dtype=dt))
    skips = [StackedConvParams.init(rng, widths[l], cfg.stacked_depth, rank, dt) for l in range(L - 1)]
    attn_widths = [widths[l - 1] for l in cfg.attention_levels()]
    attention = LayeredAttentionParams.init(rng, attn_widths, cfg.bottleneck_width, rank, cfg.dilations,
                                            cfg.se_ratio, align_mode=cfg.align_mode, dtype=dt)
    decoder: list[Optional[DecoderParams]] = [None] * (L - 1)
    for l in range(L - 1, 0, -1):
        c_in = widths[l] + widths[l - 1]
        decoder[l - 1] = DecoderParams(ConvParams.init(rng, c_in, widths[l - 1], 3, rank, dtype=dt),
                                       ConvParams.init(rng, widths[l - 1], widths[l - 1], 3, rank, dtype=dt))
    head = ConvParams.init(rng, widths[0], cfg.num_classes, 1, rank, dtype=dt)
    return Network(cfg, encoder, skips, attention, decoder, head)


def check_input(net: Network, shape) -> None:
    cfg = net.cfg
    if len(shape) != cfg.spatial_rank + 1 or shape[0] != cfg.in_channels:
        raise ShapeError(
            f"expected input [{cfg.in_channels}, {', '.join(['S'] * cfg.spatial_rank)}], got {list(shape)}"
        )
    bad = [n for n in shape[1:] if n % cfg.divisor]
    if bad:
        raise ShapeError(
            f"spatial extents {list(shape[1:])} must be multiples of {cfg.divisor} (2**(levels-1))"
        )


def encode(net: Network, x: Tensor) -> list[Tensor]:
    feats = []
    h = x
    for enc in net.encoder:
        h = residual_dense_block(h, enc)
        feats.append(h)
    return feats


def forward(net: Network, x) -> Tensor:
    """Per-voxel class probabilities ``[num_classes, S...]``."""
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=net.dtype))
    check_input(net, x.shape)
    cfg = net.cfg
    feats = encode(net, x)
    M = [feats[l - 1] for l in cfg.attention_levels()]
    fused, _ = layered_channel_attention(*M, net.attention)
    d = eltwise_add(feats[-1], resample(fused, feats[-1].shape[1:], "trilinear"))
    for l in range(cfg.levels - 1, 0, -1):
        skip_in = feats[l - 1]
        up = resample(d, skip_in.shape[1:], cfg.upsample_mode)
        h = concat_channels([up, stacked_convolution(skip_in, net.skips[l - 1])])
        dp = net.decoder[l - 1]
        d = conv(conv(h, dp.conv1, "relu"), dp.conv2, "relu")
    return softmax(conv(d, net.head), axis=0)


def group_weights_of(net: Network, x) -> Tensor:
    """Group weights G produced for input ``x`` (diagnostics)."""
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=net.dtype))
    check_input(net, x.shape)
    feats = encode(net, x)
    M = [feats[l - 1] for l in net.cfg.attention_levels()]
    return layered_channel_attention(*M, net.attention)[1]


def argmax_labels(probs: np.ndarray) -> np.ndarray:
    """Per-voxel argmax over axis 0; ties go to the lower class index."""
    return np.argmax(probs, axis=0).astype(np.uint8)


def segment(net: Network, volume):
    """Label map for a MultiModalVolume (or a raw ``[C, S...]`` array)."""
    from .data import LabelVolume

    data = getattr(volume, "data", volume)
    spacing = getattr(volume, "spacing", None)
    with no_grad():
        probs = forward(net, Tensor(np.asarray(data, dtype=net.dtype)))
    labels = argmax_labels(probs.data)
    if spacing is None:
        spacing = (1.0,) * labels.ndim
    return LabelVolume(labels, tuple(spacing))


def _conv_count(c_in: int, c_out: int, size: int, rank: int) -> int:
    return c_out * c_in * size ** rank + c_out


def param_count(cfg: NetworkConfig) -> int:
    """Closed-form parameter total; equals ``build(cfg).num_parameters()``."""
    cfg.validate()
    r, w, L, k = cfg.spatial_rank, cfg.widths, cfg.levels, cfg.stacked_depth
    n_rdb = 3 if cfg.residual_c1 == "add" else 2
    total = 0
    for l in range(L):
        total += n_rdb * _conv_count(cfg.in_channels if l == 0 else w[l - 1], w[l], 3, r)
    for l in range(L - 1):
        total += k * _conv_count(w[l], w[l], 3, r) + _conv_count(k * w[l], w[l], 1, r)
    cf = cfg.bottleneck_width
    for lvl in cfg.attention_levels():
        c = w[lvl - 1]
        total += 2 * _conv_count(c, c, 3, r) + _conv_count(c, cf, 1, r)
    hidden = group_hidden_width(cf, cfg.se_ratio)
    total += 3 * cf * hidden + hidden + hidden * 3 + 3
    red = cf // cfg.se_ratio
    total += 3 * (cf * red + red + red * cf + cf)
    for l in range(L - 1):
        total += _conv_count(w[l + 1] + w[l], w[l], 3, r) + _conv_count(w[l], w[l], 3, r)
    total += _conv_count(w[0], cfg.num_classes, 1, r)
    return total
