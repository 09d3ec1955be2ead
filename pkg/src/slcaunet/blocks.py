"""SLCA-UNet building blocks.

* residual dense block: parallel strided convolutions of one input, summed
* stacked convolution: conv-relu chain on the skip path, stages concatenated
  and projected back to the skip width
* layered attention: per feature group, two atrous convolutions summed
* group weights: pooled descriptor -> dense -> relu -> dense -> softmax
* SE block: squeeze-and-excitation channel gating
* attention fusion: SE-gated groups combined with the group weights
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .tensorcore import (
    ConvParams,
    ShapeError,
    Tensor,
    concat_channels,
    conv,
    dense,
    eltwise_add,
    global_avg_pool,
    init_dense,
    reduce_sum,
    reshape,
    resample,
    softmax,
)


def _same_geometry(a: ConvParams, b: ConvParams) -> bool:
    return (a.kernels.shape == b.kernels.shape and a.stride == b.stride
            and a.dilation == b.dilation and a.padding == b.padding)


@dataclass
class ResidualDenseParams:
    """Three parallel convolutions θ1..θ3 sharing stride s0.

    The output is ``c2 + c3``.  ``theta1`` is only present when the optional
    c1 path is switched on (``residual_c1="add"``), in which case it is added
    as well.
    """

    theta2: ConvParams
    theta3: ConvParams
    theta1: Optional[ConvParams] = None
    activation: str = "relu"

    def __post_init__(self):
        if not _same_geometry(self.theta2, self.theta3):
            raise ShapeError(
                f"theta2 {list(self.theta2.kernels.shape)}/s{self.theta2.stride} and theta3 "
                f"{list(self.theta3.kernels.shape)}/s{self.theta3.stride} must produce identical shapes"
            )
        if self.theta1 is not None and not _same_geometry(self.theta1, self.theta2):
            raise ShapeError("theta1 must match theta2/theta3 geometry")

    @property
    def stride(self) -> int:
        return self.theta2.stride

    @classmethod
    def init(cls, rng, c_in: int, c_out: int, rank: int = 3, stride: int = 1,
             residual_c1: str = "off", dtype=np.float64) -> "ResidualDenseParams":
        if residual_c1 not in ("off", "add"):
            raise ValueError(f"residual_c1 must be 'off' or 'add', got {residual_c1!r}")
        theta1 = ConvParams.init(rng, c_in, c_out, 3, rank, stride, dtype=dtype) if residual_c1 == "add" else None
        theta2 = ConvParams.init(rng, c_in, c_out, 3, rank, stride, dtype=dtype)
        theta3 = ConvParams.init(rng, c_in, c_out, 3, rank, stride, dtype=dtype)
        return cls(theta2, theta3, theta1)

    def named_parameters(self, prefix: str = ""):
        for name in ("theta1", "theta2", "theta3"):
            cp = getattr(self, name)
            if cp is not None:
                yield f"{prefix}{name}.kernels", cp.kernels
                yield f"{prefix}{name}.bias", cp.bias


def residual_dense_block(x: Tensor, p: ResidualDenseParams) -> Tensor:
    branches = [p.theta2, p.theta3] + ([p.theta1] if p.theta1 is not None else [])
    # the branches share geometry, so they run as one convolution with stacked kernels
    fused = ConvParams(concat_channels([b.kernels for b in branches]), concat_channels([b.bias for b in branches]),
                       p.theta2.stride, p.theta2.dilation, p.theta2.padding)
    y = conv(x, fused, p.activation)
    k = p.theta2.out_channels
    return reduce_sum(reshape(y, (len(branches), k) + y.shape[1:]), axis=0)


@dataclass
class StackedConvParams:
    stages: list[ConvParams]
    projection: ConvParams

    def __post_init__(self):
        if not self.stages:
            raise ValueError("stacked convolution needs depth >= 1")
        width = self.stages[0].in_channels
        for st in self.stages:
            if st.stride != 1 or st.padding != "SAME" or st.in_channels != width or st.out_channels != width:
                raise ShapeError("stacked stages must be width-preserving SAME stride-1 convolutions")
        if self.projection.size != 1 or self.projection.in_channels != width * len(self.stages):
            raise ShapeError("projection must be a 1x1 conv from depth*width channels")

    @property
    def depth(self) -> int:
        return len(self.stages)

    @classmethod
    def init(cls, rng, width: int, depth: int = 2, rank: int = 3, dtype=np.float64) -> "StackedConvParams":
        if depth < 1:
            raise ValueError("stacked convolution needs depth >= 1")
        stages = [ConvParams.init(rng, width, width, 3, rank, dtype=dtype) for _ in range(depth)]
        proj = ConvParams.init(rng, width * depth, width, 1, rank, dtype=dtype)
        return cls(stages, proj)

    def named_parameters(self, prefix: str = ""):
        for j, st in enumerate(self.stages, start=1):
            yield f"{prefix}stage{j}.kernels", st.kernels
            yield f"{prefix}stage{j}.bias", st.bias
        yield f"{prefix}proj.kernels", self.projection.kernels
        yield f"{prefix}proj.bias", self.projection.bias


def stacked_convolution(x: Tensor, p: StackedConvParams) -> Tensor:
    """k conv-relu stages; all stage outputs concatenated and 1x1-projected."""
    h = x
    outs = []
    for st in p.stages:
        h = conv(h, st, "relu")
        outs.append(h)
    return conv(concat_channels(outs), p.projection, "none")


@dataclass
class SEParams:
    W1: Tensor
    B1: Tensor
    W2: Tensor
    B2: Tensor

    def __post_init__(self):
        K, hidden = self.W1.shape
        if self.W2.shape != (hidden, K) or self.B1.shape != (hidden,) or self.B2.shape != (K,):
            raise ShapeError("SE dense shapes must be [K, K/rho], [K/rho], [K/rho, K], [K]")

    @property
    def channels(self) -> int:
        return self.W1.shape[0]

    @property
    def ratio(self) -> int:
        return self.W1.shape[0] // self.W1.shape[1]

    @classmethod
    def init(cls, rng, channels: int, ratio: int = 4, dtype=np.float64) -> "SEParams":
        if ratio < 1 or channels % ratio:
            raise ValueError(f"SE reduction ratio {ratio} must divide channel count {channels}")
        W1, B1 = init_dense(rng, channels, channels // ratio, dtype)
        W2, B2 = init_dense(rng, channels // ratio, channels, dtype)
        return cls(W1, B1, W2, B2)

    def named_parameters(self, prefix: str = ""):
        for name in ("W1", "B1", "W2", "B2"):
            yield f"{prefix}{name}", getattr(self, name)


def se_excitation(M: Tensor, p: SEParams) -> Tensor:
    """Per-channel gates in (0, 1)."""
    if M.shape[0] != p.channels:
        raise ShapeError(f"SE block expects {p.channels} channels, got {M.shape[0]}")
    c = global_avg_pool(M)
    return dense(dense(c, p.W1, p.B1, "relu"), p.W2, p.B2, "sigmoid")


def se_block(M: Tensor, p: SEParams) -> Tensor:
    e = se_excitation(M, p)
    return M * e.reshape((-1,) + (1,) * (M.ndim - 1))


@dataclass
class GroupWeightParams:
    """Dense layers mapping the pooled group descriptor to three logits."""

    W1: Tensor
    B1: Tensor
    W2: Tensor
    B2: Tensor

    def __post_init__(self):
        n, hidden = self.W1.shape
        if self.W2.shape != (hidden, 3) or self.B1.shape != (hidden,) or self.B2.shape != (3,):
            raise ShapeError("group weight dense output length must be 3")

    @classmethod
    def init(cls, rng, descriptor: int, hidden: int, dtype=np.float64) -> "GroupWeightParams":
        W1, B1 = init_dense(rng, descriptor, hidden, dtype)
        W2, B2 = init_dense(rng, hidden, 3, dtype)
        return cls(W1, B1, W2, B2)

    def named_parameters(self, prefix: str = ""):
        for name in ("W1", "B1", "W2", "B2"):
            yield f"{prefix}{name}", getattr(self, name)


@dataclass
class LayeredAttentionParams:
    """Everything the layered + channel attention unit owns.

    ``atrous[i]`` is the (K1, K2) pair for group i; ``projections[i]`` maps
    group i to the common width shared by the group weights and SE blocks.
    """

    atrous: list[tuple[ConvParams, ConvParams]]
    projections: list[ConvParams]
    group: GroupWeightParams
    se: list[SEParams] = field(default_factory=list)
    align_mode: str = "nearest"

    def __post_init__(self):
        if len(self.atrous) != 3 or len(self.projections) != 3 or len(self.se) != 3:
            raise ValueError("layered attention works on exactly three feature groups")
        for k1, k2 in self.atrous:
            if k1.kernels.shape != k2.kernels.shape or k1.stride != k2.stride or k1.padding != k2.padding:
                raise ShapeError("the two atrous convolutions of a group must produce identical shapes")
            if k1.stride != 1 or k1.padding != "SAME" or k1.in_channels != k1.out_channels:
                raise ShapeError("atrous convolutions must be SAME, stride 1, width-preserving")
        width = self.projections[0].out_channels
        if any(pr.out_channels != width for pr in self.projections):
            raise ShapeError("projections must share one output width")
        if any(se.channels != width for se in self.se):
            raise ShapeError("SE blocks must match the common width")
        if self.group.W1.shape[0] != 3 * width:
            raise ShapeError("group descriptor length must be 3 * common width")

    @property
    def width(self) -> int:
        return self.projections[0].out_channels

    @classmethod
    def init(cls, rng, widths: Sequence[int], common: int, rank: int = 3, dilations=(1, 2),
             se_ratio: int = 4, hidden: Optional[int] = None, align_mode: str = "nearest",
             dtype=np.float64) -> "LayeredAttentionParams":
        r1, r2 = dilations
        atrous = [(ConvParams.init(rng, w, w, 3, rank, dilation=r1, dtype=dtype),
                   ConvParams.init(rng, w, w, 3, rank, dilation=r2, dtype=dtype)) for w in widths]
        projections = [ConvParams.init(rng, w, common, 1, rank, dtype=dtype) for w in widths]
        hidden = hidden or group_hidden_width(common, se_ratio)
        group = GroupWeightParams.init(rng, 3 * common, hidden, dtype)
        se = [SEParams.init(rng, common, se_ratio, dtype) for _ in range(3)]
        return cls(atrous, projections, group, se, align_mode)

    def named_parameters(self, prefix: str = ""):
        for i, (k1, k2) in enumerate(self.atrous, start=1):
            yield f"{prefix}level{i}.atrous1.kernels", k1.kernels
            yield f"{prefix}level{i}.atrous1.bias", k1.bias
            yield f"{prefix}level{i}.atrous2.kernels", k2.kernels
            yield f"{prefix}level{i}.atrous2.bias", k2.bias
        for i, pr in enumerate(self.projections, start=1):
            yield f"{prefix}proj{i}.kernels", pr.kernels
            yield f"{prefix}proj{i}.bias", pr.bias
        yield from self.group.named_parameters(f"{prefix}group.")
        for i, se in enumerate(self.se, start=1):
            yield from se.named_parameters(f"{prefix}se{i}.")


def group_hidden_width(common: int, se_ratio: int) -> int:
    return max(1, (3 * common) // se_ratio)


def layered_attention(M1: Tensor, M2: Tensor, M3: Tensor, p: LayeredAttentionParams):
    """A_i = conv(M_i, K1_i, dilation r1) + conv(M_i, K2_i, dilation r2)."""
    return tuple(eltwise_add(conv(M, k1), conv(M, k2)) for M, (k1, k2) in zip((M1, M2, M3), p.atrous))


def finest_shape(tensors: Sequence[Tensor]) -> tuple:
    return max((t.shape[1:] for t in tensors), key=lambda s: (int(np.prod(s)), s))


def align_groups(groups: Sequence[Tensor], projections: Optional[Sequence[ConvParams]] = None,
                 mode: str = "nearest") -> list[Tensor]:
    """Project each group to the common width, then resample to the finest shape.

    1x1 projection commutes with resampling, so projecting first is exact and cheaper.
    """
    target = finest_shape(groups)
    out = []
    for i, A in enumerate(groups):
        if projections is not None:
            A = conv(A, projections[i])
        out.append(resample(A, target, mode))
    widths = {t.shape[0] for t in out}
    if len(widths) != 1:
        raise ShapeError(f"groups have different widths {sorted(widths)}; pass projections")
    return out


def group_weights(A1: Tensor, A2: Tensor, A3: Tensor, p: GroupWeightParams,
                  projections: Optional[Sequence[ConvParams]] = None, mode: str = "nearest") -> Tensor:
    """Softmax weights over the three groups; strictly positive, summing to 1."""
    R = align_groups((A1, A2, A3), projections, mode)
    I = global_avg_pool(concat_channels(R))
    O = dense(dense(I, p.W1, p.B1, "relu"), p.W2, p.B2, "none")
    return softmax(O)


def attention_fuse(A1: Tensor, A2: Tensor, A3: Tensor, G: Tensor, se_params: Sequence[SEParams],
                   projections: Optional[Sequence[ConvParams]] = None, mode: str = "nearest") -> Tensor:
    """sum_i G_i * SE_i(aligned A_i)."""
    R = align_groups((A1, A2, A3), projections, mode)
    out = None
    for i, (A, se) in enumerate(zip(R, se_params)):
        term = se_block(A, se) * G[i]
        out = term if out is None else out + term
    return out


def layered_channel_attention(M1: Tensor, M2: Tensor, M3: Tensor, p: LayeredAttentionParams):
    """Full attention unit; returns (fused map at the finest group shape, G)."""
    A = layered_attention(M1, M2, M3, p)
    R = align_groups(A, p.projections, p.align_mode)
    G = group_weights(*R, p.group)
    return attention_fuse(*R, G, p.se), G
