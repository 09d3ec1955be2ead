"""Finite-difference verification of every building block and a minimal network.

Each registered component builds its own small float64 parameters and inputs
from a seeded generator and exposes a scalar objective.  Block objectives are
fixed random projections of the block output (so no gradient is trivially
zero); the network objective is the default training loss.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .blocks import (
    GroupWeightParams,
    LayeredAttentionParams,
    ResidualDenseParams,
    SEParams,
    StackedConvParams,
    attention_fuse,
    group_weights,
    layered_attention,
    residual_dense_block,
    se_block,
    stacked_convolution,
)
from .network import NetworkConfig, build, forward
from .tensorcore import ConvParams, Tensor, grad_check, mul, reduce_sum
from .train import dice_plus_ce_loss

TOLERANCE = 1e-4


@dataclass
class ComponentResult:
    name: str
    max_rel_error: float
    passed: bool


def _projection(rng, t: Tensor):
    R = Tensor(rng.normal(size=t.shape))
    return reduce_sum(mul(t, R))


def _input(rng, shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _residual_dense(rng, rank):
    x = _input(rng, (2,) + (4,) * rank)
    p = ResidualDenseParams.init(rng, 2, 3, rank=rank, stride=1, residual_c1="add")
    R = Tensor(rng.normal(size=residual_dense_block(x, p).shape))
    params = [x] + [t for _, t in p.named_parameters()]
    return (lambda: reduce_sum(mul(residual_dense_block(x, p), R))), params


def _stacked_conv(rng, rank):
    x = _input(rng, (2,) + (4,) * rank)
    p = StackedConvParams.init(rng, 2, 2, rank)
    R = Tensor(rng.normal(size=x.shape))
    params = [x] + [t for _, t in p.named_parameters()]
    return (lambda: reduce_sum(mul(stacked_convolution(x, p), R))), params


def _groups(rng, rank):
    # three groups at two resolutions and two widths, as in a small encoder
    return [_input(rng, (4,) + (2,) * rank), _input(rng, (2,) + (4,) * rank), _input(rng, (2,) + (4,) * rank)]


def _layered_attention(rng, rank):
    M = _groups(rng, rank)
    p = LayeredAttentionParams.init(rng, [m.shape[0] for m in M], 4, rank, se_ratio=2)
    Rs = [Tensor(rng.normal(size=m.shape)) for m in M]

    def fn():
        A = layered_attention(*M, p)
        total = reduce_sum(mul(A[0], Rs[0]))
        for a, r in zip(A[1:], Rs[1:]):
            total = total + reduce_sum(mul(a, r))
        return total

    params = M + [t for pair in p.atrous for cp in pair for t in cp.parameters()]
    return fn, params


def _group_weights(rng, rank):
    A = _groups(rng, rank)
    proj = [ConvParams.init(rng, a.shape[0], 3, 1, rank) for a in A]
    g = GroupWeightParams.init(rng, 9, 4)
    r = Tensor(rng.normal(size=3))
    params = A + [t for cp in proj for t in cp.parameters()] + [g.W1, g.B1, g.W2, g.B2]
    return (lambda: reduce_sum(mul(group_weights(*A, g, proj), r))), params


def _se(rng, rank):
    M = _input(rng, (4,) + (3,) * rank)
    p = SEParams.init(rng, 4, 2)
    R = Tensor(rng.normal(size=M.shape))
    return (lambda: reduce_sum(mul(se_block(M, p), R))), [M, p.W1, p.B1, p.W2, p.B2]


def _fusion(rng, rank):
    A = _groups(rng, rank)
    proj = [ConvParams.init(rng, a.shape[0], 4, 1, rank) for a in A]
    se = [SEParams.init(rng, 4, 2) for _ in range(3)]
    G = Tensor(rng.dirichlet(np.ones(3)), requires_grad=True)
    R = Tensor(rng.normal(size=(4,) + (4,) * rank))
    params = A + [G] + [t for cp in proj for t in cp.parameters()] + [t for s in se for _, t in s.named_parameters()]
    return (lambda: reduce_sum(mul(attention_fuse(*A, G, se, proj), R))), params


def _network(rng, rank):
    cfg = NetworkConfig(spatial_rank=rank, levels=2, base_width=2, se_ratio=2, dtype="float64",
                        seed=int(rng.integers(2**31)))
    net = build(cfg)
    x = Tensor(rng.normal(size=(4,) + (8,) * rank))
    labels = rng.integers(0, 4, size=(8,) * rank)
    return (lambda: dice_plus_ce_loss(forward(net, x), labels)), net.parameters()


REGISTRY: dict[str, Callable] = {
    "residual_dense": _residual_dense,
    "stacked_conv": _stacked_conv,
    "layered_attention": _layered_attention,
    "group_weights": _group_weights,
    "se": _se,
    "fusion": _fusion,
    "network": _network,
}


def _corrupt(grads: list) -> list:
    out = [g.copy() for g in grads]
    flat = out[0].reshape(-1)
    flat[0] = flat[0] * 1.5 + 1.0
    return out


def check_component(name: str, seed: int = 0, rank: int = 3, fault: bool = False) -> ComponentResult:
    rng = np.random.default_rng(seed)
    fn, params = REGISTRY[name](rng, rank)
    res = grad_check(fn, params, eps=1e-5, analytic_hook=_corrupt if fault else None)
    return ComponentResult(name, res.max_rel_error, res.max_rel_error < TOLERANCE)


def run_suite(seed: int = 0, rank: int = 3, faults: Optional[set] = None,
              log: Optional[Callable[[str], None]] = None) -> list[ComponentResult]:
    faults = faults or set()
    results = []
    for name in REGISTRY:
        r = check_component(name, seed, rank, name in faults)
        if log is not None:
            log(f"{name:<18} max_rel_error={r.max_rel_error:.3e}  {'ok' if r.passed else 'FAIL'}")
        results.append(r)
    return results
