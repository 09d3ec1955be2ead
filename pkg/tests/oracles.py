"""Independent reference implementations written as plain loops.

Nothing here imports the package under test; every routine is the most
literal reading of the definition it checks.
"""
import itertools
import math

import numpy as np


def conv_oracle(x, w, b, stride=1, dilation=1, padding="SAME"):
    """Direct correlation, one output element at a time."""
    C = x.shape[0]
    K, _, m = w.shape[:3]
    rank = x.ndim - 1
    margin = ((m - 1) * dilation) // 2 if padding == "SAME" else 0
    extent = (m - 1) * dilation + 1
    out = [(n + 2 * margin - extent) // stride + 1 for n in x.shape[1:]]
    y = np.zeros([K] + out)
    for k in range(K):
        for o in itertools.product(*[range(n) for n in out]):
            acc = b[k]
            for c in range(C):
                for t in itertools.product(range(m), repeat=rank):
                    pos = [oi * stride + ti * dilation - margin for oi, ti in zip(o, t)]
                    if all(0 <= p < n for p, n in zip(pos, x.shape[1:])):
                        acc += w[(k, c) + t] * x[(c,) + tuple(pos)]
            y[(k,) + o] = acc
    return y


def gap_oracle(x):
    K = x.shape[0]
    out = np.zeros(K)
    for k in range(K):
        total, n = 0.0, 0
        for idx in itertools.product(*[range(s) for s in x.shape[1:]]):
            total += x[(k,) + idx]
            n += 1
        out[k] = total / n
    return out


def dense_oracle(v, W, B):
    n, k = W.shape
    out = np.zeros(k)
    for j in range(k):
        acc = B[j]
        for i in range(n):
            acc += W[i, j] * v[i]
        out[j] = acc
    return out


def concat_oracle(xs):
    total = sum(x.shape[0] for x in xs)
    out = np.zeros((total,) + xs[0].shape[1:])
    c = 0
    for x in xs:
        for k in range(x.shape[0]):
            for idx in itertools.product(*[range(s) for s in x.shape[1:]]):
                out[(c,) + idx] = x[(k,) + idx]
            c += 1
    return out


def add_oracle(a, b):
    out = np.zeros(a.shape)
    for idx in itertools.product(*[range(s) for s in a.shape]):
        out[idx] = a[idx] + b[idx]
    return out


def softmax_oracle(v):
    m = max(v)
    e = [math.exp(t - m) for t in v]
    s = sum(e)
    return np.array([t / s for t in e])


def surface_oracle(mask):
    """Foreground voxels with at least one 6-neighbour outside the mask or the grid."""
    pts = []
    shape = mask.shape
    for idx in itertools.product(*[range(s) for s in shape]):
        if not mask[idx]:
            continue
        border = False
        for ax in range(len(shape)):
            for d in (-1, 1):
                j = list(idx)
                j[ax] += d
                if not 0 <= j[ax] < shape[ax] or not mask[tuple(j)]:
                    border = True
        if border:
            pts.append(idx)
    return pts


def percentile_oracle(values, q):
    """Linear interpolation between closest ranks (the usual default)."""
    s = sorted(values)
    pos = (len(s) - 1) * q / 100.0
    lo = math.floor(pos)
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (s[hi] - s[lo]) * (pos - lo)


def hd95_oracle(gt_mask, pred_mask, spacing):
    T = surface_oracle(gt_mask)
    P = surface_oracle(pred_mask)
    if not T or not P:
        return None

    def dist(a, b):
        return math.sqrt(sum(((ai - bi) * s) ** 2 for ai, bi, s in zip(a, b, spacing)))

    d_tp = [min(dist(t, p) for p in P) for t in T]
    d_pt = [min(dist(p, t) for t in T) for p in P]
    return max(percentile_oracle(d_tp, 95), percentile_oracle(d_pt, 95))


def counts_oracle(pred_mask, gt_mask):
    tp = fp = fn = tn = 0
    for p, g in zip(pred_mask.reshape(-1).tolist(), gt_mask.reshape(-1).tolist()):
        if p and g:
            tp += 1
        elif p:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


REGION_MEMBERS = {"WT": (1, 2, 3), "TC": (1, 3), "ET": (3,)}


def region_oracle(labels, region):
    members = REGION_MEMBERS[region]
    out = np.zeros(labels.shape, dtype=bool)
    for idx in itertools.product(*[range(s) for s in labels.shape]):
        out[idx] = int(labels[idx]) in members
    return out
