from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .volumes import MultiModalVolume


def normalize(v: MultiModalVolume) -> MultiModalVolume:
    """Per-channel z-score over the nonzero voxels; zeros stay zero.

    A channel that is constant over its support becomes all zeros.  Output is
    float64.
    """
    data = np.asarray(v.data, dtype=np.float64)
    out = np.zeros_like(data)
    for c in range(data.shape[0]):
        chan = data[c]
        support = chan != 0
        if not support.any():
            continue
        vals = chan[support]
        mu = vals.mean()
        sd = vals.std()
        if sd == 0 or not np.isfinite(sd):
            continue
        out[c][support] = (vals - mu) / sd
    return MultiModalVolume(out, v.spacing)


def split(case_ids: Sequence, ratios=(0.6, 0.2, 0.2), seed: int = 0):
    """Seeded shuffle, then (train, val, test) partition.

    Validation and test sizes are ``floor(ratio * n)``; the remainder goes to
    train.  285 ids at (0.6, 0.2, 0.2) give 171/57/57.
    """
    ids = list(case_ids)
    if not ids:
        raise ValueError("split needs at least one case id")
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = len(ids)
    n_val = math.floor(ratios[1] * n + 1e-9)
    n_test = math.floor(ratios[2] * n + 1e-9)
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    n_train = n - n_val - n_test
    return shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:]
