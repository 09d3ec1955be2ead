from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MODALITIES = ("FLAIR", "T1", "T1ce", "T2")

# internal label scheme
BACKGROUND, NECROSIS, EDEMA, ENHANCING = 0, 1, 2, 3
BRATS_TO_INTERNAL = {0: 0, 1: 1, 2: 2, 4: 3}


@dataclass
class MultiModalVolume:
    """Channel-first image ``[C, S...]`` (float32) with per-axis spacing in mm."""

    data: np.ndarray
    spacing: tuple

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim < 2:
            raise ValueError("volume must be [C, S...]")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != self.data.ndim - 1:
            raise ValueError(f"spacing {self.spacing} does not match spatial rank {self.data.ndim - 1}")
        if min(self.spacing) <= 0:
            raise ValueError("spacing must be positive")

    @property
    def shape(self) -> tuple:
        return self.data.shape[1:]


@dataclass
class LabelVolume:
    """Integer label map (uint8) with values in {0, 1, 2, 3}."""

    labels: np.ndarray
    spacing: tuple

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != self.labels.ndim:
            raise ValueError(f"spacing {self.spacing} does not match rank {self.labels.ndim}")
        if min(self.spacing) <= 0:
            raise ValueError("spacing must be positive")

    @property
    def shape(self) -> tuple:
        return self.labels.shape


def remap_labels(labels: np.ndarray, mapping: dict = BRATS_TO_INTERNAL) -> np.ndarray:
    """Translate label codes (default: BraTS 0/1/2/4 -> 0/1/2/3)."""
    labels = np.asarray(labels)
    out = np.zeros(labels.shape, dtype=np.uint8)
    seen = np.zeros(labels.shape, dtype=bool)
    for src, dst in mapping.items():
        hit = labels == src
        out[hit] = dst
        seen |= hit
    if not seen.all():
        bad = np.unique(labels[~seen])
        raise ValueError(f"labels {bad.tolist()} have no mapping")
    return out
