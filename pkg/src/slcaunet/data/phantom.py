"""Synthetic multi-modal tumor phantoms.

Each tumor is three concentric, axis-aligned ellipsoids: an outer edema
shell (label 2), an enhancing shell (label 3) and a necrotic core (label 1).
Tissue intensities per modality come from a lookup table; Gaussian noise is
added inside the head ellipsoid, air stays exactly zero.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .volumes import EDEMA, ENHANCING, NECROSIS, LabelVolume, MultiModalVolume

# (FLAIR, T1, T1ce, T2)
DEFAULT_INTENSITIES = {
    "healthy": (1.0, 1.0, 1.0, 1.0),
    "edema": (2.0, 0.8, 1.0, 1.8),
    "enhancing": (1.4, 1.0, 2.4, 1.4),
    "necrosis": (0.8, 0.5, 0.6, 2.4),
}

# innermost shell wins where tumors overlap
_DEPTH_TO_LABEL = np.array([0, EDEMA, ENHANCING, NECROSIS], dtype=np.uint8)
_DEPTH_TO_TISSUE = ("healthy", "edema", "enhancing", "necrosis")


class PhantomError(ValueError):
    pass


@dataclass
class PhantomSpec:
    seed: int = 0
    extent: int = 32
    rank: int = 3
    tumor_count: int = 1
    radius_range: tuple = (6.0, 9.0)
    necrosis_fraction: float = 0.35
    enhancing_fraction: float = 0.7
    intensities: dict = field(default_factory=lambda: dict(DEFAULT_INTENSITIES))
    noise: float = 0.1
    head_fraction: float = 0.46
    spacing: float = 1.0
    max_retries: int = 100

    def __post_init__(self):
        self.radius_range = tuple(float(r) for r in self.radius_range)
        self.intensities = {k: tuple(float(x) for x in v) for k, v in self.intensities.items()}

    def validate(self, divisor: int = 1) -> "PhantomSpec":
        if self.rank not in (2, 3):
            raise PhantomError(f"rank must be 2 or 3, got {self.rank}")
        if self.extent < 1 or self.extent % divisor:
            raise PhantomError(f"extent {self.extent} must be a positive multiple of {divisor}")
        if self.tumor_count < 0:
            raise PhantomError("tumor_count must be >= 0")
        lo, hi = self.radius_range
        if not 0 < lo <= hi:
            raise PhantomError(f"bad radius range {self.radius_range}")
        if not 0 < self.necrosis_fraction < self.enhancing_fraction < 1:
            raise PhantomError("need 0 < necrosis_fraction < enhancing_fraction < 1 (nested radii)")
        missing = set(_DEPTH_TO_TISSUE) - set(self.intensities)
        if missing:
            raise PhantomError(f"intensity table lacks {sorted(missing)}")
        if any(len(v) != 4 for v in self.intensities.values()):
            raise PhantomError("each tissue needs 4 modality intensities")
        if self.noise < 0 or self.spacing <= 0:
            raise PhantomError("noise must be >= 0 and spacing > 0")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise PhantomError(f"unknown phantom keys: {sorted(unknown)}")
        return cls(**d)


def _ellipsoid_level(grid, center, axes) -> np.ndarray:
    """Normalized squared radius; <= 1 inside the ellipsoid."""
    return sum(((g - c) / a) ** 2 for g, c, a in zip(grid, center, axes))


def generate_phantom(spec: PhantomSpec) -> tuple[MultiModalVolume, LabelVolume]:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    D, rank = spec.extent, spec.rank
    shape = (D,) * rank
    grid = np.meshgrid(*[np.arange(D, dtype=np.float64) for _ in range(rank)], indexing="ij")
    mid = (D - 1) / 2.0

    head = _ellipsoid_level(grid, (mid,) * rank, (spec.head_fraction * D,) * rank) <= 1.0
    depth = np.zeros(shape, dtype=np.int8)
    for t in range(spec.tumor_count):
        for _ in range(spec.max_retries):
            radius = rng.uniform(*spec.radius_range)
            axes = radius * rng.uniform(0.8, 1.2, size=rank)
            center = rng.uniform(0, D - 1, size=rank)
            if np.all(center - axes >= 0) and np.all(center + axes <= D - 1):
                break
        else:
            raise PhantomError(f"could not place tumor {t} inside a {D}^{rank} volume "
                               f"after {spec.max_retries} tries")
        q = _ellipsoid_level(grid, center, axes)
        tumor_depth = ((q <= 1.0).astype(np.int8)
                       + (q <= spec.enhancing_fraction ** 2)
                       + (q <= spec.necrosis_fraction ** 2))
        np.maximum(depth, tumor_depth, out=depth)

    labels = _DEPTH_TO_LABEL[depth]
    tissue_table = np.array([spec.intensities[name] for name in _DEPTH_TO_TISSUE])  # [4 tissues, 4 modalities]
    inside = head | (depth > 0)
    img = np.zeros((4,) + shape, dtype=np.float64)
    for c in range(4):
        chan = tissue_table[depth, c] + spec.noise * rng.standard_normal(shape)
        img[c] = np.where(inside, chan, 0.0)
    spacing = (spec.spacing,) * rank
    return MultiModalVolume(img.astype(np.float32), spacing), LabelVolume(labels, spacing)
