"""Segmentation metrics: Dice, sensitivity, specificity and Hausdorff95.

Conventions
-----------
* Regions: WT = {1, 2, 3}, TC = {1, 3}, ET = {3}.
* Dice of two empty masks is 1.0; sensitivity/specificity with an empty
  denominator are 1.0.  Both are flagged in :class:`RegionMetrics.flags`.
* HD95 is ``max(P95(d(T->P)), P95(d(P->T)))`` over surface voxels with
  linear-interpolated percentiles; ``None`` when either surface is empty.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

REGIONS = {"WT": (1, 2, 3), "TC": (1, 3), "ET": (3,)}
REGION_ORDER = ("WT", "TC", "ET")
CSV_COLUMNS = ("case_id", "region", "dice", "sensitivity", "specificity", "hd95", "hd95_defined")


class LabelRangeError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _labels_array(labels) -> np.ndarray:
    return np.asarray(getattr(labels, "labels", labels))


def region_masks(labels) -> dict[str, np.ndarray]:
    arr = _labels_array(labels)
    bad = np.setdiff1d(np.unique(arr), [0, 1, 2, 3])
    if bad.size:
        raise LabelRangeError(f"labels outside {{0,1,2,3}}: {bad.tolist()}")
    return {name: np.isin(arr, members) for name, members in REGIONS.items()}


def confusion(pred, gt) -> ConfusionCounts:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shape mismatch: {pred.shape} vs {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


def dice(c: ConfusionCounts) -> float:
    denom = c.fn + c.fp + 2 * c.tp
    return 1.0 if denom == 0 else 2 * c.tp / denom


def sensitivity(c: ConfusionCounts) -> float:
    denom = c.tp + c.fn
    return 1.0 if denom == 0 else c.tp / denom


def specificity(c: ConfusionCounts) -> float:
    denom = c.tn + c.fp
    return 1.0 if denom == 0 else c.tn / denom


def surface_extract(mask, spacing: Optional[Sequence[float]] = None) -> np.ndarray:
    """Foreground voxels with a face-adjacent background or out-of-bounds neighbour.

    Returns an ``[n, rank]`` array of spacing-scaled coordinates.
    """
    mask = np.asarray(mask, dtype=bool)
    rank = mask.ndim
    spacing = np.ones(rank) if spacing is None else np.asarray(spacing, dtype=np.float64)
    padded = np.pad(mask, 1, constant_values=False)
    interior = np.ones_like(mask)
    core = tuple(slice(1, -1) for _ in range(rank))
    for ax in range(rank):
        for step in (-1, 1):
            sl = list(core)
            sl[ax] = slice(1 + step, padded.shape[ax] - 1 + step)
            interior &= padded[tuple(sl)]
    surface = mask & ~interior
    return np.argwhere(surface).astype(np.float64) * spacing


def directed_distances(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """For every point of A, the Euclidean distance to the nearest point of B."""
    d, _ = cKDTree(B).query(A, k=1)
    return np.asarray(d, dtype=np.float64)


def hausdorff95(T: np.ndarray, P: np.ndarray, percentile: float = 95.0) -> Optional[float]:
    """Symmetric percentile Hausdorff distance; ``percentile=100`` is the classical one.

    Returns ``None`` (undefined) when either point set is empty.
    """
    T = np.asarray(T, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    if len(T) == 0 or len(P) == 0:
        return None
    tp = np.percentile(directed_distances(T, P), percentile)
    pt = np.percentile(directed_distances(P, T), percentile)
    return float(max(tp, pt))


@dataclass
class RegionMetrics:
    dice: float
    sensitivity: float
    specificity: float
    hd95: Optional[float]
    counts: ConfusionCounts
    flags: tuple = ()

    @property
    def hd95_defined(self) -> bool:
        return self.hd95 is not None


@dataclass
class MetricsReport:
    regions: dict
    spacing: tuple
    case_id: str = ""

    def __getitem__(self, region: str) -> RegionMetrics:
        return self.regions[region]

    def rows(self) -> list[dict]:
        return [_row(self.case_id, name, self.regions[name]) for name in REGION_ORDER]


def _row(case_id, region, m: RegionMetrics) -> dict:
    return {
        "case_id": case_id,
        "region": region,
        "dice": m.dice,
        "sensitivity": m.sensitivity,
        "specificity": m.specificity,
        "hd95": "" if m.hd95 is None else m.hd95,
        "hd95_defined": int(m.hd95 is not None),
    }


def region_metrics(pred_mask, gt_mask, spacing) -> RegionMetrics:
    c = confusion(pred_mask, gt_mask)
    flags = []
    if c.tp + c.fp + c.fn == 0:
        flags.append("dice_both_empty")
    if c.tp + c.fn == 0:
        flags.append("sensitivity_empty_denominator")
    if c.tn + c.fp == 0:
        flags.append("specificity_empty_denominator")
    hd = hausdorff95(surface_extract(gt_mask, spacing), surface_extract(pred_mask, spacing))
    if hd is None:
        flags.append("hd95_undefined")
    return RegionMetrics(dice(c), sensitivity(c), specificity(c), hd, c, tuple(flags))


def evaluate(pred, gt, spacing: Optional[Sequence[float]] = None, case_id: str = "") -> MetricsReport:
    """Per-region metrics of a predicted label map against the reference."""
    p = _labels_array(pred)
    g = _labels_array(gt)
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} != reference shape {g.shape}")
    if spacing is None:
        spacing = getattr(gt, "spacing", None) or (1.0,) * g.ndim
    spacing = tuple(float(s) for s in spacing)
    pm, gm = region_masks(p), region_masks(g)
    regions = {name: region_metrics(pm[name], gm[name], spacing) for name in REGION_ORDER}
    return MetricsReport(regions, spacing, case_id)


def mean_rows(reports: Sequence[MetricsReport]) -> list[dict]:
    """One row per region averaging the case rows; HD95 over defined cases only."""
    out = []
    for name in REGION_ORDER:
        ms = [r.regions[name] for r in reports]
        hds = [m.hd95 for m in ms if m.hd95 is not None]
        out.append({
            "case_id": "mean",
            "region": name,
            "dice": float(np.mean([m.dice for m in ms])),
            "sensitivity": float(np.mean([m.sensitivity for m in ms])),
            "specificity": float(np.mean([m.specificity for m in ms])),
            "hd95": float(np.mean(hds)) if hds else "",
            "hd95_defined": int(bool(hds)),
        })
    return out


def report_csv(reports: Sequence[MetricsReport], include_mean: bool = True) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerows(r.rows())
    if include_mean and reports:
        w.writerows(mean_rows(reports))
    return buf.getvalue()


def format_table(rows: Iterable[dict]) -> str:
    """Dice/Sensitivity/Specificity/HD95 x WT/TC/ET text table from mean-style rows."""
    by_region = {r["region"]: r for r in rows}
    metrics = ("dice", "sensitivity", "specificity", "hd95")
    head = ["Region"] + ["Dice", "Sensitivity", "Specificity", "Hausdorff95"]
    lines = ["  ".join(f"{h:>12}" for h in head)]
    for name in REGION_ORDER:
        r = by_region.get(name)
        if r is None:
            continue
        cells = [name]
        for m in metrics:
            v = r[m]
            cells.append("undefined" if v == "" else f"{float(v):.4f}")
        lines.append("  ".join(f"{c:>12}" for c in cells))
    return "\n".join(lines)

