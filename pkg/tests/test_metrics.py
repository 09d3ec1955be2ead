import csv
import io

import numpy as np
import pytest

import oracles
from slcaunet.metrics import (
    CSV_COLUMNS,
    LabelRangeError,
    confusion,
    dice,
    evaluate,
    format_table,
    hausdorff95,
    mean_rows,
    region_masks,
    report_csv,
    sensitivity,
    specificity,
    surface_extract,
)


def _random_labels(rng, shape):
    # blobby rather than white noise so surfaces have interiors
    lab = rng.integers(0, 4, size=shape)
    keep = rng.random(shape) < 0.6
    return np.where(keep, lab, 0).astype(np.uint8)


@pytest.mark.parametrize("seed", range(0, 120, 6))
def test_metrics_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    rank = 2 + seed % 2
    shape = tuple(rng.integers(1, 9, size=rank))
    spacing = tuple(rng.uniform(0.5, 2.0, size=rank))
    gt, pred = _random_labels(rng, shape), _random_labels(rng, shape)
    rep = evaluate(pred, gt, spacing)
    for region in ("WT", "TC", "ET"):
        g, p = oracles.region_oracle(gt, region), oracles.region_oracle(pred, region)
        tp, fp, fn, tn = oracles.counts_oracle(p, g)
        m = rep[region]
        assert (m.counts.tp, m.counts.fp, m.counts.fn, m.counts.tn) == (tp, fp, fn, tn)
        assert m.dice == (1.0 if tp + fp + fn == 0 else 2 * tp / (fn + fp + 2 * tp))
        want = oracles.hd95_oracle(g, p, spacing)
        if want is None:
            assert m.hd95 is None
        else:
            assert abs(m.hd95 - want) < 1e-9


def test_surface_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(30):
        mask = rng.random(tuple(rng.integers(1, 7, size=3))) < 0.7
        got = {tuple(int(v) for v in row) for row in surface_extract(mask)}
        assert got == set(oracles.surface_oracle(mask))


def test_solid_cube_surface_excludes_interior():
    mask = np.zeros((5, 5, 5), dtype=bool)
    mask[1:4, 1:4, 1:4] = True
    pts = surface_extract(mask)
    assert len(pts) == 26  # 27 voxels minus the one interior centre


def test_mask_touching_border_is_surface():
    mask = np.ones((3, 3), dtype=bool)
    assert len(surface_extract(mask)) == 8


def test_self_evaluation_is_perfect():
    rng = np.random.default_rng(1)
    for _ in range(10):
        lab = _random_labels(rng, (6, 6, 6))
        lab[0, 0, 0] = 3  # every region present
        rep = evaluate(lab, lab)
        for r in ("WT", "TC", "ET"):
            assert rep[r].dice == 1.0 and rep[r].hd95 == 0.0
            assert rep[r].sensitivity == 1.0 and rep[r].specificity == 1.0


def test_empty_cases_and_flags():
    z = np.zeros((4, 4), dtype=np.uint8)
    rep = evaluate(z, z)
    m = rep["ET"]
    assert m.dice == 1.0 and m.sensitivity == 1.0 and m.hd95 is None and not m.hd95_defined
    assert "dice_both_empty" in m.flags and "hd95_undefined" in m.flags
    one = z.copy()
    one[1, 1] = 3
    m = evaluate(z, one)["ET"]
    assert m.dice == 0.0 and m.sensitivity == 0.0 and m.hd95 is None


def test_hausdorff_known_values():
    T = np.array([[0.0, 0.0], [0.0, 1.0]])
    P = np.array([[0.0, 3.0]])
    # T->P distances 3, 2 ; P->T distance 2; 95th percentile of [2, 3] is 2.95
    assert hausdorff95(T, P) == pytest.approx(2.95)
    assert hausdorff95(T, P, percentile=100) == pytest.approx(3.0)
    assert hausdorff95(T, np.zeros((0, 2))) is None


def test_spacing_scales_distances():
    a = np.zeros((1, 8), dtype=np.uint8)
    b = a.copy()
    a[0, 1] = 2
    b[0, 5] = 2
    assert evaluate(b, a, spacing=(1.0, 1.0))["WT"].hd95 == pytest.approx(4.0)
    assert evaluate(b, a, spacing=(1.0, 0.5))["WT"].hd95 == pytest.approx(2.0)


def test_region_nesting():
    lab = np.array([0, 1, 2, 3], dtype=np.uint8)
    m = region_masks(lab)
    assert m["WT"].tolist() == [False, True, True, True]
    assert m["TC"].tolist() == [False, True, False, True]
    assert m["ET"].tolist() == [False, False, False, True]


def test_label_range_error():
    with pytest.raises(LabelRangeError):
        region_masks(np.array([0, 4]))


def test_scalar_metrics():
    c = confusion(np.array([1, 1, 0, 0], bool), np.array([1, 0, 1, 0], bool))
    assert (c.tp, c.fp, c.fn, c.tn) == (1, 1, 1, 1)
    assert dice(c) == 0.5 and sensitivity(c) == 0.5 and specificity(c) == 0.5


def test_csv_report_and_mean_row():
    rng = np.random.default_rng(2)
    reps = []
    for i in range(3):
        gt, pred = _random_labels(rng, (5, 5)), _random_labels(rng, (5, 5))
        reps.append(evaluate(pred, gt, case_id=f"c{i}"))
    rows = list(csv.DictReader(io.StringIO(report_csv(reps))))
    assert tuple(rows[0].keys()) == CSV_COLUMNS
    assert len(rows) == 3 * 3 + 3
    for region in ("WT", "TC", "ET"):
        case = [r for r in rows if r["region"] == region and r["case_id"] != "mean"]
        mean = [r for r in rows if r["region"] == region and r["case_id"] == "mean"][0]
        assert float(mean["dice"]) == pytest.approx(sum(float(r["dice"]) for r in case) / 3, abs=1e-12)
        hds = [float(r["hd95"]) for r in case if r["hd95_defined"] == "1"]
        if hds:
            assert float(mean["hd95"]) == pytest.approx(sum(hds) / len(hds), abs=1e-12)
    table = format_table(mean_rows(reps))
    assert "Hausdorff95" in table and table.count("\n") == 3
