"""Acceptance suite.

Each test checks one top-level acceptance criterion at its stated
tolerance and prints a single ``PASS``/``FAIL`` line for it, so a run of

    pytest tests/test_acceptance.py -v

doubles as a compact report.  The training criteria take several minutes
on one CPU core; everything else finishes in about a minute.
"""
import time

import numpy as np
import pytest

import oracles
from slcaunet.data import (
    LabelVolume,
    MultiModalVolume,
    PhantomSpec,
    decode_svol,
    encode_svol,
    generate_phantom,
    normalize,
    split,
)
from slcaunet.gradsuite import REGISTRY, TOLERANCE, run_suite
from slcaunet.metrics import evaluate
from slcaunet.network import NetworkConfig, build, forward, group_weights_of
from slcaunet.tensorcore import (
    ConvParams,
    Tensor,
    concat_channels,
    conv,
    dense,
    eltwise_add,
    global_avg_pool,
    no_grad,
)
from slcaunet.train import (
    Adam,
    Sample,
    TrainConfig,
    dice_plus_ce_loss,
    encode_checkpoint,
    fit,
    load_checkpoint,
    mean_dice,
    save_checkpoint,
    train_step,
)

DESK = dict(levels=3, base_width=8)
# a smaller step than the training default keeps the first steps monotone
LOSS_DECREASE_LR = 3e-4


@pytest.fixture
def report(capsys):
    def emit(name, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        assert ok, f"{name}: {detail}"
    return emit


def _phantom_sample(seed, extent=32):
    radii = (6.0, 9.0) if extent >= 32 else (3.0, 5.0)
    img, lab = generate_phantom(PhantomSpec(seed=seed, extent=extent, radius_range=radii))
    return Sample(normalize(img).data.astype(np.float32), lab.labels)


# ---------------------------------------------------------------- kernels

def _kernel_case(rng, i):
    # cycle through every stride/dilation/padding/kernel combination
    rank = 2 + i % 2
    m = (1, 3)[(i // 2) % 2]
    stride = 1 + (i // 4) % 2
    dilation = 1 + (i // 8) % 2
    padding = ("SAME", "VALID")[(i // 16) % 2]
    C, K = (int(v) for v in rng.integers(1, 4, size=2))
    lo = (m - 1) * dilation + 1 if padding == "VALID" else 1
    spatial = tuple(int(v) for v in rng.integers(lo, 7, size=rank))
    x = rng.normal(size=(C,) + spatial)
    w, b = rng.normal(size=(K, C) + (m,) * rank), rng.normal(size=K)
    got = conv(Tensor(x), ConvParams(Tensor(w), Tensor(b), stride, dilation, padding)).data
    want = oracles.conv_oracle(x, w, b, stride, dilation, padding)
    errs = [np.max(np.abs(got - want)) if got.shape == want.shape else np.inf]

    errs.append(np.max(np.abs(global_avg_pool(Tensor(x)).data - oracles.gap_oracle(x))))
    n, k = (int(v) for v in rng.integers(1, 7, size=2))
    v, W, B = rng.normal(size=n), rng.normal(size=(n, k)), rng.normal(size=k)
    errs.append(np.max(np.abs(dense(Tensor(v), Tensor(W), Tensor(B)).data - oracles.dense_oracle(v, W, B))))
    y = rng.normal(size=x.shape)
    errs.append(np.max(np.abs(eltwise_add(Tensor(x), Tensor(y)).data - oracles.add_oracle(x, y))))
    parts = [x, rng.normal(size=(int(rng.integers(1, 4)),) + spatial)]
    errs.append(np.max(np.abs(concat_channels([Tensor(p) for p in parts]).data - oracles.concat_oracle(parts))))
    return max(errs)


def test_kernel_oracle_equivalence(report):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = max(_kernel_case(rng, i) for i in range(256))
    elapsed = time.perf_counter() - t0
    report("kernel oracles", worst < 1e-10 and elapsed < 120,
           f"256 shapes, max abs error {worst:.2e} (< 1e-10), {elapsed:.1f}s (< 120s)")


# ---------------------------------------------------------------- gradients

def test_gradient_suite(report):
    t0 = time.perf_counter()
    results = run_suite(seed=0, rank=3)
    elapsed = time.perf_counter() - t0
    worst = max(r.max_rel_error for r in results)
    failed = [r.name for r in results if not r.passed]
    names = {r.name for r in results}
    ok = not failed and names == set(REGISTRY) and "network" in names and elapsed < 300
    report("gradient suite", ok,
           f"{len(results)} components, worst relative error {worst:.2e} (< {TOLERANCE:g}), "
           f"{elapsed:.1f}s (< 300s){', failed: ' + ', '.join(failed) if failed else ''}")


# ---------------------------------------------------------------- shapes

def test_shape_and_normalization_contract(report):
    worst_sum = 0.0
    shapes_ok = True
    rng = np.random.default_rng(5)
    for levels in (2, 3):
        for rank in (2, 3):
            net = build(NetworkConfig(levels=levels, spatial_rank=rank, base_width=4, se_ratio=2))
            S = (8,) * rank
            with no_grad():
                p = forward(net, rng.normal(size=(4,) + S)).data
            shapes_ok &= p.shape == (4,) + S and bool(np.all(p >= 0))
            worst_sum = max(worst_sum, float(np.max(np.abs(p.sum(axis=0) - 1))))

    worst_g = 0.0
    # the 1e-12 bound is a 64-bit statement
    net = build(NetworkConfig(levels=3, base_width=4, se_ratio=2, dtype="float64"))
    for i in range(100):
        with no_grad():
            G = group_weights_of(net, np.random.default_rng(i).normal(size=(4, 8, 8, 8)) * (1 + i % 5)).data
        worst_g = max(worst_g, abs(float(G.sum()) - 1.0))
    ok = shapes_ok and worst_sum < 1e-6 and worst_g < 1e-12
    report("shape/normalization", ok,
           f"shapes preserved: {shapes_ok}, probability sum error {worst_sum:.1e} (< 1e-6), "
           f"group weight sum error over 100 draws {worst_g:.1e} (< 1e-12)")


# ---------------------------------------------------------------- metrics

def _random_labels(rng, shape):
    lab = rng.integers(0, 4, size=shape)
    return np.where(rng.random(shape) < 0.6, lab, 0).astype(np.uint8)


def test_metrics_oracle_equivalence(report):
    mismatches, worst = [], 0.0
    for seed in range(120):
        rng = np.random.default_rng(10_000 + seed)
        rank = 2 + seed % 2
        shape = tuple(int(v) for v in rng.integers(1, 9, size=rank))
        spacing = tuple(float(v) for v in rng.uniform(0.5, 2.0, size=rank))
        gt, pred = _random_labels(rng, shape), _random_labels(rng, shape)
        rep = evaluate(pred, gt, spacing)
        for region in ("WT", "TC", "ET"):
            g, p = oracles.region_oracle(gt, region), oracles.region_oracle(pred, region)
            tp, fp, fn, tn = oracles.counts_oracle(p, g)
            m = rep[region]
            want = (
                1.0 if tp + fp + fn == 0 else 2 * tp / (fn + fp + 2 * tp),
                1.0 if tp + fn == 0 else tp / (tp + fn),
                1.0 if tn + fp == 0 else tn / (tn + fp),
            )
            if (m.counts.tp, m.counts.fp, m.counts.fn, m.counts.tn) != (tp, fp, fn, tn) \
                    or (m.dice, m.sensitivity, m.specificity) != want:
                mismatches.append((seed, region))
            hd = oracles.hd95_oracle(g, p, spacing)
            if (hd is None) != (m.hd95 is None):
                mismatches.append((seed, region, "hd95 definedness"))
            elif hd is not None:
                worst = max(worst, abs(m.hd95 - hd))

    self_ok = True
    for seed in range(20):
        lab = _phantom_sample(seed, extent=16).labels
        rep = evaluate(lab, lab)
        self_ok &= all(rep[r].dice == 1.0 and rep[r].hd95 == 0.0 for r in ("WT", "TC", "ET"))
    ok = not mismatches and worst < 1e-9 and self_ok
    report("metrics oracles", ok,
           f"120 seeds, count/ratio mismatches {len(mismatches)}, HD95 max error {worst:.1e} (< 1e-9), "
           f"self-evaluation Dice 1 / HD95 0: {self_ok}")


# ---------------------------------------------------------------- learning

@pytest.mark.slow
def test_learning_capability(report):
    sample = _phantom_sample(1)
    net = build(NetworkConfig(**DESK))
    opt = Adam(net.parameters(), lr=1e-3)
    t0 = time.perf_counter()
    wt = tc = et = 0.0
    steps = 0
    while steps < 500:
        for _ in range(25):
            train_step(net, [sample], opt, step_index=steps)
            steps += 1
        wt, tc, et = mean_dice(net, [sample])
        if wt >= 0.90 and et >= 0.80:
            break
    elapsed = time.perf_counter() - t0
    ok = wt >= 0.90 and et >= 0.80 and elapsed < 600
    report("learning capability (overfit)", ok,
           f"WT {wt:.3f} (>= 0.90), ET {et:.3f} (>= 0.80) after {steps} steps (<= 500), {elapsed:.0f}s (< 600s)")


@pytest.mark.slow
def test_loss_decreases_over_first_ten_steps(report):
    decreasing = 0
    for seed in range(10):
        sample = _phantom_sample(seed)
        net = build(NetworkConfig(**DESK, seed=seed))
        opt = Adam(net.parameters(), lr=LOSS_DECREASE_LR)
        losses = [train_step(net, [sample], opt, step_index=i) for i in range(10)]
        with no_grad():
            losses.append(float(dice_plus_ce_loss(forward(net, Tensor(sample.image)), sample.labels).data))
        decreasing += all(b < a for a, b in zip(losses, losses[1:]))
    report("loss decrease over first 10 steps", decreasing >= 9,
           f"strictly decreasing in {decreasing}/10 seeds (>= 9)")


@pytest.mark.slow
def test_generalization(report):
    train = [_phantom_sample(1000 + i) for i in range(8)]
    held_out = [_phantom_sample(2000 + i) for i in range(4)]
    net = build(NetworkConfig(**DESK))
    t0 = time.perf_counter()
    fit(net, train, TrainConfig(steps=200, lr=1e-3, seed=0))
    wt, tc, et = mean_dice(net, held_out)
    elapsed = time.perf_counter() - t0
    report("generalization", wt >= 0.80 and elapsed < 900,
           f"held-out mean WT {wt:.3f} (>= 0.80), TC {tc:.3f}, ET {et:.3f}, {elapsed:.0f}s (< 900s)")


# ---------------------------------------------------------------- determinism

def test_determinism_and_serialization(report, tmp_path):
    sample = _phantom_sample(3, extent=16)
    blobs = []
    for _ in range(2):
        net = build(NetworkConfig(**DESK, seed=11))
        ck, _ = fit(net, [sample], TrainConfig(steps=3, seed=11))
        blobs.append(encode_checkpoint(ck))
    same_ckpt = blobs[0] == blobs[1]

    save_checkpoint(net, tmp_path / "m.ckpt", step=3)
    back = load_checkpoint(tmp_path / "m.ckpt")
    x = Tensor(sample.image)
    with no_grad():
        same_forward = forward(net, x).data.tobytes() == forward(back, x).data.tobytes()

    rng = np.random.default_rng(0)
    svol_ok = True
    for shape in ((4, 5, 6, 7), (4, 9, 3)):
        vol = MultiModalVolume(rng.normal(size=shape).astype(np.float32), (1.0, 0.5, 2.0)[:len(shape) - 1])
        again = decode_svol(encode_svol(vol))
        svol_ok &= again.data.dtype == np.float32 and again.data.tobytes() == vol.data.tobytes() \
            and again.spacing == vol.spacing
    lab = LabelVolume(rng.integers(0, 4, size=(5, 6, 7)).astype(np.uint8), (1.0, 1.0, 1.0))
    svol_ok &= decode_svol(encode_svol(lab)).labels.tobytes() == lab.labels.tobytes()
    ok = same_ckpt and same_forward and svol_ok
    report("determinism/serialization", ok,
           f"identical checkpoints: {same_ckpt}, bitwise forward after round trip: {same_forward}, "
           f"SVOL bit-exact: {svol_ok}")


# ---------------------------------------------------------------- split

def test_split_arithmetic(report):
    tr, va, te = split(range(285), (0.6, 0.2, 0.2), seed=0)
    sizes = (len(tr), len(va), len(te))
    disjoint = sorted(tr + va + te) == list(range(285))
    report("split arithmetic", sizes == (171, 57, 57) and disjoint,
           f"285 ids at 60/20/20 -> {sizes[0]}/{sizes[1]}/{sizes[2]} (171/57/57), partition: {disjoint}")
