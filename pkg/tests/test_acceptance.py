"""Acceptance criteria, one test per criterion.

Each test records a ``criterion N [PASS|FAIL]`` line, printed as it runs
(``pytest -s``) and repeated in the terminal summary. The training-based
criteria (4, 7, 9) take most of the roughly half-hour run time.

Run alone with ``pytest tests/test_acceptance.py -v``.
"""

import statistics
import sys
import time
from functools import lru_cache

import numpy as np
import pytest

from aerialmtl.balancing import GradNormState, gradnorm_update, min_norm_2task
from aerialmtl.checkpoint import decode_checkpoint, load_checkpoint, save_checkpoint
from aerialmtl.config import desk_config
from aerialmtl.errors import CorruptCheckpoint
from aerialmtl.geodata import Raster, read_raster, synth_scene, write_raster
from aerialmtl.gradcheck import gradcheck, model_gradcheck
from aerialmtl.inference import GaussianWindow, mc_dropout_uncertainty, tiled_blend, tiled_predict, weight_partition_sum
from aerialmtl.metrics import ConfusionMatrix, aa, kappa, oa
from aerialmtl.model import ModelConfig, build_model
from aerialmtl.tensor import (
    Tensor,
    add,
    concat_channels,
    conv2d,
    dropout,
    l1_loss,
    leaky_relu,
    max_pool2,
    mul,
    softmax_cross_entropy,
    tensor_sum,
    upconv2d,
)
from aerialmtl.train import evaluate_model, load_model, train

TRAIN_SEEDS = (0, 1, 2, 3)
TEST_SEEDS = (4, 5)
RUN_SEEDS = (0, 1, 2)
EVAL_WINDOW = GaussianWindow(128, 64)


@lru_cache(maxsize=None)
def scenes(seeds):
    return [synth_scene(s, 256) for s in seeds]


@lru_cache(maxsize=None)
def trained(tasks, seed):
    cfg = desk_config(tasks=tasks, seed=seed)
    start = time.perf_counter()
    result = train(cfg, tiles=scenes(TRAIN_SEEDS))
    return result.model, time.perf_counter() - start


# --------------------------------------------------------------------------


def test_criterion_1_gradient_suite(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(0)

    def t(*shape, low=None):
        data = rng.standard_normal(shape).astype(np.float32)
        if low is not None:
            # keep clear of the kink at zero
            data = np.sign(data) * (np.abs(data) + low)
        return Tensor(data, requires_grad=True)

    labels = rng.integers(0, 4, (2, 4, 4))
    labels[0, 0, 0] = 255
    target = rng.standard_normal((1, 1, 4, 4)) * 3
    mask = (rng.random((1, 1, 4, 4)) < 0.8).astype(np.float32)
    pool_in = Tensor(rng.permutation(32).reshape(1, 2, 4, 4).astype(np.float32) * 0.1, requires_grad=True)
    cases = {
        "conv2d": (lambda x, w, b: conv2d(x, w, b, padding=1), [t(1, 2, 5, 5), t(3, 2, 3, 3), t(3)]),
        "conv2d_stride2": (lambda x, w: conv2d(x, w, stride=2, padding=1), [t(1, 2, 5, 5), t(2, 2, 3, 3)]),
        "upconv2d": (lambda x, w, b: upconv2d(x, w, b), [t(1, 2, 3, 3), t(2, 2, 3, 3), t(2)]),
        "leaky_relu": (leaky_relu, [t(3, 5, low=0.05)]),
        "max_pool2": (max_pool2, [pool_in]),
        "concat_channels": (concat_channels, [t(1, 2, 3, 3), t(1, 1, 3, 3)]),
        "dropout": (lambda x: dropout(x, 0.3, True, np.random.default_rng(7)), [t(4, 6)]),
        "add_mul_sum": (lambda a, b: tensor_sum(add(mul(a, b), a)), [t(3, 4), t(3, 4)]),
        "l1_loss": (lambda p: l1_loss(p, target, mask), [t(1, 1, 4, 4)]),
        "softmax_cross_entropy": (lambda z: softmax_cross_entropy(z, labels), [t(2, 4, 4, 4)]),
    }
    failures = []
    worst = 0.0
    for name, (fn, inputs) in cases.items():
        for r in gradcheck(fn, inputs, coords=10, h=1e-3, atol=1e-3, rtol=1e-3, rng=rng):
            worst = max(worst, r.max_abs_err)
            if not r.passed:
                failures.append(f"{name}/{r.name}")

    model = build_model(ModelConfig(encoder_depth=2, base_channels=8))
    image = rng.standard_normal((1, 3, 32, 32))
    for r in model_gradcheck(model, image, coords=20, rng=rng):
        worst = max(worst, r.max_abs_err)
        if not r.passed:
            failures.append(f"model/{r.name}")
    elapsed = time.perf_counter() - start
    ok = verdict(1, "gradient suite", not failures and elapsed < 60,
                 f"{len(cases)} ops + full model, worst abs err {worst:.2e}, {elapsed:.1f}s, failures={failures}")
    assert ok


def test_criterion_2_min_norm_solver(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    grid = np.linspace(0.0, 1.0, 1001)
    mismatches = kkt_violations = 0
    for _ in range(1000):
        dim = int(rng.integers(2, 65))
        g1 = rng.standard_normal(dim) * rng.uniform(0.1, 10)
        g2 = rng.standard_normal(dim) * rng.uniform(0.1, 10)
        if rng.random() < 0.2:
            g2 = g1 * rng.uniform(-2, 2) + rng.standard_normal(dim) * 1e-3
        gamma, norm_sq = min_norm_2task(g1, g2)
        pts = grid[:, None] * g1 + (1 - grid[:, None]) * g2
        vals = np.einsum("ij,ij->i", pts, pts)
        best = int(np.argmin(vals))
        if not (abs(gamma - grid[best]) <= 1e-3 or norm_sq <= vals[best] + 1e-9):
            mismatches += 1
        d = gamma * g1 + (1 - gamma) * g2
        if d @ g1 < d @ d - 1e-6 or d @ g2 < d @ d - 1e-6:
            kkt_violations += 1
    elapsed = time.perf_counter() - start
    ok = verdict(2, "min-norm solver", mismatches == 0 and kkt_violations == 0 and elapsed < 5,
                 f"1000 pairs, {mismatches} oracle mismatches, {kkt_violations} KKT violations, {elapsed:.2f}s")
    assert ok


def test_criterion_3_gradnorm(verdict):
    """Shared weight W; both tasks have the same gradient on W but task 1's
    loss decays twice as fast (in log space) as task 2's."""

    class Toy:
        last_shared_weight = Tensor(np.ones(8, np.float32), requires_grad=True)

    W = Toy.last_shared_weight
    u = Tensor(np.array([1, -1] * 4, np.float32))  # u . W = 0 keeps the loss values exact
    state = GradNormState()
    sums = []
    for step in range(50):
        l1 = add(tensor_sum(mul(W, u)), float(np.exp(-0.04 * step)))
        l2 = add(tensor_sum(mul(W, u)), float(np.exp(-0.02 * step)))
        weights = gradnorm_update(state, [l1, l2], Toy)
        sums.append(sum(weights.k))
    w1, w2 = weights.k
    sum_ok = all(abs(s - 2.0) <= 1e-6 for s in sums)
    ok = verdict(3, "GradNorm behaviour", state.updates == 50 and w1 < 1 < w2 and sum_ok,
                 f"after 50 updates w=({w1:.4f}, {w2:.4f}), max |sum-2|={max(abs(s - 2) for s in sums):.1e}")
    assert ok


@pytest.mark.slow
def test_criterion_4_mtl_benefit(verdict):
    test = scenes(TEST_SEEDS)
    scores = {tasks: [] for tasks in ("both", "height", "semantics")}
    total_time = 0.0
    for seed in RUN_SEEDS:
        for tasks in scores:
            model, seconds = trained(tasks, seed)
            total_time += seconds
            start = time.perf_counter()
            scores[tasks].append(evaluate_model(model, test, EVAL_WINDOW))
            total_time += time.perf_counter() - start

    def median(tasks, key):
        return statistics.median(s[key] for s in scores[tasks])

    mtl_mae, mtl_oa = median("both", "mae"), median("both", "oa")
    best_mae = min(median("height", "mae"), median("semantics", "mae"))
    best_oa = max(median("height", "oa"), median("semantics", "oa"))
    per_seed = "; ".join(
        f"seed {s}: mae {scores['both'][i]['mae']:.3f}/{scores['height'][i]['mae']:.3f} "
        f"oa {scores['both'][i]['oa']:.4f}/{scores['semantics'][i]['oa']:.4f}"
        for i, s in enumerate(RUN_SEEDS)
    )
    ok = verdict(
        4, "MTL benefit",
        mtl_mae <= 1.05 * best_mae and mtl_oa >= 0.95 * best_oa and total_time <= 30 * 60,
        f"median mae {mtl_mae:.3f} vs single {best_mae:.3f} (ratio {mtl_mae / best_mae:.3f}, bound 1.05); "
        f"median OA {mtl_oa:.4f} vs single {best_oa:.4f} (ratio {mtl_oa / best_oa:.3f}, bound 0.95); "
        f"{total_time / 60:.1f} min [{per_seed}]",
    )
    assert ok


def test_criterion_5_stitching(verdict):
    unity = max(float(np.abs(weight_partition_sum((256, 200), GaussianWindow(128, s)) - 1).max())
                for s in (32, 64, 96))
    rng = np.random.default_rng(5)
    image = rng.random((256, 200, 3)).astype(np.float32)

    def constant(batch):
        return np.full((batch.shape[0], 2) + batch.shape[2:], np.float32(-3.7), dtype=np.float32)

    const_ok = all(
        np.all(tiled_blend(constant, image, GaussianWindow(128, s))[0] == np.float32(-3.7))
        for s in (32, 64, 96, 128)
    )
    model = build_model(ModelConfig(encoder_depth=3, base_channels=4))

    def net(batch):
        h, z, _ = model.forward((batch - np.float32(0.5)) * np.float32(2), "eval")
        return np.concatenate([h.data, z.data], axis=1)

    win = GaussianWindow(128, 32)
    ref, _ = tiled_blend(net, image, win)
    scale_ok = all(tiled_blend(net, image, win.scaled(f))[0].tobytes() == ref.tobytes() for f in (10.0, 0.1, 3.7))
    ok = verdict(5, "stitching", unity <= 1e-6 and const_ok and scale_ok,
                 f"max |sum w - 1| = {unity:.1e}, constant identity {const_ok}, scale invariance {scale_ok}")
    assert ok


def test_criterion_6_metrics_oracle(verdict):
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(100):
        c = int(rng.integers(2, 9))
        counts = rng.integers(0, 100, (c, c))
        if rng.random() < 0.3:
            counts[rng.integers(1, c)] = 0  # a class absent from the ground truth
        counts[0, 0] += 1
        cm = ConfusionMatrix.from_counts(counts)
        # direct evaluation with plain Python arithmetic
        rows = [sum(map(int, r)) for r in counts]
        cols = [sum(int(counts[i][j]) for i in range(c)) for j in range(c)]
        total = sum(rows)
        p_o = sum(int(counts[i][i]) for i in range(c)) / total
        recalls = [int(counts[i][i]) / rows[i] for i in range(c) if rows[i]]
        p_e = sum(rows[i] * cols[i] for i in range(c)) / total ** 2
        ref = (p_o, sum(recalls) / len(recalls), (p_o - p_e) / (1 - p_e))
        got = (oa(cm), aa(cm), kappa(cm))
        worst = max(worst, max(abs(a - b) for a, b in zip(got, ref)))
    k = kappa(ConfusionMatrix.from_counts([[5, 0], [5, 0]]))
    ok = verdict(6, "metrics oracle", worst <= 1e-9 and k == 0.0,
                 f"100 matrices, max deviation {worst:.1e}; kappa([[5,0],[5,0]]) = {k!r}")
    assert ok


def _neighbourhood(mask, radius):
    """Binary dilation with a square structuring element, numpy only."""
    out = np.zeros_like(mask)
    padded = np.pad(mask, radius)
    n = 2 * radius + 1
    for dy in range(n):
        for dx in range(n):
            out |= padded[dy:dy + mask.shape[0], dx:dx + mask.shape[1]]
    return out


@pytest.mark.slow
def test_criterion_7_uncertainty(verdict):
    rgb, _, _ = scenes(TEST_SEEDS)[0]
    small = build_model(ModelConfig(encoder_depth=4, base_channels=8, dropout_p=0.0))
    _, std_p0 = mc_dropout_uncertainty(small, rgb, EVAL_WINDOW, samples=5, rng=np.random.default_rng(0))
    model, _ = trained("both", RUN_SEEDS[0])
    _, std_s1 = mc_dropout_uncertainty(model, rgb, EVAL_WINDOW, samples=1, rng=np.random.default_rng(0))
    zero_ok = not std_p0.values.any() and not std_s1.values.any()

    wins, details, positive = 0, [], True
    for seed in (4, 5, 6):
        rgb, height, labels = synth_scene(seed, 256)
        _, std = mc_dropout_uncertainty(model, rgb, EVAL_WINDOW, samples=30, rng=np.random.default_rng(seed))
        s = std.plane.astype(np.float64)
        positive &= bool(s.max() > 0)
        h, lab = height.plane, labels.plane
        # contours of elevated objects: a height step of more than one unit to a 4-neighbour
        step = np.zeros(h.shape, bool)
        step[:-1] |= np.abs(np.diff(h, axis=0)) > 1
        step[1:] |= np.abs(np.diff(h, axis=0)) > 1
        step[:, :-1] |= np.abs(np.diff(h, axis=1)) > 1
        step[:, 1:] |= np.abs(np.diff(h, axis=1)) > 1
        boundary = _neighbourhood(step, 1)
        # flat ground well away from any label or height change
        change = step.copy()
        change[:-1] |= lab[:-1] != lab[1:]
        change[:, :-1] |= lab[:, :-1] != lab[:, 1:]
        interior = (lab == 0) & (h == 0) & ~_neighbourhood(change, 6)
        b, g = s[boundary].mean(), s[interior].mean()
        wins += b > g
        details.append(f"scene {seed}: boundary {b:.3f} vs ground {g:.3f}")
    ok = verdict(7, "MC-dropout uncertainty", zero_ok and positive and wins >= 2,
                 f"zero cases {zero_ok}, {wins}/3 scenes with higher boundary std ({'; '.join(details)})")
    assert ok


def test_criterion_8_formats(verdict, tmp_path):
    rng = np.random.default_rng(8)
    h = rng.standard_normal((37, 23)).astype(np.float32) * 50
    h[rng.random(h.shape) < 0.1] = np.nan
    checks = {}
    write_raster(Raster(h, "height"), tmp_path / "h.pfm")
    back = read_raster(tmp_path / "h.pfm", "height")
    checks["pfm"] = back.values.tobytes() == Raster(h, "height").values.tobytes() and np.array_equal(
        back.mask, ~np.isnan(h))
    rgb = Raster(rng.integers(0, 256, (19, 31, 3)).astype(np.float32) / np.float32(255), "rgb")
    write_raster(rgb, tmp_path / "i.ppm")
    checks["ppm"] = read_raster(tmp_path / "i.ppm", "rgb").values.tobytes() == rgb.values.tobytes()
    lab = rng.integers(0, 6, (19, 31)).astype(np.uint8)
    lab[rng.random(lab.shape) < 0.1] = 255
    write_raster(Raster(lab, "labels"), tmp_path / "l.pgm")
    lback = read_raster(tmp_path / "l.pgm", "labels")
    checks["pgm"] = lback.values.tobytes() == lab[:, :, None].tobytes() and np.array_equal(lback.mask, lab != 255)

    model = build_model(ModelConfig(encoder_depth=3, base_channels=4, seed=8))
    save_checkpoint(tmp_path / "m.mtl", model, "seed=8\n")
    _, arrays = load_checkpoint(tmp_path / "m.mtl")
    checks["checkpoint"] = all(p.data.tobytes() == arrays[n].tobytes() for n, p in model.named_parameters())
    blob = bytearray((tmp_path / "m.mtl").read_bytes())
    blob[len(blob) // 2] ^= 0x10
    try:
        decode_checkpoint(bytes(blob))
        checks["crc"] = False
    except CorruptCheckpoint:
        checks["crc"] = True
    ok = verdict(8, "formats", all(checks.values()), ", ".join(f"{k} {v}" for k, v in checks.items()))
    assert ok


@pytest.mark.slow
def test_criterion_9_determinism(verdict, tmp_path):
    rgb = scenes(TEST_SEEDS)[0][0]
    outputs = []
    for run in ("a", "b"):
        out = tmp_path / run
        cfg = desk_config(iterations=200, checkpoint_every=100, seed=3)
        train(cfg, out, scenes(TRAIN_SEEDS))
        model, _ = load_model(out / "checkpoint.mtl")
        height, labels, _ = tiled_predict(model, rgb, EVAL_WINDOW)
        write_raster(height, out / "height.pfm")
        write_raster(labels, out / "labels.pgm")
        outputs.append({name: (out / name).read_bytes()
                        for name in ("checkpoint.mtl", "loss_log.csv", "height.pfm", "labels.pgm")})
    same = {name: outputs[0][name] == outputs[1][name] for name in outputs[0]}
    ok = verdict(9, "determinism", all(same.values()), ", ".join(f"{k} identical={v}" for k, v in same.items()))
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))
