"""Acceptance criteria, each run at its stated tolerance.

Run with ``pytest tests/test_acceptance.py``; the terminal summary lists one
PASS/FAIL line per criterion. Criterion 7 trains six models and takes about
15 minutes on one CPU core.
"""
import statistics
import time

import numpy as np
import pytest
import torch

from roadssda.augment import AugmentConfig
from roadssda.datasets import TileSample, extract_tiles, generate_synthetic_domain, harmonize_resolution
from roadssda.evaluation import evaluate_images, road_iou
from roadssda.experiment import SyntheticSetup, run_adaptation
from roadssda.losses import AlphaSchedule, MccConfig, alpha_at, ce_ignore, mcc_loss
from roadssda.model import ModelConfig, get_params
from roadssda.pseudolabel import generate_pseudo_labels, pseudo_label_stats
from roadssda.trainer import (
    TrainConfig,
    format_log,
    load_checkpoint,
    new_state,
    run,
    save_checkpoint,
    train_ssda,
    train_step,
    train_supervised,
)

NO_SUB = MccConfig(pixel_subsample=None)


def window_count(size, tile, stride):
    return sum(1 for start in range(size) if start % stride == 0 and start + tile <= size)


def brute_counts(pred, gt):
    inter = union = 0
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        if g != 255:
            inter += p == 1 and g == 1
            union += p == 1 or g == 1
    return inter, union


def fd_rel_error(fn, x, h=1e-5):
    x = x.clone().requires_grad_(True)
    fn(x).backward()
    analytic = x.grad.numpy().ravel().copy()
    probe = x.detach().clone()
    flat = probe.view(-1)
    numeric = np.empty_like(analytic)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        up = fn(probe).item()
        flat[i] = old - h
        down = fn(probe).item()
        flat[i] = old
        numeric[i] = (up - down) / (2 * h)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / scale)), x.grad


def test_criterion_1_mcc_correctness(record):
    t0 = time.perf_counter()
    gen = torch.Generator().manual_seed(2024)
    out_of_range = perm_mismatch = 0
    for _ in range(1000):
        b, h, w = (int(v) for v in torch.randint(1, 5, (1,), generator=gen).tolist() + torch.randint(1, 17, (2,), generator=gen).tolist())
        if b * h * w < 2:
            h = 2
        x = torch.randn(b, 2, h, w, generator=gen) * float(torch.rand(1, generator=gen) * 10)
        v = mcc_loss(x, NO_SUB).item()
        out_of_range += not 0.0 <= v <= 1.0
        perm = torch.randperm(b * h * w, generator=gen)
        y = x.permute(1, 0, 2, 3).reshape(2, -1)[:, perm].reshape(2, b, h, w).permute(1, 0, 2, 3)
        perm_mismatch += mcc_loss(y, NO_SUB).item() != v
    hard = torch.zeros(4, 2, 16, 16)
    labels = torch.randint(0, 2, (4, 16, 16), generator=gen)
    hard[:, 0][labels == 0] = 100.0
    hard[:, 1][labels == 1] = 100.0
    hard_val = mcc_loss(hard, NO_SUB).item()
    uniform_val = mcc_loss(torch.zeros(4, 2, 16, 16), NO_SUB).item()
    elapsed = time.perf_counter() - t0
    ok = out_of_range == 0 and perm_mismatch == 0 and hard_val <= 1e-8 and abs(uniform_val - 0.5) <= 1e-9 and elapsed < 30
    record(1, "MCC correctness", ok,
           f"out-of-range {out_of_range}/1000, permutation mismatches {perm_mismatch}, one-hot {hard_val:.2e}, "
           f"uniform {uniform_val!r}, {elapsed:.1f}s")
    assert ok


def test_criterion_2_gradient_checks(record):
    t0 = time.perf_counter()
    gen = torch.Generator().manual_seed(7)
    worst_mcc = worst_ce = 0.0
    ignore_grad_max = 0.0
    for _ in range(20):
        b, h, w = 1 + int(torch.randint(0, 2, (1,), generator=gen)), 2 + int(torch.randint(0, 3, (1,), generator=gen)), 3
        x = torch.randn(b, 2, h, w, generator=gen, dtype=torch.float64) * 2
        target = torch.randint(0, 2, (b, h, w), generator=gen)
        target[torch.rand(b, h, w, generator=gen) < 0.3] = 255
        err, _ = fd_rel_error(lambda z: mcc_loss(z, NO_SUB), x)
        worst_mcc = max(worst_mcc, err)
        err, grad = fd_rel_error(lambda z: ce_ignore(z, target), x)
        worst_ce = max(worst_ce, err)
        ignore_grad_max = max(ignore_grad_max, float(grad.permute(0, 2, 3, 1)[target == 255].abs().max()) if (target == 255).any() else 0.0)
    elapsed = time.perf_counter() - t0
    ok = worst_mcc < 1e-4 and worst_ce < 1e-4 and ignore_grad_max == 0.0 and elapsed < 60
    record(2, "gradient checks", ok,
           f"max rel error mcc {worst_mcc:.2e}, ce {worst_ce:.2e}; max |grad| at ignore {ignore_grad_max}; {elapsed:.1f}s")
    assert ok


def test_criterion_3_iou_oracle(record):
    rng = np.random.default_rng(3)
    mismatches = 0
    for _ in range(100):
        pred = rng.integers(0, 2, (32, 32)).astype(np.uint8)
        gt = rng.choice(np.array([0, 1, 255], np.uint8), (32, 32), p=[0.5, 0.3, 0.2])
        r = road_iou(pred, gt)
        mismatches += (r.intersection_px, r.union_px) != brute_counts(pred, gt)
    tile_mismatch = 0
    for _ in range(20):
        h, w = (int(v) for v in rng.integers(16, 97, 2))
        image = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
        gt = rng.choice(np.array([0, 1, 255], np.uint8), (h, w))
        def predict(x):
            return ((x[..., 0].astype(int) + x[..., 1]) % 3 == 0).astype(np.uint8)
        whole = evaluate_images(predict, [TileSample(image, gt)])
        tiled = evaluate_images(predict, [TileSample(image, gt)], tile_size=int(rng.integers(4, 40)))
        tile_mismatch += whole != tiled or whole.iou != tiled.iou
    ok = mismatches == 0 and tile_mismatch == 0
    record(3, "IoU oracle equivalence", ok, f"{mismatches}/100 pair mismatches, {tile_mismatch}/20 tiling mismatches")
    assert ok


def test_criterion_4_preprocessing(record):
    rng = np.random.default_rng(4)
    bad = 0
    for _ in range(200):
        h, w = (int(v) for v in rng.integers(1, 120, 2))
        tile, stride = int(rng.integers(1, 50)), int(rng.integers(1, 50))
        img = np.zeros((h, w, 3), np.uint8)
        bad += len(extract_tiles(img, img[..., 0], tile, stride)) != window_count(h, tile, stride) * window_count(w, tile, stride)
    big = np.zeros((5000, 6000, 3), np.uint8)
    n_big = len(extract_tiles(big, big[..., 0], 640, 640))
    src = TileSample(rng.integers(0, 256, (2560, 2560, 3), dtype=np.uint8), np.zeros((2560, 2560), np.uint8), resolution_m_per_px=0.6)
    out = harmonize_resolution(src, 2.4)
    ok = bad == 0 and n_big == 63 and out.image.shape[:2] == (640, 640) and out.mask.shape == (640, 640) and out.resolution_m_per_px == 2.4
    record(4, "preprocessing arithmetic", ok,
           f"{bad}/200 count mismatches, 5000x6000/640 -> {n_big} tiles, 2560@0.6 -> {out.image.shape[0]}@{out.resolution_m_per_px}")
    assert ok


def test_criterion_5_degeneracy(record):
    a = generate_synthetic_domain("A", 16, 64, seed=51)
    b = generate_synthetic_domain("B", 16, 64, seed=52)
    cfg = TrainConfig(total_iters=40, alpha_schedule=AlphaSchedule(0.0, 10), beta=0.0, seed=5)
    mcfg, aug = ModelConfig(width=8, depth=3, seed=5), AugmentConfig(crop_size=64, seed=5)
    sup = train_supervised(cfg, a, mcfg, aug)
    ssda = train_ssda(cfg, a, b, mcfg, aug)
    same = format_log(sup.log) == format_log(ssda.log)
    record(5, "degeneracy", same, f"{len(sup.log)} log rows, bit-identical: {same}")
    assert same


def test_criterion_6_overfit(record):
    t0 = time.perf_counter()
    tile = generate_synthetic_domain("A", 1, 512, seed=61)
    aug = AugmentConfig(scale_range=(1, 1), rotations=(0,), hflip_prob=0, vflip_prob=0, color_jitter=(0, 0, 0), crop_size=512)
    cfg = TrainConfig(total_iters=100, batch_labeled=1, learning_rate=1e-2, alpha_schedule=AlphaSchedule(0.0, 1), beta=0.0, seed=6)
    state = new_state(ModelConfig(width=8, depth=3, seed=6), cfg, aug, None)
    for _ in range(100):
        parts = train_step(state, tile)
    elapsed = time.perf_counter() - t0
    ok = parts.ce_labeled < 0.1 and elapsed < 120
    record(6, "overfit sanity", ok, f"ce_labeled after 100 steps {parts.ce_labeled:.4f}, {elapsed:.1f}s")
    assert ok


@pytest.mark.slow
def test_criterion_7_scaled_down_adaptation(record):
    t0 = time.perf_counter()
    torch.set_num_threads(1)
    results = [run_adaptation(seed, SyntheticSetup()) for seed in (0, 1, 2)]
    gains = [100.0 * (r.ssda_iou - r.baseline_iou) for r in results]
    median_gain = statistics.median(gains)
    elapsed = time.perf_counter() - t0
    ok = median_gain >= 2.0 and elapsed <= 45 * 60
    per_seed = ", ".join(f"seed {r.seed}: {100 * r.baseline_iou:.1f} -> {100 * r.ssda_iou:.1f}" for r in results)
    record(7, "scaled-down adaptation", ok, f"median gain {median_gain:+.2f} IoU points ({per_seed}); {elapsed / 60:.1f} min")
    assert ok


def test_criterion_8_alpha_and_log_integrity(record):
    a = generate_synthetic_domain("A", 12, 64, seed=81)
    b = generate_synthetic_domain("B", 12, 64, seed=82)
    schedule = AlphaSchedule(0.8, 15)
    cfg = TrainConfig(total_iters=30, alpha_schedule=schedule, seed=8)
    mcfg, aug = ModelConfig(width=8, depth=3, seed=8), AugmentConfig(crop_size=64, seed=8)
    teacher = train_supervised(TrainConfig(total_iters=30, seed=8), a, mcfg, aug).model
    maps = generate_pseudo_labels(teacher, b, cfg.pseudo_threshold)
    state = train_ssda(cfg, a, b, mcfg, aug, pseudo_maps=maps)
    logged_ok = [row[4] for row in state.log] == [alpha_at(schedule, t) for t in range(30)]
    ends_ok = alpha_at(schedule, 0) == 0.0 and all(alpha_at(schedule, t) == 0.8 for t in (15, 16, 100, 10**6))
    mcc_ok = all(0.0 <= row[3] <= 1.0 for row in state.log)
    kept = [pseudo_label_stats(generate_pseudo_labels(teacher, b, th)).kept_fraction for th in (0, 0.5, 0.7, 0.9, 0.99)]
    kept_ok = all(x >= y for x, y in zip(kept, kept[1:])) and kept[0] == 1.0
    ok = logged_ok and ends_ok and mcc_ok and kept_ok
    record(8, "alpha schedule and log integrity", ok,
           f"logged alpha matches {logged_ok}, endpoints {ends_ok}, mcc in [0,1] {mcc_ok}, kept {[round(k, 4) for k in kept]}")
    assert ok


def test_criterion_9_determinism_and_resume(record, tmp_path):
    a = generate_synthetic_domain("A", 12, 64, seed=91)
    b = generate_synthetic_domain("B", 12, 64, seed=92)
    cfg = TrainConfig(total_iters=30, alpha_schedule=AlphaSchedule(1.0, 10), seed=9)
    mcfg, aug = ModelConfig(width=8, depth=3, seed=9), AugmentConfig(crop_size=64, seed=9)
    teacher = train_supervised(TrainConfig(total_iters=20, seed=9), a, mcfg, aug).model
    maps = generate_pseudo_labels(teacher, b, 0.9)
    first = train_ssda(cfg, a, b, mcfg, aug, pseudo_maps=maps, out_dir=tmp_path / "r1")
    train_ssda(cfg, a, b, mcfg, aug, pseudo_maps=maps, out_dir=tmp_path / "r2")
    csv_same = (tmp_path / "r1" / "train_log.csv").read_bytes() == (tmp_path / "r2" / "train_log.csv").read_bytes()

    part = new_state(mcfg, cfg, aug, None)
    run(part, a, b, maps, until=13)
    save_checkpoint(part, tmp_path / "mid.npz")
    resumed = load_checkpoint(tmp_path / "mid.npz")
    run(resumed, a, b, maps)
    p1, p2 = get_params(first.model), get_params(resumed.model)
    params_same = list(p1) == list(p2) and all(np.array_equal(p1[k], p2[k]) for k in p1)
    ok = csv_same and params_same
    record(9, "determinism and resumability", ok, f"identical CSVs {csv_same}, resumed params bit-identical {params_same}")
    assert ok
