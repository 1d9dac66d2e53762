"""Desk-scale synthetic adaptation experiment: labeled domain A, unlabeled domain B.

A baseline is trained on A alone and doubles as the teacher that
pseudo-labels B; the SSDA student is then trained from the same
initialization with MCC and pseudo-label terms. Both are scored on held-out
B tiles.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

from .augment import AugmentConfig
from .datasets import compute_normalization, generate_synthetic_domain
from .evaluation import evaluate_model
from .losses import AlphaSchedule, MccConfig
from .model import ModelConfig
from .pseudolabel import generate_pseudo_labels, pseudo_label_stats
from .trainer import TrainConfig, train_ssda, train_supervised

log = logging.getLogger(__name__)


@dataclass
class SyntheticSetup:
    n_labeled: int = 200
    n_unlabeled: int = 200
    n_eval: int = 100
    tile_size: int = 64
    crop_size: int = 64
    total_iters: int = 2000
    model: ModelConfig = field(default_factory=lambda: ModelConfig(width=8, depth=3))

    def train_config(self, seed: int, **overrides) -> TrainConfig:
        base = dict(
            total_iters=self.total_iters,
            batch_labeled=4,
            batch_unlabeled=4,
            learning_rate=1e-3,
            alpha_schedule=AlphaSchedule(alpha_max=1.0, ramp_iters=max(1, self.total_iters // 10)),
            mcc=MccConfig(),
            seed=seed,
        )
        base.update(overrides)
        return TrainConfig(**base)

    def augment_config(self, seed: int) -> AugmentConfig:
        return AugmentConfig(crop_size=self.crop_size, seed=seed)


@dataclass
class AdaptationResult:
    seed: int
    baseline_iou: float
    ssda_iou: float
    baseline_iou_source: float
    pseudo_kept_fraction: float
    seconds: float


def make_domains(setup: SyntheticSetup, seed: int):
    labeled = generate_synthetic_domain("A", setup.n_labeled, setup.tile_size, seed=1000 + seed)
    unlabeled = generate_synthetic_domain("B", setup.n_unlabeled, setup.tile_size, seed=2000 + seed)
    held_out = generate_synthetic_domain("B", setup.n_eval, setup.tile_size, seed=3000 + seed)
    held_out_a = generate_synthetic_domain("A", setup.n_eval, setup.tile_size, seed=4000 + seed)
    return labeled, unlabeled, held_out, held_out_a


def run_adaptation(seed: int, setup: SyntheticSetup | None = None, **train_overrides) -> AdaptationResult:
    setup = setup or SyntheticSetup()
    t0 = time.time()
    labeled, unlabeled, held_out, held_out_a = make_domains(setup, seed)
    norm = compute_normalization(labeled)
    model_cfg = ModelConfig(**{**setup.model.__dict__, "seed": seed})
    aug = setup.augment_config(seed)

    base_cfg = setup.train_config(seed, alpha_schedule=AlphaSchedule(0.0, 1), beta=0.0)
    baseline = train_supervised(base_cfg, labeled, model_cfg, aug, norm)
    base_iou = evaluate_model(baseline.model, norm, held_out).iou
    base_iou_a = evaluate_model(baseline.model, norm, held_out_a).iou

    ssda_cfg = setup.train_config(seed, **train_overrides)
    maps = generate_pseudo_labels(baseline.model, unlabeled, ssda_cfg.pseudo_threshold, norm, f"baseline-seed{seed}")
    stats = pseudo_label_stats(maps)
    student = train_ssda(ssda_cfg, labeled, unlabeled, model_cfg, aug, norm, maps)
    ssda_iou = evaluate_model(student.model, norm, held_out).iou
    res = AdaptationResult(seed, base_iou, ssda_iou, base_iou_a, stats.kept_fraction, time.time() - t0)
    log.info("seed %d: baseline B %.4f (A %.4f), ssda B %.4f, kept %.3f, %.0fs",
             seed, base_iou, base_iou_a, ssda_iou, stats.kept_fraction, res.seconds)
    return res
