"""Optimization loop for supervised and semi-supervised (MCC + pseudo-label) training.

Every iteration draws its batches from an RNG seeded by ``(seed, stream,
iteration)``, so a run resumed from a checkpoint replays exactly the batches
an uninterrupted run would have seen.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .augment import AugmentConfig, augment
from .datasets import IGNORE, TileSample
from .errors import CheckpointError, ConfigurationError, NumericalError
from .losses import AlphaSchedule, LossBreakdown, MccConfig, combined_loss
from .model import ModelConfig, build_model, get_params, load_archive, normalize_images, save_archive, set_params
from .pseudolabel import PseudoLabelMap, generate_pseudo_labels

log = logging.getLogger(__name__)

LOG_HEADER = ["iter", "ce_labeled", "ce_pseudo", "mcc", "alpha", "total", "lr"]
LABELED, UNLABELED, MCC_SUBSAMPLE = 1, 2, 3


@dataclass
class TrainConfig:
    total_iters: int = 2000
    batch_labeled: int = 4
    batch_unlabeled: int = 4
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    optimizer: str = "adamw"
    alpha_schedule: AlphaSchedule = field(default_factory=AlphaSchedule)
    beta: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0
    mcc: MccConfig = field(default_factory=MccConfig)
    pseudo_threshold: float = 0.9
    pseudo_refresh_every: int = 0
    lr_schedule: str = "constant"

    def __post_init__(self):
        if isinstance(self.alpha_schedule, dict):
            self.alpha_schedule = AlphaSchedule(**self.alpha_schedule)
        if isinstance(self.mcc, dict):
            self.mcc = MccConfig(**self.mcc)
        if self.total_iters < 1:
            raise ValueError("total_iters must be >= 1")
        if self.batch_labeled < 1 or self.batch_unlabeled < 1:
            raise ValueError("batch sizes must be >= 1")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.optimizer != "adamw":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if not 0.0 <= self.pseudo_threshold <= 1.0:
            raise ValueError("pseudo_threshold must lie in [0, 1]")

    @classmethod
    def paper_scale(cls, **overrides):
        """The full-scale regime: AdamW, 12 images per step, lr 1e-4, 300k iterations."""
        base = dict(
            total_iters=300_000,
            batch_labeled=6,
            batch_unlabeled=6,
            learning_rate=1e-4,
            alpha_schedule=AlphaSchedule(alpha_max=1.0, ramp_iters=30_000),
        )
        base.update(overrides)
        return cls(**base)


@dataclass
class TrainState:
    iteration: int
    model: torch.nn.Module
    optimizer: torch.optim.Optimizer
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    augment_cfg: AugmentConfig
    normalization: dict | None
    log: list = field(default_factory=list)  # rows as in LOG_HEADER
    meta: dict = field(default_factory=dict)  # dataset names, teacher id, resolution

    @property
    def rng_state(self) -> dict:
        return {"seed": self.train_cfg.seed, "next_iteration": self.iteration}


def _rng(seed, stream, iteration):
    return np.random.default_rng([seed, stream, iteration])


def lr_at(cfg: TrainConfig, iteration: int) -> float:
    if cfg.lr_schedule == "cosine":
        return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * iteration / cfg.total_iters))
    return cfg.learning_rate


def sample_batch(tiles: Sequence[TileSample], batch: int, aug: AugmentConfig, rng: np.random.Generator):
    idx = rng.choice(len(tiles), size=batch, replace=len(tiles) < batch)
    out = [augment(tiles[i], aug, rng) for i in idx]
    images = np.stack([t.image for t in out])
    masks = np.stack([t.mask for t in out])
    return images, masks


def new_state(model_cfg, train_cfg, augment_cfg, normalization, meta=None) -> TrainState:
    model = build_model(model_cfg)
    model.train()
    opt = torch.optim.AdamW(model.parameters(), lr=train_cfg.learning_rate, weight_decay=train_cfg.weight_decay)
    return TrainState(0, model, opt, model_cfg, train_cfg, augment_cfg, normalization, [], dict(meta or {}))


def _apply_pseudo(tiles, pseudo_maps):
    if pseudo_maps is None:
        return [replace(t, mask=np.full(t.mask.shape, IGNORE, np.uint8)) for t in tiles]
    if isinstance(pseudo_maps, dict):
        missing = [t.tile_id for t in tiles if t.tile_id not in pseudo_maps]
        if missing:
            raise ConfigurationError(f"pseudo-label store lacks {len(missing)} tiles, e.g. {missing[:3]}")
        pseudo_maps = [pseudo_maps[t.tile_id] for t in tiles]
    if len(pseudo_maps) != len(tiles):
        raise ConfigurationError("pseudo-label maps do not align with the unlabeled tiles")
    return [replace(t, mask=m.mask) for t, m in zip(tiles, pseudo_maps)]


def train_step(state: TrainState, labeled, unlabeled=None, use_pseudo=False) -> LossBreakdown:
    """Run one optimizer step at ``state.iteration`` and append its log row."""
    cfg = state.train_cfg
    t = state.iteration
    images, masks = sample_batch(labeled, cfg.batch_labeled, state.augment_cfg, _rng(cfg.seed, LABELED, t))
    x_t = normalize_images(images, state.normalization)
    y_t = torch.from_numpy(masks)
    x_s = pseudo = None
    if unlabeled is not None:
        u_images, u_masks = sample_batch(unlabeled, cfg.batch_unlabeled, state.augment_cfg, _rng(cfg.seed, UNLABELED, t))
        x_s = normalize_images(u_images, state.normalization)
        pseudo = torch.from_numpy(u_masks) if use_pseudo else None
    gen = torch.Generator().manual_seed(int(np.random.SeedSequence([cfg.seed, MCC_SUBSAMPLE, t]).generate_state(1)[0]))

    lr = lr_at(cfg, t)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.model.train()
    state.optimizer.zero_grad(set_to_none=True)
    total, parts = combined_loss(
        state.model, x_t, y_t, x_s, pseudo, t, cfg.alpha_schedule, cfg.beta, cfg.mcc, gen
    )
    total.backward()
    for name, p in state.model.named_parameters():
        if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
            raise NumericalError(f"non-finite gradient for parameter {name!r} at iteration {t}")
    state.optimizer.step()
    state.log.append(parts.as_row(t, lr))
    state.iteration = t + 1
    return parts


def run(
    state: TrainState,
    labeled: Sequence[TileSample],
    unlabeled: Sequence[TileSample] | None = None,
    pseudo_maps=None,
    until: int | None = None,
    out_dir: Path | str | None = None,
    teacher=None,
) -> TrainState:
    """Train from ``state.iteration`` up to ``until`` (default ``total_iters``).

    With ``out_dir`` set, checkpoints are written every ``checkpoint_every``
    iterations and at the end, together with ``train_log.csv``.
    """
    cfg = state.train_cfg
    until = cfg.total_iters if until is None else until
    if not labeled:
        raise ConfigurationError("labeled train split is empty")
    u_tiles = None
    use_pseudo = pseudo_maps is not None
    if unlabeled is not None:
        if not unlabeled:
            raise ConfigurationError("unlabeled split is empty")
        u_tiles = _apply_pseudo(unlabeled, pseudo_maps)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    while state.iteration < until:
        k = cfg.pseudo_refresh_every
        if u_tiles is not None and use_pseudo and k and state.iteration and state.iteration % k == 0:
            # self-training refresh: the current student relabels the unlabeled stream
            maps = generate_pseudo_labels(state.model, unlabeled, cfg.pseudo_threshold, state.normalization, "refresh")
            u_tiles = _apply_pseudo(unlabeled, maps)
        parts = train_step(state, labeled, u_tiles, use_pseudo)
        if state.iteration % 100 == 0 or state.iteration == until:
            log.info("iter %d  total %.4f  ce %.4f  pseudo %.4f  mcc %.4f  alpha %.3f",
                     state.iteration, parts.total, parts.ce_labeled, parts.ce_pseudo, parts.mcc, parts.alpha)
        if out_dir is not None and cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
            save_checkpoint(state, out_dir / f"ckpt_{state.iteration:07d}.npz")
    if out_dir is not None:
        save_checkpoint(state, out_dir / "final.npz")
        write_log(state.log, out_dir / "train_log.csv")
    return state


def train_supervised(
    cfg: TrainConfig,
    labeled: Sequence[TileSample],
    model_cfg: ModelConfig,
    augment_cfg: AugmentConfig,
    normalization: dict | None = None,
    out_dir: Path | str | None = None,
    meta: dict | None = None,
) -> TrainState:
    """Baseline: minimize ignore-aware cross-entropy on augmented labeled tiles."""
    if not labeled:
        raise ConfigurationError("labeled train split is empty")
    state = new_state(model_cfg, cfg, augment_cfg, normalization, meta)
    return run(state, labeled, out_dir=out_dir)


def train_ssda(
    cfg: TrainConfig,
    labeled: Sequence[TileSample],
    unlabeled: Sequence[TileSample],
    model_cfg: ModelConfig,
    augment_cfg: AugmentConfig,
    normalization: dict | None = None,
    pseudo_maps: Sequence[PseudoLabelMap] | dict | None = None,
    out_dir: Path | str | None = None,
    meta: dict | None = None,
) -> TrainState:
    """Semi-supervised adaptation: labeled CE + beta * pseudo CE + alpha(t) * MCC on the unlabeled stream.

    The student starts from the same seed-determined initialization as the
    baseline. ``pseudo_maps`` (from a teacher) are required when ``beta > 0``.
    """
    if cfg.beta > 0 and pseudo_maps is None:
        raise ConfigurationError("beta > 0 needs a pseudo-label store; generate one from a teacher first")
    state = new_state(model_cfg, cfg, augment_cfg, normalization, meta)
    if cfg.beta == 0:
        pseudo_maps = None
    return run(state, labeled, unlabeled, pseudo_maps, out_dir=out_dir)


# ---------------------------------------------------------------------------
# checkpoints and logs


def _config_dict(state: TrainState) -> dict:
    return {
        "model": asdict(state.model_cfg),
        "train": asdict(state.train_cfg),
        "augment": asdict(state.augment_cfg),
    }


def save_checkpoint(state: TrainState, path: Path | str) -> None:
    arrays = {f"param/{k}": v for k, v in get_params(state.model).items()}
    opt_state = state.optimizer.state_dict()["state"]
    for idx, entry in opt_state.items():
        for key, value in entry.items():
            arrays[f"optim/{idx}/{key}"] = value.detach().cpu().numpy() if torch.is_tensor(value) else np.asarray(value)
    meta = dict(
        _config_dict(state),
        iteration=state.iteration,
        normalization=state.normalization,
        rng=state.rng_state,
        log=state.log,
        info=state.meta,
    )
    save_archive(path, arrays, meta)


def load_checkpoint(path: Path | str) -> TrainState:
    meta, arrays = load_archive(path)
    try:
        model_cfg = ModelConfig(**meta["model"])
        train_cfg = TrainConfig(**meta["train"])
        augment_cfg = AugmentConfig(**meta["augment"])
        state = new_state(model_cfg, train_cfg, augment_cfg, meta["normalization"], meta.get("info"))
        set_params(state.model, {k[6:]: v for k, v in arrays.items() if k.startswith("param/")})
        opt_state = {}
        for key, value in arrays.items():
            if key.startswith("optim/"):
                _, idx, name = key.split("/", 2)
                opt_state.setdefault(int(idx), {})[name] = torch.from_numpy(np.array(value))
        sd = state.optimizer.state_dict()
        sd["state"] = opt_state
        state.optimizer.load_state_dict(sd)
    except (KeyError, TypeError, ValueError, RuntimeError) as exc:
        raise CheckpointError(f"checkpoint {path} is incomplete: {exc}") from exc
    state.iteration = int(meta["iteration"])
    state.log = [list(row) for row in meta["log"]]
    return state


def format_log(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOG_HEADER)
    for row in rows:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def write_log(rows, path: Path | str) -> None:
    Path(path).write_text(format_log(rows), encoding="utf-8")
