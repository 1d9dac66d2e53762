"""Training objective: ignore-aware cross-entropy, Minimum Class Confusion,
pseudo-label cross-entropy and the ramped combination of the three."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

IGNORE = 255


@dataclass
class AlphaSchedule:
    alpha_max: float = 1.0
    ramp_iters: int = 200
    shape: str = "linear"  # or "sigmoid"

    def __post_init__(self):
        if self.alpha_max < 0:
            raise ValueError("alpha_max must be >= 0")
        if self.ramp_iters < 1:
            raise ValueError("ramp_iters must be >= 1")
        if self.shape not in ("linear", "sigmoid"):
            raise ValueError(f"unknown schedule shape {self.shape!r}")


@dataclass
class MccConfig:
    temperature: float = 2.5
    entropy_weighting: bool = True
    pixel_subsample: int | None = 4096

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if self.pixel_subsample is not None and self.pixel_subsample < 2:
            raise ValueError("pixel_subsample must be >= n_classes")


@dataclass
class LossBreakdown:
    ce_labeled: float
    ce_pseudo: float
    mcc: float
    alpha: float
    total: float

    def as_row(self, iteration, lr):
        return [int(iteration), float(self.ce_labeled), float(self.ce_pseudo), float(self.mcc), float(self.alpha),
                float(self.total), float(lr)]


def alpha_at(schedule: AlphaSchedule, iteration: int) -> float:
    """MCC weight at ``iteration``: 0 at the start, ``alpha_max`` once the ramp is over."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    if iteration >= schedule.ramp_iters:
        return float(schedule.alpha_max)
    x = iteration / schedule.ramp_iters
    if schedule.shape == "linear":
        return schedule.alpha_max * min(1.0, x)
    k = 10.0
    lo, hi = 1.0 / (1.0 + math.exp(k / 2)), 1.0 / (1.0 + math.exp(-k / 2))
    s = 1.0 / (1.0 + math.exp(-k * (x - 0.5)))
    return schedule.alpha_max * (s - lo) / (hi - lo)


def _check_mask(mask: torch.Tensor, name: str) -> None:
    bad = (mask != 0) & (mask != 1) & (mask != IGNORE)
    if bool(bad.any()):
        values = sorted(set(mask[bad].unique().tolist()))[:5]
        raise ValueError(f"{name} holds values outside {{0, 1, 255}}: {values}")


def ce_ignore(logits: torch.Tensor, target: torch.Tensor, name: str = "target") -> torch.Tensor:
    """Mean cross-entropy over pixels whose target is not 255 (0 if there are none)."""
    if logits.ndim != 4 or target.shape != (logits.shape[0],) + tuple(logits.shape[2:]):
        raise ValueError(f"{name} shape {tuple(target.shape)} does not match logits {tuple(logits.shape)}")
    _check_mask(target, name)
    target = target.long()
    n_valid = int((target != IGNORE).sum())
    if n_valid == 0:
        return logits.sum() * 0.0
    return F.cross_entropy(logits, target, ignore_index=IGNORE, reduction="sum") / n_valid


def _canonical_order(rows: torch.Tensor) -> torch.Tensor:
    keys = rows.detach().cpu().numpy()
    order = np.lexsort(keys.T[::-1])
    return torch.from_numpy(order).to(rows.device)


def mcc_loss(logits: torch.Tensor, cfg: MccConfig | None = None, generator: torch.Generator | None = None) -> torch.Tensor:
    """Minimum Class Confusion over the pixels of a logit batch.

    Every pixel is one example. Predictions are softened with the
    temperature, optionally weighted by certainty ``1 + exp(-entropy)``, and
    folded into a class-correlation matrix whose row-normalized off-diagonal
    mass (divided by the class count) is returned. The value lies in [0, 1].
    """
    cfg = cfg or MccConfig()
    if logits.ndim != 4:
        raise ValueError(f"expected batch x classes x H x W logits, got {tuple(logits.shape)}")
    n_classes = logits.shape[1]
    flat = logits.permute(0, 2, 3, 1).reshape(-1, n_classes)
    if not bool(torch.isfinite(flat).all()):
        raise ValueError("mcc_loss received non-finite logits")
    if cfg.pixel_subsample is not None and flat.shape[0] > cfg.pixel_subsample:
        idx = torch.randperm(flat.shape[0], generator=generator)[: cfg.pixel_subsample]
        flat = flat[idx]
    n = flat.shape[0]
    if n < n_classes:
        raise ValueError(f"mcc_loss needs at least {n_classes} pixels, got {n}")

    scaled = flat / cfg.temperature
    # sort rows so every reduction below sees the same order for any pixel permutation
    scaled = scaled[_canonical_order(scaled)]
    probs = torch.softmax(scaled, dim=1)
    if cfg.entropy_weighting:
        entropy = -(probs * torch.log_softmax(scaled, dim=1)).sum(dim=1)
        weight = 1.0 + torch.exp(-entropy)
        weight = n * weight / weight.sum()
        corr = (probs * weight[:, None]).transpose(0, 1) @ probs
    else:
        corr = probs.transpose(0, 1) @ probs
    tiny = torch.finfo(corr.dtype).tiny
    corr = corr / corr.sum(dim=1, keepdim=True).clamp_min(tiny)
    return (corr.sum() - torch.trace(corr)) / n_classes


def combined_loss(
    model,
    labeled_images: torch.Tensor,
    labeled_masks: torch.Tensor,
    unlabeled_images: torch.Tensor | None,
    pseudo_mask: torch.Tensor | None,
    iteration: int,
    schedule: AlphaSchedule,
    beta: float = 1.0,
    mcc_cfg: MccConfig | None = None,
    generator: torch.Generator | None = None,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Supervised CE + ``beta`` * pseudo-label CE + ``alpha(iteration)`` * MCC.

    Returns the differentiable total and a float breakdown. Terms whose
    weight is identically zero (``alpha_max == 0``, no pseudo mask) are not
    evaluated and recorded as 0.
    """
    if labeled_masks.shape[0] != labeled_images.shape[0]:
        raise ValueError("labeled_masks batch size does not match labeled_images")
    if pseudo_mask is not None:
        if unlabeled_images is None:
            raise ValueError("pseudo_mask given without unlabeled_images")
        expected = (unlabeled_images.shape[0],) + tuple(unlabeled_images.shape[2:])
        if tuple(pseudo_mask.shape) != expected:
            raise ValueError(f"pseudo_mask shape {tuple(pseudo_mask.shape)} does not match unlabeled_images {expected}")

    # without an unlabeled stream the MCC term is absent, so its effective weight is 0
    alpha = alpha_at(schedule, iteration) if unlabeled_images is not None else 0.0
    ce_l = ce_ignore(model(labeled_images), labeled_masks, "labeled_masks")
    total = ce_l
    ce_p_val = mcc_val = 0.0
    use_mcc = unlabeled_images is not None and schedule.alpha_max > 0
    if unlabeled_images is not None and (use_mcc or pseudo_mask is not None):
        logits_u = model(unlabeled_images)
        if pseudo_mask is not None:
            ce_p = ce_ignore(logits_u, pseudo_mask, "pseudo_mask")
            total = total + beta * ce_p
            ce_p_val = float(ce_p.detach())
        if use_mcc:
            mcc = mcc_loss(logits_u, mcc_cfg, generator)
            total = total + alpha * mcc
            mcc_val = float(mcc.detach())
    return total, LossBreakdown(float(ce_l.detach()), ce_p_val, mcc_val, alpha, float(total.detach()))
