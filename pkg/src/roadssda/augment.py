"""Training-time augmentation: rescale, rotate, flip, color jitter, random crop."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from PIL import Image

from .datasets import IGNORE, TileSample


@dataclass
class AugmentConfig:
    scale_range: tuple[float, float] = (0.5, 1.5)
    rotations: tuple[int, ...] = (0, 90, 180, 270)
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    color_jitter: tuple[float, float, float] = (0.2, 0.2, 0.2)  # brightness, contrast, saturation
    crop_size: int = 512
    seed: int = 0

    def __post_init__(self):
        self.scale_range = tuple(float(v) for v in self.scale_range)
        self.rotations = tuple(int(r) for r in self.rotations)
        self.color_jitter = tuple(float(v) for v in self.color_jitter)
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"scale_range must satisfy 0 < lo <= hi, got {self.scale_range}")
        if not self.rotations or any(r % 90 for r in self.rotations):
            raise ValueError("rotations must be a non-empty set of multiples of 90 degrees")
        for p in (self.hflip_prob, self.vflip_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probabilities must lie in [0, 1], got {p}")
        if any(d < 0 for d in self.color_jitter):
            raise ValueError("color jitter deltas must be >= 0")
        if self.crop_size < 1:
            raise ValueError("crop_size must be >= 1")


def _rescale(image, mask, s):
    h, w = mask.shape
    nh, nw = max(1, int(round(h * s))), max(1, int(round(w * s)))
    if (nh, nw) == (h, w):
        return image, mask
    image = np.asarray(Image.fromarray(image).resize((nw, nh), Image.BILINEAR))
    mask = np.asarray(Image.fromarray(mask).resize((nw, nh), Image.NEAREST))
    return image, mask


def _jitter(image, factors):
    b, c, s = factors
    img = image.astype(np.float32) * b
    gray = img @ np.array([0.299, 0.587, 0.114], dtype=np.float32)
    img = (img - gray.mean()) * c + gray.mean()
    gray = img @ np.array([0.299, 0.587, 0.114], dtype=np.float32)
    img = gray[..., None] + (img - gray[..., None]) * s
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _pad_to(image, mask, size):
    h, w = mask.shape
    ph, pw = max(0, size - h), max(0, size - w)
    if ph == 0 and pw == 0:
        return image, mask
    mask = np.pad(mask, ((0, ph), (0, pw)), constant_values=IGNORE)
    # reflect needs pad < dim, so grow in steps
    while image.shape[0] < size or image.shape[1] < size:
        ih, iw = image.shape[:2]
        mode = "reflect" if ih > 1 and iw > 1 else "edge"
        grow = [max(0, size - n) if mode == "edge" else min(max(0, size - n), n - 1) for n in (ih, iw)]
        image = np.pad(image, ((0, grow[0]), (0, grow[1]), (0, 0)), mode=mode)
    return image, mask


def augment(sample: TileSample, cfg: AugmentConfig, rng: np.random.Generator) -> TileSample:
    """Apply rescale -> rotate -> flip -> color -> crop to one tile.

    Geometric steps act identically on image and mask; color jitter only
    touches the image. The result is ``cfg.crop_size`` square and depends
    only on the inputs and the state of ``rng``.
    """
    image, mask = sample.image, sample.mask
    s = rng.uniform(*cfg.scale_range)
    k = int(cfg.rotations[rng.integers(len(cfg.rotations))]) // 90
    hflip = rng.random() < cfg.hflip_prob
    vflip = rng.random() < cfg.vflip_prob
    factors = [rng.uniform(1.0 - d, 1.0 + d) for d in cfg.color_jitter]

    image, mask = _rescale(image, mask, s)
    if k % 4:
        image, mask = np.rot90(image, k), np.rot90(mask, k)
    if hflip:
        image, mask = image[:, ::-1], mask[:, ::-1]
    if vflip:
        image, mask = image[::-1], mask[::-1]
    if any(cfg.color_jitter):
        image = _jitter(image, factors)
    image, mask = _pad_to(image, mask, cfg.crop_size)
    h, w = mask.shape
    r = int(rng.integers(0, h - cfg.crop_size + 1))
    c = int(rng.integers(0, w - cfg.crop_size + 1))
    image = np.ascontiguousarray(image[r:r + cfg.crop_size, c:c + cfg.crop_size])
    mask = np.ascontiguousarray(mask[r:r + cfg.crop_size, c:c + cfg.crop_size])
    return replace(sample, image=image, mask=mask)
