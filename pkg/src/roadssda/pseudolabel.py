"""Teacher-generated pseudo-labels for unlabeled tiles, their statistics and on-disk store."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .datasets import IGNORE, TileSample, load_mask, save_png
from .errors import IngestionError
from .model import predict_image_probs


@dataclass
class PseudoLabelMap:
    mask: np.ndarray  # H x W uint8 in {0, 1, 255}
    confidence: np.ndarray  # H x W float32, max-class probability
    teacher_checkpoint_id: str
    threshold: float
    tile_id: str = ""


@dataclass
class PseudoLabelStats:
    kept_fraction: float
    road_fraction: float
    per_image_histogram: list[dict]


def labels_from_probs(probs: np.ndarray, threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Argmax labels with pixels below ``threshold`` confidence set to 255."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    probs = np.asarray(probs, dtype=np.float32)
    confidence = probs.max(axis=0)
    mask = probs.argmax(axis=0).astype(np.uint8)
    mask[confidence < threshold] = IGNORE
    return mask, confidence


def generate_pseudo_labels(
    teacher,
    unlabeled_tiles: Sequence[TileSample],
    threshold: float = 0.9,
    normalization: dict | None = None,
    teacher_checkpoint_id: str = "",
) -> list[PseudoLabelMap]:
    """Label every unlabeled tile with the teacher's inference-mode prediction."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    maps = []
    for tile in unlabeled_tiles:
        probs = predict_image_probs(teacher, tile.image, normalization)
        mask, conf = labels_from_probs(probs, threshold)
        maps.append(PseudoLabelMap(mask, conf, teacher_checkpoint_id, float(threshold), tile.tile_id))
    return maps


def pseudo_label_stats(maps: Sequence[PseudoLabelMap]) -> PseudoLabelStats:
    if not maps:
        raise ValueError("pseudo_label_stats needs at least one map")
    kept = road = total = 0
    hist = []
    for m in maps:
        n_bg = int(np.count_nonzero(m.mask == 0))
        n_road = int(np.count_nonzero(m.mask == 1))
        n_ign = int(np.count_nonzero(m.mask == IGNORE))
        hist.append({"tile_id": m.tile_id, "background": n_bg, "road": n_road, "ignore": n_ign})
        kept += n_bg + n_road
        road += n_road
        total += m.mask.size
    return PseudoLabelStats(kept / total, road / kept if kept else 0.0, hist)


# ---------------------------------------------------------------------------
# store: {id}_pseudo.png, {id}_conf.png (confidence * 255) and index.json


def write_pseudo_store(maps: Sequence[PseudoLabelMap], out_dir: Path | str) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for m in maps:
        save_png(m.mask, out_dir / f"{m.tile_id}_pseudo.png")
        save_png(np.clip(np.rint(m.confidence * 255.0), 0, 255).astype(np.uint8), out_dir / f"{m.tile_id}_conf.png")
    stats = pseudo_label_stats(maps) if maps else None
    index = {
        "teacher_checkpoint_id": maps[0].teacher_checkpoint_id if maps else "",
        "threshold": maps[0].threshold if maps else None,
        "tiles": [m.tile_id for m in maps],
        "kept_fraction": stats.kept_fraction if stats else None,
        "road_fraction": stats.road_fraction if stats else None,
    }
    path = out_dir / "index.json"
    path.write_text(json.dumps(index, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_pseudo_store(store_dir: Path | str) -> dict[str, PseudoLabelMap]:
    """Load a pseudo-label store keyed by tile id (confidence is 8-bit quantized)."""
    store_dir = Path(store_dir)
    index_path = store_dir / "index.json"
    if not index_path.exists():
        raise IngestionError("pseudo-label store index not found", [index_path])
    index = json.loads(index_path.read_text(encoding="utf-8"))
    maps = {}
    for tid in index["tiles"]:
        mask = load_mask(store_dir / f"{tid}_pseudo.png")
        conf = load_mask(store_dir / f"{tid}_conf.png").astype(np.float32) / 255.0
        maps[tid] = PseudoLabelMap(mask, conf, index["teacher_checkpoint_id"], index["threshold"], tid)
    return maps
