"""Road IoU, checkpoint evaluation and the cross-dataset transfer grid."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .datasets import IGNORE, DatasetManifest, TileSample, default_split, load_sample, tile_grid
from .model import checkpoint_id, load_model, predict_image_probs

log = logging.getLogger(__name__)

REPORT_HEADER = ["target_train", "source", "eval_set", "road_iou_pct", "negative_transfer_flag"]


@dataclass(frozen=True)
class IoUResult:
    intersection_px: int = 0
    union_px: int = 0
    n_eval_px: int = 0

    @property
    def iou(self) -> float:
        return 1.0 if self.union_px == 0 else self.intersection_px / self.union_px

    def __add__(self, other: "IoUResult") -> "IoUResult":
        # micro accumulation: sum counts, divide once
        return IoUResult(
            self.intersection_px + other.intersection_px,
            self.union_px + other.union_px,
            self.n_eval_px + other.n_eval_px,
        )


def road_iou(pred_mask: np.ndarray, gt_mask: np.ndarray) -> IoUResult:
    """Road-class IoU counts over the non-ignore pixels of ``gt_mask``."""
    pred_mask = np.asarray(pred_mask)
    gt_mask = np.asarray(gt_mask)
    if pred_mask.shape != gt_mask.shape:
        raise ValueError(f"prediction shape {pred_mask.shape} != ground-truth shape {gt_mask.shape}")
    if pred_mask.size and (pred_mask.min() < 0 or pred_mask.max() > 1):
        raise ValueError("predictions must be hard labels in {0, 1}")
    if gt_mask.size and (gt_mask.min() < 0 or gt_mask.max() > IGNORE):
        raise ValueError("ground truth must hold values in {0, 1, 255}")
    inter, union, n_eval, _ = kernels.iou_counts(
        np.ascontiguousarray(pred_mask, dtype=np.uint8), np.ascontiguousarray(gt_mask, dtype=np.uint8)
    )
    return IoUResult(inter, union, n_eval)


def accumulate(results: Sequence[IoUResult]) -> IoUResult:
    total = IoUResult()
    for r in results:
        total = total + r
    return total


def model_predictor(model, normalization) -> Callable[[np.ndarray], np.ndarray]:
    """Wrap a network as ``image -> hard {0,1} mask`` (single forward pass, no TTA)."""

    def predict(image):
        return predict_image_probs(model, image, normalization).argmax(axis=0).astype(np.uint8)

    return predict


def evaluate_images(predict: Callable[[np.ndarray], np.ndarray], samples: Sequence[TileSample], tile_size: int | None = None) -> IoUResult:
    """Micro-IoU of ``predict`` over whole images.

    With ``tile_size`` each image is cut into a non-overlapping grid; border
    tiles are padded (reflect for the image, 255 for the mask) so every
    labeled pixel is scored exactly once.
    """
    total = IoUResult()
    for s in samples:
        if tile_size is None:
            total = total + road_iou(predict(s.image), s.mask)
            continue
        h, w = s.mask.shape
        ph, pw = (-h) % tile_size, (-w) % tile_size
        image = s.image
        if ph or pw:
            mode = "reflect" if min(h, w) > max(ph, pw) else "edge"
            image = np.pad(image, ((0, ph), (0, pw), (0, 0)), mode=mode)
        mask = np.pad(s.mask, ((0, ph), (0, pw)), constant_values=IGNORE)
        for r in tile_grid(h + ph, tile_size, tile_size):
            for c in tile_grid(w + pw, tile_size, tile_size):
                pred = predict(np.ascontiguousarray(image[r:r + tile_size, c:c + tile_size]))
                total = total + road_iou(pred, mask[r:r + tile_size, c:c + tile_size])
    return total


def evaluate_model(model, normalization, samples, tile_size=None) -> IoUResult:
    return evaluate_images(model_predictor(model, normalization), samples, tile_size)


def evaluate_checkpoint(
    checkpoint: Path | str, manifest_eval: DatasetManifest, tile_size: int | None = 512, split: str | None = None
) -> tuple[IoUResult, dict]:
    """Evaluate a stored model on a manifest split; returns ``(result, metadata)``.

    Metadata records the checkpoint id, the micro-IoU convention and a
    warning when the eval resolution differs from the training resolution.
    """
    model, meta = load_model(checkpoint)
    info = meta.get("info", {})
    samples = [load_sample(manifest_eval, s) for s in manifest_eval.split(split or default_split(manifest_eval))]
    result = evaluate_model(model, meta.get("normalization"), samples, tile_size)
    report_meta = {"checkpoint_id": checkpoint_id(checkpoint), "iou": "micro", "warnings": []}
    train_res = info.get("resolution_m_per_px")
    if train_res is not None and not math.isclose(train_res, manifest_eval.resolution_m_per_px):
        report_meta["warnings"].append(
            f"resolution mismatch: trained at {train_res} m/px, {manifest_eval.name} is {manifest_eval.resolution_m_per_px} m/px"
        )
    return result, report_meta


# ---------------------------------------------------------------------------
# transfer report


@dataclass
class ReportRow:
    target_train: str
    source: str  # "-" when no source set was used
    eval_set: str
    road_iou: float  # percent; NaN for failed cells
    negative_transfer: bool = False
    error: str = ""


@dataclass
class TransferReport:
    rows: list[ReportRow]
    metadata: dict = field(default_factory=dict)

    def flag_negative_transfer(self) -> None:
        """Flag with-source rows scoring below the no-source row of the same target and eval set."""
        baseline = {(r.target_train, r.eval_set): r.road_iou for r in self.rows if r.source == "-" and not r.error}
        for r in self.rows:
            base = baseline.get((r.target_train, r.eval_set))
            r.negative_transfer = bool(
                r.source != "-" and not r.error and base is not None and r.road_iou < base
            )

    def to_csv(self) -> str:
        buf = io.StringIO()
        for key in sorted(self.metadata):
            buf.write(f"# {key}: {json.dumps(self.metadata[key], sort_keys=True)}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_HEADER)
        for r in self.rows:
            pct = "" if r.error else repr(round(r.road_iou, 2))
            writer.writerow([r.target_train, r.source, r.eval_set, pct, int(r.negative_transfer)])
        return buf.getvalue()

    def to_markdown(self) -> str:
        evals = list(dict.fromkeys(r.eval_set for r in self.rows))
        cells = {}
        for r in self.rows:
            text = f"FAILED ({r.error})" if r.error else f"{round(r.road_iou, 2)}"
            cells[(r.target_train, r.source), r.eval_set] = text + (" ↓" if r.negative_transfer else "")
        keys = list(dict.fromkeys((r.target_train, r.source) for r in self.rows))
        lines = ["| Target train | Source | " + " | ".join(evals) + " |", "|" + "---|" * (len(evals) + 2)]
        for k in keys:
            lines.append(f"| {k[0]} | {k[1]} | " + " | ".join(cells.get((k, e), "") for e in evals) + " |")
        lines.append("")
        lines.append("Road IoU in percent (micro-averaged over each eval set). ↓ marks negative transfer.")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: Path | str, stem: str = "transfer_report") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path, md_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.md"
        csv_path.write_text(self.to_csv(), encoding="utf-8")
        md_path.write_text(self.to_markdown(), encoding="utf-8")
        return csv_path, md_path


def read_report_csv(text: str) -> list[dict]:
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode("utf-8")).hexdigest()[:16]


@dataclass
class Experiment:
    """One grid cell: train on ``target`` (labeled), optionally adapt with unlabeled ``source``."""

    target_name: str
    target_tiles: Sequence[TileSample]
    source_name: str | None = None
    source_tiles: Sequence[TileSample] | None = None
    config: dict = field(default_factory=dict)  # keys: model, train, augment (dataclass instances)


def run_transfer_grid(
    experiments: Sequence[Experiment],
    eval_sets: dict[str, Sequence[TileSample]],
    tile_size: int | None = None,
    out_dir: Path | str | None = None,
) -> TransferReport:
    """Train every cell, evaluate on every eval set and assemble a TransferReport.

    Cells with a source use the no-source model of the same target as the
    teacher (trained on demand). A failing cell becomes a failure row and the
    grid continues.
    """
    from .datasets import compute_normalization
    from .model import get_params
    from .pseudolabel import generate_pseudo_labels
    from .trainer import train_ssda, train_supervised

    rows: list[ReportRow] = []
    teachers: dict = {}
    checkpoints: dict = {}

    def baseline(exp):
        key = (exp.target_name, config_hash({k: asdict(v) for k, v in exp.config.items()}))
        if key not in teachers:
            norm = compute_normalization(exp.target_tiles)
            cell_dir = Path(out_dir) / f"{exp.target_name}__none" if out_dir else None
            state = train_supervised(
                exp.config["train"], exp.target_tiles, exp.config["model"], exp.config["augment"], norm, cell_dir,
                meta={"target_train": exp.target_name, "source": "-"},
            )
            teachers[key] = (state, norm)
        return teachers[key]

    for exp in experiments:
        source = exp.source_name or "-"
        try:
            if exp.source_name is None:
                state, norm = baseline(exp)
            else:
                teacher, norm = baseline(exp)
                maps = generate_pseudo_labels(
                    teacher.model, exp.source_tiles, exp.config["train"].pseudo_threshold, norm, "grid-teacher"
                )
                cell_dir = Path(out_dir) / f"{exp.target_name}__{exp.source_name}" if out_dir else None
                state = train_ssda(
                    exp.config["train"], exp.target_tiles, exp.source_tiles, exp.config["model"],
                    exp.config["augment"], norm, maps, cell_dir,
                    meta={"target_train": exp.target_name, "source": exp.source_name},
                )
            params = get_params(state.model)
            checkpoints[f"{exp.target_name}/{source}"] = config_hash({k: v.tobytes().hex()[:64] for k, v in params.items()})
            for name, samples in eval_sets.items():
                res = evaluate_model(state.model, norm, samples, tile_size)
                rows.append(ReportRow(exp.target_name, source, name, 100.0 * res.iou))
        except Exception as exc:  # grid keeps going; the row records the failure
            log.exception("grid cell %s/%s failed", exp.target_name, source)
            for name in eval_sets:
                rows.append(ReportRow(exp.target_name, source, name, float("nan"), error=f"{type(exc).__name__}: {exc}"))
    report = TransferReport(rows, {"iou": "micro", "checkpoints": checkpoints,
                                   "config_hash": config_hash([{k: asdict(v) for k, v in e.config.items()} for e in experiments])})
    report.flag_negative_transfer()
    return report
