"""Command-line entry points: synth, prep, train, pseudolabel, train-ssda, eval, report.

Exit codes: 0 when all requested work succeeded, 1 when some of it failed at
run time, 2 for usage and input-validation errors (including a refusal to
overwrite existing outputs without ``--force``).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .augment import AugmentConfig
from .datasets import (
    compute_normalization,
    default_split,
    extract_tiles,
    generate_synthetic_domain,
    harmonize_resolution,
    load_sample,
    load_tiles,
    parse_manifest,
    write_tile_store,
)
from .errors import (
    CheckpointError,
    ConfigurationError,
    IngestionError,
    ManifestError,
    UnsupportedOperationError,
)
from .evaluation import ReportRow, TransferReport, config_hash, evaluate_checkpoint
from .losses import AlphaSchedule
from .model import ModelConfig, checkpoint_id, load_model
from .pseudolabel import generate_pseudo_labels, pseudo_label_stats, read_pseudo_store, write_pseudo_store
from .trainer import TrainConfig, train_ssda, train_supervised

log = logging.getLogger("roadssda")

SCHEMA_VERSION = 1
DATA_ROOT_ENV = "ROADSSDA_DATA_ROOT"
SNAPSHOT = "resolved_config.json"
INPUT_ERRORS = (ManifestError, IngestionError, ConfigurationError, CheckpointError, UnsupportedOperationError)


class UsageError(Exception):
    """Invalid invocation detected after argument parsing (exit code 2)."""


# ---------------------------------------------------------------------------
# experiment config


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    datasets: dict = field(default_factory=dict)  # role -> manifest path
    output_dir: str = "runs"

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "model": asdict(self.model),
            "train": asdict(self.train),
            "augment": asdict(self.augment),
            "datasets": dict(self.datasets),
            "output_dir": str(self.output_dir),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigurationError("config must be a JSON object")
        version = data.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ConfigurationError(f"config schema_version {version!r} is not supported (expected {SCHEMA_VERSION})")
        unknown = set(data) - {"schema_version", "model", "train", "augment", "datasets", "output_dir"}
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(
                model=ModelConfig(**data.get("model", {})),
                train=TrainConfig(**data.get("train", {})),
                augment=AugmentConfig(**data.get("augment", {})),
                datasets=dict(data.get("datasets", {})),
                output_dir=str(data.get("output_dir", "runs")),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"invalid config: {exc}") from exc


def load_config(path: Path | str | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    if not path.exists():
        raise IngestionError("config file not found", [path])
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON: {exc.msg} (line {exc.lineno})") from exc
    return ExperimentConfig.from_dict(data)


def resolve_path(value: str | Path) -> Path:
    """Relative paths that do not exist are retried under ``$ROADSSDA_DATA_ROOT``."""
    p = Path(value)
    root = os.environ.get(DATA_ROOT_ENV)
    if not p.is_absolute() and not p.exists() and root:
        candidate = Path(root) / p
        if candidate.exists():
            return candidate
    return p


def apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    """Command-line flags win over file values."""
    t, m, a = cfg.train, cfg.model, cfg.augment
    get = lambda name: getattr(args, name, None)  # noqa: E731
    if get("seed") is not None:
        t.seed = m.seed = a.seed = args.seed
    for flag, obj, attr in (
        ("iters", t, "total_iters"),
        ("lr", t, "learning_rate"),
        ("batch_labeled", t, "batch_labeled"),
        ("batch_unlabeled", t, "batch_unlabeled"),
        ("beta", t, "beta"),
        ("threshold", t, "pseudo_threshold"),
        ("checkpoint_every", t, "checkpoint_every"),
        ("arch", m, "arch"),
        ("width", m, "width"),
        ("depth", m, "depth"),
        ("crop", a, "crop_size"),
    ):
        if get(flag) is not None:
            setattr(obj, attr, get(flag))
    if get("alpha_max") is not None or get("ramp") is not None:
        s = t.alpha_schedule
        t.alpha_schedule = AlphaSchedule(
            s.alpha_max if get("alpha_max") is None else args.alpha_max,
            s.ramp_iters if get("ramp") is None else args.ramp,
            s.shape,
        )
    if get("no_augment"):
        cfg.augment = AugmentConfig(scale_range=(1, 1), rotations=(0,), hflip_prob=0, vflip_prob=0,
                                    color_jitter=(0, 0, 0), crop_size=a.crop_size, seed=a.seed)
    for role in ("labeled", "unlabeled"):
        if get(role) is not None:
            cfg.datasets[{"labeled": "labeled_target", "unlabeled": "unlabeled_source"}[role]] = str(get(role))
    if get("out") is not None:
        cfg.output_dir = str(args.out)
    try:
        # re-run validation on the merged values
        cfg.train = TrainConfig(**asdict(cfg.train))
        cfg.model = ModelConfig(**asdict(cfg.model))
        cfg.augment = AugmentConfig(**asdict(cfg.augment))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return cfg


def prepare_out(out: Path, force: bool, snapshot: dict | None = None) -> Path:
    """Create ``out``; refuse to reuse a non-empty directory unless forced or its snapshot matches."""
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        existing = out / SNAPSHOT
        same = snapshot is not None and existing.exists() and json.loads(existing.read_text()) == snapshot
        if not same:
            raise UsageError(f"output directory {out} is not empty; pass --force to overwrite")
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"cannot write to {out}: {exc}") from exc
    return out


def write_snapshot(out: Path, snapshot: dict) -> None:
    (out / SNAPSHOT).write_text(json.dumps(snapshot, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _manifest_for(cfg: ExperimentConfig, role: str):
    path = cfg.datasets.get(role)
    if not path:
        raise UsageError(f"no manifest given for role {role!r} (flag or config 'datasets.{role}')")
    return parse_manifest(resolve_path(path))


def _tiles_and_norm(manifest):
    tiles = load_tiles(manifest)
    if not tiles:
        raise ConfigurationError(f"manifest {manifest.name!r} has no samples")
    return tiles, manifest.normalization or compute_normalization(tiles)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    snapshot = {"command": "synth", "style": args.style, "n": args.n, "size": args.size, "seed": args.seed,
                "role": args.role, "name": args.name, "resolution_m_per_px": args.resolution}
    out = prepare_out(args.out, args.force, snapshot)
    name = args.name or f"synthetic-{args.style}"
    tiles = generate_synthetic_domain(args.style, args.n, args.size, seed=args.seed, resolution_m_per_px=args.resolution)
    write_tile_store(tiles, out, name=name, role=args.role, split="train",
                     write_masks=args.role != "unlabeled_source")
    write_snapshot(out, snapshot)
    log.info("wrote %d %s tiles to %s", len(tiles), name, out)
    return 0


def cmd_prep(args) -> int:
    manifest = parse_manifest(resolve_path(args.manifest))
    split = args.split or default_split(manifest)
    samples = manifest.split(split)
    target = args.target_res or manifest.resolution_m_per_px
    stride = args.stride or args.tile
    snapshot = {"command": "prep", "manifest": str(args.manifest), "split": split, "tile": args.tile,
                "stride": stride, "target_res": target}
    out = prepare_out(args.out, args.force)
    tiles, failures = [], []
    for sample in samples:
        try:
            full = load_sample(manifest, sample)
            full = harmonize_resolution(full, target)
            tiles.extend(extract_tiles(full.image, full.mask, args.tile, stride, dataset=manifest.name,
                                       source_id=sample.image_path.stem, resolution_m_per_px=target))
        except Exception as exc:  # keep going; failures are listed at the end
            failures.append((sample.image_path, f"{type(exc).__name__}: {exc}"))
    if not tiles and not failures:
        log.warning("no complete %d px tiles fit in any image of %s", args.tile, manifest.name)
    write_tile_store(tiles, out, name=manifest.name, role=manifest.role, split=split,
                     write_masks=manifest.role != "unlabeled_source")
    write_snapshot(out, snapshot)
    log.info("wrote %d tiles from %d images to %s", len(tiles), len(samples) - len(failures), out)
    for path, msg in failures:
        log.error("failed: %s: %s", path, msg)
    return 1 if failures else 0


def _train_common(args, ssda: bool) -> int:
    cfg = apply_overrides(load_config(args.config), args)
    out = prepare_out(Path(cfg.output_dir), args.force)
    labeled_m = _manifest_for(cfg, "labeled_target")
    labeled, norm = _tiles_and_norm(labeled_m)
    meta = {"target_train": labeled_m.name, "source": "-", "resolution_m_per_px": labeled_m.resolution_m_per_px}
    snapshot = cfg.to_dict()
    if not ssda:
        snapshot["command"] = "train"
        write_snapshot(out, snapshot)
        state = train_supervised(cfg.train, labeled, cfg.model, cfg.augment, norm, out, meta)
    else:
        unlabeled_m = _manifest_for(cfg, "unlabeled_source")
        unlabeled = load_tiles(unlabeled_m)
        maps = None
        if args.pseudo is not None:
            maps = read_pseudo_store(resolve_path(args.pseudo))
            meta["teacher_checkpoint_id"] = next(iter(maps.values())).teacher_checkpoint_id if maps else ""
        meta["source"] = unlabeled_m.name
        snapshot.update(command="train-ssda", pseudo=None if args.pseudo is None else str(args.pseudo))
        write_snapshot(out, snapshot)
        state = train_ssda(cfg.train, labeled, unlabeled, cfg.model, cfg.augment, norm, maps, out, meta)
    last = state.log[-1]
    log.info("finished %d iterations, final total loss %.4f; checkpoint %s", state.iteration, last[5], out / "final.npz")
    return 0


def cmd_train(args) -> int:
    return _train_common(args, ssda=False)


def cmd_train_ssda(args) -> int:
    return _train_common(args, ssda=True)


def cmd_pseudolabel(args) -> int:
    teacher_path = resolve_path(args.teacher)
    teacher, meta = load_model(teacher_path)
    manifest = parse_manifest(resolve_path(args.unlabeled))
    tiles = load_tiles(manifest)
    snapshot = {"command": "pseudolabel", "teacher": str(args.teacher), "unlabeled": str(args.unlabeled),
                "threshold": args.threshold}
    out = prepare_out(args.out, args.force)
    maps = generate_pseudo_labels(teacher, tiles, args.threshold, meta.get("normalization"), checkpoint_id(teacher_path))
    write_pseudo_store(maps, out)
    write_snapshot(out, snapshot)
    stats = pseudo_label_stats(maps)
    log.info("pseudo-labeled %d tiles: kept %.3f, road %.3f", len(maps), stats.kept_fraction, stats.road_fraction)
    return 0


def _row_from(meta_info: dict, eval_name: str, iou: float) -> ReportRow:
    return ReportRow(meta_info.get("target_train", "?"), meta_info.get("source", "-"), eval_name, 100.0 * iou)


def cmd_eval(args) -> int:
    manifest = parse_manifest(resolve_path(args.manifest))
    ckpt = resolve_path(args.checkpoint)
    out = prepare_out(args.out, args.force)
    result, meta = evaluate_checkpoint(ckpt, manifest, args.tile_size, args.split)
    _, ck_meta = load_model(ckpt)
    row = _row_from(ck_meta.get("info", {}), manifest.name, result.iou)
    report = TransferReport([row], meta)
    report.write(out, "eval")
    payload = {"intersection_px": result.intersection_px, "union_px": result.union_px, "n_eval_px": result.n_eval_px,
               "road_iou": result.iou, "road_iou_pct": round(100.0 * result.iou, 2), **meta}
    (out / "eval.json").write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    write_snapshot(out, {"command": "eval", "checkpoint": str(args.checkpoint), "manifest": str(args.manifest),
                         "tile_size": args.tile_size, "split": args.split})
    for w in meta["warnings"]:
        log.warning(w)
    print(f"{row.target_train}\t{row.source}\t{row.eval_set}\t{round(row.road_iou, 2)}")
    return 0


def cmd_report(args) -> int:
    out = prepare_out(args.out, args.force)
    manifests = [parse_manifest(resolve_path(p)) for p in args.eval]
    rows, checkpoints, failed = [], {}, False
    for run in args.runs:
        run = resolve_path(run)
        ckpt = run / "final.npz"
        try:
            _, ck_meta = load_model(ckpt)
            info = ck_meta.get("info", {})
            checkpoints[str(run)] = checkpoint_id(ckpt)
            for m in manifests:
                result, _ = evaluate_checkpoint(ckpt, m, args.tile_size)
                rows.append(_row_from(info, m.name, result.iou))
        except Exception as exc:  # partial report plus failure rows
            failed = True
            log.error("run %s failed: %s", run, exc)
            for m in manifests:
                rows.append(ReportRow(run.name, "?", m.name, float("nan"), error=f"{type(exc).__name__}: {exc}"))
    report = TransferReport(rows, {"iou": "micro", "checkpoints": checkpoints,
                                   "config_hash": config_hash([str(r) for r in args.runs])})
    report.flag_negative_transfer()
    csv_path, md_path = report.write(out)
    write_snapshot(out, {"command": "report", "runs": [str(r) for r in args.runs], "eval": list(args.eval),
                         "tile_size": args.tile_size})
    sys.stdout.write(report.to_markdown())
    log.info("wrote %s and %s", csv_path, md_path)
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# parser


def positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {value}")
    return value


def nonneg_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def unit_float(text: str) -> float:
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config JSON (flags override its values)")
    common.add_argument("--seed", type=int, help="seed for data order, augmentation and initialization")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--force", action="store_true", help="overwrite an existing output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="roadssda", description="Semi-supervised domain adaptation for road segmentation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic domain as a tile store")
    p.add_argument("--style", choices=["A", "B"], required=True)
    p.add_argument("--n", type=positive_int, required=True, help="number of tiles")
    p.add_argument("--size", type=positive_int, default=64)
    p.add_argument("--role", choices=["labeled_target", "unlabeled_source", "eval"], default="labeled_target")
    p.add_argument("--name")
    p.add_argument("--resolution", type=float, default=1.0, help="ground resolution in m/px")
    p.set_defaults(func=cmd_synth, seed=0)

    p = sub.add_parser("prep", parents=[common], help="tile and harmonize a dataset manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split")
    p.add_argument("--tile", type=positive_int, default=640)
    p.add_argument("--stride", type=positive_int)
    p.add_argument("--target-res", type=float, help="target resolution in m/px (default: keep)")
    p.set_defaults(func=cmd_prep)

    def train_flags(p):
        p.add_argument("--labeled", help="labeled target manifest")
        p.add_argument("--iters", type=positive_int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-labeled", type=positive_int)
        p.add_argument("--arch", choices=["toynet", "unetpp", "hrnet"])
        p.add_argument("--width", type=positive_int)
        p.add_argument("--depth", type=positive_int)
        p.add_argument("--crop", type=positive_int, help="augmentation crop size")
        p.add_argument("--no-augment", action="store_true")
        p.add_argument("--checkpoint-every", type=nonneg_int)

    p = sub.add_parser("train", parents=[common], help="supervised baseline / teacher")
    train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("pseudolabel", parents=[common], help="label unlabeled tiles with a teacher checkpoint")
    p.add_argument("--teacher", required=True)
    p.add_argument("--unlabeled", required=True)
    p.add_argument("--threshold", type=unit_float, default=0.9)
    p.set_defaults(func=cmd_pseudolabel)

    p = sub.add_parser("train-ssda", parents=[common], help="adaptation with MCC and pseudo-labels")
    train_flags(p)
    p.add_argument("--unlabeled", help="unlabeled source manifest")
    p.add_argument("--pseudo", help="pseudo-label store directory")
    p.add_argument("--batch-unlabeled", type=positive_int)
    p.add_argument("--alpha-max", type=float)
    p.add_argument("--ramp", type=positive_int, help="alpha ramp length in iterations")
    p.add_argument("--beta", type=float)
    p.add_argument("--threshold", type=unit_float, help="pseudo-label threshold recorded in the config")
    p.set_defaults(func=cmd_train_ssda)

    p = sub.add_parser("eval", parents=[common], help="road IoU of a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split")
    p.add_argument("--tile-size", type=positive_int, default=512)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", parents=[common], help="transfer table over finished runs")
    p.add_argument("--runs", nargs="+", required=True, help="run directories holding final.npz")
    p.add_argument("--eval", nargs="+", required=True, help="eval manifests")
    p.add_argument("--tile-size", type=positive_int, default=512)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.command in ("synth", "prep", "pseudolabel", "eval", "report") and args.out is None:
        parser.error("--out is required")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"roadssda {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except INPUT_ERRORS as exc:
        print(f"roadssda {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - surface any failure as exit 1
        log.debug("traceback", exc_info=True)
        print(f"roadssda {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
