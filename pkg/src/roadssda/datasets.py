"""Dataset ingestion: manifests, label reduction, road rasterization, tiling,
resolution harmonization, tile stores and a synthetic two-domain benchmark."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from . import kernels
from .errors import IngestionError, ManifestError, UnsupportedOperationError

ROLES = ("labeled_target", "unlabeled_source", "eval")
IGNORE = 255


@dataclass
class SamplePath:
    image_path: Path
    mask_path: Path | None = None
    vector_roads_path: Path | None = None


@dataclass
class DatasetManifest:
    name: str
    resolution_m_per_px: float
    role: str
    splits: dict[str, list[SamplePath]]
    road_class_ids: frozenset[int] = frozenset({1})
    nodata_ids: frozenset[int] = frozenset({IGNORE})
    # per-channel mean/std in 8-bit units, filled in by `prep` / `synth`
    normalization: dict | None = None
    root: Path = field(default_factory=Path)

    def split(self, name: str | None = None) -> list[SamplePath]:
        if name is None:
            name = default_split(self)
        if name not in self.splits:
            raise ManifestError(f"manifest {self.name!r} has no split {name!r}")
        return self.splits[name]


@dataclass
class TileSample:
    image: np.ndarray  # H x W x 3 uint8
    mask: np.ndarray  # H x W uint8 in {0, 1, 255}
    origin: tuple = ("", "", 0, 0)  # (dataset, source image id, row, col)
    resolution_m_per_px: float = 1.0

    @property
    def tile_id(self) -> str:
        dataset, source, row, col = self.origin
        return f"{source}_{row}_{col}"


@dataclass
class Polyline:
    vertices: np.ndarray  # K x 2, columns (x, y) in pixels
    width_m: float

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 2)
        if len(self.vertices) < 2:
            raise ValueError("a polyline needs at least 2 vertices")
        if not self.width_m > 0:
            raise ValueError(f"width_m must be positive, got {self.width_m}")


# ---------------------------------------------------------------------------
# manifests


def default_split(manifest: DatasetManifest) -> str:
    preferred = {"eval": ("test", "eval", "val")}.get(manifest.role, ("train",))
    for name in preferred:
        if name in manifest.splits:
            return name
    return next(iter(manifest.splits))


def _require(obj, key, types, where="manifest"):
    if key not in obj:
        raise ManifestError(f"{where}: missing key {key!r}")
    value = obj[key]
    allowed = types if isinstance(types, tuple) else (types,)
    if not isinstance(value, allowed) or (isinstance(value, bool) and bool not in allowed):
        raise ManifestError(f"{where}: key {key!r} has invalid type {type(value).__name__}")
    return value


def manifest_from_dict(data: dict, root: Path | str = ".", check_files: bool = True) -> DatasetManifest:
    root = Path(root)
    if not isinstance(data, dict):
        raise ManifestError("manifest: top level must be a JSON object")
    name = _require(data, "name", str)
    res = _require(data, "resolution_m_per_px", (int, float))
    role = _require(data, "role", str)
    splits_raw = _require(data, "splits", dict)
    road_ids = data.get("road_class_ids", [1])
    nodata_ids = data.get("nodata_ids", [IGNORE])
    for key, ids in (("road_class_ids", road_ids), ("nodata_ids", nodata_ids)):
        if not isinstance(ids, list) or not all(isinstance(i, int) and not isinstance(i, bool) for i in ids):
            raise ManifestError(f"manifest: key {key!r} must be a list of integers")
    if not (math.isfinite(res) and res > 0):
        raise ManifestError(f"manifest: key 'resolution_m_per_px' must be > 0, got {res}")
    if role not in ROLES:
        raise ManifestError(f"manifest: key 'role' must be one of {ROLES}, got {role!r}")
    if set(road_ids) & set(nodata_ids):
        raise ManifestError("manifest: 'road_class_ids' and 'nodata_ids' overlap")
    if not splits_raw:
        raise ManifestError("manifest: key 'splits' is empty")

    splits = {}
    for split_name, entries in splits_raw.items():
        where = f"manifest: splits.{split_name}"
        if not isinstance(entries, list):
            raise ManifestError(f"{where} must be a list")
        if not entries:
            raise ManifestError(f"{where} is empty")
        samples = []
        for k, entry in enumerate(entries):
            if not isinstance(entry, dict):
                raise ManifestError(f"{where}[{k}] must be an object")
            image = _require(entry, "image_path", str, f"{where}[{k}]")
            paths = {}
            for key in ("mask_path", "vector_roads_path"):
                value = entry.get(key)
                if value is not None and not isinstance(value, str):
                    raise ManifestError(f"{where}[{k}]: key {key!r} must be a string or null")
                paths[key] = root / value if value else None
            if role != "unlabeled_source" and paths["mask_path"] is None and paths["vector_roads_path"] is None:
                raise ManifestError(f"{where}[{k}]: role {role!r} needs 'mask_path' or 'vector_roads_path'")
            samples.append(SamplePath(root / image, paths["mask_path"], paths["vector_roads_path"]))
        splits[split_name] = samples

    norm = data.get("normalization")
    if norm is not None:
        if not isinstance(norm, dict) or len(norm.get("mean", [])) != 3 or len(norm.get("std", [])) != 3:
            raise ManifestError("manifest: key 'normalization' needs 3-element 'mean' and 'std'")

    manifest = DatasetManifest(
        name=name,
        resolution_m_per_px=float(res),
        role=role,
        splits=splits,
        road_class_ids=frozenset(road_ids),
        nodata_ids=frozenset(nodata_ids),
        normalization=norm,
        root=root,
    )
    if check_files:
        missing = []
        for samples in splits.values():
            for s in samples:
                for p in (s.image_path, s.mask_path, s.vector_roads_path):
                    if p is not None and not p.exists():
                        missing.append(p)
        if missing:
            raise IngestionError(f"manifest {name!r} references missing files", missing)
    return manifest


def parse_manifest(path: Path | str) -> DatasetManifest:
    """Load and validate a manifest JSON; relative paths resolve against its directory."""
    path = Path(path)
    if not path.exists():
        raise IngestionError("manifest file not found", [path])
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return manifest_from_dict(data, root=path.parent)


def manifest_to_dict(manifest: DatasetManifest) -> dict:
    def rel(p):
        if p is None:
            return None
        try:
            return Path(p).relative_to(manifest.root).as_posix()
        except ValueError:
            return str(p)

    out = {
        "name": manifest.name,
        "resolution_m_per_px": manifest.resolution_m_per_px,
        "role": manifest.role,
        "road_class_ids": sorted(manifest.road_class_ids),
        "nodata_ids": sorted(manifest.nodata_ids),
        "splits": {
            split: [
                {
                    k: v
                    for k, v in (
                        ("image_path", rel(s.image_path)),
                        ("mask_path", rel(s.mask_path)),
                        ("vector_roads_path", rel(s.vector_roads_path)),
                    )
                    if v is not None
                }
                for s in samples
            ]
            for split, samples in manifest.splits.items()
        },
    }
    if manifest.normalization is not None:
        out["normalization"] = manifest.normalization
    return out


def write_manifest(manifest: DatasetManifest, path: Path | str) -> None:
    path = Path(path)
    manifest = replace(manifest, root=path.parent)
    path.write_text(json.dumps(manifest_to_dict(manifest), indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# labels and rasterization


def reduce_labels(raw_mask: np.ndarray, road_ids: Iterable[int], nodata_ids: Iterable[int]) -> np.ndarray:
    """Collapse a multi-class label raster to road (1) / background (0) / ignore (255)."""
    raw_mask = np.asarray(raw_mask)
    out = np.zeros(raw_mask.shape, dtype=np.uint8)
    out[np.isin(raw_mask, list(road_ids))] = 1
    out[np.isin(raw_mask, list(nodata_ids))] = IGNORE
    return out


def stroke_width_px(width_m: float, resolution_m_per_px: float) -> int:
    # round half up
    return max(1, int(math.floor(width_m / resolution_m_per_px + 0.5)))


def rasterize_roads(polylines: Sequence[Polyline], height: int, width: int, resolution_m_per_px: float) -> np.ndarray:
    """Draw road polylines into a binary mask.

    Each polyline is stroked with a pixel width proportional to its metric
    width. Segments have flat ends, interior vertices get round joins, and a
    pixel is set when its center falls inside the stroke. Vertices outside
    the raster are clipped.
    """
    if not resolution_m_per_px > 0:
        raise ValueError("resolution_m_per_px must be positive")
    mask = np.zeros((height, width), dtype=np.uint8)
    for line in polylines:
        w = stroke_width_px(line.width_m, resolution_m_per_px)
        kernels.stroke_polyline(mask, line.vertices[:, 0].copy(), line.vertices[:, 1].copy(), float(w))
    return mask


def load_polylines(path: Path | str) -> list[Polyline]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, list):
        raise ManifestError(f"{path}: polyline file must hold a JSON list")
    try:
        return [Polyline(item["vertices"], float(item["width_m"])) for item in data]
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"{path}: invalid polyline entry ({exc})") from exc


def save_polylines(polylines: Sequence[Polyline], path: Path | str) -> None:
    data = [{"vertices": p.vertices.tolist(), "width_m": p.width_m} for p in polylines]
    Path(path).write_text(json.dumps(data), encoding="utf-8")


# ---------------------------------------------------------------------------
# tiling and resampling


def tile_grid(size: int, tile_size: int, stride: int) -> range:
    """Top-left offsets of full windows along one axis."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if tile_size > size:
        return range(0)
    return range(0, size - tile_size + 1, stride)


def extract_tiles(
    image: np.ndarray,
    mask: np.ndarray,
    tile_size: int,
    stride: int | None = None,
    *,
    dataset: str = "",
    source_id: str = "",
    resolution_m_per_px: float = 1.0,
) -> list[TileSample]:
    """Cut ``image``/``mask`` into ``tile_size`` squares on a regular grid.

    Partial windows at the right and bottom borders are dropped.
    """
    stride = tile_size if stride is None else stride
    if image.shape[:2] != mask.shape[:2]:
        raise ValueError(f"image {image.shape[:2]} and mask {mask.shape[:2]} differ in size")
    h, w = mask.shape[:2]
    tiles = []
    for r in tile_grid(h, tile_size, stride):
        for c in tile_grid(w, tile_size, stride):
            tiles.append(
                TileSample(
                    image=image[r:r + tile_size, c:c + tile_size].copy(),
                    mask=mask[r:r + tile_size, c:c + tile_size].copy(),
                    origin=(dataset, source_id, r, c),
                    resolution_m_per_px=resolution_m_per_px,
                )
            )
    return tiles


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    edges = np.arange(n_out + 1, dtype=np.float64) * (n_in / n_out)
    lo = np.maximum(edges[:-1, None], np.arange(n_in)[None, :])
    hi = np.minimum(edges[1:, None], np.arange(n_in)[None, :] + 1)
    wts = np.clip(hi - lo, 0.0, None)
    return wts / wts.sum(axis=1, keepdims=True)


def area_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Downscale an 8-bit image by exact area averaging (fractional factors allowed)."""
    rows = _area_weights(image.shape[0], out_h)
    cols = _area_weights(image.shape[1], out_w)
    src = image.astype(np.float64).reshape(image.shape[0], image.shape[1], -1)
    # separable: rows first, then columns, both as BLAS matmuls
    tmp = np.tensordot(rows, src, axes=(1, 0))
    out = np.einsum("pw,owc->opc", cols, tmp, optimize=True)
    out = np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return out.reshape((out_h, out_w) + image.shape[2:])


def nearest_resize(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = mask.shape[:2]
    ri = np.minimum(((np.arange(out_h) + 0.5) * (h / out_h)).astype(np.int64), h - 1)
    ci = np.minimum(((np.arange(out_w) + 0.5) * (w / out_w)).astype(np.int64), w - 1)
    return mask[ri[:, None], ci[None, :]]


def harmonize_resolution(tile: TileSample, target_res: float) -> TileSample:
    """Downsample a tile to a coarser ground resolution.

    The image is area-averaged; the mask uses nearest neighbour so its label
    alphabet is unchanged.
    """
    factor = target_res / tile.resolution_m_per_px
    if factor < 1.0:
        raise UnsupportedOperationError(
            f"upscaling from {tile.resolution_m_per_px} to {target_res} m/px is not supported"
        )
    if factor == 1.0:
        return replace(tile, image=tile.image.copy(), mask=tile.mask.copy())
    h, w = tile.mask.shape
    out_h = max(1, int(round(h / factor)))
    out_w = max(1, int(round(w / factor)))
    return replace(
        tile,
        image=area_resize(tile.image, out_h, out_w),
        mask=nearest_resize(tile.mask, out_h, out_w),
        resolution_m_per_px=float(target_res),
    )


# ---------------------------------------------------------------------------
# image IO


def load_image(path: Path | str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except FileNotFoundError as exc:
        raise IngestionError("image not found", [path]) from exc


def load_mask(path: Path | str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except FileNotFoundError as exc:
        raise IngestionError("mask not found", [path]) from exc
    if arr.ndim == 3:
        arr = arr[..., 0]
    return arr.copy()


def save_png(array: np.ndarray, path: Path | str) -> None:
    Image.fromarray(np.ascontiguousarray(array, dtype=np.uint8)).save(path, format="PNG")


def load_sample(manifest: DatasetManifest, sample: SamplePath, source_id: str = "") -> TileSample:
    """Read one manifest sample into a full-size TileSample with a 3-class mask."""
    image = load_image(sample.image_path)
    h, w = image.shape[:2]
    if sample.mask_path is not None:
        raw = load_mask(sample.mask_path)
        if raw.shape != (h, w):
            raise ManifestError(f"{sample.mask_path}: mask shape {raw.shape} != image shape {(h, w)}")
        mask = reduce_labels(raw, manifest.road_class_ids, manifest.nodata_ids)
    else:
        mask = np.zeros((h, w), dtype=np.uint8) if sample.vector_roads_path is not None else np.full((h, w), IGNORE, np.uint8)
    if sample.vector_roads_path is not None:
        roads = rasterize_roads(load_polylines(sample.vector_roads_path), h, w, manifest.resolution_m_per_px)
        # vectors are more reliable than pixel labels; they override, ignore stays ignore
        mask = np.where((roads == 1) & (mask != IGNORE), np.uint8(1), mask)
    return TileSample(image, mask, (manifest.name, source_id or sample.image_path.stem, 0, 0), manifest.resolution_m_per_px)


def compute_normalization(tiles: Sequence[TileSample]) -> dict:
    """Per-channel mean/std in 8-bit units over all tile pixels."""
    total = np.zeros(3)
    total_sq = np.zeros(3)
    count = 0
    for t in tiles:
        px = t.image.reshape(-1, 3).astype(np.float64)
        total += px.sum(axis=0)
        total_sq += (px * px).sum(axis=0)
        count += px.shape[0]
    mean = total / count
    std = np.sqrt(np.maximum(total_sq / count - mean * mean, 1e-6))
    return {"mean": [round(float(m), 6) for m in mean], "std": [round(float(s), 6) for s in std]}


# ---------------------------------------------------------------------------
# tile store


def write_tile_store(
    tiles: Sequence[TileSample],
    out_dir: Path | str,
    *,
    name: str,
    role: str,
    split: str = "train",
    normalization: dict | None = None,
    write_masks: bool = True,
) -> DatasetManifest:
    """Write ``{id}_img.png`` / ``{id}_mask.png`` pairs plus ``index.json`` and ``manifest.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if normalization is None and tiles:
        normalization = compute_normalization(tiles)
    entries = []
    samples = []
    for t in tiles:
        tid = t.tile_id
        save_png(t.image, out_dir / f"{tid}_img.png")
        mask_path = None
        if write_masks:
            mask_path = out_dir / f"{tid}_mask.png"
            save_png(t.mask, mask_path)
        entries.append({"id": tid, "origin": list(t.origin), "resolution_m_per_px": t.resolution_m_per_px})
        samples.append(SamplePath(out_dir / f"{tid}_img.png", mask_path))
    resolution = tiles[0].resolution_m_per_px if tiles else 1.0
    index = {"name": name, "tiles": entries, "normalization": normalization}
    (out_dir / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    manifest = DatasetManifest(
        name=name,
        resolution_m_per_px=resolution,
        role=role,
        splits={split: samples},
        road_class_ids=frozenset({1}),
        nodata_ids=frozenset({IGNORE}),
        normalization=normalization,
        root=out_dir,
    )
    write_manifest(manifest, out_dir / "manifest.json")
    return manifest


def load_tiles(manifest: DatasetManifest, split: str | None = None) -> list[TileSample]:
    """Load every sample of a split as full-size TileSamples (tile stores hold one tile per sample).

    When the manifest sits in a tile store, tile origins (and so tile ids)
    are restored from its ``index.json``.
    """
    origins = {}
    index_path = Path(manifest.root) / "index.json"
    if index_path.exists():
        index = json.loads(index_path.read_text(encoding="utf-8"))
        origins = {f"{e['id']}_img.png": tuple(e["origin"]) for e in index.get("tiles", [])}
    tiles = []
    for s in manifest.split(split):
        tile = load_sample(manifest, s)
        origin = origins.get(s.image_path.name)
        if origin is not None:
            tile = replace(tile, origin=(origin[0], origin[1], int(origin[2]), int(origin[3])))
        tiles.append(tile)
    return tiles


# ---------------------------------------------------------------------------
# synthetic two-domain benchmark

# Background palette, texture grid cells, texture amplitude, road color,
# distractor color. Style B is a darker scene with finer texture and much
# lower road contrast, so a source-trained model under-segments roads.
STYLES = {
    "A": dict(bg=(62, 104, 55), cells=4, amp=22.0, road=(176, 172, 164), blob=(44, 80, 40), noise=6.0),
    "B": dict(bg=(45, 82, 40), cells=12, amp=20.0, road=(88, 100, 80), blob=(30, 55, 28), noise=8.0),
}


def _smooth_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    grid = rng.standard_normal((cells + 1, cells + 1)).astype(np.float32)
    im = Image.fromarray(grid, mode="F").resize((size, size), Image.BICUBIC)
    out = np.asarray(im, dtype=np.float64)
    return out / (out.std() + 1e-9)


def _random_roads(rng: np.random.Generator, size: int, resolution: float) -> list[Polyline]:
    lines = []
    for _ in range(int(rng.integers(1, 4))):
        # enter on one side, leave on another, with a few bends
        n_bends = int(rng.integers(0, 3))
        side = int(rng.integers(0, 4))
        u0, u1 = rng.uniform(0.1, 0.9, size=2) * size
        if side == 0:
            start, end = (u0, -2.0), (u1, size + 2.0)
        elif side == 1:
            start, end = (-2.0, u0), (size + 2.0, u1)
        elif side == 2:
            start, end = (u0, -2.0), (size + 2.0, u1)
        else:
            start, end = (-2.0, u0), (u1, size + 2.0)
        pts = [start]
        for k in range(1, n_bends + 1):
            f = k / (n_bends + 1)
            jitter = rng.normal(0.0, 0.08 * size, size=2)
            pts.append((start[0] + f * (end[0] - start[0]) + jitter[0], start[1] + f * (end[1] - start[1]) + jitter[1]))
        pts.append(end)
        width_m = float(rng.uniform(2.0, 5.0)) * resolution
        lines.append(Polyline(np.array(pts), width_m))
    return lines


def _random_blobs(rng: np.random.Generator, size: int) -> np.ndarray:
    blobs = np.zeros((size, size), dtype=bool)
    for _ in range(int(rng.integers(2, 6))):
        h, w = rng.integers(size // 10, size // 4, size=2)
        r, c = rng.integers(0, size - h), rng.integers(0, size - w)
        blobs[r:r + h, c:c + w] = True
    return blobs


def generate_synthetic_domain(
    style: str, n_images: int, size: int = 64, seed: int = 0, resolution_m_per_px: float = 1.0
) -> list[TileSample]:
    """Generate ``n_images`` labeled tiles of one synthetic imaging domain.

    Road geometry depends only on ``seed`` so styles A and B share layouts;
    appearance (palette, texture frequency, road contrast, distractors)
    depends on the style. Road fraction per tile is kept in [0.01, 0.25] by
    rejection sampling.
    """
    if style not in STYLES:
        raise ValueError(f"unknown style {style!r}; expected one of {sorted(STYLES)}")
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    params = STYLES[style]
    style_key = ord(style)
    tiles = []
    for idx in range(n_images):
        geo = np.random.default_rng([seed, idx, 0])
        while True:
            lines = _random_roads(geo, size, resolution_m_per_px)
            mask = rasterize_roads(lines, size, size, resolution_m_per_px)
            if 0.01 <= mask.mean() <= 0.25:
                break
        blobs = _random_blobs(geo, size) & (mask == 0)

        tex = np.random.default_rng([seed, idx, style_key])
        shade = _smooth_noise(tex, size, params["cells"]) * params["amp"]
        tint = tex.normal(0.0, 0.04, size=3)
        img = np.empty((size, size, 3), dtype=np.float64)
        for ch in range(3):
            img[..., ch] = params["bg"][ch] * (1.0 + tint[ch]) + shade
        img[blobs] = np.asarray(params["blob"], dtype=np.float64) + shade[blobs, None] * 0.5
        road = mask == 1
        img[road] = np.asarray(params["road"], dtype=np.float64) + shade[road, None] * 0.3
        img += tex.normal(0.0, params["noise"], size=img.shape)
        image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
        tiles.append(TileSample(image, mask, (f"synthetic-{style}", f"s{seed}i{idx:05d}", 0, 0), resolution_m_per_px))
    return tiles
