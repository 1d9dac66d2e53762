"""Segmentation networks, input normalization and the checkpoint archive format."""
from __future__ import annotations

import io
import json
import zipfile
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import CheckpointError, CheckpointVersionError, NumericalError, ShapeError

ARCHES = ("toynet", "unetpp", "hrnet")
FORMAT_TAG = "roadssda-checkpoint/1"


@dataclass
class ModelConfig:
    arch: str = "toynet"
    n_classes: int = 2
    width: int = 16
    depth: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.arch not in ARCHES:
            raise ValueError(f"unknown arch {self.arch!r}; expected one of {ARCHES}")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.width < 4:
            raise ValueError("width must be >= 4")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")


def conv_block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class SegmentationNet(nn.Module):
    """Base class: checks spatial divisibility before running ``_forward``."""

    def __init__(self, depth):
        super().__init__()
        self.depth = depth

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected a batch x 3 x H x W input, got {tuple(x.shape)}")
        k = 2 ** self.depth
        if x.shape[2] % k or x.shape[3] % k:
            raise ShapeError(f"H and W must be divisible by 2**depth = {k}, got {tuple(x.shape[2:])}")
        return self._forward(x)


class ToyNet(SegmentationNet):
    """Small UNet: one conv block per scale, transposed-conv upsampling, concat skips."""

    def __init__(self, n_classes=2, width=16, depth=3):
        super().__init__(depth)
        chans = [width * 2 ** i for i in range(depth + 1)]
        self.down = nn.ModuleList()
        cin = 3
        for c in chans[:-1]:
            self.down.append(conv_block(cin, c))
            cin = c
        self.bottleneck = conv_block(chans[-2], chans[-1])
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for i in reversed(range(depth)):
            self.up.append(nn.ConvTranspose2d(chans[i + 1], chans[i], 2, stride=2))
            self.dec.append(conv_block(2 * chans[i], chans[i]))
        self.head = nn.Conv2d(width, n_classes, 1)

    def _forward(self, x):
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.up, self.dec, reversed(skips)):
            x = dec(torch.cat([up(x), skip], dim=1))
        return self.head(x)


class UNetPlusPlus(SegmentationNet):
    """Compact UNet++ with nested dense skip pathways (no deep supervision)."""

    def __init__(self, n_classes=2, width=16, depth=3):
        super().__init__(depth)
        chans = [width * 2 ** i for i in range(depth + 1)]
        self.nodes = nn.ModuleDict()
        for i in range(depth + 1):
            self.nodes[f"x{i}_0"] = conv_block(3 if i == 0 else chans[i - 1], chans[i])
        for j in range(1, depth + 1):
            for i in range(depth + 1 - j):
                self.nodes[f"x{i}_{j}"] = conv_block(chans[i] * j + chans[i + 1], chans[i])
        self.head = nn.Conv2d(width, n_classes, 1)

    def _forward(self, x):
        grid = {}
        for i in range(self.depth + 1):
            x = self.nodes[f"x{i}_0"](x if i == 0 else F.max_pool2d(x, 2))
            grid[i, 0] = x
        for j in range(1, self.depth + 1):
            for i in range(self.depth + 1 - j):
                up = F.interpolate(grid[i + 1, j - 1], scale_factor=2, mode="bilinear", align_corners=False)
                grid[i, j] = self.nodes[f"x{i}_{j}"](torch.cat([grid[i, k] for k in range(j)] + [up], dim=1))
        return self.head(grid[0, self.depth])


def build_model(cfg: ModelConfig) -> SegmentationNet:
    """Instantiate the network for ``cfg`` with seed-determined initial weights."""
    if cfg.arch == "hrnet":
        raise NotImplementedError("hrnet is a registered architecture name without a bundled implementation")
    cls = {"toynet": ToyNet, "unetpp": UNetPlusPlus}[cfg.arch]
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        return cls(cfg.n_classes, cfg.width, cfg.depth)


def normalize_images(images: np.ndarray, normalization: dict | None) -> torch.Tensor:
    """uint8 ``N x H x W x 3`` (or one ``H x W x 3``) -> standardized float ``N x 3 x H x W``."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    x = torch.from_numpy(np.ascontiguousarray(arr)).permute(0, 3, 1, 2).float()
    if normalization is None:
        mean, std = [127.5] * 3, [64.0] * 3
    else:
        mean, std = normalization["mean"], normalization["std"]
    mean = torch.tensor(mean, dtype=torch.float32).view(1, 3, 1, 1)
    std = torch.tensor(std, dtype=torch.float32).view(1, 3, 1, 1)
    return (x - mean) / std


def _first_nonfinite_layer(model, images):
    found = []

    def hook(module, inp, out):
        if not found and isinstance(out, torch.Tensor) and not torch.isfinite(out).all():
            found.append(module)

    names = {m: n for n, m in model.named_modules()}
    handles = [m.register_forward_hook(hook) for m in model.modules() if not list(m.children())]
    try:
        model(images)
    finally:
        for h in handles:
            h.remove()
    return names.get(found[0], "?") if found else "output"


@torch.no_grad()
def predict_probs(model: nn.Module, images: torch.Tensor) -> torch.Tensor:
    """Inference-mode softmax probabilities, ``batch x n_classes x H x W``."""
    was_training = model.training
    model.eval()
    try:
        logits = model(images)
        if not torch.isfinite(logits).all():
            layer = _first_nonfinite_layer(model, images)
            raise NumericalError(f"non-finite activation produced by layer {layer!r}")
        return torch.softmax(logits, dim=1)
    finally:
        model.train(was_training)


# ---------------------------------------------------------------------------
# parameters and archives


def get_params(model: nn.Module) -> "OrderedDict[str, np.ndarray]":
    """Snapshot every weight and buffer as numpy arrays with stable names."""
    return OrderedDict((k, v.detach().cpu().numpy().copy()) for k, v in model.state_dict().items())


def set_params(model: nn.Module, params: dict) -> None:
    state = OrderedDict((k, torch.from_numpy(np.array(v))) for k, v in params.items())
    model.load_state_dict(state, strict=True)


def save_archive(path: Path | str, arrays: dict, meta: dict) -> None:
    """Write named arrays plus a JSON header (with the format tag) to one ``.npz`` archive.

    Zip entries carry a fixed timestamp so identical content gives identical bytes.
    """
    path = Path(path)
    meta = dict(meta, format=FORMAT_TAG)
    payload = {f"a/{k}": np.asarray(v) for k, v in arrays.items()}
    payload["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        for key, arr in payload.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arr, order="C"), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(key + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())
    tmp.replace(path)


def load_archive(path: Path | str) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(bytes(data["meta"]).decode("utf-8"))
            arrays = OrderedDict((k[2:], data[k]) for k in data.files if k.startswith("a/"))
    except (zipfile.BadZipFile, EOFError, KeyError, ValueError, OSError, io.UnsupportedOperation) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if meta.get("format") != FORMAT_TAG:
        raise CheckpointVersionError(f"{path}: format {meta.get('format')!r} is incompatible with {FORMAT_TAG!r}")
    return meta, arrays


def save_model(path: Path | str, model: nn.Module, cfg: ModelConfig, extra_meta: dict | None = None) -> None:
    params = get_params(model)
    save_archive(path, {f"param/{k}": v for k, v in params.items()}, dict(extra_meta or {}, model=asdict(cfg)))


def load_model(path: Path | str) -> tuple[SegmentationNet, dict]:
    """Rebuild the network stored in a checkpoint; returns ``(model, meta)``."""
    meta, arrays = load_archive(path)
    model = build_model(ModelConfig(**meta["model"]))
    set_params(model, {k[6:]: v for k, v in arrays.items() if k.startswith("param/")})
    model.eval()
    return model, meta


def checkpoint_id(path: Path | str) -> str:
    """Content hash identifying a checkpoint file."""
    import hashlib

    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def predict_image_probs(model: nn.Module, image: np.ndarray, normalization: dict | None) -> np.ndarray:
    """Class probabilities ``n_classes x H x W`` for one uint8 image of any size.

    The image is reflect-padded up to a multiple of ``2**depth`` and the
    prediction cropped back.
    """
    h, w = image.shape[:2]
    k = 2 ** getattr(model, "depth", 0)
    ph, pw = (-h) % k, (-w) % k
    if ph or pw:
        image = np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="reflect" if min(h, w) > max(ph, pw) else "edge")
    probs = predict_probs(model, normalize_images(image, normalization))
    return probs[0, :, :h, :w].numpy()
