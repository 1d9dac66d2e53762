import zipfile

import numpy as np
import pytest
import torch

from roadssda.errors import CheckpointError, CheckpointVersionError, NumericalError, ShapeError
from roadssda.model import (
    ModelConfig,
    build_model,
    checkpoint_id,
    get_params,
    load_archive,
    load_model,
    normalize_images,
    predict_image_probs,
    predict_probs,
    save_archive,
    save_model,
)


@pytest.mark.parametrize("arch", ["toynet", "unetpp"])
def test_output_shape(arch):
    model = build_model(ModelConfig(arch=arch, width=4, depth=2))
    assert model(torch.zeros(2, 3, 16, 24)).shape == (2, 2, 16, 24)


def test_shape_errors():
    model = build_model(ModelConfig(width=4, depth=3))
    with pytest.raises(ShapeError, match="divisible"):
        model(torch.zeros(1, 3, 12, 16))
    with pytest.raises(ShapeError):
        model(torch.zeros(1, 1, 16, 16))


def test_unknown_and_unbundled_arch():
    with pytest.raises(ValueError):
        ModelConfig(arch="resnet")
    with pytest.raises(NotImplementedError):
        build_model(ModelConfig(arch="hrnet"))


def test_seeded_init_is_reproducible_and_isolated():
    torch.manual_seed(123)
    before = torch.rand(1)
    torch.manual_seed(123)
    a = get_params(build_model(ModelConfig(width=4, seed=7)))
    assert torch.rand(1).item() == before.item()  # global RNG untouched
    b = get_params(build_model(ModelConfig(width=4, seed=7)))
    c = get_params(build_model(ModelConfig(width=4, seed=8)))
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not all(np.array_equal(a[k], c[k]) for k in a)


def test_normalize_images():
    img = np.full((4, 4, 3), 10, np.uint8)
    x = normalize_images(img, {"mean": [10, 0, 5], "std": [1, 2, 5]})
    assert x.shape == (1, 3, 4, 4)
    assert x[0, :, 0, 0].tolist() == [0.0, 5.0, 1.0]


def test_predict_probs_sum_to_one_and_restores_mode():
    model = build_model(ModelConfig(width=4, depth=2))
    model.train()
    p = predict_probs(model, torch.randn(1, 3, 8, 8))
    assert torch.allclose(p.sum(dim=1), torch.ones(1, 8, 8))
    assert model.training


def test_predict_image_probs_any_size():
    model = build_model(ModelConfig(width=4, depth=3))
    p = predict_image_probs(model, np.zeros((13, 21, 3), np.uint8), None)
    assert p.shape == (2, 13, 21)


def test_nonfinite_activation_names_layer():
    model = build_model(ModelConfig(width=4, depth=1))
    with torch.no_grad():
        model.head.weight.fill_(float("inf"))
    with pytest.raises(NumericalError, match="head"):
        predict_probs(model, torch.randn(1, 3, 4, 4))


def test_save_load_round_trip(tmp_path):
    cfg = ModelConfig(width=4, depth=2, seed=3)
    model = build_model(cfg)
    save_model(tmp_path / "m.npz", model, cfg, {"note": "x"})
    loaded, meta = load_model(tmp_path / "m.npz")
    assert meta["note"] == "x" and meta["model"]["seed"] == 3
    a, b = get_params(model), get_params(loaded)
    assert list(a) == list(b) and all(np.array_equal(a[k], b[k]) for k in a)


def test_archive_bytes_deterministic(tmp_path):
    arrays = {"w": np.arange(6.0).reshape(2, 3)}
    save_archive(tmp_path / "a.npz", arrays, {"k": 1})
    save_archive(tmp_path / "b.npz", arrays, {"k": 1})
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()
    assert checkpoint_id(tmp_path / "a.npz") == checkpoint_id(tmp_path / "b.npz")


def test_archive_errors(tmp_path):
    with pytest.raises(CheckpointError):
        load_archive(tmp_path / "missing.npz")
    (tmp_path / "junk.npz").write_bytes(b"not a zip")
    with pytest.raises(CheckpointError):
        load_archive(tmp_path / "junk.npz")
    save_archive(tmp_path / "ok.npz", {"w": np.zeros(2)}, {})
    data = (tmp_path / "ok.npz").read_bytes()
    (tmp_path / "trunc.npz").write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointError):
        load_archive(tmp_path / "trunc.npz")


def test_version_mismatch(tmp_path):
    import io
    import json

    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.frombuffer(json.dumps({"format": "roadssda-checkpoint/0"}).encode(), np.uint8))
    with zipfile.ZipFile(tmp_path / "old.npz", "w") as zf:
        zf.writestr("meta.npy", buf.getvalue())
    with pytest.raises(CheckpointVersionError):
        load_archive(tmp_path / "old.npz")
