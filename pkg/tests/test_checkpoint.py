import struct

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from multinet_vit.multinet import ModelSpec, build_model
from multinet_vit.tensor import ShapeError
from multinet_vit.train import Adam, TrainConfig, load_checkpoint, read_checkpoint, save_checkpoint, train
from multinet_vit.train.checkpoint import MAGIC, CheckpointError, decode

SPEC = ModelSpec("vit+multinet", 16, vit_preset="micro", cnn_preset="tiny")


def trained_model(tmp_path):
    model = build_model(SPEC, 0)
    x = np.random.default_rng(0).normal(size=(8, 3, 16, 16)).astype(np.float32)
    y = np.arange(8)
    result = train(model, x, y, TrainConfig(epochs=1, batch_size=4), checkpoint_path=tmp_path / "a.bin")
    return model, result


def test_save_load_save_is_byte_identical(tmp_path):
    model, _ = trained_model(tmp_path)
    opt = Adam(model.named_parameters())
    first = save_checkpoint(tmp_path / "one.bin", model, opt, config={"seed": 0})
    clone = build_model(SPEC, 99)
    opt2 = Adam(clone.named_parameters())
    ckpt = load_checkpoint(first, clone, opt2)
    second = save_checkpoint(tmp_path / "two.bin", clone, opt2, config=ckpt.config)
    assert first.read_bytes() == second.read_bytes()


def test_header_layout(tmp_path):
    model, _ = trained_model(tmp_path)
    data = save_checkpoint(tmp_path / "c.bin", model).read_bytes()
    assert data[:8] == MAGIC
    assert struct.unpack("<I", data[8:12])[0] == 1
    ckpt = decode(data)
    assert ckpt.model["pairing"] == "vit+multinet"
    for name, p in model.named_parameters():
        assert_array_equal(ckpt.tensors[name], p.data)


def test_wrong_architecture_names_tensor(tmp_path):
    model, _ = trained_model(tmp_path)
    path = save_checkpoint(tmp_path / "c.bin", model)
    other = build_model(ModelSpec("vit+resnet-style", 16, vit_preset="micro", cnn_preset="tiny"), 0)
    with pytest.raises((ShapeError, CheckpointError), match="classifier|branch_b"):
        load_checkpoint(path, other)


def test_partial_load_populates_only_prefix(tmp_path):
    model, _ = trained_model(tmp_path)
    path = save_checkpoint(tmp_path / "c.bin", model)
    fresh = build_model(SPEC, 42)
    before = fresh.state_dict()
    ckpt = load_checkpoint(path, fresh, prefix="branch_b.vgg.")
    loaded = set(ckpt.extra["loaded"])
    assert loaded and all(n.startswith("branch_b.vgg.") for n in loaded)
    source = model.state_dict()
    for name, p in fresh.named_parameters():
        expected = source[name] if name in loaded else before[name]
        assert_array_equal(p.data, expected)


def test_corrupt_files_rejected(tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError):
        read_checkpoint(bad)
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "missing.bin")
