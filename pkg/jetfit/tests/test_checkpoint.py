import gzip
import json

import numpy as np
import pytest
import torch

from jetfit.checkpoint import save_checkpoint, load_checkpoint, restore_net, load_fitter, FORMAT_NAME
from jetfit.errors import CheckpointError
from jetfit.weightnet import WeightNetConfig, init_params, forward


def _write_document(path, document):
    with gzip.open(path, "wt", encoding="utf-8") as f:
        json.dump(document, f)
    return path


def test_round_trip_reproduces_outputs(tmp_path, rng):
    net = init_params(2, WeightNetConfig.tiny()).eval()
    path = save_checkpoint(tmp_path / "net.ckpt.json.gz", net, metadata={"jet_order": 2, "epoch": 4})
    checkpoint = load_checkpoint(path)
    assert checkpoint.metadata["epoch"] == 4
    assert checkpoint.net_config == WeightNetConfig.tiny()

    restored = restore_net(checkpoint).eval()
    for name, value in net.state_dict().items():
        assert torch.equal(restored.state_dict()[name], value), name
    points = rng.normal(size=(30, 3))
    torch.testing.assert_close(forward(restored, points).weights, forward(net, points).weights, rtol=0, atol=0)


def test_equal_content_gives_equal_bytes(tmp_path):
    net = init_params(5, WeightNetConfig.tiny())
    optim = {"m/0": torch.zeros(3), "step": torch.tensor(7.0)}
    first = save_checkpoint(tmp_path / "a" / "x.ckpt.json.gz", net, {"seed": 5}, optim)
    second = save_checkpoint(tmp_path / "b" / "x.ckpt.json.gz", net, {"seed": 5}, optim)
    assert first.read_bytes() == second.read_bytes()
    assert load_checkpoint(first).optim_state["step"].item() == 7.0


def test_batch_norm_counters_survive(tmp_path):
    net = init_params(0, WeightNetConfig.tiny()).train()
    net(torch.randn(4, 16, 3))
    path = save_checkpoint(tmp_path / "c.ckpt.json.gz", net)
    restored = restore_net(load_checkpoint(path))
    counters = [name for name in net.state_dict() if name.endswith("num_batches_tracked")]
    assert counters
    for name in counters:
        assert restored.state_dict()[name].dtype == torch.int64
        assert int(restored.state_dict()[name]) == 1


def test_scalar_buffers_keep_their_shape(tmp_path):
    net = init_params(3, WeightNetConfig.tiny())
    path = save_checkpoint(tmp_path / "s.ckpt.json.gz", net, optim_state={"step": torch.tensor(2.0)})
    with gzip.open(path, "rt", encoding="utf-8") as f:
        shapes = {entry["name"]: entry["shape"] for entry in json.load(f)["tensors"]}
    assert shapes["optim/step"] == []
    counters = [name for name in shapes if name.endswith("num_batches_tracked")]
    assert counters and all(shapes[name] == [] for name in counters)

    restored = restore_net(load_checkpoint(path))
    assert all(restored.state_dict()[name.removeprefix("net/")].shape == () for name in counters)


def test_load_fitter_overrides(tmp_path):
    net = init_params(1, WeightNetConfig.tiny())
    path = save_checkpoint(tmp_path / "f.ckpt.json.gz", net, {"jet_order": 4, "ridge": 1e-6})
    stored = load_fitter(path)
    assert (stored.order, stored.ridge) == (4, 1e-6)
    overridden = load_fitter(path, order=2, ridge=0.0, dtype=torch.float64)
    assert (overridden.order, overridden.ridge) == (2, 0.0)
    assert next(overridden.net.parameters()).dtype == torch.float64


def test_rejects_foreign_files(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt.json.gz")

    plain = tmp_path / "plain.txt"
    plain.write_text("not gzip")
    with pytest.raises(CheckpointError):
        load_checkpoint(plain)

    with pytest.raises(CheckpointError):
        load_checkpoint(_write_document(tmp_path / "other.gz", {"format": "something-else", "version": 1}))

    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(_write_document(tmp_path / "future.gz", {"format": FORMAT_NAME, "version": 2}))


def test_rejects_mismatched_tensors(tmp_path):
    net = init_params(0, WeightNetConfig.tiny())
    path = save_checkpoint(tmp_path / "n.ckpt.json.gz", net)
    checkpoint = load_checkpoint(path)

    checkpoint.metadata["net_config"] = WeightNetConfig.full().as_dict()
    with pytest.raises(CheckpointError):
        restore_net(checkpoint)

    with gzip.open(path, "rt", encoding="utf-8") as f:
        document = json.load(f)
    document["tensors"][0]["shape"] = [int(np.prod(document["tensors"][0]["shape"])) + 1]
    with pytest.raises(CheckpointError):
        load_checkpoint(_write_document(tmp_path / "bad.gz", document))

    document["tensors"][0]["name"] = "junk/x"
    with pytest.raises(CheckpointError, match="namespace"):
        load_checkpoint(_write_document(tmp_path / "junk.gz", document))
