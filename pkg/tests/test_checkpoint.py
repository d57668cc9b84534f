import struct

import pytest
import torch

from raydiff.checkpoint import CheckpointError, MAGIC, decode, encode, load_checkpoint, save_checkpoint
from raydiff.net import NetworkConfig, init_parameters


def test_round_trip(tmp_path):
    cfg = NetworkConfig(channels=(8, 16), image_size=8, attention=True)
    model = init_parameters(cfg, 0)
    path = save_checkpoint(tmp_path / "m.ckpt", model, cfg.to_dict())
    tensors, conf = load_checkpoint(path)
    assert NetworkConfig.from_dict(conf) == cfg
    sd = model.state_dict()
    assert set(tensors) == set(sd)
    for k in sd:
        assert torch.equal(tensors[k], sd[k])


def test_layout_by_hand():
    data = encode({"w": torch.tensor([[1.0, 2.0]])}, {"a": 1})
    expected = (
        MAGIC
        + struct.pack("<I", 1)
        + struct.pack("<I", 4)
        + b"a=1\n"
        + struct.pack("<I", 1)
        + struct.pack("<I", 1)
        + b"w"
        + struct.pack("<I", 2)
        + struct.pack("<QQ", 1, 2)
        + struct.pack("<Q", 2)
        + struct.pack("<ff", 1.0, 2.0)
    )
    assert data == expected


def test_encoding_deterministic():
    t = {"b": torch.ones(3), "a": torch.zeros(2, 2)}
    assert encode(t, {"x": 1}) == encode(dict(reversed(list(t.items()))), {"x": 1})


@pytest.mark.parametrize("cut", [3, 12, 40])
def test_truncated_and_corrupt(cut):
    data = encode({"w": torch.ones(4)}, {})
    with pytest.raises(CheckpointError):
        decode(data[:cut])
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        decode(b"XXXXXXXX" + data[8:])
    with pytest.raises(CheckpointError, match="version"):
        decode(MAGIC + struct.pack("<I", 99) + data[12:])


def test_non_finite_rejected():
    with pytest.raises(CheckpointError, match="non-finite"):
        encode({"w": torch.tensor([float("nan")])}, {})


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope"):
        load_checkpoint(tmp_path / "nope.ckpt")
