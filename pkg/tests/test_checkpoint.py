import struct

import numpy as np
import pytest

from crowdcount.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from crowdcount.config import ModelConfig
from crowdcount.model import CrowdCounter


def test_byte_layout(tmp_path):
    path = tmp_path / "c.bin"
    save_checkpoint(path, {"w": np.array([[1.0, 2.0, 3.0]]), "s": np.array(0.5)})
    raw = path.read_bytes()
    expect = (b"CCTR" + bytes([1])
              + struct.pack("<I", 1) + b"w" + struct.pack("<III", 2, 1, 3) + struct.pack("<3d", 1, 2, 3)
              + struct.pack("<I", 1) + b"s" + struct.pack("<I", 0) + struct.pack("<d", 0.5))
    assert raw == expect


def test_round_trip(tmp_path, rng):
    state = {"a.b": rng.standard_normal((2, 3, 4)), "c": rng.standard_normal(5), "d": np.zeros((1, 1))}
    save_checkpoint(tmp_path / "c.bin", state)
    back = load_checkpoint(tmp_path / "c.bin")
    assert list(back) == list(state)
    for k in state:
        np.testing.assert_array_equal(back[k], state[k])


def test_bad_files(tmp_path):
    (tmp_path / "m.bin").write_bytes(b"XXXX\x01")
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "m.bin")
    (tmp_path / "v.bin").write_bytes(b"CCTR\x02")
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v.bin")
    save_checkpoint(tmp_path / "t.bin", {"w": np.ones(4)})
    (tmp_path / "t.bin").write_bytes((tmp_path / "t.bin").read_bytes()[:-3])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "t.bin")


def test_model_state_round_trip(tmp_path, rng):
    cfg = ModelConfig(seed=3)
    m = CrowdCounter(cfg)
    x = rng.random((2, 3, 64, 64)).astype(np.float32)
    m(x)  # moves batch-norm running statistics off their initial values
    save_checkpoint(tmp_path / "m.bin", m.state_dict())
    other = CrowdCounter(ModelConfig(seed=4))
    other.load_state_dict(load_checkpoint(tmp_path / "m.bin"))
    m.eval(), other.eval()
    np.testing.assert_array_equal(m(x).data, other(x).data)


def test_parameter_names_unique():
    m = CrowdCounter(ModelConfig())
    names = [p.name for p in m.parameters()]
    assert len(names) == len(set(names)) and all(names)
    assert "head.regress.weight" in names
