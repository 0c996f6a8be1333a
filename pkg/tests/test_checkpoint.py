import numpy as np
import pytest

from transxssm.checkpoint import load_checkpoint, save_checkpoint
from transxssm.lm import init_lm, named_parameters
from transxssm.tensor import Rng
from tests.test_lm import tiny_cfg


def test_round_trip_bit_exact(tmp_path):
    cfg = tiny_cfg()
    params = init_lm(Rng(0), cfg)
    named = named_parameters(params)
    path = str(tmp_path / "ckpt.bin")
    save_checkpoint(path, named, cfg.to_dict())
    tensors, config = load_checkpoint(path)
    assert config == cfg.to_dict()
    assert set(tensors) == set(named)
    for name, p in named.items():
        assert tensors[name].shape == p.data.shape
        assert np.array_equal(tensors[name], p.data)  # bit-exact
        assert tensors[name].tobytes() == p.data.astype("<f8").tobytes()


def test_header_records_manifest(tmp_path):
    path = str(tmp_path / "c.bin")
    save_checkpoint(path, {"a": np.ones((2, 3)), "b": np.zeros(5)}, {"k": 1})
    tensors, config = load_checkpoint(path)
    assert tensors["a"].shape == (2, 3)
    assert tensors["b"].shape == (5,)
    assert config == {"k": 1}


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 32)
    with pytest.raises(ValueError):
        load_checkpoint(str(path))
