import io

import numpy as np
import pytest

from models.errors import DataIOError
from services.checkpoint_service import load_model, read_checkpoint, save_model, write_checkpoint
from services.model_service import build_model
from services.module_service import param_count
from services.tensor_service import Tensor, no_grad


def test_round_trip_is_bit_exact(tmp_path, tiny_model):
    tiny_model.encoder.stem.norms[0].running_mean[...] = 0.125
    path = save_model(tiny_model, tmp_path / "model.deft")
    restored = load_model(path)
    assert restored.config == tiny_model.config
    original, loaded = tiny_model.state_dict(), restored.state_dict()
    assert list(original) == list(loaded)
    for name in original:
        assert original[name].dtype == loaded[name].dtype
        assert original[name].tobytes() == loaded[name].tobytes()
    assert param_count(restored) == param_count(tiny_model)


def test_restored_model_predicts_identically(tmp_path, tiny_model):
    x = Tensor(np.random.default_rng(3).random((1, 3, 32, 32)).astype(np.float32))
    tiny_model.eval()
    restored = load_model(save_model(tiny_model, tmp_path / "m.deft")).eval()
    with no_grad():
        np.testing.assert_array_equal(tiny_model(x).pred.data, restored(x).pred.data)


def test_float64_round_trip(tmp_path, tiny_config):
    model = build_model(tiny_config, seed=2, dtype=np.float64)
    restored = load_model(save_model(model, tmp_path / "f64.deft"))
    assert all(p.dtype == np.float64 for p in restored.parameters())


def test_corrupt_streams(tiny_model):
    buffer = io.BytesIO()
    write_checkpoint(buffer, tiny_model.config, tiny_model.state_dict())
    data = buffer.getvalue()
    with pytest.raises(DataIOError):
        read_checkpoint(io.BytesIO(b"NOPE" + data[4:]))
    with pytest.raises(DataIOError):
        read_checkpoint(io.BytesIO(data[:-3]))
    with pytest.raises(DataIOError):
        read_checkpoint(io.BytesIO(data[:4] + b"\x09\x00" + data[6:]))
    config, state = read_checkpoint(io.BytesIO(data))
    assert config == tiny_model.config
    assert len(state) == len(tiny_model.state_dict())


def test_missing_checkpoint(tmp_path):
    with pytest.raises(DataIOError):
        load_model(tmp_path / "absent.deft")
