import numpy as np
import pytest

from models.deft_models import ModelConfig, RunConfig, SynthSpec
from services.model_service import build_model


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_config():
    return ModelConfig(base_channels=8, depths=[1, 1, 1, 1], input_size=32)


@pytest.fixture
def tiny_model(tiny_config):
    return build_model(tiny_config, seed=0)


@pytest.fixture
def tiny_run_config(tmp_path, tiny_config):
    """Run config small enough to train for a couple of iterations in a test."""
    return RunConfig.model_validate({
        "model": tiny_config.model_dump(),
        "train": {"epochs": 1, "batch_size": 2, "resize_to": 32, "crop_to": 32, "log_every": 1},
        "data": {"synth": SynthSpec(count=4, image_size=32, seed=3).model_dump()},
        "output_dir": str(tmp_path / "run"),
    })
