import csv

import numpy as np
import pytest

from models.deft_models import ModelConfig, SynthSpec, TrainConfig
from models.errors import DimensionError, UsageError
from services.data_service import synth_generate
from services.metrics_service import evaluate
from services.model_service import build_model
from services.training_service import (
    LOSS_LOG_FIELDS, BatchLoader, OptimizerState, poly_lr, sgd_step, train, write_loss_log,
)


@pytest.fixture
def samples():
    return synth_generate(SynthSpec(count=4, image_size=32, seed=3))


def small_train_config(**overrides):
    values = dict(epochs=2, batch_size=2, resize_to=32, crop_to=32, log_every=1)
    values.update(overrides)
    return TrainConfig(**values)


def test_poly_lr_values():
    assert poly_lr(0.003, 0, 100) == 0.003
    assert poly_lr(0.003, 100, 100) == 0.0
    assert poly_lr(0.003, 50, 100, 0.9) == pytest.approx(0.0016078, rel=1e-4)
    assert poly_lr(0.003, 50, 100, 0.9) == pytest.approx(0.003 * 0.5 ** 0.9, abs=1e-9)
    assert poly_lr(0.01, 0, 0) == 0.01
    with pytest.raises(UsageError):
        poly_lr(0.003, 101, 100)


def test_poly_lr_strictly_decreasing():
    values = [poly_lr(0.003, i, 20) for i in range(21)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_sgd_plain_descent():
    p = np.array([1.0, -2.0])
    state = OptimizerState.for_params([p])
    sgd_step([p], [np.array([0.5, 1.0])], state, lr=0.1, momentum=0.0, weight_decay=0.0)
    np.testing.assert_allclose(p, [0.95, -2.1])
    assert state.step == 1


def test_sgd_momentum_two_steps():
    p = np.array([1.0])
    g = np.array([0.5])
    state = OptimizerState.for_params([p])
    for _ in range(2):
        sgd_step([p], [g], state, lr=0.1, momentum=0.9, weight_decay=0.0)
    assert 1.0 - p[0] == pytest.approx(0.1 * 0.5 * 2.9, rel=1e-12)


def test_sgd_zero_gradient_keeps_params():
    p = np.array([3.0, 4.0])
    state = OptimizerState.for_params([p])
    sgd_step([p], [None], state, lr=0.1, momentum=0.9, weight_decay=0.0)
    np.testing.assert_array_equal(p, [3.0, 4.0])


def test_sgd_weight_decay_pulls_toward_zero():
    p = np.array([2.0])
    sgd_step([p], [np.zeros(1)], OptimizerState.for_params([p]), lr=0.5, momentum=0.0, weight_decay=0.1)
    np.testing.assert_allclose(p, [1.9])


def test_sgd_shape_mismatch():
    p = np.zeros(3)
    with pytest.raises(DimensionError):
        sgd_step([p], [np.zeros(2)], OptimizerState.for_params([p]), 0.1, 0.9, 0.0)


def test_loader_covers_every_sample(samples):
    loader = BatchLoader(samples, small_train_config(batch_size=3), np.random.default_rng(0))
    batches = list(loader.epoch())
    assert len(loader) == 2
    assert [images.shape[0] for images, _ in batches] == [3, 1]
    assert batches[0][0].shape[1:] == (3, 32, 32)
    assert batches[0][1].shape[1:] == (1, 32, 32)


def test_prefetch_matches_synchronous_batches(samples):
    sync = list(BatchLoader(samples, small_train_config(), np.random.default_rng(4)).epoch())
    threaded = list(BatchLoader(samples, small_train_config(prefetch=2), np.random.default_rng(4)).epoch())
    assert len(sync) == len(threaded)
    for (a, ma), (b, mb) in zip(sync, threaded):
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(ma, mb)


def test_epochs_zero_returns_initial_model(tiny_config, samples):
    model = build_model(tiny_config, seed=0)
    before = {k: v.copy() for k, v in model.state_dict().items()}
    result = train(model, samples, small_train_config(epochs=0))
    assert result.records == []
    assert result.model is model
    for name, array in model.state_dict().items():
        np.testing.assert_array_equal(array, before[name])


def test_training_is_deterministic(tiny_config, samples):
    config = small_train_config()
    first = train(build_model(tiny_config, seed=0), samples, config)
    second = train(build_model(tiny_config, seed=0), samples, config)
    assert len(first.records) == 4
    assert [r.total_loss for r in first.records] == [r.total_loss for r in second.records]
    assert first.records[0].lr == config.base_lr
    assert first.records[-1].epoch == 1


def test_max_iterations_caps_schedule(tiny_config, samples):
    result = train(build_model(tiny_config), samples, small_train_config(epochs=5, max_iterations=3))
    assert [r.iteration for r in result.records] == [0, 1, 2]
    assert result.records[1].lr == pytest.approx(poly_lr(0.003, 1, 3))


def test_checkpoints_written_per_epoch(tmp_path, tiny_config, samples):
    result = train(build_model(tiny_config), samples, small_train_config(checkpoint_every=1), str(tmp_path))
    assert [p.name for p in result.checkpoints] == ["checkpoint_epoch0001.deft", "checkpoint_epoch0002.deft"]
    assert all(p.is_file() for p in result.checkpoints)


def test_loss_log_csv(tmp_path, tiny_config, samples):
    result = train(build_model(tiny_config), samples, small_train_config(epochs=1))
    path = write_loss_log(result.records, tmp_path / "loss.csv")
    with path.open() as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == LOSS_LOG_FIELDS
    assert float(rows[0]["total_loss"]) == result.records[0].total_loss


@pytest.mark.slow
def test_overfits_small_synthetic_set():
    model_config = ModelConfig(base_channels=16, depths=[1, 1, 2, 1], input_size=224)
    data = synth_generate(SynthSpec(count=8, image_size=224, seed=7, pseudo_defect_density=0.0,
                                    defect_size_range=(0.2, 0.35)))
    config = TrainConfig(epochs=250, batch_size=4, base_lr=0.01, resize_to=224, crop_to=224, log_every=50)
    result = train(build_model(model_config, seed=0), data, config)
    assert len(result.records) == 500
    first = np.mean([r.total_loss for r in result.records[:10]])
    last = np.mean([r.total_loss for r in result.records[-10:]])
    assert last * 10 <= first
    assert evaluate(result.model, data, eval_size=224).f1 >= 0.95
