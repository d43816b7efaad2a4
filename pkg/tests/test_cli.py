import csv
import json
import os

import pytest

import main as entrypoint
from controllers.deft_controller import DeftController
from models.deft_models import GradCheckScope, RunConfig
from models.errors import EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE
from routes.cli import main
from services.config_service import THREAD_VARIABLES, serialize_config
from services.tensor_service import corrupt_gradient


@pytest.fixture
def config_file(tmp_path, tiny_run_config):
    path = tmp_path / "run.env"
    path.write_text(serialize_config(tiny_run_config), encoding="utf-8")
    return str(path)


def summary(capsys):
    return json.loads(capsys.readouterr().out)


def test_synth_writes_pairs(tmp_path, config_file, capsys):
    out = tmp_path / "synth"
    assert main(["synth", "--config", config_file, "--output-dir", str(out), "--count", "2"]) == EXIT_OK
    assert summary(capsys)["count"] == 2
    assert sorted(p.name for p in (out / "images").iterdir()) == ["synth_0000.png", "synth_0001.png"]
    assert sorted(p.name for p in (out / "masks").iterdir()) == ["synth_0000.png", "synth_0001.png"]

    again = tmp_path / "again"
    main(["synth", "--config", config_file, "--output-dir", str(again), "--count", "2"])
    for name in ("images/synth_0000.png", "masks/synth_0001.png"):
        assert (out / name).read_bytes() == (again / name).read_bytes()


def test_params_and_toggles(tmp_path, config_file, capsys):
    assert main(["params", "--config", config_file, "--output-dir", str(tmp_path / "p")]) == EXIT_OK
    full = summary(capsys)
    assert (tmp_path / "p" / "params.csv").is_file()
    assert full["reference_params_m"] == 30.56

    main(["params", "--config", config_file, "--output-dir", str(tmp_path / "p"), "--toggles", "use_lpb=false",
          "--flops", "--input-size", "64"])
    reduced = summary(capsys)
    assert reduced["params"] < full["params"]
    assert reduced["gflops"] > 0


def test_train_eval_and_resume(tmp_path, config_file, capsys):
    run = tmp_path / "run"
    assert main(["train", "--config", config_file, "--output-dir", str(run)]) == EXIT_OK
    trained = summary(capsys)
    assert trained["iterations"] == 2
    for name in ("model.deft", "loss.csv", "config.env"):
        assert (run / name).is_file()

    data = tmp_path / "data"
    main(["synth", "--config", config_file, "--output-dir", str(data)])
    capsys.readouterr()
    assert main(["eval", "--config", config_file, "--output-dir", str(run), "--checkpoint", str(run / "model.deft"),
                 "--data-dir", str(data), "--input-size", "32", "--threshold", "0.3"]) == EXIT_OK
    evaluated = summary(capsys)
    assert evaluated["threshold"] == 0.3
    assert evaluated["samples"] == 4
    metrics = json.loads((run / "metrics.json").read_text())
    assert metrics["threshold"] == 0.3
    with (run / "curves.csv").open() as fh:
        assert len(list(csv.reader(fh))) == 257

    resumed = tmp_path / "resumed"
    assert main(["train", "--config", str(run / "config.env"), "--output-dir", str(resumed),
                 "--resume", str(run / "model.deft")]) == EXIT_OK
    assert summary(capsys)["params"] == trained["params"]


def test_resume_rejects_toggles(tmp_path, config_file, capsys):
    main(["train", "--config", config_file, "--output-dir", str(tmp_path / "run")])
    capsys.readouterr()
    code = main(["train", "--config", config_file, "--resume", str(tmp_path / "run" / "model.deft"),
                 "--toggles", "use_lpb=false"])
    assert code == EXIT_CONFIG
    assert json.loads(capsys.readouterr().err)["code"] == "CONFIG_ERROR"


def test_epochs_zero_writes_initial_checkpoint(tmp_path, config_file, capsys):
    path = tmp_path / "zero.env"
    path.write_text(open(config_file).read() + "TRAIN_EPOCHS=0\n", encoding="utf-8")
    assert main(["train", "--config", str(path), "--output-dir", str(tmp_path / "z")]) == EXIT_OK
    assert summary(capsys)["iterations"] == 0
    assert (tmp_path / "z" / "model.deft").is_file()


def test_missing_checkpoint_is_clean_error(tmp_path, capsys):
    code = main(["eval", "--checkpoint", str(tmp_path / "none.deft"), "--output-dir", str(tmp_path)])
    assert code == EXIT_IO
    captured = capsys.readouterr()
    assert captured.out == ""
    envelope = json.loads(captured.err)
    assert envelope["code"] == "IO_ERROR"
    assert envelope["details"]["path"].endswith("none.deft")


def test_invalid_config_exit_code(tmp_path, capsys):
    path = tmp_path / "bad.env"
    path.write_text("DEFT_CONFIG_VERSION=1\nMODEL_DEPTH=3\n", encoding="utf-8")
    assert main(["params", "--config", str(path)]) == EXIT_CONFIG
    assert json.loads(capsys.readouterr().err)["details"]["keys"] == ["MODEL_DEPTH"]


@pytest.mark.parametrize("argv", [["eval"], ["frobnicate"], ["params", "--input-size", "big"]])
def test_bad_command_line_is_usage_error(argv, capsys):
    assert main(argv) == EXIT_USAGE
    assert EXIT_USAGE != EXIT_CONFIG
    captured = capsys.readouterr()
    assert captured.out == ""
    assert json.loads(captured.err)["code"] == "USAGE_ERROR"


def test_gradcheck_table(tmp_path, capsys):
    assert main(["gradcheck", "--scope", "op", "--output-dir", str(tmp_path)]) == EXIT_OK
    assert summary(capsys)["failed"] == []
    with (tmp_path / "gradcheck_op.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert {r["name"] for r in rows} >= {"conv2d", "matmul", "softmax"}


def test_corrupted_gradient_fails_command(capsys):
    controller = DeftController()
    with corrupt_gradient("matmul"):
        code = controller.run("gradcheck", lambda: controller.cmd_gradcheck(GradCheckScope.OP))
    assert code == EXIT_NUMERIC
    assert "matmul" in summary(capsys)["failed"]


def test_ablation_rows_follow_preset_order(tmp_path, config_file, capsys):
    out = tmp_path / "ablate"
    assert main(["ablate", "--config", config_file, "--output-dir", str(out), "--toggles", "ours,baseline",
                 "--input-size", "32"]) == EXIT_OK
    rows = summary(capsys)["rows"]
    assert [r["variant"] for r in rows] == ["baseline", "ours"]
    assert rows[0]["params"] < rows[1]["params"]
    assert (out / "ablation" / "baseline.deft").is_file()
    with (out / "ablation.csv").open() as fh:
        assert [r["variant"] for r in csv.DictReader(fh)] == ["baseline", "ours"]


def test_ablation_row_matches_eval_of_its_checkpoint(tmp_path, config_file, capsys):
    out = tmp_path / "ablate"
    assert main(["ablate", "--config", config_file, "--output-dir", str(out), "--toggles", "ours",
                 "--input-size", "32"]) == EXIT_OK
    ablated = summary(capsys)
    row = ablated["rows"][0]
    assert main(["eval", "--config", config_file, "--output-dir", str(tmp_path / "eval"),
                 "--checkpoint", str(out / "ablation" / "ours.deft"), "--data-dir", ablated["test_dir"],
                 "--input-size", "32"]) == EXIT_OK
    evaluated = summary(capsys)
    for name in ("mae", "f1", "acc", "fpr", "fnr"):
        assert evaluated[name] == pytest.approx(row[name], abs=1e-12)


@pytest.mark.slow
def test_full_configuration_beats_baseline_mae(tmp_path, tiny_run_config, capsys):
    config = RunConfig.model_validate({
        **tiny_run_config.model_dump(),
        "model": {**tiny_run_config.model.model_dump(), "base_channels": 16, "depths": [1, 1, 2, 1],
                  "input_size": 64},
        "train": {**tiny_run_config.train.model_dump(), "epochs": 60, "batch_size": 4, "base_lr": 0.01,
                  "resize_to": 64, "crop_to": 64, "log_every": 20},
        "data": {"synth": {**tiny_run_config.data.synth.model_dump(), "count": 16, "image_size": 64}},
    })
    path = tmp_path / "ablate.env"
    path.write_text(serialize_config(config), encoding="utf-8")
    assert main(["ablate", "--config", str(path), "--output-dir", str(tmp_path / "out"),
                 "--toggles", "baseline,ours", "--input-size", "64"]) == EXIT_OK
    baseline, ours = summary(capsys)["rows"]
    assert ours["mae"] <= baseline["mae"]


def test_unknown_ablation_variant(config_file, capsys):
    assert main(["ablate", "--config", config_file, "--toggles", "nonsense"]) == EXIT_CONFIG


def test_unexpected_failure_maps_to_internal_error(capsys):
    assert DeftController().run("boom", lambda: 1 / 0) == 1
    assert json.loads(capsys.readouterr().err)["code"] == "INTERNAL_ERROR"


def test_entrypoint_configures_runtime(tmp_path, config_file, monkeypatch, capsys):
    for name in THREAD_VARIABLES:
        monkeypatch.setenv(name, "1")
    monkeypatch.setenv("DEFT_THREADS", "2")
    monkeypatch.setenv("DEFT_LOG_LEVEL", "warning")
    calls = []
    monkeypatch.setattr(entrypoint.logging, "basicConfig", lambda **kwargs: calls.append(kwargs))
    assert entrypoint.main(["params", "--config", config_file, "--output-dir", str(tmp_path)]) == EXIT_OK
    assert os.environ["OMP_NUM_THREADS"] == "2"
    assert calls[0]["level"] == "WARNING"
    assert calls[0]["format"] == entrypoint.LOG_FORMAT
