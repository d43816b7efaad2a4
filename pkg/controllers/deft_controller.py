import csv
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, TextIO, Tuple

from models.deft_models import (
    AblationRow,
    DataSourceKind,
    ErrorResponse,
    GradCheckScope,
    RunConfig,
    SynthSpec,
    TOGGLES,
)
from models.errors import EXIT_NUMERIC, EXIT_OK, ConfigError, DataIOError, DeftError
from services.accounting_service import cost_breakdown, estimate_flops, write_breakdown
from services.checkpoint_service import load_model, save_model
from services.config_service import apply_toggles, save_run_config
from services.data_service import (
    EVAL_SIZE,
    Sample,
    load_folder,
    synth_generate,
    train_test_split,
    write_folder,
    write_ingest_report,
)
from services.gradcheck_service import run_gradcheck
from services.metrics_service import evaluate, write_curves, write_report
from services.model_service import ABLATION_PRESETS, POSITION_FREE_PRESET, build_model
from services.module_service import param_count
from services.training_service import train, write_loss_log

logger = logging.getLogger(__name__)

REFERENCE_PARAMS_M = 30.56
REFERENCE_GFLOPS = 8.72
ABLATION_TEST_FRACTION = 0.25


class DeftController:
    def __init__(self, out: Optional[TextIO] = None, err: Optional[TextIO] = None):
        self.out = out
        self.err = err

    def run(self, name: str, command: Callable[[], Tuple[Dict, int]]) -> int:
        """Run one command, print its summary and map failures to the error envelope and exit code."""
        try:
            summary, code = command()
        except DeftError as e:
            logger.error("%s failed: %s", name, e.message)
            self.emit_error(e.to_response())
            return e.exit_code
        except Exception as e:
            logger.exception("%s failed unexpectedly", name)
            self.emit_error(ErrorResponse(error="Unexpected failure", code="INTERNAL_ERROR",
                                           details={"original_error": str(e)}))
            return 1
        print(json.dumps(summary, indent=2, default=str), file=self.out or sys.stdout)
        return code

    def emit_error(self, response: ErrorResponse):
        print(response.model_dump_json(), file=self.err or sys.stderr)

    # data

    def _training_samples(self, config: RunConfig, output_dir: Path) -> List[Sample]:
        data = config.data
        if data.source == DataSourceKind.SYNTH:
            return synth_generate(data.synth)
        samples, report = load_folder(data.images_dir, data.masks_dir)
        write_ingest_report(report, output_dir / "ingest.jsonl")
        if not samples:
            raise DataIOError("no usable samples in the dataset folders",
                              {"images_dir": data.images_dir, "masks_dir": data.masks_dir})
        return samples

    def _eval_samples(self, config: RunConfig, data_dir: Optional[str], output_dir: Path) -> List[Sample]:
        if data_dir is None:
            return self._training_samples(config, output_dir)
        samples, report = load_folder(Path(data_dir) / "images", Path(data_dir) / "masks")
        write_ingest_report(report, output_dir / "ingest.jsonl")
        return samples

    # commands

    def cmd_synth(self, spec: SynthSpec, out_dir: str) -> Tuple[Dict, int]:
        samples = synth_generate(spec)
        write_folder(samples, out_dir)
        return {"out_dir": str(out_dir), "count": len(samples), "seed": spec.seed}, EXIT_OK

    def cmd_train(self, config: RunConfig, resume: Optional[str] = None,
                  toggles: Optional[Dict[str, bool]] = None) -> Tuple[Dict, int]:
        output_dir = Path(config.output_dir)
        if resume:
            if toggles:
                raise ConfigError("toggles cannot change the architecture of a resumed checkpoint")
            model = load_model(resume, seed=config.train.seed)
            config = config.model_copy(update={"model": model.config})
        else:
            config = apply_toggles(config, toggles or {})
            model = build_model(config.model, seed=config.train.seed)
        samples = self._training_samples(config, output_dir)
        result = train(model, samples, config.train, str(output_dir))
        checkpoint = save_model(result.model, output_dir / "model.deft")
        loss_log = write_loss_log(result.records, output_dir / "loss.csv")
        save_run_config(config, output_dir / "config.env")
        summary = {
            "checkpoint": str(checkpoint),
            "loss_log": str(loss_log),
            "iterations": len(result.records),
            "params": param_count(result.model),
            "final_loss": result.records[-1].total_loss if result.records else None,
        }
        return summary, EXIT_OK

    def cmd_eval(self, config: RunConfig, checkpoint: str, data_dir: Optional[str] = None,
                 eval_size: int = EVAL_SIZE) -> Tuple[Dict, int]:
        output_dir = Path(config.output_dir)
        model = load_model(checkpoint)
        samples = self._eval_samples(config, data_dir, output_dir)
        report = evaluate(model, samples, config.threshold, config.n_thresholds, eval_size)
        metrics_path = write_report(report, output_dir / "metrics.json")
        curves_path = write_curves(report.curves or [], output_dir / "curves.csv")
        summary = report.model_dump(exclude={"curves", "counts"})
        summary.update({"samples": len(samples), "metrics": str(metrics_path), "curves": str(curves_path)})
        return summary, EXIT_OK

    def cmd_gradcheck(self, scope: GradCheckScope, seed: int = 0, output_dir: Optional[str] = None) -> Tuple[Dict, int]:
        rows = run_gradcheck(scope, seed)
        if output_dir:
            path = Path(output_dir) / f"gradcheck_{GradCheckScope(scope).value}.csv"
            _write_rows(path, ["scope", "name", "max_rel_error", "tolerance", "passed"],
                        [[r.scope.value, r.name, repr(r.max_rel_error), r.tolerance, r.passed] for r in rows])
        failed = [r.name for r in rows if not r.passed]
        summary = {
            "scope": GradCheckScope(scope).value,
            "cases": [r.model_dump(mode="json") for r in rows],
            "failed": failed,
        }
        return summary, EXIT_NUMERIC if failed else EXIT_OK

    def cmd_params(self, config: RunConfig, toggles: Optional[Dict[str, bool]] = None,
                   flops_size: Optional[int] = None) -> Tuple[Dict, int]:
        config = apply_toggles(config, toggles or {})
        model = build_model(config.model, seed=config.train.seed)
        rows = cost_breakdown(model, flops_size)
        path = write_breakdown(rows, Path(config.output_dir) / "params.csv")
        total = param_count(model)
        summary = {
            "params": total,
            "params_m": round(total / 1e6, 3),
            "reference_params_m": REFERENCE_PARAMS_M,
            "breakdown": str(path),
        }
        if flops_size:
            summary.update({
                "flops_input_size": flops_size,
                "gflops": round(sum(r.flops for r in rows) / 1e9, 3),
                "reference_gflops": REFERENCE_GFLOPS,
            })
        return summary, EXIT_OK

    def cmd_ablate(self, config: RunConfig, variants: Optional[Sequence[str]] = None,
                   include_pe: bool = False, eval_size: int = EVAL_SIZE) -> Tuple[Dict, int]:
        presets = dict(ABLATION_PRESETS)
        if include_pe:
            presets["pe-none"] = POSITION_FREE_PRESET
        names = list(variants) if variants else list(presets)
        unknown = [n for n in names if n not in presets]
        if unknown:
            raise ConfigError("unknown ablation variants", {"unknown": unknown, "known": list(presets)})
        names = [n for n in presets if n in names]

        output_dir = Path(config.output_dir)
        samples = self._training_samples(config, output_dir)
        train_set, test_set = train_test_split(samples, ABLATION_TEST_FRACTION, config.train.seed)
        if not test_set:
            test_set = train_set
        # scored from disk so `eval --data-dir <test_dir>` on a variant checkpoint reproduces its row
        test_dir = write_folder(test_set, output_dir / "ablation" / "test")
        test_set, _ = load_folder(test_dir / "images", test_dir / "masks")

        rows: List[AblationRow] = []
        for name in names:
            variant = apply_toggles(config, presets[name])
            logger.info("ablation variant=%s toggles=%s", name, presets[name])
            model = build_model(variant.model, seed=config.train.seed)
            train(model, train_set, variant.train)
            save_model(model, output_dir / "ablation" / f"{_slug(name)}.deft")
            report = evaluate(model, test_set, config.threshold, None, eval_size)
            flops = sum(estimate_flops(variant.model, eval_size).values())
            rows.append(AblationRow(variant=name, toggles={t: getattr(variant.model, t) for t in TOGGLES},
                                    params=param_count(model), flops=flops, mae=report.mae, f1=report.f1,
                                    acc=report.acc, fpr=report.fpr, fnr=report.fnr))
        path = output_dir / "ablation.csv"
        _write_rows(path, ["variant", *TOGGLES, "params", "flops", "mae", "f1", "acc", "fpr", "fnr"],
                    [[r.variant, *(r.toggles[t] for t in TOGGLES), r.params, r.flops,
                      r.mae, r.f1, r.acc, r.fpr, r.fnr] for r in rows])
        summary = {"table": str(path), "test_dir": str(test_dir), "rows": [r.model_dump() for r in rows]}
        return summary, EXIT_OK


def _slug(name: str) -> str:
    return name.replace("+", "plus_").replace("-", "_")


def _write_rows(path: Path, header: List[str], rows: List[List]):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as e:
        raise DataIOError("could not write table", {"path": str(path), "original_error": str(e)})
