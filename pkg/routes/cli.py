import argparse
import logging
from typing import List, Optional

from pydantic import ValidationError

from controllers.deft_controller import DeftController
from models.deft_models import GradCheckScope, RunConfig
from models.errors import ConfigError, UsageError
from services.config_service import load_run_config, parse_toggles

logger = logging.getLogger(__name__)

controller = DeftController()


def _with_overrides(config: RunConfig, args) -> RunConfig:
    data = config.model_dump()
    if getattr(args, "seed", None) is not None:
        data["train"]["seed"] = args.seed
    if getattr(args, "output_dir", None):
        data["output_dir"] = args.output_dir
    if getattr(args, "threshold", None) is not None:
        data["threshold"] = args.threshold
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError("invalid command-line override", {"errors": e.errors(include_url=False, include_context=False)})


def _load(args) -> RunConfig:
    return _with_overrides(load_run_config(args.config), args)


def synth_command(args) -> int:
    """
    Generate a synthetic defect dataset.

    - **--config**: run config whose DATA_SYNTH_* keys describe the set
    - **--seed**: overrides the generator seed
    - **--output-dir**: receives images/ and masks/
    """
    def command():
        config = _load(args)
        spec = config.data.synth
        if args.seed is not None:
            spec = spec.model_copy(update={"seed": args.seed})
        if args.count is not None:
            spec = spec.model_copy(update={"count": args.count})
        return controller.cmd_synth(spec, config.output_dir)
    return controller.run("synth", command)


def train_command(args) -> int:
    """
    Train a model and write model.deft, loss.csv and config.env.

    - **--resume**: continue from a checkpoint (architecture comes from the checkpoint)
    - **--toggles**: architecture overrides such as use_lpb=false,use_cffn=false
    """
    def command():
        return controller.cmd_train(_load(args), args.resume, parse_toggles(args.toggles))
    return controller.run("train", command)


def eval_command(args) -> int:
    """
    Evaluate a checkpoint; writes metrics.json and curves.csv.

    - **--checkpoint**: model to evaluate
    - **--data-dir**: folder with images/ and masks/ (defaults to the config's data source)
    - **--threshold**: binarization threshold for the scalar metrics
    - **--input-size**: evaluation resize side
    """
    def command():
        return controller.cmd_eval(_load(args), args.checkpoint, args.data_dir, args.input_size)
    return controller.run("eval", command)


def gradcheck_command(args) -> int:
    """Finite-difference check of the autodiff rules at op, block or model scope."""
    def command():
        config = _load(args)
        return controller.cmd_gradcheck(GradCheckScope(args.scope), config.train.seed, config.output_dir)
    return controller.run("gradcheck", command)


def params_command(args) -> int:
    """
    Parameter count with a per-module breakdown (params.csv).

    - **--flops**: also estimate FLOPs at --input-size
    """
    def command():
        flops_size = args.input_size if args.flops else None
        return controller.cmd_params(_load(args), parse_toggles(args.toggles), flops_size)
    return controller.run("params", command)


def ablate_command(args) -> int:
    """
    Train and evaluate the cumulative component variants; writes ablation.csv.

    - **--toggles**: comma-separated variant names (baseline,+csb,+pab,+lpb,+lmps,ours)
    - **--include-pe**: add the variant without position encoding (pe-none)
    """
    def command():
        variants = [v.strip() for v in (args.toggles or "").split(",") if v.strip()]
        return controller.cmd_ablate(_load(args), variants, args.include_pe, args.input_size)
    return controller.run("ablate", command)


class CommandParser(argparse.ArgumentParser):
    """Reports bad flags as UsageError so they share the JSON envelope and exit code of other usage failures."""

    def error(self, message: str):
        raise UsageError(message, {"usage": self.format_usage().strip()})


def build_parser() -> argparse.ArgumentParser:
    parser = CommandParser(prog="deft", description="Defect Transformer for surface defect detection")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Canonical KEY=value config file")
    common.add_argument("--seed", type=int, help="Override the run seed")
    common.add_argument("--output-dir", help="Directory receiving every artifact")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help=synth_command.__doc__.strip().splitlines()[0])
    p.add_argument("--count", type=int, help="Override the sample count")
    p.set_defaults(handler=synth_command)

    p = sub.add_parser("train", parents=[common], help="Train a model")
    p.add_argument("--resume", help="Checkpoint to continue from")
    p.add_argument("--toggles", help="Architecture overrides, e.g. use_lpb=false")
    p.set_defaults(handler=train_command)

    p = sub.add_parser("eval", parents=[common], help="Evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", help="Dataset folder with images/ and masks/")
    p.add_argument("--threshold", type=float, help="Binarization threshold")
    p.add_argument("--input-size", type=int, default=256, help="Evaluation resize side")
    p.set_defaults(handler=eval_command)

    p = sub.add_parser("gradcheck", parents=[common], help="Check gradients against finite differences")
    p.add_argument("--scope", choices=[s.value for s in GradCheckScope], default=GradCheckScope.OP.value)
    p.set_defaults(handler=gradcheck_command)

    p = sub.add_parser("params", parents=[common], help="Parameter count and breakdown")
    p.add_argument("--toggles", help="Architecture overrides, e.g. use_lpb=false")
    p.add_argument("--flops", action="store_true", help="Also estimate FLOPs")
    p.add_argument("--input-size", type=int, default=256, help="Input side for the FLOPs estimate")
    p.set_defaults(handler=params_command)

    p = sub.add_parser("ablate", parents=[common], help="Component ablation table")
    p.add_argument("--toggles", help="Variants to run, e.g. baseline,ours")
    p.add_argument("--include-pe", action="store_true", help="Add the pe-none variant")
    p.add_argument("--threshold", type=float, help="Binarization threshold")
    p.add_argument("--input-size", type=int, default=256, help="Evaluation resize side")
    p.set_defaults(handler=ablate_command)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        logger.error("invalid command line: %s", e.message)
        controller.emit_error(e.to_response())
        return e.exit_code
    logger.debug("running command=%s", args.command)
    return args.handler(args)
