"""
Finite-difference verification of the autodiff rules.

``grad_check`` compares analytic gradients against central differences in
float64. The catalogs below build small instances for every primitive op,
for each DefT sub-block and for a reduced full model.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from models.deft_models import GradCheckRow, GradCheckScope, ModelConfig
from models.errors import UsageError
from services import functional_service as F
from services import model_service as M
from services import tensor_service as T
from services.module_service import Module
from services.tensor_service import Tensor, no_grad

logger = logging.getLogger(__name__)

OP_TOLERANCE = 1e-5
BLOCK_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3

REDUCED_MODEL = dict(base_channels=8, depths=[1, 1, 1, 1], input_size=32)


def _project(out: Tensor, seed: int) -> Tensor:
    """Reduce a non-scalar output to a scalar with a fixed random weighting."""
    if out.size == 1:
        return out.sum()
    weights = np.random.default_rng(seed).standard_normal(out.shape).astype(out.dtype)
    return (out * weights).sum()


def grad_check(fn: Callable[[], Tensor], inputs: Sequence[Tensor], tol: float = OP_TOLERANCE,
               max_elements: Optional[int] = None, seed: int = 0) -> float:
    """
    Max relative error |analytic - numeric| / max(1, |numeric|) over the checked
    elements of ``inputs``. ``fn`` closes over the inputs, which are perturbed in place.
    """
    inputs = [t for t in inputs if t.requires_grad]
    if not inputs:
        raise UsageError("grad_check needs at least one input that requires grad")
    for t in inputs:
        if t.dtype != np.float64:
            raise UsageError("grad_check runs in float64", {"name": t.name, "dtype": str(t.dtype)})
        t.grad = None

    T.backward(_project(fn(), seed))
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        indices = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            indices = rng.choice(flat.size, size=max_elements, replace=False)
        for i in indices:
            original = flat[i]
            h = 1e-5 * (1.0 + abs(original))
            with no_grad():
                flat[i] = original + h
                plus = _project(fn(), seed).item()
                flat[i] = original - h
                minus = _project(fn(), seed).item()
            flat[i] = original
            numeric = (plus - minus) / (2 * h)
            error = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, float(error))
    if worst >= tol:
        logger.debug("grad_check above tolerance max_rel_error=%.3e tol=%.1e", worst, tol)
    return worst


@dataclass
class GradCase:
    name: str
    build: Callable[[np.random.Generator], tuple]
    tolerance: float = OP_TOLERANCE
    max_elements: Optional[int] = None


def _leaf(rng, shape, low=-1.0, high=1.0, name=None) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True, dtype=np.float64, name=name)


def _away_from_zero(rng, shape, margin=0.1) -> Tensor:
    values = rng.uniform(margin, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return Tensor(values, requires_grad=True, dtype=np.float64)


def _binary(op):
    def build(rng):
        a, b = _leaf(rng, (2, 3)), _leaf(rng, (3,))
        return (lambda: op(a, b)), [a, b]
    return build


def _unary(op, make=_leaf):
    def build(rng):
        a = make(rng, (2, 3, 4))
        return (lambda: op(a)), [a]
    return build


def _div_case(rng):
    a = _leaf(rng, (2, 3))
    b = Tensor(rng.uniform(0.5, 2.0, size=(3,)), requires_grad=True, dtype=np.float64)
    return (lambda: T.div(a, b)), [a, b]


def _log_case(rng):
    a = _leaf(rng, (2, 3), 0.2, 2.0)
    return (lambda: T.log(a)), [a]


def _clamp_case(rng):
    a = _away_from_zero(rng, (3, 4))
    return (lambda: T.clamp(a, -0.05, 0.05) + T.clamp(a, -2.0, 2.0)), [a]


def _conv_case(groups, c_in=4, c_out=4, stride=1, padding=1, k=3):
    def build(rng):
        x = _leaf(rng, (2, c_in, 5, 5))
        w = _leaf(rng, (c_out, c_in // groups, k, k))
        b = _leaf(rng, (c_out,))
        return (lambda: F.conv2d(x, w, b, stride=stride, padding=padding, groups=groups)), [x, w, b]
    return build


def _matmul_case(rng):
    a, b = _leaf(rng, (2, 3, 4)), _leaf(rng, (4, 5))
    return (lambda: T.matmul(a, b)), [a, b]


def _concat_case(rng):
    a, b = _leaf(rng, (2, 3, 2)), _leaf(rng, (2, 1, 2))
    return (lambda: T.concat([a, b], axis=1)), [a, b]


def _linear_case(rng):
    x, w, b = _leaf(rng, (2, 3, 4)), _leaf(rng, (4, 5)), _leaf(rng, (5,))
    return (lambda: F.linear(x, w, b)), [x, w, b]


def _layer_norm_case(rng):
    x, g, b = _leaf(rng, (2, 3, 6)), _leaf(rng, (6,)), _leaf(rng, (6,))
    return (lambda: F.layer_norm(x, g, b)), [x, g, b]


def _batch_norm_case(rng):
    x, g, b = _leaf(rng, (3, 2, 3, 3)), _leaf(rng, (2,)), _leaf(rng, (2,))
    mean, var = np.zeros(2), np.ones(2)
    return (lambda: F.batch_norm2d(x, g, b, mean, var, training=True)), [x, g, b]


def _map_case(op):
    def build(rng):
        x = _leaf(rng, (1, 2, 6, 5))
        return (lambda: op(x)), [x]
    return build


def _seq2img_case(rng):
    x = _leaf(rng, (2, 6, 3))
    return (lambda: T.seq2img(x, 2, 3)), [x]


def op_cases() -> List[GradCase]:
    return [
        GradCase("add", _binary(T.add)),
        GradCase("sub", _binary(T.sub)),
        GradCase("mul", _binary(T.mul)),
        GradCase("div", _div_case),
        GradCase("neg", _unary(T.neg)),
        GradCase("power", _unary(lambda a: T.power(a, 3.0))),
        GradCase("exp", _unary(T.exp)),
        GradCase("log", _log_case),
        GradCase("clamp", _clamp_case),
        GradCase("sum", _unary(lambda a: T.tsum(a, axis=1, keepdims=True))),
        GradCase("mean", _unary(lambda a: T.mean(a, axis=(0, 2)))),
        GradCase("reshape", _unary(lambda a: T.reshape(a, (4, 6)))),
        GradCase("transpose", _unary(lambda a: T.transpose(a, (2, 0, 1)))),
        GradCase("concat", _concat_case),
        GradCase("img2seq", _map_case(T.img2seq)),
        GradCase("seq2img", _seq2img_case),
        GradCase("matmul", _matmul_case),
        GradCase("conv2d", _conv_case(groups=1, c_out=3)),
        GradCase("conv2d_strided", _conv_case(groups=1, stride=2, padding=0)),
        GradCase("conv2d_depthwise", _conv_case(groups=4)),
        GradCase("conv2d_grouped", _conv_case(groups=2)),
        GradCase("adaptive_avgpool2d", _map_case(lambda x: F.adaptive_avgpool2d(x, 4, 2))),
        GradCase("resize_bilinear", _map_case(lambda x: F.resize_bilinear(x, 12, 10))),
        GradCase("linear", _linear_case),
        GradCase("softmax", _unary(lambda a: F.softmax(a, axis=-1))),
        GradCase("layer_norm", _layer_norm_case),
        GradCase("batch_norm2d", _batch_norm_case),
        GradCase("relu", _unary(F.relu, _away_from_zero)),
        GradCase("sigmoid", _unary(F.sigmoid)),
        GradCase("gelu", _unary(F.gelu)),
    ]


def _module_case(make: Callable[[np.random.Generator], Module], input_shape):
    def build(rng):
        module = make(rng).to(np.float64)
        x = _leaf(rng, input_shape, name="input")
        return (lambda: module(x)), [x] + module.parameters()
    return build


def _merge_case(rng):
    module = M.SkipMerge(6, 3, rng).to(np.float64)
    x, y = _leaf(rng, (1, 6, 2, 2)), _leaf(rng, (1, 3, 4, 4))
    return (lambda: module(x, y)), [x, y] + module.parameters()


def block_cases() -> List[GradCase]:
    return [
        GradCase("stem", _module_case(lambda r: M.StemBlock(3, 4, r), (2, 3, 6, 6)), BLOCK_TOLERANCE),
        GradCase("patch_aggregation", _module_case(lambda r: M.PatchAggregation(4, 8, r), (1, 4, 5, 5)),
                 BLOCK_TOLERANCE),
        GradCase("lpb", _module_case(lambda r: M.LocallyPositionAwareBlock(4, r), (1, 4, 4, 4)), OP_TOLERANCE),
        GradCase("lmps_attention",
                 _module_case(lambda r: M.MultiPoolingAttention(4, 2, [1, 2, 3], r), (1, 4, 4, 5)),
                 BLOCK_TOLERANCE),
        GradCase("cffn", _module_case(lambda r: M.ConvFeedForward(4, 2, r), (1, 4, 3, 3)), OP_TOLERANCE),
        GradCase("deft_block",
                 _module_case(lambda r: M.DefTBlock(4, 2, [1, 2], 2, r), (1, 4, 4, 4)),
                 BLOCK_TOLERANCE),
        GradCase("decoder_merge", _merge_case, BLOCK_TOLERANCE),
    ]


def _model_case(rng):
    config = ModelConfig(**REDUCED_MODEL)
    model = M.build_model(config, seed=int(rng.integers(2 ** 31)), dtype=np.float64)
    x = _leaf(rng, (1, 3, 32, 32), 0.0, 1.0, name="input")

    def fn():
        outputs = model(x).all_outputs()
        return T.concat([o.reshape(-1) for o in outputs], axis=0)

    return fn, model.parameters()


def model_cases() -> List[GradCase]:
    return [GradCase("deft_model_reduced", _model_case, MODEL_TOLERANCE, max_elements=2)]


CATALOG: Dict[GradCheckScope, Callable[[], List[GradCase]]] = {
    GradCheckScope.OP: op_cases,
    GradCheckScope.BLOCK: block_cases,
    GradCheckScope.MODEL: model_cases,
}


def run_gradcheck(scope: GradCheckScope, seed: int = 0, only: Optional[Sequence[str]] = None) -> List[GradCheckRow]:
    """Run every case of ``scope`` and return one pass/fail row per case."""
    scope = GradCheckScope(scope)
    rows = []
    for case in CATALOG[scope]():
        if only and case.name not in only:
            continue
        rng = np.random.default_rng(seed)
        fn, inputs = case.build(rng)
        error = grad_check(fn, inputs, case.tolerance, case.max_elements, seed)
        row = GradCheckRow(scope=scope, name=case.name, max_rel_error=error,
                           tolerance=case.tolerance, passed=error < case.tolerance)
        logger.info("gradcheck scope=%s case=%s max_rel_error=%.3e passed=%s",
                    scope.value, case.name, error, row.passed)
        rows.append(row)
    return rows
