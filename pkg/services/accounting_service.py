"""
Parameter and FLOPs accounting. FLOPs count 2 x multiply-accumulates of
convolutions, linear projections and the two attention matmuls; pooling,
normalization and elementwise ops are left out.
"""
import csv
import logging
from pathlib import Path
from typing import Dict, List, Optional

from models.deft_models import ModelConfig, ModuleCost
from models.errors import DataIOError, DimensionError
from services.functional_service import conv_output_size
from services.model_service import DefTModel, parameter_breakdown, pooled_token_count

logger = logging.getLogger(__name__)


def _conv_macs(h: int, w: int, c_in: int, c_out: int, k: int, stride: int, padding: int, groups: int = 1):
    h_out = conv_output_size(h, k, stride, padding)
    w_out = conv_output_size(w, k, stride, padding)
    return h_out * w_out * c_out * (c_in // groups) * k * k, h_out, w_out


def _block_macs(h: int, w: int, c: int, ratios, expansion: int, config: ModelConfig) -> int:
    tokens = h * w
    pooled = pooled_token_count(h, w, ratios)
    hidden = c * expansion
    macs = 0
    if config.use_lpb:
        macs += tokens * c * 9
    macs += 2 * tokens * c * c + 2 * pooled * c * c
    macs += 2 * tokens * pooled * c
    macs += 2 * tokens * c * hidden
    if config.use_cffn:
        macs += tokens * hidden * 9
    return macs


def estimate_flops(config: ModelConfig, input_size: int) -> Dict[str, int]:
    """FLOPs per module group for one [1, in_channels, input_size, input_size] image."""
    if input_size % 32:
        raise DimensionError("input size must be divisible by 32", {"input_size": input_size})
    c = config.base_channels
    flops: Dict[str, int] = {}
    h = w = input_size

    if config.use_csb:
        macs, h, w = _conv_macs(h, w, config.in_channels, c, 3, 2, 1)
        for _ in range(2):
            m, h, w = _conv_macs(h, w, c, c, 3, 1, 1)
            macs += m
    else:
        macs, h, w = _conv_macs(h, w, config.in_channels, c, 4, 4, 0)
    flops["encoder.stem"] = 2 * macs

    in_channels = c
    for s, channels in enumerate(config.stage_channels):
        if s > 0 or config.use_csb:
            k, padding = (3, 1) if config.use_pab else (2, 0)
            macs, h, w = _conv_macs(h, w, in_channels, channels, k, 2, padding)
            flops[f"encoder.stages.{s}.aggregation"] = 2 * macs
        ratios = config.pool_ratios[s] if config.use_lmps else [config.sr_ratios[s]]
        block = _block_macs(h, w, channels, ratios, config.expansion, config)
        flops[f"encoder.stages.{s}.blocks"] = 2 * block * config.depths[s]
        in_channels = channels

    widths = [c, c, 2 * c, 4 * c, 8 * c]
    merges = sides = 0
    for level in (3, 2, 1, 0):
        side = input_size // 2 ** (level + 1)
        merges += side * side * widths[level] * (widths[level + 1] + widths[level]) * 9
        sides += side * side * widths[level] * 9
    flops["decoder.merges"] = 2 * merges
    flops["decoder.side_heads"] = 2 * sides
    half = input_size // 2
    flops["decoder.head"] = 2 * half * half * c * 9
    return flops


def cost_breakdown(model: DefTModel, input_size: Optional[int] = None) -> List[ModuleCost]:
    params = parameter_breakdown(model)
    flops = estimate_flops(model.config, input_size) if input_size else {}
    names = list(params) + [n for n in flops if n not in params]
    return [ModuleCost(module=n, params=params.get(n, 0), flops=flops.get(n, 0)) for n in names]


def write_breakdown(rows: List[ModuleCost], path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["module", "params", "flops"])
            for row in rows:
                writer.writerow([row.module, row.params, row.flops])
            writer.writerow(["total", sum(r.params for r in rows), sum(r.flops for r in rows)])
    except OSError as e:
        raise DataIOError("could not write parameter breakdown", {"path": str(path), "original_error": str(e)})
    logger.info("wrote parameter breakdown path=%s rows=%d", path, len(rows))
    return path
