"""
Defect Transformer: convolutional stem, four stages of patch aggregation plus
DefT blocks (LPB -> LN -> multi-pooling attention -> LN -> convolutional FFN),
and a skip-merge decoder with deep-supervision heads.
"""
import logging
import math
from dataclasses import dataclass
from functools import partial
from typing import Dict, List, Optional, Sequence

import numpy as np

from models.deft_models import ModelConfig
from models.errors import ConfigError, DimensionError
from services import functional_service as F
from services.module_service import (
    BatchNorm2d, Conv2d, LayerNorm, Linear, MapLayerNorm, Module, ModuleList, conv_trunc_normal, fan_in_normal,
    param_count,
)
from services.tensor_service import Tensor, concat, img2seq, matmul, seq2img, transpose

logger = logging.getLogger(__name__)

# Cumulative ablation rows, Baseline first.
ABLATION_PRESETS: Dict[str, Dict[str, bool]] = {
    "baseline": dict(use_csb=False, use_pab=False, use_lpb=False, use_lmps=False, use_cffn=False),
    "+csb": dict(use_csb=True, use_pab=False, use_lpb=False, use_lmps=False, use_cffn=False),
    "+pab": dict(use_csb=True, use_pab=True, use_lpb=False, use_lmps=False, use_cffn=False),
    "+lpb": dict(use_csb=True, use_pab=True, use_lpb=True, use_lmps=False, use_cffn=False),
    "+lmps": dict(use_csb=True, use_pab=True, use_lpb=True, use_lmps=True, use_cffn=False),
    "ours": dict(use_csb=True, use_pab=True, use_lpb=True, use_lmps=True, use_cffn=True),
}
# Position-encoding "N/A": no LPB, CFFN replaced with FFN.
POSITION_FREE_PRESET = dict(use_csb=True, use_pab=True, use_lpb=False, use_lmps=True, use_cffn=False)

# Prediction heads start with logits near zero so no sigmoid saturates at init.
HEAD_INIT = partial(fan_in_normal, gain=0.1)


@dataclass
class PyramidFeatures:
    F1: Tensor
    F2: Tensor
    F3: Tensor
    F4: Tensor
    F5: Tensor

    def as_list(self) -> List[Tensor]:
        return [self.F1, self.F2, self.F3, self.F4, self.F5]


@dataclass
class ModelOutput:
    pred: Tensor
    side_outputs: List[Tensor]

    def all_outputs(self) -> List[Tensor]:
        return [self.pred] + list(self.side_outputs)


def pooled_size(size: int, ratio: int) -> int:
    return math.ceil(size / ratio)


def pooled_token_count(h: int, w: int, ratios: Sequence[int]) -> int:
    return sum(pooled_size(h, r) * pooled_size(w, r) for r in ratios)


def lmps_pool_tokens(x: Tensor, ratios: Sequence[int]) -> Tensor:
    """Average-pool ``x`` at every ratio, flatten each level and join them on the token axis."""
    h, w = x.shape[2:]
    levels = []
    for ratio in ratios:
        if ratio == 1:
            levels.append(img2seq(x))
        else:
            levels.append(img2seq(F.adaptive_avgpool2d(x, pooled_size(h, ratio), pooled_size(w, ratio))))
    return levels[0] if len(levels) == 1 else concat(levels, axis=1)


class StemBlock(Module):
    """Three 3x3 convs (strides 2, 1, 1), each followed by BN and ReLU."""

    def __init__(self, in_channels: int, channels: int, rng: np.random.Generator, norm: bool = True):
        super().__init__()
        self.convs = ModuleList([
            Conv2d(in_channels, channels, 3, rng, stride=2, padding=1),
            Conv2d(channels, channels, 3, rng, stride=1, padding=1),
            Conv2d(channels, channels, 3, rng, stride=1, padding=1),
        ])
        self.norms = ModuleList([BatchNorm2d(channels) for _ in range(3)]) if norm else None

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[2:]
        if h % 2 or w % 2:
            raise DimensionError("stem input sides must be even", {"shape": list(x.shape)})
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if self.norms is not None:
                x = self.norms[i](x)
            x = F.relu(x)
        return x


class PatchifyStem(Module):
    """Non-overlapping 4x4 patch embedding followed by LayerNorm (baseline stem)."""

    def __init__(self, in_channels: int, channels: int, rng: np.random.Generator):
        super().__init__()
        self.proj = Conv2d(in_channels, channels, 4, rng, stride=4)
        self.norm = MapLayerNorm(channels)

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[2:]
        if h % 4 or w % 4:
            raise DimensionError("patchify stem needs sides divisible by 4", {"shape": list(x.shape)})
        return self.norm(self.proj(x))


class PatchAggregation(Module):
    """Strided conv halving resolution: 3x3/s2/p1 overlapping, or 2x2/s2 non-overlapping."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator, overlapping: bool = True):
        super().__init__()
        if overlapping:
            self.proj = Conv2d(in_channels, out_channels, 3, rng, stride=2, padding=1)
        else:
            self.proj = Conv2d(in_channels, out_channels, 2, rng, stride=2)

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[2:]
        if h < 2 or w < 2:
            raise DimensionError("patch aggregation needs at least 2x2 input", {"shape": list(x.shape)})
        return self.proj(x)


class LocallyPositionAwareBlock(Module):
    """x + depthwise_conv3x3(x)."""

    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv2d(channels, channels, 3, rng, padding=1, groups=channels, weight_init=conv_trunc_normal)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.conv(x)


class MultiPoolingAttention(Module):
    """
    Multi-head attention whose queries come from every token of the map and
    whose keys/values come from the multi-ratio pooled token set.
    """

    def __init__(self, channels: int, heads: int, ratios: Sequence[int], rng: np.random.Generator):
        super().__init__()
        if channels % heads:
            raise ConfigError("channels must be divisible by heads", {"channels": channels, "heads": heads})
        self.channels = channels
        self.heads = heads
        self.ratios = list(ratios)
        self.head_dim = channels // heads
        self.q = Linear(channels, channels, rng)
        self.k = Linear(channels, channels, rng)
        self.v = Linear(channels, channels, rng)
        self.proj = Linear(channels, channels, rng)
        self.record_attention = False
        self.last_attention: Optional[np.ndarray] = None

    def _split_heads(self, t: Tensor) -> Tensor:
        n, length, _ = t.shape
        return transpose(t.reshape(n, length, self.heads, self.head_dim), (0, 2, 1, 3))

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        if c != self.channels:
            raise DimensionError("attention width mismatch", {"expected": self.channels, "got": c})
        tokens = img2seq(x)
        pooled = lmps_pool_tokens(x, self.ratios)
        q = self._split_heads(self.q(tokens))
        k = self._split_heads(self.k(pooled))
        v = self._split_heads(self.v(pooled))
        scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(self.head_dim))
        attn = F.softmax(scores, axis=-1)
        if self.record_attention:
            self.last_attention = attn.data
        out = transpose(matmul(attn, v), (0, 2, 1, 3)).reshape(n, h * w, c)
        return seq2img(self.proj(out), h, w)


class ConvFeedForward(Module):
    """1x1 expand -> GELU -> depthwise 3x3 -> GELU -> 1x1 shrink; the 3x3 is dropped for a plain FFN."""

    def __init__(self, channels: int, expansion: int, rng: np.random.Generator, use_conv: bool = True):
        super().__init__()
        hidden = channels * expansion
        self.hidden = hidden
        self.fc1 = Conv2d(channels, hidden, 1, rng)
        self.dwconv = Conv2d(hidden, hidden, 3, rng, padding=1, groups=hidden) if use_conv else None
        self.fc2 = Conv2d(hidden, channels, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = F.gelu(self.fc1(x))
        if self.dwconv is not None:
            x = F.gelu(self.dwconv(x))
        return self.fc2(x)


class DefTBlock(Module):
    """X'' = LPB(X); X' = LMPS(LN(X'')) + X''; X = CFFN(LN(X')) + X'."""

    def __init__(self, channels: int, heads: int, ratios: Sequence[int], expansion: int,
                 rng: np.random.Generator, use_lpb: bool = True, use_cffn: bool = True):
        super().__init__()
        self.lpb = LocallyPositionAwareBlock(channels, rng) if use_lpb else None
        self.norm1 = LayerNorm(channels)
        self.attn = MultiPoolingAttention(channels, heads, ratios, rng)
        self.norm2 = LayerNorm(channels)
        self.ffn = ConvFeedForward(channels, expansion, rng, use_conv=use_cffn)

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[2:]
        if self.lpb is not None:
            x = self.lpb(x)
        t = img2seq(x)
        t = t + img2seq(self.attn(seq2img(self.norm1(t), h, w)))
        t = t + img2seq(self.ffn(seq2img(self.norm2(t), h, w)))
        return seq2img(t, h, w)


class EncoderStage(Module):
    def __init__(self, aggregation: Optional[Module], blocks: List[DefTBlock]):
        super().__init__()
        self.aggregation = aggregation
        self.blocks = ModuleList(blocks)

    def forward(self, x: Tensor) -> Tensor:
        if self.aggregation is not None:
            x = self.aggregation(x)
        for block in self.blocks:
            x = block(x)
        return x


class Encoder(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        channels = config.stage_channels
        c = config.base_channels
        if config.use_csb:
            self.stem = StemBlock(config.in_channels, c, rng, norm=config.stem_norm)
        else:
            self.stem = PatchifyStem(config.in_channels, c, rng)
        stages = []
        in_channels = c
        for s in range(4):
            if s == 0 and not config.use_csb:
                aggregation = None
            else:
                aggregation = PatchAggregation(in_channels, channels[s], rng, overlapping=config.use_pab)
            ratios = config.pool_ratios[s] if config.use_lmps else [config.sr_ratios[s]]
            blocks = [
                DefTBlock(channels[s], config.heads[s], ratios, config.expansion, rng,
                          use_lpb=config.use_lpb, use_cffn=config.use_cffn)
                for _ in range(config.depths[s])
            ]
            stages.append(EncoderStage(aggregation, blocks))
            in_channels = channels[s]
        self.stages = ModuleList(stages)

    def forward(self, x: Tensor) -> PyramidFeatures:
        _check_input(x, self.config)
        x = self.stem(x)
        if self.config.use_csb:
            features = [x]
        else:
            features = [F.bilinear_upsample(x, 2)]
        for stage in self.stages:
            x = stage(x)
            features.append(x)
        return PyramidFeatures(*features)


class SkipMerge(Module):
    """relu(conv3x3(cat(up2(x), y))) projecting to the skip's width."""

    def __init__(self, x_channels: int, y_channels: int, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv2d(x_channels + y_channels, y_channels, 3, rng, padding=1, weight_init=fan_in_normal)

    def forward(self, x: Tensor, y: Tensor) -> Tensor:
        up = F.bilinear_upsample(x, 2)
        if up.shape[2:] != y.shape[2:] or up.shape[0] != y.shape[0]:
            raise DimensionError("upsampled decoder map does not match the skip feature",
                                 {"x": list(up.shape), "y": list(y.shape)})
        return F.relu(self.conv(concat([up, y], axis=1)))


class Decoder(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        c = config.base_channels
        widths = [c, c, 2 * c, 4 * c, 8 * c]
        self.merges = ModuleList([SkipMerge(widths[i + 1], widths[i], rng) for i in (3, 2, 1, 0)])
        self.side_heads = ModuleList([
            Conv2d(widths[i], 1, 3, rng, padding=1, weight_init=HEAD_INIT) for i in (3, 2, 1, 0)
        ])
        self.head = Conv2d(c, 1, 3, rng, padding=1, weight_init=HEAD_INIT)

    def forward(self, features: PyramidFeatures, out_size) -> ModelOutput:
        pyramid = features.as_list()
        x = pyramid[4]
        sides = []
        for merge, side_head, skip in zip(self.merges, self.side_heads, pyramid[3::-1]):
            x = merge(x, skip)
            logits = F.resize_bilinear(side_head(x), *out_size)
            sides.append(F.sigmoid(logits))
        logits = F.bilinear_upsample(self.head(x), 2)
        if tuple(logits.shape[2:]) != tuple(out_size):
            raise DimensionError("prediction size differs from the input size",
                                 {"pred": list(logits.shape), "input": list(out_size)})
        return ModelOutput(F.sigmoid(logits), sides)


class DefTModel(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(config, rng)
        self.decoder = Decoder(config, rng)

    def forward(self, x: Tensor) -> ModelOutput:
        features = self.encoder(x)
        return self.decoder(features, x.shape[2:])

    def named_groups(self) -> Dict[str, int]:
        return parameter_breakdown(self)


def _check_input(x: Tensor, config: ModelConfig):
    if x.ndim != 4 or x.shape[1] != config.in_channels:
        raise DimensionError("model input must be [N, in_channels, H, W]",
                             {"shape": list(x.shape), "in_channels": config.in_channels})
    h, w = x.shape[2:]
    if h % 32 or w % 32:
        raise DimensionError("input sides must be divisible by 32", {"shape": list(x.shape)})


def module_group(name: str) -> str:
    parts = name.split(".")
    if len(parts) > 3 and parts[1] == "stages":
        return ".".join(parts[:4])
    return ".".join(parts[:2])


def parameter_breakdown(model: Module) -> Dict[str, int]:
    groups: Dict[str, int] = {}
    for name, p in model.named_parameters():
        key = module_group(name)
        groups[key] = groups.get(key, 0) + p.size
    return groups


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> DefTModel:
    model = DefTModel(config, seed)
    if np.dtype(dtype) != np.float32:
        model.to(dtype)
    logger.info("built DefT model params=%d base_channels=%d depths=%s",
                param_count(model), config.base_channels, config.depths)
    return model
