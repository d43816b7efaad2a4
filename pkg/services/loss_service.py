"""
Hybrid saliency loss: BCE + (1 - SSIM) + (1 - soft IoU), averaged over the
batch, and its deep-supervised sum over every prediction head.
"""
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from models.deft_models import LossWeights
from models.errors import DimensionError, NumericError
from services import functional_service as F
from services import tensor_service as T
from services.model_service import ModelOutput
from services.tensor_service import Tensor

logger = logging.getLogger(__name__)

BCE_EPS = 1e-7
IOU_EPS = 1e-7
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass
class LossTerms:
    total: Tensor
    bce: float
    ssim: float
    iou: float

    def __add__(self, other: "LossTerms") -> "LossTerms":
        return LossTerms(self.total + other.total, self.bce + other.bce,
                         self.ssim + other.ssim, self.iou + other.iou)


@lru_cache(maxsize=4)
def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA, dtype: str = "float32") -> np.ndarray:
    """[1, 1, size, size] normalized Gaussian kernel."""
    x = np.arange(size, dtype=np.float64) - size // 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    window = np.outer(g, g)[None, None].astype(dtype)
    window.setflags(write=False)
    return window


def _check_pair(pred: Tensor, target: Tensor):
    if pred.ndim != 4 or pred.shape[1] != 1 or pred.shape != target.shape:
        raise DimensionError("prediction and target must both be [N,1,H,W]",
                             {"pred": list(pred.shape), "target": list(target.shape)})
    if np.any(pred.data < 0) or np.any(pred.data > 1):
        raise NumericError("prediction outside [0, 1]",
                           {"min": float(pred.data.min()), "max": float(pred.data.max())})


def bce_term(pred: Tensor, target: Tensor) -> Tensor:
    p = T.clamp(pred, BCE_EPS, 1 - BCE_EPS)
    ll = target * T.log(p) + (1 - target) * T.log(1 - p)
    return -T.mean(ll)


def ssim_index(pred: Tensor, target: Tensor) -> Tensor:
    """Mean SSIM per image, shape [N]; zero-padded Gaussian statistics."""
    window = Tensor(gaussian_window(dtype=pred.dtype.name), dtype=pred.dtype)
    pad = SSIM_WINDOW // 2

    def blur(x):
        return F.conv2d(x, window, padding=pad)

    mu_x, mu_y = blur(pred), blur(target)
    sigma_x = blur(pred * pred) - mu_x * mu_x
    sigma_y = blur(target * target) - mu_y * mu_y
    sigma_xy = blur(pred * target) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * sigma_xy + SSIM_C2)
    den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (sigma_x + sigma_y + SSIM_C2)
    return T.mean(num / den, axis=(1, 2, 3))


def iou_term(pred: Tensor, target: Tensor) -> Tensor:
    """1 - soft IoU per image, shape [N]."""
    inter = T.tsum(pred * target, axis=(1, 2, 3))
    union = T.tsum(pred, axis=(1, 2, 3)) + T.tsum(target, axis=(1, 2, 3)) - inter
    return 1 - inter / (union + IOU_EPS)


def hybrid_loss(pred: Tensor, target: Tensor, weights: Optional[LossWeights] = None) -> LossTerms:
    weights = weights or LossWeights()
    target = T.as_tensor(target, like=pred)
    _check_pair(pred, target)
    bce = bce_term(pred, target)
    ssim = T.mean(1 - ssim_index(pred, target))
    iou = T.mean(iou_term(pred, target))
    total = weights.bce * bce + weights.ssim * ssim + weights.iou * iou
    return LossTerms(total, bce.item(), ssim.item(), iou.item())


def deep_supervised_loss(outputs, target, weights: Optional[LossWeights] = None) -> LossTerms:
    """Equal-weight sum of ``hybrid_loss`` over the final prediction and every side output."""
    heads: Sequence[Tensor] = outputs.all_outputs() if isinstance(outputs, ModelOutput) else list(outputs)
    target = T.as_tensor(target, like=heads[0])
    for i, head in enumerate(heads):
        if head.shape != target.shape:
            raise DimensionError("every output must be at target resolution",
                                 {"head": i, "output": list(head.shape), "target": list(target.shape)})
    terms = hybrid_loss(heads[0], target, weights)
    for head in heads[1:]:
        terms = terms + hybrid_loss(head, target, weights)
    return terms
