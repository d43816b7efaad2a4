"""
Pixel metrics: confusion counts, FPR/FNR/ACC/F1/MAE and the threshold
sweep behind precision-recall and F-measure curves. Datasets are
micro-averaged (counts pooled over every pixel before taking ratios).
"""
import csv
import json
import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from models.deft_models import ConfusionCounts, CurvePoint, MetricsReport
from models.errors import DataIOError, DimensionError, UsageError
from services.data_service import EVAL_SIZE, Sample, prepare_eval
from services.model_service import DefTModel
from services.tensor_service import Tensor, no_grad

logger = logging.getLogger(__name__)


def _arrays(pred_prob, gt) -> Tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred_prob.data if isinstance(pred_prob, Tensor) else pred_prob, dtype=np.float64)
    g = np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=np.float64)
    if p.shape != g.shape:
        raise DimensionError("prediction and ground truth differ in shape", {"pred": list(p.shape), "gt": list(g.shape)})
    return p, g > 0.5


def confusion(pred_prob, gt, threshold: float = 0.5) -> ConfusionCounts:
    """Positive where pred >= threshold."""
    p, g = _arrays(pred_prob, gt)
    positive = p >= threshold
    return ConfusionCounts(
        tp=int(np.count_nonzero(positive & g)),
        fp=int(np.count_nonzero(positive & ~g)),
        tn=int(np.count_nonzero(~positive & ~g)),
        fn=int(np.count_nonzero(~positive & g)),
    )


def _ratio(num: int, den: int, empty: float) -> float:
    return num / den if den else empty


def report_from_counts(counts: ConfusionCounts, mae: float, threshold: float) -> MetricsReport:
    """fpr=0 when fp+tn=0, fnr=0 when fn+tp=0, f1=1 when 2tp+fp+fn=0."""
    if counts.total == 0:
        raise UsageError("no pixels to score")
    return MetricsReport(
        fpr=_ratio(counts.fp, counts.fp + counts.tn, 0.0),
        fnr=_ratio(counts.fn, counts.fn + counts.tp, 0.0),
        acc=(counts.tp + counts.tn) / counts.total,
        f1=_ratio(2 * counts.tp, 2 * counts.tp + counts.fp + counts.fn, 1.0),
        mae=mae,
        threshold=threshold,
        counts=counts,
    )


def scalar_metrics(counts: ConfusionCounts, pred_prob, gt, threshold: float = 0.5) -> MetricsReport:
    p, g = _arrays(pred_prob, gt)
    if counts.total != p.size:
        raise DimensionError("counts do not match the pixel total", {"counts": counts.total, "pixels": p.size})
    mae = float(np.abs(p - g).mean())
    return report_from_counts(counts, mae, threshold)


def curve_sweep(pairs: Sequence[Tuple[object, object]], n_thresholds: int = 256) -> List[CurvePoint]:
    """Counts pooled over every pair at thresholds k / (n_thresholds - 1)."""
    if not pairs:
        raise UsageError("curve_sweep needs at least one prediction/ground-truth pair")
    if n_thresholds < 2:
        raise UsageError("n_thresholds must be >= 2", {"n_thresholds": n_thresholds})
    thresholds = np.arange(n_thresholds, dtype=np.float64) / (n_thresholds - 1)
    tp = np.zeros(n_thresholds, dtype=np.int64)
    fp = np.zeros(n_thresholds, dtype=np.int64)
    positives = 0
    for pred_prob, gt in pairs:
        p, g = _arrays(pred_prob, gt)
        pos, neg = np.sort(p[g]), np.sort(p[~g])
        tp += pos.size - np.searchsorted(pos, thresholds, side="left")
        fp += neg.size - np.searchsorted(neg, thresholds, side="left")
        positives += pos.size
    fn = positives - tp
    points = []
    for k, t in enumerate(thresholds):
        points.append(CurvePoint(
            threshold=float(t),
            precision=_ratio(int(tp[k]), int(tp[k] + fp[k]), 1.0),
            recall=_ratio(int(tp[k]), int(tp[k] + fn[k]), 1.0),
            f_measure=_ratio(2 * int(tp[k]), int(2 * tp[k] + fp[k] + fn[k]), 1.0),
        ))
    return points


def predict(model: DefTModel, image: np.ndarray) -> np.ndarray:
    """[3,H,W] image -> [1,H,W] probabilities."""
    with no_grad():
        return model(Tensor(image[None].astype(model.parameters()[0].dtype))).pred.data[0]


def evaluate(model: DefTModel, samples: Sequence[Sample], threshold: float = 0.5,
             n_thresholds: Optional[int] = None, eval_size: int = EVAL_SIZE) -> MetricsReport:
    if not samples:
        raise UsageError("evaluation set is empty")
    model.eval()
    counts = ConfusionCounts()
    abs_error, pixels = 0.0, 0
    pairs = []
    for s in samples:
        s = prepare_eval(s, eval_size)
        pred = predict(model, s.image)
        counts = counts + confusion(pred, s.mask, threshold)
        abs_error += float(np.abs(pred.astype(np.float64) - s.mask).sum())
        pixels += s.mask.size
        if n_thresholds:
            pairs.append((pred, s.mask))
    report = report_from_counts(counts, abs_error / pixels, threshold)
    if n_thresholds:
        report.curves = curve_sweep(pairs, n_thresholds)
    logger.info("evaluated samples=%d f1=%.4f mae=%.4f acc=%.4f fpr=%.4f fnr=%.4f",
                len(samples), report.f1, report.mae, report.acc, report.fpr, report.fnr)
    return report


def write_report(report: MetricsReport, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(report.model_dump(exclude={"curves"}), indent=2), encoding="utf-8")
    except OSError as e:
        raise DataIOError("could not write metrics report", {"path": str(path), "original_error": str(e)})
    return path


def write_curves(points: Sequence[CurvePoint], path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["threshold", "precision", "recall", "f_measure"])
            for pt in points:
                writer.writerow([repr(pt.threshold), repr(pt.precision), repr(pt.recall), repr(pt.f_measure)])
    except OSError as e:
        raise DataIOError("could not write curves", {"path": str(path), "original_error": str(e)})
    return path
