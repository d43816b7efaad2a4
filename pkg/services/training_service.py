"""
Training loop: per-epoch seeded shuffle, resize + crop augmentation,
deep-supervised hybrid loss, SGD with momentum and weight decay under a
poly learning-rate schedule.
"""
import csv
import logging
import math
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from models.deft_models import LossRecord, TrainConfig
from models.errors import DataIOError, DimensionError, NumericError, UsageError
from services import tensor_service as T
from services.checkpoint_service import save_model
from services.data_service import Sample, augment_train, stack_batch, subsample
from services.loss_service import deep_supervised_loss
from services.model_service import DefTModel
from services.tensor_service import Tensor

logger = logging.getLogger(__name__)

LOSS_LOG_FIELDS = ["iteration", "epoch", "lr", "total_loss", "bce", "ssim", "iou"]


def poly_lr(base_lr: float, iteration: int, max_iter: int, power: float = 0.9) -> float:
    """base_lr * (1 - iteration / max_iter) ** power."""
    if iteration < 0 or iteration > max_iter:
        raise UsageError("iteration must lie in [0, max_iter]", {"iteration": iteration, "max_iter": max_iter})
    if max_iter == 0:
        return base_lr
    return base_lr * (1.0 - iteration / max_iter) ** power


@dataclass
class OptimizerState:
    velocities: List[np.ndarray]
    step: int = 0
    lr: float = 0.0

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray]) -> "OptimizerState":
        return cls([np.zeros_like(p) for p in params])


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[Optional[np.ndarray]], state: OptimizerState,
             lr: float, momentum: float, weight_decay: float) -> OptimizerState:
    """In place: v <- momentum * v + (g + weight_decay * p); p <- p - lr * v."""
    if len(params) != len(grads) or len(params) != len(state.velocities):
        raise DimensionError("params, grads and velocities differ in length",
                             {"params": len(params), "grads": len(grads), "velocities": len(state.velocities)})
    for i, (p, g, v) in enumerate(zip(params, grads, state.velocities)):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape or v.shape != p.shape:
            raise DimensionError("gradient shape differs from its parameter",
                                 {"index": i, "param": list(p.shape), "grad": list(g.shape)})
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p
        p -= lr * v
    state.step += 1
    state.lr = lr
    return state


class SGD:
    def __init__(self, params: Sequence[Tensor], momentum: float = 0.9, weight_decay: float = 1e-4):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.state = OptimizerState.for_params([p.data for p in self.params])

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr: float):
        sgd_step([p.data for p in self.params], [p.grad for p in self.params], self.state,
                 lr, self.momentum, self.weight_decay)


class BatchLoader:
    """
    Yields (images, masks) batches for one epoch at a time. All randomness
    comes from the loader's own generator, so the batch sequence is fixed by
    the seed whether or not a prefetch thread assembles it.
    """

    _END = object()

    def __init__(self, samples: Sequence[Sample], config: TrainConfig, rng: np.random.Generator):
        if not samples:
            raise UsageError("training set is empty")
        self.samples = list(samples)
        self.config = config
        self.rng = rng

    def __len__(self) -> int:
        return math.ceil(len(self.samples) / self.config.batch_size)

    def _batches(self) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        order = self.rng.permutation(len(self.samples))
        size = self.config.batch_size
        for start in range(0, len(order), size):
            batch = [
                augment_train(self.samples[i], self.rng, self.config.resize_to, self.config.crop_to,
                              self.config.hflip)
                for i in order[start:start + size]
            ]
            yield stack_batch(batch)

    def epoch(self) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        if not self.config.prefetch:
            yield from self._batches()
            return
        q: "queue.Queue" = queue.Queue(maxsize=self.config.prefetch)
        stop = threading.Event()

        def produce():
            try:
                for batch in self._batches():
                    if stop.is_set():
                        return
                    q.put(batch)
                q.put(self._END)
            except Exception as e:  # surfaced on the consumer side
                q.put(e)

        worker = threading.Thread(target=produce, name="deft-prefetch", daemon=True)
        worker.start()
        try:
            while True:
                item = q.get()
                if item is self._END:
                    break
                if isinstance(item, Exception):
                    raise item
                yield item
        finally:
            stop.set()
            while worker.is_alive():
                try:
                    q.get_nowait()
                except queue.Empty:
                    worker.join(timeout=0.05)


@dataclass
class TrainResult:
    model: DefTModel
    records: List[LossRecord] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)


def train(model: DefTModel, samples: Sequence[Sample], config: TrainConfig,
          output_dir: Optional[str] = None) -> TrainResult:
    result = TrainResult(model)
    if config.epochs == 0:
        logger.info("epochs=0, returning the initialized model")
        return result
    samples = subsample(samples, config.data_fraction, config.seed)
    loader = BatchLoader(samples, config, np.random.default_rng(config.seed))
    max_iter = config.epochs * len(loader)
    if config.max_iterations is not None:
        max_iter = min(max_iter, config.max_iterations)
    optimizer = SGD(model.parameters(), config.momentum, config.weight_decay)
    model.train()
    logger.info("training samples=%d batch_size=%d epochs=%d max_iter=%d",
                len(samples), config.batch_size, config.epochs, max_iter)

    iteration = 0
    for epoch in range(config.epochs):
        for images, masks in loader.epoch():
            if iteration >= max_iter:
                break
            lr = poly_lr(config.base_lr, iteration, max_iter, config.poly_power)
            optimizer.zero_grad()
            try:
                outputs = model(Tensor(images))
                terms = deep_supervised_loss(outputs, masks, config.loss_weights)
                loss = terms.total.item()
                if not math.isfinite(loss):
                    raise NumericError("loss is not finite")
                T.backward(terms.total)
            except NumericError as e:
                e.details.update({"iteration": iteration, "epoch": epoch, "lr": lr})
                logger.error("training aborted iteration=%d lr=%.6g: %s", iteration, lr, e.message)
                raise
            optimizer.step(lr)
            record = LossRecord(iteration=iteration, epoch=epoch, lr=lr, total_loss=loss,
                                bce=terms.bce, ssim=terms.ssim, iou=terms.iou)
            result.records.append(record)
            if iteration % config.log_every == 0:
                logger.info("iteration=%d epoch=%d lr=%.6g loss=%.5f bce=%.5f ssim=%.5f iou=%.5f",
                            iteration, epoch, lr, loss, terms.bce, terms.ssim, terms.iou)
            iteration += 1
        if config.checkpoint_every and output_dir and (epoch + 1) % config.checkpoint_every == 0:
            result.checkpoints.append(save_model(model, Path(output_dir) / f"checkpoint_epoch{epoch + 1:04d}.deft"))
        if iteration >= max_iter:
            break
    if result.records:
        tail = result.records[-min(10, len(result.records)):]
        logger.info("finished iterations=%d mean_last_loss=%.5f",
                    iteration, float(np.mean([r.total_loss for r in tail])))
    model.eval()
    return result


def write_loss_log(records: Sequence[LossRecord], path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOSS_LOG_FIELDS)
            writer.writeheader()
            for record in records:
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in record.model_dump().items()})
    except OSError as e:
        raise DataIOError("could not write loss log", {"path": str(path), "original_error": str(e)})
    logger.info("wrote loss log path=%s rows=%d", path, len(records))
    return path
