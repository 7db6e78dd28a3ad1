"""Training and evaluation: poly schedule, SGD, confusion matrix, mIoU, train loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .data import AugmentPolicy, augment
from .errors import ConfigError, MetricError, NumericalError
from .functional import IGNORE_INDEX
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)


def poly_lr(base, it, max_iter, power=0.9):
    if max_iter <= 0:
        raise ConfigError("max_iter must be positive")
    if not 0 <= it <= max_iter:
        raise ConfigError(f"iteration {it} outside [0, {max_iter}]")
    return base * (1 - it / max_iter) ** power


class SGD:
    """SGD with momentum and coupled weight decay.

    ``g = grad + wd * p``; ``v = momentum * v + g``; ``p -= lr * v``. The
    velocity lives in each parameter's ``state`` slot; missing gradients
    count as zero. Gradients are cleared after every step.
    """

    def __init__(self, params, momentum=0.9, weight_decay=5e-4):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay

    def step(self, lr):
        for p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.momentum:
                if p.state is None:
                    p.state = np.zeros_like(p.data)
                p.state *= self.momentum
                p.state += g
                g = p.state
            if lr:
                p.data -= (lr * g).astype(p.data.dtype, copy=False)
            p.grad = None


def sgd_step(params, lr, momentum=0.9, weight_decay=5e-4):
    SGD(params, momentum, weight_decay).step(lr)


# ---------------------------------------------------------------------------
# metrics


class ConfusionMatrix:
    """``K x K`` pixel counts; rows are ground truth, columns are predictions."""

    def __init__(self, num_classes):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred, target, ignore_index=IGNORE_INDEX):
        pred = np.asarray(pred).reshape(-1)
        target = np.asarray(target).reshape(-1)
        if pred.shape != target.shape:
            raise ConfigError(f"prediction and target sizes differ: {pred.shape} vs {target.shape}")
        keep = target != ignore_index
        k = self.num_classes
        idx = target[keep].astype(np.int64) * k + pred[keep].astype(np.int64)
        self.counts += np.bincount(idx, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other):
        self.counts += other.counts
        return self

    @property
    def total(self):
        return int(self.counts.sum())


def confusion_update(cm, logits_or_pred, target, ignore_index=IGNORE_INDEX):
    """Add one batch; ``logits_or_pred`` is ``N x K x H x W`` logits or an integer map."""
    arr = logits_or_pred.data if isinstance(logits_or_pred, Tensor) else np.asarray(logits_or_pred)
    pred = arr.argmax(axis=1) if arr.ndim == 4 else arr
    return cm.update(pred, target, ignore_index)


def miou(cm):
    """Per-class IoU (NaN where the union is empty) and their mean over defined classes."""
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    tp = np.diag(counts).astype(np.float64)
    union = counts.sum(axis=0) + counts.sum(axis=1) - tp
    defined = union > 0
    if not defined.any():
        raise MetricError("mIoU undefined: every class has an empty union")
    iou = np.full(len(tp), np.nan)
    iou[defined] = tp[defined] / union[defined]
    return iou, float(iou[defined].mean())


# ---------------------------------------------------------------------------
# loops


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 4
    base_lr: float = 1e-2
    weight_decay: float = 5e-4
    momentum: float = 0.9
    poly_power: float = 0.9
    seed: int = 0
    crop_h: int = 64
    crop_w: int = 64
    hflip_prob: float = 0.5
    scale_min: float = 0.5
    scale_max: float = 2.0
    eval_every: int = 1

    @classmethod
    def memorize(cls, **overrides):
        """Augmentation-free recipe for fitting a small training set (flip off, unit scale)."""
        values = dict(base_lr=0.1, batch_size=4, hflip_prob=0.0, scale_min=1.0, scale_max=1.0)
        values.update(overrides)
        return cls(**values)

    def validate(self):
        if self.base_lr <= 0 or self.epochs < 1 or self.batch_size < 1 or self.poly_power < 0:
            raise ConfigError("epochs, batch_size and base_lr must be positive, poly_power >= 0")
        if self.eval_every < 0:
            raise ConfigError("eval_every must be >= 0")

    def policy(self):
        return AugmentPolicy((self.crop_h, self.crop_w), self.hflip_prob, (self.scale_min, self.scale_max))


@dataclass
class EpochRecord:
    epoch: int
    iter: int
    lr: float
    loss: float
    miou: float

    def csv(self):
        return f"{self.epoch},{self.iter},{self.lr:.6f},{self.loss:.6f},{self.miou:.6f}"


CSV_HEADER = "epoch,iter,lr,loss,miou"


def write_history(history, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(CSV_HEADER + "\n")
        for rec in history:
            fh.write(rec.csv() + "\n")


def stack(samples):
    images = np.stack([s.image for s in samples]).astype(np.float32)
    masks = np.stack([s.mask for s in samples])
    return images, masks


def evaluate(model, samples, num_classes=None, batch_size=4):
    """Whole-image eval-mode inference; returns the accumulated confusion matrix."""
    k = num_classes or model.config.num_classes
    cm = ConfusionMatrix(k)
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            for i in range(0, len(samples), batch_size):
                images, masks = stack(samples[i : i + batch_size])
                confusion_update(cm, model(Tensor(images)), masks)
    finally:
        model.train(was_training)
    return cm


def train(model, dataset, config, holdout=None, callback=None):
    """Mini-batch SGD with augmentation and a per-iteration poly schedule.

    Evaluation runs on ``holdout`` (the training set itself when omitted)
    every ``eval_every`` epochs and after the last one; other epochs record
    ``nan`` for mIoU. Returns the list of :class:`EpochRecord`.
    """
    config.validate()
    if not dataset:
        raise ConfigError("training set is empty")
    holdout = dataset if holdout is None else holdout
    policy = config.policy()
    steps_per_epoch = math.ceil(len(dataset) / config.batch_size)
    max_iter = config.epochs * steps_per_epoch
    opt = SGD(model.parameters(), config.momentum, config.weight_decay)
    order_rng = np.random.default_rng([config.seed, 0])
    history, it = [], 0
    model.train()
    for epoch in range(1, config.epochs + 1):
        order = order_rng.permutation(len(dataset))
        losses = []
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            batch = [augment(dataset[i], np.random.default_rng([config.seed, epoch, int(i)]), policy) for i in idx]
            images, masks = stack(batch)
            lr = poly_lr(config.base_lr, it, max_iter, config.poly_power)
            try:
                loss = F.cross_entropy(model(Tensor(images)), masks)
            except NumericalError as exc:
                raise NumericalError(f"training diverged at epoch {epoch}, iteration {it}: {exc}") from None
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericalError(f"training diverged at epoch {epoch}, iteration {it}: loss={value}")
            backward(loss)
            opt.step(lr)
            losses.append(value)
            it += 1
        score = float("nan")
        if epoch == config.epochs or (config.eval_every and epoch % config.eval_every == 0):
            score = miou(evaluate(model, holdout, batch_size=max(config.batch_size, 4)))[1]
        rec = EpochRecord(epoch, it, lr, float(np.mean(losses)), score)
        history.append(rec)
        log.info("epoch %d  iter %d  lr %.6f  loss %.6f  miou %.6f", *rec.__dict__.values())
        if callback is not None:
            callback(rec)
    return history
