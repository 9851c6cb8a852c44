"""
Smooth-L1 disparity loss, AdamW, and the desk-scale training loop on
synthetic stereograms.
"""
import csv
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .exceptions import ConfigurationError, EmptyMaskError, TrainingDiverged
from .metrics import absolute_errors
from .regression import DisparityMap
from .stereogram import make_dataset, random_crop, stack_samples

logger = logging.getLogger(__name__)

VAL_SEED_OFFSET = 1_000_003

# Batch size per variant in the full-scale recipe.
FULL_SCALE_BATCH = {'S': 24, 'M': 12, 'L': 8}


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    batch: int = 4
    lr: Optional[float] = None
    weight_decay: float = 1e-2
    crop: Tuple[int, int] = (64, 96)
    seed: int = 0
    max_disparity: int = 32
    train_pairs: int = 32
    val_pairs: int = 8
    eval_every: int = 50
    cosine: bool = False
    scene_margin: int = 16

    @classmethod
    def full_scale_preset(cls, variant):
        """Full-scale recipe: 320x736 crops, per-variant batch, lr = 1e-4 x batch."""
        variant = variant.upper()
        if variant not in FULL_SCALE_BATCH:
            raise ConfigurationError(f'no full-scale recipe for variant {variant!r}')
        return cls(batch=FULL_SCALE_BATCH[variant], crop=(320, 736), max_disparity=192)

    @property
    def learning_rate(self):
        return self.lr if self.lr is not None else 1e-4 * self.batch

    @property
    def scene_size(self):
        return self.crop[0] + self.scene_margin, self.crop[1] + self.scene_margin

    @property
    def scene_max_disparity(self):
        """Ground truth stays within what regression can express, 0 .. D - 4."""
        return self.max_disparity - 3

    def validate(self):
        ch, cw = self.crop
        if ch < 32 or cw < 32 or ch % 32 or cw % 32:
            raise ConfigurationError(f'crop {ch}x{cw} must be positive multiples of 32')
        if self.max_disparity < 4 or self.max_disparity % 4 or self.max_disparity > cw:
            raise ConfigurationError(f'max_disparity {self.max_disparity} must be a multiple of 4 and <= crop width')
        if self.steps < 0 or self.batch < 1 or self.train_pairs < 1 or self.val_pairs < 1:
            raise ConfigurationError('steps must be >= 0; batch, train_pairs and val_pairs must be >= 1')
        if self.eval_every < 1:
            raise ConfigurationError(f'eval_every must be >= 1, got {self.eval_every}')
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigurationError('learning rate and weight decay must be non-negative')
        if self.scene_margin < 0:
            raise ConfigurationError('scene_margin must be non-negative')
        return self


# Loss

def _valid_residuals(pred: DisparityMap, gt: DisparityMap):
    if pred.shape != gt.shape:
        raise ConfigurationError(f'prediction {pred.shape} and ground truth {gt.shape} differ in shape')
    mask = gt.valid
    count = int(mask.sum())
    if count == 0:
        raise EmptyMaskError('no labeled pixels in the batch')
    return pred.values.astype(np.float64) - gt.values.astype(np.float64), mask, count


def smooth_l1_loss(pred: DisparityMap, gt: DisparityMap):
    """Mean over labeled pixels of 0.5 x^2 (|x| < 1) or |x| - 0.5."""
    diff, mask, count = _valid_residuals(pred, gt)
    x = np.abs(diff[mask])
    return float(np.where(x < 1, 0.5 * x * x, x - 0.5).sum() / count)


def smooth_l1_loss_backward(pred: DisparityMap, gt: DisparityMap):
    """d loss / d pred.values, zero on unlabeled pixels."""
    diff, mask, count = _valid_residuals(pred, gt)
    return np.where(mask, np.clip(diff, -1.0, 1.0) / count, 0.0)


# Optimizer

@dataclass
class AdamState:
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params):
        return cls(m=[np.zeros(p.shape) for p in params], v=[np.zeros(p.shape) for p in params])


def optimizer_step(params, grads, state: AdamState, lr, weight_decay=0.0):
    """
    One AdamW update, in place.

    Decay is decoupled: ``param -= lr * weight_decay * param`` before the
    bias-corrected adaptive step.
    """
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ConfigurationError('params, grads and optimizer state must line up')
    state.step += 1
    c1 = 1 - state.beta1 ** state.step
    c2 = 1 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g, dtype=np.float64)
        if weight_decay:
            p -= (lr * weight_decay * p).astype(p.dtype)
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params, state


def learning_rate_at(config: TrainConfig, step):
    base = config.learning_rate
    if not config.cosine or config.steps <= 1:
        return base
    return base * 0.5 * (1 + math.cos(math.pi * (step - 1) / (config.steps - 1)))


# Loop

@dataclass
class HistoryRow:
    step: int
    loss: float
    epe: Optional[float] = None


@dataclass
class TrainResult:
    model: object
    history: List[HistoryRow]

    @property
    def final_epe(self):
        return next(row.epe for row in reversed(self.history) if row.epe is not None)

    @property
    def initial_epe(self):
        return self.history[0].epe


def evaluate(model, samples, batch=4):
    """(smooth-L1 loss, EPE) pooled over all labeled pixels of ``samples``."""
    model.eval()
    loss_sum = err_sum = 0.0
    count = 0
    for start in range(0, len(samples), batch):
        left, right, gt = stack_samples(samples[start:start + batch])
        pred = model(left, right)
        err, _ = absolute_errors(pred, gt)
        loss_sum += float(np.where(err < 1, 0.5 * err * err, err - 0.5).sum())
        err_sum += float(err.sum())
        count += err.size
    return loss_sum / count, err_sum / count


def write_history(handle, history):
    writer = csv.writer(handle, lineterminator='\n')
    writer.writerow(('step', 'loss', 'epe'))
    for row in history:
        writer.writerow((row.step, f'{row.loss:.6f}', '' if row.epe is None else f'{row.epe:.6f}'))


def train_loop(model, config: TrainConfig, on_row=None):
    """
    Train ``model`` on seed-fixed synthetic pairs.

    Step 0 records the untrained validation loss and EPE; every step records
    its training loss, and validation EPE is added every ``eval_every`` steps
    and at the last step. The model is returned in eval mode.
    """
    config.validate()
    if model.max_disparity != config.max_disparity:
        raise ConfigurationError(
            f'model max disparity {model.max_disparity} does not match training config {config.max_disparity}'
        )
    rng = np.random.default_rng(config.seed)
    scene_h, scene_w = config.scene_size
    train = make_dataset(config.train_pairs, config.seed, scene_h, scene_w, config.scene_max_disparity)
    val = make_dataset(config.val_pairs, config.seed + VAL_SEED_OFFSET, *config.crop, config.scene_max_disparity)

    names = [name for name, _ in model.named_parameters()]
    params = [p for _, p in model.named_parameters()]
    grads = dict(model.named_gradients())
    grads = [grads[name] for name in names]
    state = AdamState.zeros(params)

    def emit(row):
        history.append(row)
        if on_row is not None:
            on_row(row)

    history = []
    val_loss, val_epe = evaluate(model, val, config.batch)
    emit(HistoryRow(0, val_loss, val_epe))
    logger.info('step 0: val loss %.4f epe %.3f', val_loss, val_epe)

    last_loss = None
    for step in range(1, config.steps + 1):
        picks = rng.choice(len(train), size=config.batch, replace=config.batch > len(train))
        left, right, gt = stack_samples([random_crop(train[i], config.crop, rng) for i in picks])

        model.train()
        model.zero_grad()
        pred = model(left, right)
        try:
            loss = smooth_l1_loss(pred, gt)
        except EmptyMaskError:
            logger.warning('step %d: batch has no labeled pixels, skipped', step)
            continue
        if not math.isfinite(loss):
            logger.error('step %d: loss is not finite', step)
            raise TrainingDiverged(step, last_loss)
        model.backward(smooth_l1_loss_backward(pred, gt))
        lr = learning_rate_at(config, step)
        optimizer_step(params, grads, state, lr, config.weight_decay)
        last_loss = loss

        row = HistoryRow(step, loss)
        if step % config.eval_every == 0 or step == config.steps:
            _, row.epe = evaluate(model, val, config.batch)
            logger.info('step %d: loss %.4f lr %.2e val epe %.3f', step, loss, lr, row.epe)
        emit(row)

    model.eval()
    return TrainResult(model=model, history=history)
