"""Clean-data training of the toy classifier (cross-entropy, Adam, minibatches)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import LabeledSample
from .optim import OptimizerState, adam_step
from .vit import VisionTransformer, VitConfig

log = logging.getLogger(__name__)


@dataclass
class TrainLog:
    epoch_loss: list[float] = field(default_factory=list)
    train_accuracy: float = float("nan")
    heldout_accuracy: float = float("nan")
    diverged: bool = False
    stopped_epoch: int | None = None


def cross_entropy(logits: ad.DiffTensor, labels: np.ndarray) -> ad.DiffTensor:
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    picked = ad.tensor_sum(ad.mul(ad.log_softmax_lastdim(logits), ad.constant(onehot)), axis=-1)
    return ad.scalar_mul(ad.tensor_mean(picked), -1.0)


def accuracy(model: VisionTransformer, samples: Sequence[LabeledSample]) -> float:
    """Percent correct without adaptation."""
    if not samples:
        return float("nan")
    x = np.stack([s.image for s in samples])
    y = np.array([s.label for s in samples])
    return 100.0 * float(np.mean(model.predict(x) == y))


def train_clean(config: VitConfig, dataset: Sequence[LabeledSample], epochs: int = 20,
                lr: float = 3e-3, seed: int = 0, batch_size: int = 32,
                heldout: Sequence[LabeledSample] | None = None,
                weight_decay: float = 0.0) -> tuple[VisionTransformer, TrainLog]:
    """Train from scratch; on a non-finite loss, return the last good weights."""
    model = VisionTransformer(config)
    rng = np.random.default_rng(seed)
    x_all = np.stack([s.image for s in dataset])
    y_all = np.array([s.label for s in dataset])
    state = OptimizerState("adam", lr, beta1=0.9, beta2=0.999, eps=1e-8)
    arrays = {n: p.values for n, p in model.params.items()}
    steps_per_epoch = int(np.ceil(len(dataset) / batch_size))
    total = max(1, epochs * steps_per_epoch)
    tlog = TrainLog()
    good = model.snapshot()
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        losses = []
        for s in range(0, len(order), batch_size):
            b = order[s:s + batch_size]
            loss = cross_entropy(model.run(x_all[b]).logits, y_all[b])
            if not np.isfinite(loss.values):
                log.warning("non-finite loss at epoch %d; keeping last good weights", epoch)
                model.restore(good)
                tlog.diverged = True
                tlog.stopped_epoch = epoch
                break
            grads = ad.backward(loss, model.params)
            # cosine decay with short warmup
            frac = step / total
            warm = min(1.0, (step + 1) / max(1, steps_per_epoch))
            state.lr = lr * warm * 0.5 * (1.0 + np.cos(np.pi * frac))
            if weight_decay:
                for n, a in arrays.items():
                    if n.endswith(".weight") and "norm" not in n:
                        a *= 1.0 - state.lr * weight_decay
            adam_step(state, arrays, grads)
            losses.append(float(loss.values))
            step += 1
        if tlog.diverged:
            break
        tlog.epoch_loss.append(float(np.mean(losses)))
        good = model.snapshot()
        log.info("epoch %d loss %.4f", epoch, tlog.epoch_loss[-1])
    tlog.train_accuracy = accuracy(model, dataset)
    if heldout is not None:
        tlog.heldout_accuracy = accuracy(model, heldout)
    return model, tlog
