"""Supervised fine-tuning on noisy labels and evaluation helpers."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import (
    SUPERVISED_AUGMENTATION,
    AugmentationConfig,
    LabeledDataset,
    NoisySplit,
    augment_batch,
    channel_stats,
    derive_rng,
    standardize,
)
from .encoders import Adam, ClassifierHead, Encoder

__all__ = ["FinetuneConfig", "FinetuneResult", "finetune", "predict_probs", "accuracy"]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    augmentation: AugmentationConfig = field(default_factory=lambda: SUPERVISED_AUGMENTATION)

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("need epochs >= 0 and batch_size >= 1")


@dataclass
class FinetuneResult:
    encoder: Encoder
    head: ClassifierHead
    norm: AugmentationConfig  # carries the channel statistics used for inputs
    train_loss: list[float]
    test_accuracy: list[float]


def predict_probs(encoder: Encoder, head: ClassifierHead, images: np.ndarray,
                  norm: AugmentationConfig, batch_size: int = 200) -> np.ndarray:
    out = []
    for start in range(0, len(images), batch_size):
        x = standardize(images[start:start + batch_size], norm)
        logits = head(encoder(x, "eval")).data
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        out.append(e / e.sum(axis=1, keepdims=True))
    return np.concatenate(out)


def accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Percentage of rows whose argmax equals the label."""
    return float(100.0 * np.mean(np.argmax(probs, axis=1) == labels))


def finetune(encoder: Encoder, train: NoisySplit, cfg: FinetuneConfig, seed: int,
             test: LabeledDataset | None = None) -> FinetuneResult:
    """Train encoder plus a fresh linear classifier on ``train.noisy_labels``.

    When ``test`` is given, clean-test accuracy is recorded after every epoch.
    """
    images, labels = train.images, train.noisy_labels
    mean, std = channel_stats(images)
    aug = cfg.augmentation.with_stats(mean, std)
    head = ClassifierHead(encoder.feature_dim, train.num_classes, seed)
    params = encoder.parameters() + head.parameters()
    opt = Adam(params, lr=cfg.lr)
    losses: list[float] = []
    accs: list[float] = []
    n = len(images)
    for epoch in range(cfg.epochs):
        order = derive_rng(seed, "finetune-shuffle", epoch).permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:  # batchnorm needs a batch
                continue
            x = augment_batch(images, idx, aug, seed, "finetune", epoch)
            with T.Graph() as g:
                loss = T.softmax_cross_entropy(head(encoder(x, "train")), labels[idx])
            g.backward(loss, params)
            opt.step()
            total += loss.item() * len(idx)
        losses.append(total / n)
        if test is not None:
            accs.append(accuracy(predict_probs(encoder, head, test.images, aug), test.labels))
        log.info("finetune epoch %d loss %.4f%s", epoch + 1, losses[-1],
                 f" acc {accs[-1]:.2f}" if accs else "")
    return FinetuneResult(encoder, head, aug, losses, accs)
