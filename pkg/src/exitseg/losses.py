"""Segmentation losses: cross entropy, soft Dice and the weighted exit sum."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, ShapeError

ARTIFACT = 1


@dataclass
class LossWeights:
    alpha: list = field(default_factory=lambda: [1.0] * 5)
    ce_weight: float = 1.0
    dice_weight: float = 1.0
    dice_smooth: float = 1.0

    def validate(self, num_exits: int | None = None) -> None:
        if num_exits is not None and len(self.alpha) != num_exits:
            raise ConfigError(f"alpha has {len(self.alpha)} entries, model has {num_exits} exits")
        if any(a < 0 for a in self.alpha):
            raise ConfigError("alpha weights must be non-negative")
        if self.ce_weight < 0 or self.dice_weight < 0:
            raise ConfigError("loss term weights must be non-negative")
        if not self.dice_smooth > 0:
            raise ConfigError("dice_smooth must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def _binary_labels(op: str, labels) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and not np.isin(labels, (0, 1)).all():
        raise DataError(f"{op}: labels must be 0 or 1")
    return labels.astype(np.int64)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    return ad.cross_entropy(logits, _binary_labels("cross_entropy", labels))


def dice_loss(logits: Tensor, labels, smooth: float = 1.0) -> Tensor:
    """``1 - (2 sum p y + s) / (sum p + sum y + s)`` on the artifact-class
    probability; batched input is scored per sample and averaged."""
    if not smooth > 0:
        raise ConfigError("dice smooth term must be positive")
    y = _binary_labels("dice_loss", labels)
    expected = logits.shape[:-2] + logits.shape[-1:]
    if y.shape != expected:
        raise ShapeError("dice_loss", "labels must match logits without the class axis",
                         expected=expected, got=y.shape)
    p = ad.select_channel(ad.softmax_classes(logits), ARTIFACT)
    yt = Tensor(y.astype(p.dtype))
    inter = (p * yt).sum(axis=-1)
    denom = p.sum(axis=-1) + Tensor(y.sum(axis=-1).astype(p.dtype)) + smooth
    dice = 1.0 - (inter * 2.0 + smooth) / denom
    return dice.mean()


def exit_loss(logits: Tensor, labels, weights: LossWeights) -> Tensor:
    loss = None
    if weights.ce_weight:
        loss = cross_entropy(logits, labels) * weights.ce_weight
    if weights.dice_weight:
        d = dice_loss(logits, labels, weights.dice_smooth) * weights.dice_weight
        loss = d if loss is None else loss + d
    if loss is None:
        loss = Tensor(np.zeros((), dtype=logits.dtype))
    return loss


def ensemble_loss(bundle, labels, weights: LossWeights, per_exit: list | None = None) -> Tensor:
    """Weighted sum of per-exit losses.  Exits with zero weight are skipped so
    their branches receive no gradient.  When ``per_exit`` is a list, each
    exit's unweighted loss value is appended to it."""
    logits = list(bundle)
    if len(logits) != len(weights.alpha):
        raise ShapeError("ensemble_loss", "one alpha per exit", expected=len(weights.alpha), got=len(logits))
    total = None
    for a, lg in zip(weights.alpha, logits):
        if a == 0:
            if per_exit is not None:
                per_exit.append(float(exit_loss(lg.detach(), labels, weights).data))
            continue
        li = exit_loss(lg, labels, weights)
        if per_exit is not None:
            per_exit.append(float(li.data))
        term = li * float(a)
        total = term if total is None else total + term
    if total is None:
        total = Tensor(np.zeros((), dtype=logits[0].dtype))
    return total
