"""Ensemble aggregation and uncertainty metrics.

All functions work on plain arrays laid out ``C x T`` or ``N x C x T``
(class axis -2).  Logarithms are natural, so binary entropy peaks at ln 2.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .model import MCDROP, ModelGraph, forward
from .seeding import rng_for

TIME = "time"
SAMPLE = "sample"


@dataclass
class ProbMap:
    probs: np.ndarray
    source_count: int = 1

    @property
    def num_classes(self) -> int:
        return self.probs.shape[-2]

    def prediction(self) -> np.ndarray:
        """Per-time-point argmax; ties resolve to the lowest class (clean)."""
        return self.probs.argmax(axis=-2)


@dataclass
class UncertaintyReport:
    entropy_per_t: np.ndarray
    confidence_per_t: np.ndarray
    brier: float
    mean_entropy_true: Optional[float]
    mean_entropy_false: Optional[float]
    brier_true: Optional[float]
    brier_false: Optional[float]
    confidence_true: Optional[float]
    confidence_false: Optional[float]
    granularity: str = TIME

    def scalars(self) -> dict:
        return {
            "brier": self.brier,
            "entropy_true": self.mean_entropy_true,
            "entropy_false": self.mean_entropy_false,
            "brier_true": self.brier_true,
            "brier_false": self.brier_false,
            "confidence_true": self.confidence_true,
            "confidence_false": self.confidence_false,
        }


def _logits_array(lg) -> np.ndarray:
    return lg.data if isinstance(lg, Tensor) else np.asarray(lg)


def softmax(logits) -> np.ndarray:
    return ad.softmax_classes(Tensor(_logits_array(logits))).data


def aggregate_exits(bundle) -> ProbMap:
    """Mean of the per-exit class softmaxes."""
    logits = [_logits_array(lg) for lg in bundle]
    if not logits:
        raise ShapeError("aggregate_exits", "empty bundle")
    shape = logits[0].shape
    for lg in logits[1:]:
        if lg.shape != shape:
            raise ShapeError("aggregate_exits", "exits disagree in shape", expected=shape, got=lg.shape)
    total = np.zeros(shape, dtype=np.float64)
    for lg in logits:
        total += softmax(lg)
    return ProbMap(total / len(logits), len(logits))


def _probs(p) -> np.ndarray:
    return p.probs if isinstance(p, ProbMap) else np.asarray(p, dtype=np.float64)


def predictive_entropy(p) -> np.ndarray:
    probs = _probs(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0, probs * np.log(np.where(probs > 0, probs, 1.0)), 0.0)
    return -terms.sum(axis=-2)


def predictive_confidence(p) -> np.ndarray:
    return _probs(p).max(axis=-2)


def _sq_dist(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Squared distance to the one-hot label, per time point."""
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, labels[..., None, :].astype(np.int64), 1.0, axis=-2)
    return ((probs - onehot) ** 2).sum(axis=-2)


def brier(p, labels) -> float:
    probs = _probs(p)
    labels = np.asarray(labels)
    if labels.shape != probs.shape[:-2] + probs.shape[-1:]:
        raise ShapeError("brier", "labels must match probabilities without the class axis",
                         expected=probs.shape[:-2] + probs.shape[-1:], got=labels.shape)
    return float(_sq_dist(probs, labels).mean())


def _masked_mean(values: np.ndarray, mask: np.ndarray) -> Optional[float]:
    n = int(mask.sum())
    return float(values[mask].sum() / n) if n else None


def _sample_mean(values: np.ndarray, mask: np.ndarray) -> Optional[float]:
    """Average of per-sample partition means over samples with a non-empty
    partition."""
    v = values.reshape(-1, values.shape[-1])
    m = mask.reshape(-1, mask.shape[-1])
    counts = m.sum(axis=-1)
    keep = counts > 0
    if not keep.any():
        return None
    per = (v * m).sum(axis=-1)[keep] / counts[keep]
    return float(per.mean())


def split_by_correctness(p, labels, granularity: str = TIME) -> UncertaintyReport:
    """Entropy, confidence and Brier score over correctly and incorrectly
    predicted time points separately.  An empty partition yields ``None``.

    ``granularity="sample"`` first averages within each sample and then
    across samples; ``"time"`` pools every time point.
    """
    if granularity not in (TIME, SAMPLE):
        raise ConfigError(f"granularity must be {TIME!r} or {SAMPLE!r}")
    probs = _probs(p)
    labels = np.asarray(labels).astype(np.int64)
    ent = predictive_entropy(probs)
    conf = predictive_confidence(probs)
    sq = _sq_dist(probs, labels)
    correct = probs.argmax(axis=-2) == labels
    reduce = _masked_mean if granularity == TIME else _sample_mean
    return UncertaintyReport(
        entropy_per_t=ent,
        confidence_per_t=conf,
        brier=float(sq.mean()),
        mean_entropy_true=reduce(ent, correct),
        mean_entropy_false=reduce(ent, ~correct),
        brier_true=reduce(sq, correct),
        brier_false=reduce(sq, ~correct),
        confidence_true=reduce(conf, correct),
        confidence_false=reduce(conf, ~correct),
        granularity=granularity,
    )


def mcdrop_infer(model: ModelGraph, x: Tensor, n_samples: int, seed: int) -> ProbMap:
    """Average softmax over ``n_samples`` stochastic passes; pass ``i`` draws
    its dropout masks from ``rng_for(seed, i)``."""
    if model.variant != MCDROP:
        raise ConfigError(f"mcdrop_infer needs an mcdrop model, got {model.variant!r}")
    if n_samples < 1:
        raise ConfigError("n_samples must be at least 1")
    total = None
    for i in range(n_samples):
        bundle = forward(model, x, ad.EVAL_SAMPLING, rng_for(seed, i))
        s = softmax(bundle[-1]).astype(np.float64)
        total = s if total is None else total + s
    return ProbMap(total / n_samples, n_samples)
