"""Classification metrics, per-exit analysis, latency benchmarking and
report serialisation."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError
from .model import MCDROP, ModelGraph, forward
from .uncertainty import (SAMPLE, TIME, ProbMap, UncertaintyReport, aggregate_exits, mcdrop_infer,
                          softmax, split_by_correctness)

ARTIFACT = 1


@dataclass
class ConfusionCounts:
    """Per-time-point confusion counts; mergeable with ``+``."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @classmethod
    def from_predictions(cls, pred, labels) -> "ConfusionCounts":
        pred = np.asarray(pred) == ARTIFACT
        lab = np.asarray(labels) == ARTIFACT
        if pred.shape != lab.shape:
            raise DataError(f"prediction shape {pred.shape} != label shape {lab.shape}")
        return cls(int((pred & lab).sum()), int((pred & ~lab).sum()),
                   int((~pred & lab).sum()), int((~pred & ~lab).sum()))

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


@dataclass
class PRF:
    f1: float
    precision: float
    recall: float
    degenerate: bool = False


def prf_from_counts(c: ConfusionCounts) -> PRF:
    """Zero denominators yield 0 and set ``degenerate``."""
    flagged = False
    if c.tp + c.fp:
        precision = c.tp / (c.tp + c.fp)
    else:
        precision, flagged = 0.0, True
    if c.tp + c.fn:
        recall = c.tp / (c.tp + c.fn)
    else:
        recall, flagged = 0.0, True
    if precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    else:
        f1, flagged = 0.0, True
    return PRF(f1, precision, recall, flagged)


def f1_precision_recall(probs, labels) -> PRF:
    p = probs if isinstance(probs, ProbMap) else ProbMap(np.asarray(probs))
    return prf_from_counts(ConfusionCounts.from_predictions(p.prediction(), labels))


def per_exit_f1(bundle, labels) -> list[float]:
    return [f1_precision_recall(ProbMap(softmax(lg)), labels).f1 for lg in bundle]


# --------------------------------------------------------------------------
# inference over datasets


@dataclass
class Predictions:
    probs: ProbMap
    exit_probs: list  # one N x C x T array per exit; empty for mcdrop


def predict(model: ModelGraph, x: np.ndarray, batch_size: int = 100, samples: int = 5,
            seed: int = 0) -> Predictions:
    """Aggregated probabilities over ``x`` (``N x M x T``).  MCDrop models
    average ``samples`` stochastic passes; other variants run once in eval
    mode and keep the per-exit softmaxes."""
    if len(x) == 0:
        raise DataError("cannot predict on an empty dataset")
    probs, exits = [], []
    for start in range(0, len(x), batch_size):
        xb = Tensor(x[start:start + batch_size])
        if model.variant == MCDROP:
            probs.append(mcdrop_infer(model, xb, samples, seed + start).probs)
        else:
            bundle = forward(model, xb, ad.EVAL)
            exits.append([softmax(lg) for lg in bundle])
            probs.append(aggregate_exits(bundle).probs)
    exit_probs = [np.concatenate([e[i] for e in exits]) for i in range(len(exits[0]))] if exits else []
    n_src = samples if model.variant == MCDROP else len(exit_probs)
    return Predictions(ProbMap(np.concatenate(probs), n_src), exit_probs)


@dataclass
class RunMetrics:
    """Metrics of one model on one dataset."""

    model: str
    seed: int
    f1: float
    precision: float
    recall: float
    uncertainty: UncertaintyReport
    uncertainty_sample: UncertaintyReport
    per_exit_f1: list = field(default_factory=list)

    def row(self) -> dict:
        out = {"model": self.model, "seed": self.seed, "f1": self.f1,
               "precision": self.precision, "recall": self.recall}
        for k, v in self.uncertainty.scalars().items():
            out[k] = v
        for k, v in self.uncertainty_sample.scalars().items():
            out[f"sample_{k}"] = v
        for i in range(MAX_EXITS):
            out[f"exit{i + 1}_f1"] = self.per_exit_f1[i] if i < len(self.per_exit_f1) else None
        return out


MAX_EXITS = 5


def evaluate(model: ModelGraph, x: np.ndarray, y: np.ndarray, name: str, seed: int = 0,
             samples: int = 5, batch_size: int = 100) -> RunMetrics:
    pred = predict(model, x, batch_size, samples, seed)
    prf = f1_precision_recall(pred.probs, y)
    per_exit = [f1_precision_recall(ProbMap(p), y).f1 for p in pred.exit_probs] \
        if len(pred.exit_probs) > 1 else []
    return RunMetrics(name, seed, prf.f1, prf.precision, prf.recall,
                      split_by_correctness(pred.probs, y, TIME),
                      split_by_correctness(pred.probs, y, SAMPLE), per_exit)


# --------------------------------------------------------------------------
# latency


def latency_bench(models: Sequence[tuple[str, Callable]], dataset, n_runs: int = 5,
                  clock: Callable[[], float] = time.perf_counter) -> list[tuple[str, float, float]]:
    """Mean wall-clock of ``fn(dataset)`` over ``n_runs`` for each
    ``(name, fn)``; returns ``(name, seconds, ratio to the first entry)``."""
    if len(models) < 1:
        raise DataError("latency_bench needs at least one model")
    if dataset is None or len(dataset) == 0:
        raise DataError("latency_bench needs a non-empty dataset")
    timings = []
    for name, fn in models:
        fn(dataset)  # warm-up
        total = 0.0
        for _ in range(n_runs):
            t0 = clock()
            fn(dataset)
            total += clock() - t0
        timings.append((name, total / n_runs))
    base = timings[0][1]
    return [(name, sec, sec / base) for name, sec in timings]


# --------------------------------------------------------------------------
# reports


@dataclass
class Stat:
    mean: Optional[float]
    std: Optional[float]
    n: int

    @classmethod
    def of(cls, values) -> "Stat":
        vals = [v for v in values if v is not None]
        if not vals:
            return cls(None, None, 0)
        return cls(float(np.mean(vals)), float(np.std(vals)), len(vals))


@dataclass
class EvalReport:
    runs: list  # RunMetrics
    latency_ratio: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def models(self) -> list[str]:
        seen = []
        for r in self.runs:
            if r.model not in seen:
                seen.append(r.model)
        return seen

    def stat(self, model: str, key: str) -> Stat:
        return Stat.of(r.row()[key] for r in self.runs if r.model == model)


TABLE_COLUMNS = [
    ("F1", "f1"), ("Precision", "precision"), ("Recall", "recall"),
    ("Entropy true", "entropy_true"), ("Entropy false", "entropy_false"),
    ("Brier true", "brier_true"), ("Brier false", "brier_false"),
    ("Confidence true", "confidence_true"), ("Confidence false", "confidence_false"),
]

CSV_FIELDS = (["model", "seed", "f1", "precision", "recall", "brier", "entropy_true", "entropy_false",
               "brier_true", "brier_false", "confidence_true", "confidence_false"]
              + [f"sample_{k}" for k in ("brier", "entropy_true", "entropy_false", "brier_true",
                                         "brier_false", "confidence_true", "confidence_false")]
              + [f"exit{i + 1}_f1" for i in range(MAX_EXITS)])


def format_mean_std(stat: Stat) -> str:
    """``0.838±.06``: mean to three decimals, std to two without the
    leading zero."""
    if stat.mean is None:
        return "--"
    std = f"{stat.std:.2f}"
    if std.startswith("0"):
        std = std[1:]
    return f"{stat.mean:.3f}±{std}"


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_report(report: EvalReport, fmt: str = "text") -> bytes:
    """``text``: one mean±std row per model.  ``csv``: header then one row
    per model/seed with full-precision values."""
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in report.runs:
            row = r.row()
            w.writerow([_cell(row[k]) for k in CSV_FIELDS])
        return buf.getvalue().encode("utf-8")
    if fmt != "text":
        raise ValueError(f"unknown report format {fmt!r}")
    header = ["Model"] + [h for h, _ in TABLE_COLUMNS]
    rows = [header]
    for m in report.models():
        rows.append([m] + [format_mean_std(report.stat(m, k)) for _, k in TABLE_COLUMNS])
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    per_exit = []
    for m in report.models():
        stats = [report.stat(m, f"exit{i + 1}_f1") for i in range(MAX_EXITS)]
        if any(s.mean is not None for s in stats):
            per_exit.append(f"{m} per-exit F1: " + " ".join(
                f"{s.mean:.3f}" for s in stats if s.mean is not None))
    if report.latency_ratio:
        per_exit += [f"latency {k}: {v:.2f}x" for k, v in report.latency_ratio.items()]
    return ("\n".join(lines + per_exit) + "\n").encode("utf-8")


def parse_report_csv(data: bytes) -> list[dict]:
    """Inverse of ``emit_report(..., "csv")``; empty cells become ``None``."""
    rows = []
    for raw in csv.DictReader(io.StringIO(data.decode("utf-8"))):
        row = {}
        for k, v in raw.items():
            if k == "model":
                row[k] = v
            elif k == "seed":
                row[k] = int(v)
            else:
                row[k] = float(v) if v != "" else None
        rows.append(row)
    return rows


def f1_consistent(prf: PRF, tol: float = 1e-6) -> bool:
    s = prf.precision + prf.recall
    return s == 0 or math.isclose(prf.f1, 2 * prf.precision * prf.recall / s, abs_tol=tol)
