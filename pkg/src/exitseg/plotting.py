"""Figure rendering.  Everything is written to files with the Agg backend;
SVG output is made byte-reproducible by fixing the hash salt and dropping
the date metadata."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import FS, runs  # noqa: E402
from .errors import DataError  # noqa: E402

ACTUAL = "#2ca02c"     # green: labelled only
PREDICTED = "#d62728"  # red: predicted only
OVERLAP = "#8c564b"    # brown: labelled and predicted

STYLE = {
    "axes.labelsize": 8,
    "axes.titlesize": 8,
    "axes.linewidth": 0.5,
    "font.size": 8,
    "font.family": "DejaVu Sans",
    "legend.fontsize": 7,
    "lines.linewidth": 0.5,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "xtick.major.width": 0.5,
    "ytick.major.width": 0.5,
    "svg.hashsalt": "exitseg",
    "svg.fonttype": "path",
    "path.simplify": False,
}


@dataclass(frozen=True)
class Span:
    start: int
    stop: int
    color: str

    @property
    def length(self) -> int:
        return self.stop - self.start


def prediction_spans(labels, predicted) -> list[Span]:
    """Shaded spans: green where only the label is set, red where only the
    prediction is, brown where both are."""
    lab = np.asarray(labels).astype(bool)
    pred = np.asarray(predicted).astype(bool)
    if lab.shape != pred.shape:
        raise DataError(f"label shape {lab.shape} != prediction shape {pred.shape}")
    spans = []
    for mask, color in ((lab & ~pred, ACTUAL), (pred & ~lab, PREDICTED), (lab & pred, OVERLAP)):
        spans += [Span(a, b, color) for a, b in runs(mask)]
    return sorted(spans, key=lambda s: (s.start, s.color))


def _save(fig, path) -> Path:
    path = Path(path)
    fmt = path.suffix.lstrip(".").lower() or "svg"
    try:
        metadata = {"Date": None} if fmt == "svg" else None
        fig.savefig(path, format=fmt, metadata=metadata)
    except (OSError, FileNotFoundError) as exc:
        raise DataError(f"cannot write figure to {path}: {exc}") from None
    finally:
        plt.close(fig)
    return path


def emit_prediction_plot(x, labels, predictions, path, titles=None, fs: float = FS) -> Path:
    """One panel per entry of ``predictions`` (binary masks), each showing
    the signal with coloured label/prediction spans."""
    x = np.asarray(x, dtype=float).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    predictions = [np.asarray(p).reshape(-1) for p in predictions]
    if labels.size != x.size or any(p.size != x.size for p in predictions):
        raise DataError("signal, labels and predictions must share one length")
    titles = titles or [f"exit {i + 1}" for i in range(len(predictions))]
    t = np.arange(x.size) / fs
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(predictions), 1, figsize=(7.0, 1.3 * len(predictions) + 0.4),
                                 sharex=True, squeeze=False)
        for ax, pred, title in zip(axes[:, 0], predictions, titles):
            for sp in prediction_spans(labels, pred):
                ax.axvspan(sp.start / fs, sp.stop / fs, color=sp.color, alpha=0.35, lw=0)
            ax.plot(t, x, color="black")
            ax.set_title(title, loc="left")
            ax.set_ylabel("amplitude")
        axes[-1, 0].set_xlabel("time (s)")
        fig.tight_layout()
        return _save(fig, path)


def plot_per_exit_f1(per_model: dict, path) -> Path:
    """Bar chart of per-exit F1, one group per model."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 2.6))
        names = [m for m, v in per_model.items() if v]
        width = 0.8 / max(len(names), 1)
        for k, name in enumerate(names):
            vals = per_model[name]
            ax.bar(np.arange(1, len(vals) + 1) + (k - (len(names) - 1) / 2) * width, vals, width, label=name)
        ax.set_xlabel("exit")
        ax.set_ylabel("F1")
        ax.set_ylim(0, 1)
        if names:
            ax.legend(loc="lower right")
        fig.tight_layout()
        return _save(fig, path)
