import math
import re

import numpy as np
import pytest
from conftest import separable_arrays, small_config
from hypothesis import given
from hypothesis import strategies as st

from exitseg.errors import DataError
from exitseg.evaluation import (CSV_FIELDS, ConfusionCounts, EvalReport, Stat, emit_report, evaluate,
                                f1_consistent, f1_precision_recall, format_mean_std, latency_bench,
                                parse_report_csv, per_exit_f1, predict, prf_from_counts)
from exitseg.model import build_model
from exitseg.plotting import ACTUAL, OVERLAP, PREDICTED, Span, emit_prediction_plot, plot_per_exit_f1, prediction_spans
from exitseg.seeding import derive_seed, rng_for


def _onehot_probs(pred):
    pred = np.asarray(pred)
    return np.stack([1.0 - pred, pred.astype(float)], axis=-2)


def test_perfect_predictions():
    y = np.array([0, 1, 1, 0, 1])
    prf = f1_precision_recall(_onehot_probs(y), y)
    assert (prf.f1, prf.precision, prf.recall, prf.degenerate) == (1.0, 1.0, 1.0, False)


def test_all_clean_predictor_is_flagged():
    prf = f1_precision_recall(_onehot_probs(np.zeros(6)), np.array([0, 1, 1, 0, 0, 0]))
    assert prf.recall == 0 and prf.f1 == 0 and prf.degenerate


def test_counting_example():
    y = np.array([1, 1, 1, 1, 0, 0])
    pred = np.array([1, 1, 1, 0, 1, 0])  # TP 3, FN 1, FP 1
    c = ConfusionCounts.from_predictions(pred, y)
    assert (c.tp, c.fp, c.fn, c.tn) == (3, 1, 1, 1)
    prf = prf_from_counts(c)
    assert prf.precision == prf.recall == prf.f1 == 0.75


def test_counts_merge_equals_pooled(rng):
    p, y = rng.integers(0, 2, (2, 50)), rng.integers(0, 2, (2, 50))
    merged = ConfusionCounts.from_predictions(p[0], y[0]) + ConfusionCounts.from_predictions(p[1], y[1])
    assert merged == ConfusionCounts.from_predictions(p, y)


@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_f1_is_harmonic_mean(tp, fp, fn):
    prf = prf_from_counts(ConfusionCounts(tp, fp, fn, 0))
    assert f1_consistent(prf)
    assert 0 <= prf.f1 <= 1


def test_per_exit_identical():
    z = np.random.default_rng(0).standard_normal((2, 40))
    y = (z[1] > z[0]).astype(int)
    assert per_exit_f1([z] * 5, y) == [1.0] * 5


def test_latency_bench_ratios():
    ticks = iter(np.arange(0, 100, 0.5))
    rows = latency_bench([("a", lambda d: None), ("b", lambda d: None)], [1, 2], n_runs=3,
                         clock=lambda: next(ticks))
    assert [r[0] for r in rows] == ["a", "b"]
    assert rows[0][2] == 1.0 and all(r[2] > 0 for r in rows)
    with pytest.raises(DataError):
        latency_bench([("a", lambda d: None)], [])


def test_mean_std_format():
    assert format_mean_std(Stat(0.838, 0.06, 5)) == "0.838±.06"
    assert format_mean_std(Stat.of([0.5])) == "0.500±.00"
    assert format_mean_std(Stat.of([None])) == "--"


@pytest.fixture(scope="module")
def report():
    data = separable_arrays(6, seed=4)
    runs = []
    for variant in ("early_exit", "vanilla", "mcdrop"):
        for seed in (0, 1):
            model = build_model(small_config(variant), np.random.default_rng(seed))
            runs.append(evaluate(model, data.x, data.y, variant, seed, samples=3, batch_size=4))
    return EvalReport(runs, metadata={"config_digest": "x"})


def test_report_round_trip(report):
    raw = emit_report(report, "csv")
    rows = parse_report_csv(raw)
    assert list(rows[0]) == CSV_FIELDS
    for parsed, run in zip(rows, report.runs):
        assert parsed == run.row()
    assert emit_report(report, "csv") == raw


def test_report_text_layout(report):
    text = emit_report(report, "text").decode()
    lines = text.splitlines()
    assert lines[0].split()[0] == "Model"
    assert [ln.split()[0] for ln in lines[1:4]] == ["early_exit", "vanilla", "mcdrop"]
    assert re.search(r"\d\.\d{3}±\.\d{2}", lines[1])
    assert lines[4].startswith("early_exit per-exit F1:") and len(lines[4].split(":")[1].split()) == 2
    assert emit_report(report, "text") == text.encode()


def test_evaluate_metrics_consistent(report):
    for run in report.runs:
        assert 0 <= run.precision <= 1 and 0 <= run.recall <= 1
        assert math.isclose(run.f1, 2 * run.precision * run.recall / (run.precision + run.recall), abs_tol=1e-6) \
            if run.precision + run.recall else run.f1 == 0
    assert len(report.runs[0].per_exit_f1) == 2
    assert report.runs[2].per_exit_f1 == []


def test_predict_rejects_empty(small_model):
    with pytest.raises(DataError):
        predict(small_model(), np.zeros((0, 1, 64), dtype=np.float32))


# --- plotting ----------------------------------------------------------------


def test_span_cases():
    assert prediction_spans(np.zeros(10), np.zeros(10)) == []
    y = np.zeros(10)
    y[2:6] = 1
    assert prediction_spans(y, y) == [Span(2, 6, OVERLAP)]
    pred = np.zeros(10)
    pred[4:9] = 1
    assert prediction_spans(y, pred) == [Span(2, 4, ACTUAL), Span(4, 6, OVERLAP), Span(6, 9, PREDICTED)]


def test_prediction_plot_deterministic(tmp_path):
    x = np.sin(np.arange(500) / 10.0)
    y = np.zeros(500)
    y[100:200] = 1
    paths = [emit_prediction_plot(x, y, [y, np.roll(y, 30)], tmp_path / f"p{i}.svg") for i in range(2)]
    a, b = (p.read_bytes() for p in paths)
    assert a == b and a.lstrip().startswith(b"<?xml")
    with pytest.raises(DataError):
        emit_prediction_plot(x, y, [y], tmp_path / "missing" / "p.svg")


def test_per_exit_plot(tmp_path):
    path = plot_per_exit_f1({"early_exit": [0.8, 0.85, 0.9, 0.88, 0.91]}, tmp_path / "f.svg")
    assert path.stat().st_size > 0


# --- seeding -------------------------------------------------------------------


def test_seed_derivation_is_stable():
    assert derive_seed(0, "init") == derive_seed(0, "init")
    assert derive_seed(0, "init") != derive_seed(1, "init")
    assert rng_for(3, "shuffle", 2).integers(1 << 30) == rng_for(3, "shuffle", 2).integers(1 << 30)
    assert rng_for(3, 0).random() != rng_for(3, 1).random()
