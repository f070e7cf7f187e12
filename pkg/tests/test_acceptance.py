"""Acceptance suite: one test per criterion, each printing a single
PASS/FAIL line.  Criteria 5-7 train real models on the default synthetic
dataset and take several minutes on one CPU core."""

import math
import time

import numpy as np
import pytest
from layer_table import LAYER_TABLE

from exitseg import autodiff as ad
from exitseg.autodiff import Tensor
from exitseg.cli import main
from exitseg.data import Segment, SegmentArrays, augment_mix, dataset_bytes, segment, split_dataset
from exitseg.errors import DataError
from exitseg.evaluation import evaluate, f1_precision_recall, predict
from exitseg.filters import FORWARD_BACKWARD, apply_filter, design_bandpass, design_notch
from exitseg.losses import LossWeights, ensemble_loss, exit_loss
from exitseg.model import MCDROP, ModelConfig, build_model, forward
from exitseg.seeding import derive_seed
from exitseg.synth import SynthSpec, build_dataset, preprocess_recording, synth_generate
from exitseg.trainer import Checkpoint, TrainConfig, checkpoint_bytes, load_checkpoint, save_checkpoint, train
from exitseg.uncertainty import aggregate_exits, brier, predictive_confidence, predictive_entropy, softmax

DATA_SEED = 0
EPOCHS = 30


@pytest.fixture
def verdict(capsys):
    def emit(number: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
        assert ok, detail
    return emit


@pytest.fixture(scope="module")
def splits():
    s = build_dataset(SynthSpec(), DATA_SEED)
    return {k: SegmentArrays.from_segments(getattr(s, k)) for k in ("train", "val", "test")}, s


_trained: dict = {}


def _train(splits, variant, seed, max_epochs=EPOCHS):
    key = (variant, seed, max_epochs)
    if key not in _trained:
        arrays, _ = splits
        model = build_model(ModelConfig(variant=variant), np.random.default_rng(derive_seed(seed, "init")))
        t0 = time.perf_counter()
        ckpt = train(model, arrays["train"], arrays["val"], TrainConfig(seed=seed, variant=variant,
                                                                       max_epochs=max_epochs))
        _trained[key] = (model, ckpt, time.perf_counter() - t0)
    return _trained[key]


# 1 -------------------------------------------------------------------------------


def test_criterion_1_gradient_oracle(verdict, capsys):
    from exitseg.gradcheck import run_gradcheck
    t0 = time.perf_counter()
    code = main(["gradcheck"])
    seconds = time.perf_counter() - t0
    capsys.readouterr()
    results = run_gradcheck()
    worst = max(r.max_rel_error for r in results)
    ops = {r.op for r in results}
    required = {"conv1d", "maxpool1d", "upsample_nearest", "batchnorm1d", "elu", "concat_channels",
                "softmax_classes", "cross_entropy", "dice_loss"}
    ok = code == 0 and required <= ops and worst < 1e-4 and seconds < 60
    verdict(1, ok, f"{len(results)} ops, worst rel error {worst:.2e}, exit code {code}, {seconds:.1f}s")


# 2 -------------------------------------------------------------------------------


def test_criterion_2_shape_conformance(verdict):
    model = build_model(ModelConfig(), np.random.default_rng(0))
    seen = {}
    forward(model, Tensor(np.random.default_rng(1).standard_normal((1, 2500)).astype(np.float32)),
            hook=lambda name, shape: seen.setdefault(name, shape))
    mismatched = sorted(k for k in LAYER_TABLE if seen.get(k) != LAYER_TABLE[k])
    ok = not mismatched and len(seen) == len(LAYER_TABLE) >= 40
    verdict(2, ok, f"{len(LAYER_TABLE)} table shapes, {len(mismatched)} mismatched {mismatched[:3]}")


# 3 -------------------------------------------------------------------------------


def test_criterion_3_probability_invariants(verdict):
    rng = np.random.default_rng(3)
    worst_sum, worst_gap, bad = 0.0, math.inf, 0
    for _ in range(1000):
        n_exits = int(rng.integers(1, 6))
        bundle = [rng.standard_normal((2, 50)) * rng.uniform(0.1, 30) for _ in range(n_exits)]
        p = aggregate_exits(bundle)
        y = rng.integers(0, 2, 50)
        ent, conf, b = predictive_entropy(p), predictive_confidence(p), brier(p, y)
        worst_sum = max(worst_sum, float(np.abs(p.probs.sum(axis=0) - 1).max()))
        mean_ent = np.mean([predictive_entropy(softmax(z)) for z in bundle], axis=0)
        worst_gap = min(worst_gap, float((ent - mean_ent).min()))
        bad += int(ent.min() < 0 or ent.max() > math.log(2) + 1e-12 or conf.min() < 0.5 or conf.max() > 1
                   or not 0 <= b <= 2)
    ok = worst_sum <= 1e-6 and bad == 0 and worst_gap >= -1e-8
    verdict(3, ok, f"1000 bundles, max |sum-1| {worst_sum:.1e}, range violations {bad}, "
                   f"min entropy gap {worst_gap:.1e}")


# 4 -------------------------------------------------------------------------------


def test_criterion_4_filter_suite(verdict):
    t0 = time.perf_counter()
    fs = 250.0
    bp, notch = design_bandpass(0.3, 40.0, fs, 2), design_notch(60.0, 30.0, fs)
    dc, nyq = abs(bp.response([0.0], fs)[0]), abs(bp.response([fs / 2], fs)[0])
    att = -20 * np.log10(max(abs(notch.response([60.0], fs)[0]), 1e-300))
    stable = bp.is_stable() and notch.is_stable()
    t = np.arange(2500) / fs
    x = np.sin(2 * np.pi * 5 * t)
    y = apply_filter(x, bp, FORWARD_BACKWARD)
    core = slice(500, 2000)
    lags = np.arange(-25, 26)
    lag = int(lags[np.argmax([np.dot(x[core], np.roll(y, -k)[core]) for k in lags])])
    seconds = time.perf_counter() - t0
    ok = dc < 1e-12 and nyq < 1e-12 and att >= 40 and stable and lag == 0 and seconds < 10
    verdict(4, ok, f"|H(0)|={dc:.1e} |H(nyq)|={nyq:.1e} notch {att:.0f} dB stable={stable} lag={lag} "
                   f"{seconds:.2f}s")


# 5 -------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_5_end_to_end_learning(verdict, splits):
    arrays, _ = splits
    ee_model, ee_ckpt, ee_sec = _train(splits, "early_exit", 0)
    va_model, va_ckpt, va_sec = _train(splits, "vanilla", 0)
    val = [h["val_f1"] for h in ee_ckpt.history[:EPOCHS]]
    first = next((h["epoch"] for h in ee_ckpt.history if h["val_f1"] >= 0.90), None)
    test = arrays["test"]
    f1_ee = f1_precision_recall(predict(ee_model, test.x).probs, test.y).f1
    f1_va = f1_precision_recall(predict(va_model, test.x).probs, test.y).f1
    ok = max(val) >= 0.90 and abs(f1_va - f1_ee) < 0.05 and ee_sec + va_sec < 15 * 60
    verdict(5, ok, f"early-exit best val F1 {max(val):.3f} (first >=0.90 at epoch {first}); test F1 "
                   f"early-exit {f1_ee:.3f} vs vanilla {f1_va:.3f} (|diff| {abs(f1_va - f1_ee):.3f}); "
                   f"train time {ee_sec + va_sec:.0f}s")


# 6 -------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_6_uncertainty_ordering(verdict, splits):
    arrays, _ = splits
    test = arrays["test"]
    rows = []
    # seed 0 reuses the full criterion-5 run; the extra seeds use a shorter budget
    for seed, epochs in ((0, EPOCHS), (1, 15), (2, 15)):
        model = _train(splits, "early_exit", seed, epochs)[0]
        run = evaluate(model, test.x, test.y, "early_exit", seed)
        u = run.uncertainty
        rows.append((seed, u.mean_entropy_true, u.mean_entropy_false, u.brier_true, u.brier_false))
    ok = all(et is not None and ef is not None and ef > et and bf > bt for _, et, ef, bt, bf in rows)
    detail = "; ".join(f"seed {s}: entropy {et:.3f}<{ef:.3f}, brier {bt:.3f}<{bf:.3f}"
                       for s, et, ef, bt, bf in rows)
    verdict(6, ok, detail)


# 7 -------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_7_latency_ordering(verdict, splits, tmp_path, capsys):
    arrays, raw = splits
    (tmp_path / "test.e4gd").write_bytes(dataset_bytes(raw.test))
    paths = []
    for variant in ("vanilla", "early_exit"):
        ckpt = _train(splits, variant, 0)[1]
        save_checkpoint(ckpt, tmp_path / f"{variant}.e4gc")
        paths.append(tmp_path / f"{variant}.e4gc")
    mc = build_model(ModelConfig(variant=MCDROP), np.random.default_rng(0))
    save_checkpoint(Checkpoint(mc.config, mc.state_arrays()), tmp_path / "mcdrop.e4gc")
    paths.append(tmp_path / "mcdrop.e4gc")
    args = ["bench", "--data", str(tmp_path), "--samples", "5", "--runs", "5", "--out", str(tmp_path / "b.csv")]
    for p in paths:
        args += ["--checkpoint", str(p)]
    code = main(args)
    capsys.readouterr()
    lines = (tmp_path / "b.csv").read_text().splitlines()[1:]
    ratio = {ln.split(",")[0]: float(ln.split(",")[2]) for ln in lines}
    mc_vs_ee = ratio["mcdrop"] / ratio["early_exit"]
    ok = code == 0 and mc_vs_ee >= 3.0 and ratio["early_exit"] <= 1.5
    verdict(7, ok, f"vs vanilla: early-exit {ratio['early_exit']:.2f}x, mcdrop {ratio['mcdrop']:.2f}x; "
                   f"mcdrop/early-exit {mc_vs_ee:.2f}x")


# 8 -------------------------------------------------------------------------------


def test_criterion_8_loss_decomposition(verdict):
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(50):
        bundle = [Tensor(rng.standard_normal((2, 40)) * 3) for _ in range(5)]
        y = rng.integers(0, 2, 40)
        singles = [float(exit_loss(lg, y, LossWeights()).data) for lg in bundle]
        masked = float(ensemble_loss(bundle, y, LossWeights([1, 0, 0, 0, 0])).data)
        worst = max(worst, abs(masked - singles[0]))
        alpha = rng.uniform(0, 3, 5).tolist()
        total = float(ensemble_loss(bundle, y, LossWeights(alpha)).data)
        brute = 0.0
        for a, s in zip(alpha, singles):
            brute += a * s
        worst = max(worst, abs(total - brute))
        i = int(rng.integers(5))
        doubled = list(alpha)
        doubled[i] *= 2
        grown = float(ensemble_loss(bundle, y, LossWeights(doubled)).data)
        worst = max(worst, abs(grown - (total + alpha[i] * singles[i])))
    verdict(8, worst < 1e-6, f"50 random bundles, max deviation {worst:.1e}")


# 9 -------------------------------------------------------------------------------


def test_criterion_9_determinism_and_persistence(verdict, splits, tmp_path):
    arrays, _ = splits
    train_set, val_set = arrays["train"].subset(slice(0, 40)), arrays["val"].subset(slice(0, 10))
    cfg = dict(seed=5, variant="early_exit", max_epochs=2)
    blobs = []
    for _ in range(2):
        model = build_model(ModelConfig(), np.random.default_rng(derive_seed(5, "init")))
        ckpt = train(model, train_set, val_set, TrainConfig(**cfg))
        blobs.append(checkpoint_bytes(ckpt))
    save_checkpoint(ckpt, tmp_path / "c.e4gc")
    back = load_checkpoint(tmp_path / "c.e4gc")
    roundtrip = checkpoint_bytes(back) == blobs[1]
    x = Tensor(arrays["test"].x[:4])
    same_logits = all(np.array_equal(a.data, b.data) for a, b in zip(forward(model, x), forward(back.to_model(), x)))
    ok = blobs[0] == blobs[1] and roundtrip and same_logits
    verdict(9, ok, f"identical checkpoints {blobs[0] == blobs[1]} ({len(blobs[0])} bytes), "
                   f"round trip {roundtrip}, identical eval logits {same_logits}")


# 10 ------------------------------------------------------------------------------


def test_criterion_10_pipeline_contracts(verdict, splits):
    _, raw = splits
    ids = [{s.patient_id for s in part} for part in (raw.train, raw.val, raw.test)]
    disjoint = not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    resplit = split_dataset(raw.train + raw.val + raw.test, rng=np.random.default_rng(9))
    ids2 = [{s.patient_id for s in part} for part in resplit]
    disjoint = disjoint and not (ids2[0] & ids2[1] or ids2[0] & ids2[2] or ids2[1] & ids2[2])

    y = np.zeros(2500)
    y[100:400] = 1
    try:
        augment_mix(Segment(np.zeros(2500), np.zeros(2500), 1), Segment(np.ones(2500), y, 2), 1.0)
        rejects = False
    except DataError:
        rejects = True

    res = synth_generate(SynthSpec(n_patients=4), 10)
    mass_ok = True
    for rec in res.recordings:
        rec = preprocess_recording(rec)
        covered = np.zeros(rec.samples.size, dtype=bool)
        for a in res.annotations:
            if a.patient_id == rec.patient_id and a.channel_id == rec.channel_id:
                covered[int(round(a.start_s * rec.fs)):int(round(a.end_s * rec.fs))] = True
        kept = (rec.samples.size // 2500) * 2500
        mass_ok &= sum(int(s.y.sum()) for s in segment(rec, res.annotations)) == int(covered[:kept].sum())
    ok = disjoint and rejects and mass_ok
    verdict(10, ok, f"disjoint patients {disjoint}, cross-patient mix rejected {rejects}, mask mass preserved {mass_ok}")
