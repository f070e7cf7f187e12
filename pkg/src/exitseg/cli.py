"""Command-line entry point: ``exitseg {synth,train,eval,predict,gradcheck,bench}``.

Exit codes: 0 success, 2 configuration error, 3 data or file error,
4 verification failure, 5 training failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import warnings
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .data import SegmentArrays, dataset_bytes, format_annotations, load_arrays
from .errors import (CheckpointError, ConfigError, DataError, ShapeError, TrainingError,
                     VerificationError)
from .evaluation import EvalReport, emit_report, evaluate, latency_bench, predict
from .gradcheck import format_results, run_gradcheck
from .model import EARLY_EXIT, MCDROP, build_model
from .plotting import emit_prediction_plot, plot_per_exit_f1
from .seeding import derive_seed
from .synth import build_dataset
from .trainer import load_checkpoint, save_checkpoint, train

log = logging.getLogger("exitseg")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_VERIFY, EXIT_TRAIN = 0, 2, 3, 4, 5
SPLITS = ("train", "val", "test")


def _threads(n: int):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(limits=n)


def _prepare_out(out: Path, names, force: bool) -> None:
    out.mkdir(parents=True, exist_ok=True)
    existing = [n for n in names if (out / n).exists()]
    if existing and not force:
        raise ConfigError(f"{out}: {', '.join(existing)} already exist; pass --force to overwrite")


def _overrides(args, mapping) -> dict:
    ov: dict = {}
    if getattr(args, "seed", None) is not None:
        ov["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        ov["threads"] = args.threads
    for attr, dotted in mapping.items():
        v = getattr(args, attr, None)
        if v is not None:
            cfgmod.set_path(ov, dotted, v)
    return ov


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    ov = _overrides(args, {"patients": "synth.n_patients", "minutes": "synth.minutes_per_patient",
                           "channels": "synth.channels_per_patient"})
    cfg = cfgmod.load(args.config, ov)
    spec, aug = cfgmod.synth_spec(cfg)
    if args.artifact_rate is not None:
        spec.artifact_rates = {k: args.artifact_rate for k in spec.artifact_rates}
        cfg["synth"]["artifact_rates"] = dict(spec.artifact_rates)
    if not any(spec.artifact_rates.values()):
        warnings.warn("all artifact rates are zero; the dataset will be entirely clean", stacklevel=1)
    out = Path(args.out)
    names = [f"{s}.e4gd" for s in SPLITS] + ["manifest.json", "annotations.txt", "effective_config.json"]
    _prepare_out(out, names, args.force)
    splits = build_dataset(spec, cfg["seed"], **aug)
    for name, segs in zip(SPLITS, (splits.train, splits.val, splits.test)):
        (out / f"{name}.e4gd").write_bytes(dataset_bytes(segs))
    manifest = {"seed": cfg["seed"], "config_digest": cfgmod.digest(cfg), "splits": splits.manifest()}
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    (out / "annotations.txt").write_text(format_annotations(splits.annotations))
    cfgmod.write_effective(cfg, out)
    for name, info in manifest["splits"].items():
        print(f"{name}: {info['segments']} segments, {len(info['patients'])} patients, "
              f"artifact fraction {info['artifact_fraction']:.3f}")
    return EXIT_OK


def _load_split(data_dir, split: str, length: int) -> SegmentArrays:
    path = Path(data_dir) / f"{split}.e4gd"
    if not path.exists():
        raise DataError(f"missing dataset file {path}")
    arrays = load_arrays(path, length)
    return arrays


def cmd_train(args) -> int:
    ov = _overrides(args, {"variant": "model.variant", "max_epochs": "train.max_epochs",
                           "patience": "train.patience", "lr": "train.learning_rate",
                           "batch_size": "train.batch_size"})
    cfg = cfgmod.load(args.config, ov)
    mcfg, tcfg = cfgmod.model_config(cfg), cfgmod.train_config(cfg)
    out = Path(args.out)
    _prepare_out(out, ["checkpoint.e4gc", "history.csv", "effective_config.json"], args.force)
    train_set = _load_split(args.data, "train", mcfg.input_length)
    val_set = _load_split(args.data, "val", mcfg.input_length)
    model = build_model(mcfg, np.random.default_rng(derive_seed(cfg["seed"], "init")))

    def progress(rec):
        print(f"epoch {rec['epoch']:3d}  loss {rec['train_loss']:.4f}  val F1 {rec['val_f1']:.4f}", flush=True)

    ckpt = train(model, train_set, val_set, tcfg, progress)
    ckpt.meta["config_digest"] = cfgmod.digest(cfg)
    save_checkpoint(ckpt, out / "checkpoint.e4gc")
    n_exits = mcfg.num_exits
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss"] + [f"exit{i + 1}_loss" for i in range(n_exits)] + ["val_f1"])
    for rec in ckpt.history:
        w.writerow([rec["epoch"], repr(rec["train_loss"])] + [repr(v) for v in rec["exit_losses"]]
                   + [repr(rec["val_f1"])])
    (out / "history.csv").write_text(buf.getvalue())
    cfgmod.write_effective(cfg, out)
    print(f"best epoch {ckpt.meta['best_epoch']} (val F1 {ckpt.meta['best_val_f1']:.4f})")
    return EXIT_OK


def _model_name(ckpt) -> str:
    return ckpt.model_config.variant


def cmd_eval(args) -> int:
    cfg = cfgmod.load(args.config, _overrides(args, {}))
    ckpts = [load_checkpoint(p) for p in args.checkpoint]
    if args.samples is not None and not any(c.model_config.variant == MCDROP for c in ckpts):
        raise ConfigError("--samples only applies to mcdrop checkpoints")
    samples = args.samples if args.samples is not None else cfg["eval"]["samples"]
    out = Path(args.out)
    _prepare_out(out, ["report.csv", "report.txt", "per_exit_f1.svg", "effective_config.json"], args.force)
    runs = []
    for path, ckpt in zip(args.checkpoint, ckpts):
        data = _load_split(args.data, args.split, ckpt.model_config.input_length)
        seed = int(ckpt.meta.get("train_config", {}).get("seed", cfg["seed"]))
        runs.append(evaluate(ckpt.to_model(), data.x, data.y, _model_name(ckpt), seed, samples,
                             cfg["eval"]["batch_size"]))
    report = EvalReport(runs, metadata={"config_digest": cfgmod.digest(cfg), "samples": samples})
    (out / "report.csv").write_bytes(emit_report(report, "csv"))
    text = emit_report(report, "text")
    (out / "report.txt").write_bytes(text)
    per_model = {}
    for m in report.models():
        stats = [report.stat(m, f"exit{i + 1}_f1") for i in range(5)]
        per_model[m] = [s.mean for s in stats if s.mean is not None]
    plot_per_exit_f1(per_model, out / "per_exit_f1.svg")
    cfgmod.write_effective(cfg, out)
    sys.stdout.write(text.decode("utf-8"))
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = cfgmod.load(args.config, _overrides(args, {}))
    ckpt = load_checkpoint(args.checkpoint)
    data = _load_split(args.data, args.split, ckpt.model_config.input_length)
    if not 0 <= args.index < len(data):
        raise DataError(f"segment index {args.index} out of range [0, {len(data)})")
    out = Path(args.out)
    _prepare_out(out, ["prediction.svg", "masks.csv"], args.force)
    model = ckpt.to_model()
    x = data.x[args.index:args.index + 1]
    pred = predict(model, x, samples=cfg["eval"]["samples"], seed=cfg["seed"])
    masks = [p[0].argmax(axis=0) for p in pred.exit_probs]
    titles = [f"exit {i + 1}" for i in range(len(masks))]
    masks.append(pred.probs.probs[0].argmax(axis=0))
    titles.append("aggregate")
    emit_prediction_plot(x[0, 0], data.y[args.index], masks, out / "prediction.svg", titles)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "label"] + [t.replace(" ", "") for t in titles])
    for t in range(x.shape[-1]):
        w.writerow([t, int(data.y[args.index, t])] + [int(m[t]) for m in masks])
    (out / "masks.csv").write_text(buf.getvalue())
    print(f"wrote {len(masks)} panels to {out / 'prediction.svg'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_gradcheck(seed=args.seed or 0)
    sys.stdout.write(format_results(results))
    failed = [r.op for r in results if not r.passed]
    if failed:
        raise VerificationError(f"gradient check failed for: {', '.join(failed)}")
    return EXIT_OK


def bench_table(rows) -> str:
    lines = ["model,seconds,ratio"]
    lines += [f"{name},{sec!r},{ratio!r}" for name, sec, ratio in rows]
    return "\n".join(lines) + "\n"


def cmd_bench(args) -> int:
    cfg = cfgmod.load(args.config, _overrides(args, {}))
    samples = args.samples if args.samples is not None else cfg["bench"]["samples"]
    runs = args.runs if args.runs is not None else cfg["bench"]["runs"]
    ckpts = [load_checkpoint(p) for p in args.checkpoint]
    data = _load_split(args.data, args.split, ckpts[0].model_config.input_length)
    entries, used = [], {}
    for ckpt in ckpts:
        model = ckpt.to_model()
        name = _model_name(ckpt)
        used[name] = used.get(name, 0) + 1
        if used[name] > 1:
            name = f"{name}#{used[name]}"

        def run(x, model=model):
            predict(model, x, cfg["eval"]["batch_size"], samples, cfg["seed"])

        entries.append((name, run))
    rows = latency_bench(entries, data.x, runs)
    table = bench_table(rows)
    sys.stdout.write(table)
    if args.out:
        Path(args.out).write_text(table)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--seed", type=int, help="run seed (all randomness derives from it)")
    common.add_argument("--threads", type=int, help="cap on BLAS worker threads")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="exitseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--artifact-rate", type=float, help="events per minute for every artifact kind")
    p.add_argument("--patients", type=int)
    p.add_argument("--minutes", type=float)
    p.add_argument("--channels", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--data", required=True, help="directory with train.e4gd and val.e4gd")
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=["vanilla", "mcdrop", EARLY_EXIT])
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="classification and uncertainty report")
    p.add_argument("--checkpoint", required=True, action="append", help="repeat for several runs")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, help="MCDrop forward passes")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", parents=[common], help="plot per-exit predictions for one segment")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of all operators")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", parents=[common], help="inference latency relative to the first checkpoint")
    p.add_argument("--checkpoint", required=True, action="append")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--samples", type=int)
    p.add_argument("--runs", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = args.threads if args.threads is not None else 1
    try:
        with _threads(threads):
            return args.func(args)
    except (ConfigError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except VerificationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRAIN


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
