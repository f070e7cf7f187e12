"""Adam training loop with early stopping on validation F1, and the binary
checkpoint format.

Checkpoint layout (little-endian)::

    b"E4GC" | version u32 | config length u32 | config JSON (UTF-8, sorted keys)
    record count u32
    per record: name length u16 | name | rank u8 | extents u32 x rank | f32 payload
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import SegmentArrays
from .errors import CheckpointError, ConfigError, DataError, ShapeError, TrainingError
from .evaluation import f1_precision_recall, predict
from .losses import LossWeights, ensemble_loss
from .model import EARLY_EXIT, VARIANTS, ModelConfig, ModelGraph, build_model, forward
from .seeding import rng_for

CHECKPOINT_MAGIC = b"E4GC"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 50
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    variant: str = EARLY_EXIT
    loss: LossWeights = field(default_factory=LossWeights)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_batch_size: int = 100
    val_samples: int = 5

    def validate(self) -> None:
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("batch_size, max_epochs and patience must be at least 1")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        if isinstance(d.get("loss"), dict):
            d["loss"] = LossWeights(**d["loss"])
        return cls(**d)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place on ``params`` (name -> Tensor)."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeError("adam_step", f"gradient for {name}", expected=p.shape, got=g.shape)
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype, copy=False)


@dataclass
class Checkpoint:
    model_config: ModelConfig
    arrays: dict
    adam: Optional[AdamState] = None
    history: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_model(self) -> ModelGraph:
        model = build_model(self.model_config, np.random.default_rng(0))
        model.load_state_arrays(self.arrays)
        return model


def _snapshot(model: ModelGraph) -> dict:
    return {k: np.array(v, copy=True) for k, v in model.state_arrays().items()}


def _adam_copy(state: AdamState) -> AdamState:
    return AdamState({k: v.copy() for k, v in state.m.items()}, {k: v.copy() for k, v in state.v.items()},
                     state.t, state.beta1, state.beta2, state.eps)


def loss_weights_for(model: ModelGraph, weights: LossWeights) -> LossWeights:
    """Single-output variants train on one loss term regardless of alpha."""
    n = model.config.num_exits
    if len(weights.alpha) == n:
        return weights
    if n == 1:
        return LossWeights([1.0], weights.ce_weight, weights.dice_weight, weights.dice_smooth)
    raise ConfigError(f"alpha has {len(weights.alpha)} entries, model has {n} exits")


def validation_f1(model: ModelGraph, data: SegmentArrays, config: TrainConfig) -> float:
    pred = predict(model, data.x, config.eval_batch_size, config.val_samples, config.seed)
    return f1_precision_recall(pred.probs, data.y).f1


def train(model: ModelGraph, train_data: SegmentArrays, val_data: SegmentArrays, config: TrainConfig,
          progress: Optional[Callable[[dict], None]] = None) -> Checkpoint:
    """Mini-batch Adam on the weighted exit loss.  After each epoch the
    aggregated prediction is scored on ``val_data``; training stops after
    ``patience`` epochs without F1 improvement and the best epoch's weights
    are loaded back into ``model`` and returned."""
    config.validate()
    if model.variant != config.variant:
        raise ConfigError(f"model variant {model.variant!r} != config variant {config.variant!r}")
    if len(train_data) == 0 or len(val_data) == 0:
        raise DataError("training and validation data must be non-empty")
    if train_data.length != model.config.input_length:
        raise DataError(f"segment length {train_data.length} != model input {model.config.input_length}")
    weights = loss_weights_for(model, config.loss)
    weights.validate(model.config.num_exits)
    adam = AdamState(beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps)
    history: list[dict] = []
    best_f1, best_epoch, best_state, best_adam = -1.0, 0, None, None
    n = len(train_data)

    for epoch in range(1, config.max_epochs + 1):
        order = rng_for(config.seed, "shuffle", epoch).permutation(n)
        loss_sum, exit_sums, seen = 0.0, np.zeros(len(weights.alpha)), 0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            x = Tensor(train_data.x[idx])
            y = train_data.y[idx]
            model.zero_grad()
            bundle = forward(model, x, ad.TRAIN, rng_for(config.seed, "dropout", epoch, b))
            per_exit: list[float] = []
            loss = ensemble_loss(bundle, y, weights, per_exit)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at batch {b}", epoch=epoch)
            ad.backward(loss)
            adam_step(model.params, {k: p.grad for k, p in model.params.items()}, adam, config.learning_rate)
            loss_sum += value * len(idx)
            exit_sums += np.asarray(per_exit) * len(idx)
            seen += len(idx)
        model.zero_grad()
        f1 = validation_f1(model, val_data, config)
        record = {"epoch": epoch, "train_loss": loss_sum / seen,
                  "exit_losses": (exit_sums / seen).tolist(), "val_f1": f1}
        history.append(record)
        if progress is not None:
            progress(record)
        if f1 > best_f1:
            best_f1, best_epoch = f1, epoch
            best_state, best_adam = _snapshot(model), _adam_copy(adam)
        elif epoch - best_epoch >= config.patience:
            break

    model.load_state_arrays(best_state)
    meta = {"train_config": config.to_dict(), "best_epoch": best_epoch, "best_val_f1": best_f1,
            "selection": "aggregated_val_f1", "epochs_run": len(history)}
    return Checkpoint(model.config, best_state, best_adam, history, meta)


# --------------------------------------------------------------------------
# serialisation


def _records(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    recs = sorted(ckpt.arrays.items())
    if ckpt.adam is not None:
        recs += [(f"adam/m/{k}", v) for k, v in sorted(ckpt.adam.m.items())]
        recs += [(f"adam/v/{k}", v) for k, v in sorted(ckpt.adam.v.items())]
    return recs


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    header = {
        "model_config": ckpt.model_config.to_dict(),
        "history": ckpt.history,
        "meta": ckpt.meta,
        "adam": None if ckpt.adam is None else {
            "t": ckpt.adam.t, "beta1": ckpt.adam.beta1, "beta2": ckpt.adam.beta2, "eps": ckpt.adam.eps},
    }
    cfg = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(cfg)), cfg]
    recs = _records(ckpt)
    parts.append(struct.pack("<I", len(recs)))
    for name, arr in recs:
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.off, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.raw[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    r = _Reader(raw, path)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, cfg_len = r.unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(r.take(cfg_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt config block ({exc})") from None
    (count,) = r.unpack("<I")
    arrays, m, v = {}, {}, {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I") if rank else ()
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
        if name.startswith("adam/m/"):
            m[name[7:]] = arr
        elif name.startswith("adam/v/"):
            v[name[7:]] = arr
        else:
            arrays[name] = arr
    if r.off != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after the last record")
    adam = None
    if header.get("adam") is not None:
        a = header["adam"]
        adam = AdamState(m, v, a["t"], a["beta1"], a["beta2"], a["eps"])
    return Checkpoint(ModelConfig.from_dict(header["model_config"]), arrays, adam,
                      header["history"], header["meta"])
