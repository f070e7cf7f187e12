"""Temporal U-Net with early-exit branches.

Layout for the default configuration (per-sample shapes, input 1 x 2500)::

    encoder  e1..e5: conv+BN+ELU (5,7,9,12,16 ch) then max-pool /2
    bottleneck:      conv+BN+ELU -> 22 x 78
    decoder  d1..d5: upsample to the skip length, conv+BN+ELU, concat skip,
                     conv+BN+ELU (16,12,9,7,5 ch)
    exits    x1..x4: upsample d1..d4 output to T, conv -> C logits
    head:            conv+ELU, conv -> C logits on the d5 output

The ``early_exit`` variant returns the four exit logits followed by the head;
``vanilla`` and ``mcdrop`` return the head only.  ``mcdrop`` places dropout
after the last conv+BN+ELU of every decoder block.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor
from .errors import ConfigError, ShapeError

VANILLA = "vanilla"
MCDROP = "mcdrop"
EARLY_EXIT = "early_exit"
VARIANTS = (VANILLA, MCDROP, EARLY_EXIT)

# even kernels need asymmetric padding to keep the length: 1 left, 2 right for K=4
PAD_LEFT = 1

ShapeHook = Callable[[str, tuple], None]


@dataclass
class ModelConfig:
    encoder_channels: list = field(default_factory=lambda: [5, 7, 9, 12, 16, 22])
    decoder_channels: list = field(default_factory=lambda: [16, 12, 9, 7, 5])
    kernel_size: int = 4
    input_channels: int = 1
    input_length: int = 2500
    num_classes: int = 2
    variant: str = EARLY_EXIT
    dropout_p: float = 0.2
    bn_momentum: float = 0.1
    bn_epsilon: float = 1e-5

    @property
    def num_exits(self) -> int:
        """Predictions per forward pass: hidden decoder exits plus the head."""
        return len(self.decoder_channels) if self.variant == EARLY_EXIT else 1

    @property
    def padding(self) -> tuple[int, int]:
        total = self.kernel_size - 1
        left = min(PAD_LEFT, total)
        return left, total - left

    def validate(self) -> None:
        enc, dec = list(self.encoder_channels), list(self.decoder_channels)
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if len(enc) < 2 or len(dec) != len(enc) - 1:
            raise ConfigError("need n encoder stages (last is the bottleneck) and n-1 decoder stages")
        if dec != enc[-2::-1]:
            raise ConfigError(
                f"decoder channels {dec} must mirror the encoder skips {enc[-2::-1]}")
        if min(enc + dec) < 1 or self.kernel_size < 1 or self.num_classes < 2:
            raise ConfigError("channel counts and kernel size must be positive, num_classes >= 2")
        if self.input_channels < 1 or self.input_length < 2 ** (len(enc) - 1):
            raise ConfigError("input too short for the number of pooling stages")
        if not 0 <= self.dropout_p < 1:
            raise ConfigError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.encoder_channels = list(cfg.encoder_channels)
        cfg.decoder_channels = list(cfg.decoder_channels)
        return cfg


@dataclass
class ExitBundle:
    """Ordered per-exit logits from one forward pass (exit 1 first, head last)."""

    logits: list

    def __len__(self) -> int:
        return len(self.logits)

    def __iter__(self):
        return iter(self.logits)

    def __getitem__(self, i):
        return self.logits[i]


@dataclass
class ModelGraph:
    config: ModelConfig
    params: dict
    bn_state: dict
    calls: Counter = field(default_factory=Counter)

    @property
    def variant(self) -> str:
        return self.config.variant

    def parameters(self) -> list:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict:
        """Parameters and running statistics as plain arrays, keyed by name."""
        out = {f"param/{k}": v.data for k, v in self.params.items()}
        for k, s in self.bn_state.items():
            out[f"bn/{k}.running_mean"] = s.mean
            out[f"bn/{k}.running_var"] = s.var
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        for k, p in self.params.items():
            arr = arrays[f"param/{k}"]
            if arr.shape != p.shape:
                raise ShapeError("load_state", f"parameter {k}", expected=p.shape, got=arr.shape)
            p.data = np.array(arr, dtype=p.dtype, copy=True)
        for k, s in self.bn_state.items():
            s.mean[...] = arrays[f"bn/{k}.running_mean"]
            s.var[...] = arrays[f"bn/{k}.running_var"]


def _layer_specs(cfg: ModelConfig) -> list[tuple[str, str, int, int]]:
    """(name, kind, c_in, c_out) for every layer, kind in {conv_bn, conv}."""
    enc, dec = cfg.encoder_channels, cfg.decoder_channels
    specs = []
    c_prev = cfg.input_channels
    for i, c in enumerate(enc[:-1], start=1):
        specs.append((f"enc{i}", "conv_bn", c_prev, c))
        c_prev = c
    specs.append(("bottleneck", "conv_bn", c_prev, enc[-1]))
    c_prev = enc[-1]
    skips = enc[-2::-1]
    for i, (c, skip) in enumerate(zip(dec, skips), start=1):
        specs.append((f"dec{i}.up_conv", "conv_bn", c_prev, c))
        specs.append((f"dec{i}.merge_conv", "conv_bn", c + skip, c))
        c_prev = c
    if cfg.variant == EARLY_EXIT:
        for i, c in enumerate(dec[:-1], start=1):
            specs.append((f"exit{i}.conv", "conv", c, cfg.num_classes))
    specs.append(("head.conv1", "conv", dec[-1], dec[-1]))
    specs.append(("head.conv2", "conv", dec[-1], cfg.num_classes))
    return specs


def build_model(config: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> ModelGraph:
    """Initialise all parameters: conv weights U(+-1/sqrt(fan_in)), zero
    biases, BN gamma=1 and beta=0."""
    config.validate()
    k = config.kernel_size
    params: dict[str, Tensor] = {}
    bn_state: dict[str, BatchNormState] = {}
    for name, kind, c_in, c_out in _layer_specs(config):
        bound = 1.0 / np.sqrt(c_in * k)
        w = rng.uniform(-bound, bound, size=(c_out, c_in, k)).astype(dtype)
        params[f"{name}.weight"] = Tensor(w, requires_grad=True)
        params[f"{name}.bias"] = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
        if kind == "conv_bn":
            params[f"{name}.bn.gamma"] = Tensor(np.ones(c_out, dtype=dtype), requires_grad=True)
            params[f"{name}.bn.beta"] = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
            bn_state[f"{name}.bn"] = BatchNormState.fresh(c_out, dtype)
    return ModelGraph(config=config, params=params, bn_state=bn_state)


def parameter_count(model: ModelGraph) -> int:
    return int(sum(p.size for p in model.params.values()))


def _conv(model: ModelGraph, name: str, x: Tensor) -> Tensor:
    left, right = model.config.padding
    p = model.params
    return ad.conv1d(x, p[f"{name}.weight"], p[f"{name}.bias"], left, right)


def _conv_bn_elu(model: ModelGraph, name: str, x: Tensor, mode: str) -> Tensor:
    cfg, p = model.config, model.params
    h = _conv(model, name, x)
    bn_mode = ad.TRAIN if mode == ad.TRAIN else ad.EVAL
    h = ad.batchnorm1d(h, p[f"{name}.bn.gamma"], p[f"{name}.bn.beta"], model.bn_state[f"{name}.bn"],
                       bn_mode, cfg.bn_momentum, cfg.bn_epsilon)
    return ad.elu(h)


def forward(model: ModelGraph, x: Tensor, mode: str = ad.EVAL,
            rng: Optional[np.random.Generator] = None,
            hook: Optional[ShapeHook] = None) -> ExitBundle:
    """Run the network on ``x`` (``M x T`` or ``N x M x T``).

    ``hook(name, per_sample_shape)`` is called after every layer when given.
    """
    cfg = model.config
    if mode not in ad.MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    if x.data.ndim not in (2, 3) or x.shape[-2:] != (cfg.input_channels, cfg.input_length):
        raise ShapeError("forward", "input must be M x T or N x M x T",
                         expected=(cfg.input_channels, cfg.input_length), got=x.shape)
    sampling = cfg.variant == MCDROP and mode in (ad.TRAIN, ad.EVAL_SAMPLING)
    if sampling and cfg.dropout_p > 0 and rng is None:
        raise ConfigError("mcdrop sampling requires a generator")

    def emit(name, t):
        if hook is not None:
            hook(name, tuple(t.shape[-2:]))
        return t

    n_stages = len(cfg.encoder_channels) - 1
    model.calls["encoder"] += 1
    h = x
    skips = []
    for i in range(1, n_stages + 1):
        h = emit(f"enc{i}.conv", _conv_bn_elu(model, f"enc{i}", h, mode))
        skips.append(h)
        h = emit(f"enc{i}.pool", ad.maxpool1d(h, 2, 2))
    h = emit("bottleneck.conv", _conv_bn_elu(model, "bottleneck", h, mode))

    model.calls["decoder"] += 1
    hidden = []
    for i, skip in enumerate(reversed(skips), start=1):
        h = emit(f"dec{i}.upsample", ad.upsample_nearest(h, skip.shape[-1]))
        h = emit(f"dec{i}.up_conv", _conv_bn_elu(model, f"dec{i}.up_conv", h, mode))
        h = emit(f"dec{i}.concat", ad.concat_channels(h, skip))
        h = emit(f"dec{i}.merge_conv", _conv_bn_elu(model, f"dec{i}.merge_conv", h, mode))
        if cfg.variant == MCDROP:
            h = ad.dropout(h, cfg.dropout_p, mode if sampling else ad.EVAL, rng)
        hidden.append(h)

    logits = []
    if cfg.variant == EARLY_EXIT:
        for i, hi in enumerate(hidden[:-1], start=1):
            u = emit(f"exit{i}.upsample", ad.upsample_nearest(hi, cfg.input_length))
            logits.append(emit(f"exit{i}.conv", _conv(model, f"exit{i}.conv", u)))
    out = emit("head.conv1", ad.elu(_conv(model, "head.conv1", hidden[-1])))
    logits.append(emit("head.conv2", _conv(model, "head.conv2", out)))
    return ExitBundle(logits)
