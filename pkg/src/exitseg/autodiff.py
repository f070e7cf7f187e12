"""Dense tensors with reverse-mode automatic differentiation.

Only the operator set needed by the temporal U-Net is provided: stride-1
convolution, max pooling, nearest-neighbour upsampling, batch normalisation,
ELU, dropout, channel concatenation, class softmax and cross entropy, plus a
handful of elementwise/reduction helpers used to assemble losses.

Tensors are rank <= 3.  Sequence operators accept either ``C x L`` or
``N x C x L`` layouts; the channel axis is always ``-2`` and time is ``-1``.

Every operator records a :class:`Node` on its output.  :func:`backward`
collects the nodes reachable from a scalar root into a :class:`Tape` in
topological order and runs the backward rules once each.  There is no global
state: graphs are owned by the tensors that reference them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataError, ShapeError

MAX_RANK = 3

TRAIN = "train"
EVAL = "eval"
EVAL_SAMPLING = "eval_sampling"
MODES = (TRAIN, EVAL, EVAL_SAMPLING)


class Node:
    """One recorded operation: its operands and a rule mapping the output
    gradient to one gradient per operand (``None`` for constants)."""

    __slots__ = ("op", "parents", "backward_fn")

    def __init__(self, op: str, parents: tuple, backward_fn: Callable):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "fc":
            arr = arr.astype(np.float32 if dtype is None else dtype)
        if arr.ndim > MAX_RANK:
            raise ShapeError("Tensor", "rank above 3 is not supported", expected="<=3", got=arr.ndim)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # arithmetic (same-shape or scalar operands only)
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


@dataclass
class Tape:
    """Operation nodes reachable from a root, in topological order."""

    nodes: list = field(default_factory=list)
    outputs: list = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        tape = cls()
        seen: set[int] = set()
        # iterative post-order DFS; deep U-Net graphs overflow recursion otherwise
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if t.node is None:
                continue
            if expanded:
                tape.nodes.append(t.node)
                tape.outputs.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in t.node.parents:
                if p is not None and p.node is not None and id(p) not in seen:
                    stack.append((p, False))
        return tape

    def __len__(self) -> int:
        return len(self.nodes)


def backward(root: Tensor) -> Tape:
    """Accumulate d(root)/d(t) into ``t.grad`` for every leaf ``t`` with
    ``requires_grad``.  Returns the tape that was executed."""
    if root.data.size != 1:
        raise ShapeError("backward", "root must be a scalar", expected=(), got=root.shape)
    tape = Tape.from_root(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for out, node in zip(reversed(tape.outputs), reversed(tape.nodes)):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        parent_grads = node.backward_fn(g)
        for p, pg in zip(node.parents, parent_grads):
            if p is None or pg is None or not p.requires_grad:
                continue
            if p.node is None:
                # leaf: accumulate across uses
                if p.grad is None:
                    p.grad = np.array(pg, dtype=p.data.dtype, copy=True)
                else:
                    p.grad += pg
            elif id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    if root.node is None and root.requires_grad:
        root.grad = np.ones_like(root.data) if root.grad is None else root.grad + 1
    return tape


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, op: str, parents: Sequence, backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if any(p is not None and p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(op, tuple(parents), backward_fn)
    return out


def _as3d(x: np.ndarray) -> np.ndarray:
    return x[None] if x.ndim == 2 else x


def _seq_check(op: str, t: Tensor) -> None:
    if t.data.ndim not in (2, 3):
        raise ShapeError(op, "expected C x L or N x C x L input", expected="rank 2 or 3", got=t.shape)


# --------------------------------------------------------------------------
# elementwise and reductions


def _pair(a, b):
    # constants adopt the tensor operand's dtype so float32 graphs stay float32
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, as_tensor(b, like=a)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return as_tensor(a, like=b), b
    return as_tensor(a), as_tensor(b)


def _check_same(op, a, b):
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeError(op, "operands must match or be scalar", expected=a.shape, got=b.shape)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_same("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_same("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_same("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, "mul", (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_same("div", a, b)
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _result(out, "div", (a, b), bw)


def log(x: Tensor) -> Tensor:
    def bw(g):
        return (g / x.data,)

    return _result(np.log(x.data), "log", (x,), bw)


def tsum(x: Tensor, axis=None) -> Tensor:
    out = x.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _result(np.asarray(out), "sum", (x,), bw)


def mean(x: Tensor, axis=None) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis) * (1.0 / count)


def select_channel(x: Tensor, index: int) -> Tensor:
    """Take channel ``index`` along the channel axis (-2), dropping it."""
    _seq_check("select_channel", x)

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[..., index, :] = g
        return (gx,)

    return _result(np.ascontiguousarray(x.data[..., index, :]), "select_channel", (x,), bw)


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, alpha * np.expm1(np.minimum(x.data, 0)))

    def bw(g):
        return (g * np.where(pos, 1.0, out + alpha).astype(x.dtype),)

    return _result(out.astype(x.dtype, copy=False), "elu", (x,), bw)


# --------------------------------------------------------------------------
# sequence operators


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           pad_left: int = 0, pad_right: int = 0) -> Tensor:
    """Stride-1 1-D convolution (cross-correlation) with zero padding.

    Output length is ``L + pad_left + pad_right - K + 1``.
    """
    _seq_check("conv1d", x)
    if weight.data.ndim != 3:
        raise ShapeError("conv1d", "weight must be C_out x C_in x K", got=weight.shape)
    c_out, c_in, k = weight.shape
    xd = _as3d(x.data)
    n, c, length = xd.shape
    if c != c_in:
        raise ShapeError("conv1d", "input channels do not match weight", expected=c_in, got=c)
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError("conv1d", "bias must have C_out entries", expected=(c_out,), got=bias.shape)
    padded_len = length + pad_left + pad_right
    if k > padded_len:
        raise ShapeError("conv1d", "kernel longer than padded input", expected=f"<={padded_len}", got=k)
    l_out = padded_len - k + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (pad_left, pad_right))) if pad_left or pad_right else xd
    # all taps in one gemm over the padded batch, then shifted adds;
    # avoids materialising the (C_in*K, N*L_out) im2col matrix
    flat = np.ascontiguousarray(xp.transpose(1, 0, 2)).reshape(c_in, n * padded_len)
    taps = np.ascontiguousarray(weight.data.transpose(2, 0, 1)).reshape(k * c_out, c_in)
    y = (taps @ flat).reshape(k, c_out, n, padded_len)
    acc = y[0, :, :, :l_out].copy()
    for j in range(1, k):
        acc += y[j, :, :, j:j + l_out]
    if bias is not None:
        acc += bias.data[:, None, None]
    out = np.ascontiguousarray(acc.transpose(1, 0, 2))
    if x.data.ndim == 2:
        out = out[0]

    def bw(g):
        g3 = _as3d(g)
        g2 = g3.transpose(1, 0, 2).reshape(c_out, n * l_out)
        w2 = weight.data.reshape(c_out, c_in * k)
        gw = gx = gb = None
        if weight.requires_grad:
            # im2col: (C_in*K, N*L_out) so the batch reduces in one matmul
            cols = sliding_window_view(xp, k, axis=2).transpose(1, 3, 0, 2).reshape(c_in * k, n * l_out)
            gw = (g2 @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g3.sum(axis=(0, 2))
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape(c_in, k, n, l_out)
            gxp = np.zeros((n, c_in, padded_len), dtype=xd.dtype)
            for j in range(k):
                gxp[:, :, j:j + l_out] += gcols[:, j].transpose(1, 0, 2)
            gx = gxp[:, :, pad_left:pad_left + length]
            if x.data.ndim == 2:
                gx = gx[0]
        return gx, gw, gb

    return _result(out, "conv1d", (x, weight, bias), bw)


def maxpool1d(x: Tensor, kernel: int = 2, stride: int = 2) -> Tensor:
    _seq_check("maxpool1d", x)
    xd = _as3d(x.data)
    length = xd.shape[-1]
    if length < kernel:
        raise ShapeError("maxpool1d", "input shorter than pooling window", expected=f">={kernel}", got=length)
    l_out = (length - kernel) // stride + 1
    windows = sliding_window_view(xd, kernel, axis=2)[:, :, ::stride][:, :, :l_out]
    arg = windows.argmax(axis=-1)  # first maximal index on ties
    idx = arg + (np.arange(l_out) * stride)[None, None, :]
    out = np.take_along_axis(xd, idx, axis=2)
    if x.data.ndim == 2:
        out = out[0]

    def bw(g):
        g3 = _as3d(g)
        gx = np.zeros_like(xd)
        if stride >= kernel:
            np.put_along_axis(gx, idx, g3, axis=2)
        else:
            nn, cc, _ = np.indices(idx.shape)
            np.add.at(gx, (nn, cc, idx), g3)
        return (gx[0] if x.data.ndim == 2 else gx,)

    return _result(out, "maxpool1d", (x,), bw)


def upsample_nearest(x: Tensor, target_len: int) -> Tensor:
    """Nearest-neighbour resize along time: output j copies input
    ``floor(j * L / target_len)``."""
    _seq_check("upsample_nearest", x)
    length = x.shape[-1]
    if target_len < 1 or length < 1:
        raise ShapeError("upsample_nearest", "empty input or target", got=(length, target_len))
    idx = (np.arange(target_len) * length) // target_len
    out = x.data[..., idx]
    src, starts = np.unique(idx, return_index=True)

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[..., src] = np.add.reduceat(g, starts, axis=-1)
        return (gx,)

    return _result(out, "upsample_nearest", (x,), bw)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _seq_check("concat_channels", a)
    _seq_check("concat_channels", b)
    if a.shape[-1] != b.shape[-1] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("concat_channels", "lengths/batch must match", expected=a.shape, got=b.shape)
    ca = a.shape[-2]
    out = np.concatenate([a.data, b.data], axis=-2)

    def bw(g):
        return g[..., :ca, :], g[..., ca:, :]

    return _result(out, "concat_channels", (a, b), bw)


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm1d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                mode: str = TRAIN, momentum: float = 0.1, epsilon: float = 1e-5) -> Tensor:
    """Per-channel normalisation over the batch and time axes.

    In ``train`` mode batch statistics are used and ``state`` is updated in
    place (unbiased variance for the running estimate); otherwise the running
    statistics are used.
    """
    _seq_check("batchnorm1d", x)
    if not epsilon > 0:
        raise ConfigError(f"batchnorm1d: epsilon must be positive, got {epsilon}")
    if mode not in MODES:
        raise ConfigError(f"batchnorm1d: unknown mode {mode!r}")
    xd = _as3d(x.data)
    c = xd.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("batchnorm1d", "gamma/beta must have one entry per channel", expected=(c,), got=gamma.shape)
    gam = gamma.data[None, :, None]

    if mode == TRAIN:
        m = xd.shape[0] * xd.shape[2]
        mu = xd.mean(axis=(0, 2), keepdims=True)
        centered = xd - mu
        var = (centered * centered).mean(axis=(0, 2), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + epsilon)
        xhat = centered * inv_std
        unbiased = var.ravel() * (m / max(m - 1, 1))
        state.mean[...] = (1 - momentum) * state.mean + momentum * mu.ravel()
        state.var[...] = (1 - momentum) * state.var + momentum * unbiased
        out = (gam * xhat + beta.data[None, :, None]).astype(xd.dtype, copy=False)

        def bw(g):
            g3 = _as3d(g)
            gg = gb = gx = None
            if gamma.requires_grad:
                gg = (g3 * xhat).sum(axis=(0, 2))
            if beta.requires_grad:
                gb = g3.sum(axis=(0, 2))
            if x.requires_grad:
                dxhat = g3 * gam
                s1 = dxhat.sum(axis=(0, 2), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2), keepdims=True)
                gx = (inv_std / m) * (m * dxhat - s1 - xhat * s2)
                if x.data.ndim == 2:
                    gx = gx[0]
            return gx, gg, gb
    else:
        inv_std = (1.0 / np.sqrt(state.var + epsilon)).astype(xd.dtype)[None, :, None]
        xhat = (xd - state.mean.astype(xd.dtype)[None, :, None]) * inv_std
        out = gam * xhat + beta.data[None, :, None]

        def bw(g):
            g3 = _as3d(g)
            gx = g3 * gam * inv_std
            return (gx[0] if x.data.ndim == 2 else gx,
                    (g3 * xhat).sum(axis=(0, 2)),
                    g3.sum(axis=(0, 2)))

    if x.data.ndim == 2:
        out = out[0]
    return _result(out, "batchnorm1d", (x, gamma, beta), bw)


def dropout(x: Tensor, p: float, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout.  Active in ``train`` and ``eval_sampling`` modes."""
    if not 0 <= p < 1:
        raise ConfigError(f"dropout: probability must lie in [0, 1), got {p}")
    if mode not in MODES:
        raise ConfigError(f"dropout: unknown mode {mode!r}")
    if mode == EVAL or p == 0:
        return x
    if rng is None:
        raise ConfigError("dropout: an explicit generator is required when sampling")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) * x.dtype.type(1.0 / (1.0 - p))

    def bw(g):
        return (g * keep,)

    return _result(x.data * keep, "dropout", (x,), bw)


def softmax_classes(logits: Tensor) -> Tensor:
    """Softmax over the class axis (-2), independently per time point."""
    _seq_check("softmax_classes", logits)
    z = logits.data - logits.data.max(axis=-2, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-2, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-2, keepdims=True)),)

    return _result(s, "softmax_classes", (logits,), bw)


def _labels_check(op: str, logits: Tensor, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    expected = logits.shape[:-2] + logits.shape[-1:]
    if labels.shape != expected:
        raise ShapeError(op, "labels must match logits without the class axis", expected=expected, got=labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[-2]):
        raise DataError(f"{op}: labels must lie in [0, {logits.shape[-2] - 1}]")
    if not np.all(labels == np.round(labels)):
        raise DataError(f"{op}: labels must be integers")
    return labels.astype(np.int64)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over all time points (and batch) of ``-log softmax[true class]``."""
    _seq_check("cross_entropy", logits)
    lab = _labels_check("cross_entropy", logits, labels)
    z = logits.data - logits.data.max(axis=-2, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-2, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, lab[..., None, :], axis=-2)
    count = lab.size
    loss = -picked.sum() / count

    def bw(g):
        grad = np.exp(logp)
        onehot = np.zeros_like(grad)
        np.put_along_axis(onehot, lab[..., None, :], 1.0, axis=-2)
        return ((grad - onehot) * (g / count),)

    return _result(np.asarray(loss, dtype=logits.dtype), "cross_entropy", (logits,), bw)


# --------------------------------------------------------------------------
# verification oracle


def finite_diff_grad(f: Callable[[Tensor], Tensor | float], x: Tensor, eps: float = 1e-5) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``, elementwise."""
    if not eps > 0:
        raise ConfigError("finite_diff_grad: eps must be positive")
    base = np.array(x.data, dtype=np.float64, copy=True)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)

    def value(arr):
        out = f(Tensor(arr.reshape(base.shape)))
        return float(out.data if isinstance(out, Tensor) else out)

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = value(flat)
        flat[i] = orig - eps
        lo = value(flat)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return Tensor(grad)
