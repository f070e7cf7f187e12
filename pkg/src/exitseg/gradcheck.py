"""Finite-difference verification of every differentiable operator.

Each case builds small random float64 operands, projects the operator's
output onto a fixed random tensor to get a scalar, and compares
:func:`backward` against central differences for every operand.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import losses
from .autodiff import BatchNormState, Tensor, finite_diff_grad

TOLERANCE = 1e-4
EPS = 1e-5


@dataclass
class CheckResult:
    op: str
    max_rel_error: float
    passed: bool
    seconds: float


@dataclass
class GradCase:
    op: str
    shapes: tuple  # operand shapes
    fn: Callable  # (*tensors) -> Tensor


def _rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / scale).max()) if a.size else 0.0


def _labels(shape, seed=7):
    return np.random.default_rng(seed).integers(0, 2, size=shape)


def _bn_train(x, g, b):
    return ad.batchnorm1d(x, g, b, BatchNormState.fresh(x.shape[-2], np.float64), ad.TRAIN)


def _dropout(x):
    return ad.dropout(x, 0.3, ad.TRAIN, np.random.default_rng(3))


def default_cases() -> list[GradCase]:
    return [
        GradCase("conv1d", ((2, 3, 8), (4, 3, 4), (4,)), lambda x, w, b: ad.conv1d(x, w, b, 1, 2)),
        GradCase("maxpool1d", ((2, 3, 8),), lambda x: ad.maxpool1d(x, 2, 2)),
        GradCase("upsample_nearest", ((2, 3, 5),), lambda x: ad.upsample_nearest(x, 11)),
        GradCase("batchnorm1d", ((3, 2, 6), (2,), (2,)), _bn_train),
        GradCase("elu", ((2, 4, 6),), ad.elu),
        GradCase("dropout", ((2, 3, 6),), _dropout),
        GradCase("concat_channels", ((2, 3, 5), (2, 2, 5)), ad.concat_channels),
        GradCase("softmax_classes", ((2, 3, 6),), ad.softmax_classes),
        GradCase("cross_entropy", ((3, 2, 7),), lambda z: losses.cross_entropy(z, _labels((3, 7)))),
        GradCase("dice_loss", ((3, 2, 7),), lambda z: losses.dice_loss(z, _labels((3, 7)), 1.0)),
    ]


def check_case(case: GradCase, seed: int = 0, eps: float = EPS, tol: float = TOLERANCE) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    operands = [rng.standard_normal(s) for s in case.shapes]
    probe = {}

    def scalar(*arrays):
        out = case.fn(*arrays)
        if out.data.size == 1:
            return out.sum()
        if "w" not in probe:
            probe["w"] = np.random.default_rng(seed + 1).standard_normal(out.shape)
        return (out * Tensor(probe["w"])).sum()

    leaves = [Tensor(a.copy(), requires_grad=True, dtype=np.float64) for a in operands]
    ad.backward(scalar(*leaves))
    worst = 0.0
    for i, leaf in enumerate(leaves):
        def f(t, i=i):
            args = [Tensor(a, dtype=np.float64) for a in operands]
            args[i] = t
            return scalar(*args)

        numeric = finite_diff_grad(f, Tensor(operands[i], dtype=np.float64), eps).data
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(numeric)
        worst = max(worst, _rel_error(analytic, numeric))
    return CheckResult(case.op, worst, worst < tol, time.perf_counter() - t0)


def run_gradcheck(cases: list[GradCase] | None = None, seed: int = 0) -> list[CheckResult]:
    return [check_case(c, seed) for c in (cases if cases is not None else default_cases())]


def format_results(results: list[CheckResult]) -> str:
    width = max(len(r.op) for r in results)
    lines = [f"{'op'.ljust(width)}  max_rel_error  status"]
    for r in results:
        lines.append(f"{r.op.ljust(width)}  {r.max_rel_error:13.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines) + "\n"
