"""IIR filter design (Butterworth band-pass, notch), filtering and resampling.

Band-pass design follows the textbook route: analog Butterworth low-pass
prototype, low-pass to band-pass transform at prewarped edges, bilinear
transform, then pairing conjugate poles into biquads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

from .errors import ConfigError, DataError

FORWARD = "forward"
FORWARD_BACKWARD = "forward_backward"


@dataclass(frozen=True)
class Biquad:
    """``H(z) = (b0 + b1 z^-1 + b2 z^-2) / (1 + a1 z^-1 + a2 z^-2)``."""

    b0: float
    b1: float
    b2: float
    a1: float
    a2: float

    @property
    def b(self) -> np.ndarray:
        return np.array([self.b0, self.b1, self.b2])

    @property
    def a(self) -> np.ndarray:
        return np.array([1.0, self.a1, self.a2])

    def poles(self) -> np.ndarray:
        return np.roots(self.a)


@dataclass(frozen=True)
class BiquadCascade:
    sections: tuple

    @property
    def order(self) -> int:
        return 2 * len(self.sections)

    def poles(self) -> np.ndarray:
        if not self.sections:
            return np.array([])
        return np.concatenate([s.poles() for s in self.sections])

    def is_stable(self, margin: float = 1e-6) -> bool:
        return bool(np.all(np.abs(self.poles()) < 1 - margin))

    def response(self, freqs_hz, fs: float) -> np.ndarray:
        """Complex frequency response at the given frequencies."""
        z = np.exp(1j * 2 * np.pi * np.asarray(freqs_hz, dtype=float) / fs)
        h = np.ones_like(z)
        for s in self.sections:
            h *= (s.b0 + s.b1 / z + s.b2 / z**2) / (1 + s.a1 / z + s.a2 / z**2)
        return h


def _prewarp(f_hz: float, fs: float) -> float:
    return 2 * fs * np.tan(np.pi * f_hz / fs)


def _section_from_poles(p: complex, zeros: tuple, gain: float) -> Biquad:
    z1, z2 = zeros
    return Biquad(
        b0=gain,
        b1=-gain * (z1 + z2),
        b2=gain * z1 * z2,
        a1=float(-2 * p.real),
        a2=float(abs(p) ** 2),
    )


def design_bandpass(low_hz: float = 0.3, high_hz: float = 40.0, fs: float = 250.0,
                    order: int = 2) -> BiquadCascade:
    """Butterworth band-pass built from an ``order``-pole low-pass prototype
    (``order`` biquads, band-pass order ``2*order``), unit gain at the
    geometric centre frequency."""
    if not (0 < low_hz < high_hz < fs / 2):
        raise ConfigError(f"band edges must satisfy 0 < low < high < fs/2, got {low_hz}, {high_hz}, fs={fs}")
    if order < 1:
        raise ConfigError("order must be positive")
    w1, w2 = _prewarp(low_hz, fs), _prewarp(high_hz, fs)
    w0 = np.sqrt(w1 * w2)
    bw = w2 - w1
    k = np.arange(order)
    proto = np.exp(1j * np.pi * (2 * k + order + 1) / (2 * order))
    analog = []
    for p in proto:
        disc = np.sqrt((p * bw) ** 2 - 4 * w0**2 + 0j)
        analog += [(p * bw + disc) / 2, (p * bw - disc) / 2]
    c = 2 * fs
    digital = np.array([(c + s) / (c - s) for s in analog])

    upper = sorted((p for p in digital if p.imag > 1e-12), key=lambda p: (round(p.real, 12), p.imag))
    real = sorted(p.real for p in digital if abs(p.imag) <= 1e-12)
    pairs = [(p, None) for p in upper]
    for i in range(0, len(real), 2):
        pairs.append((real[i], real[i + 1] if i + 1 < len(real) else None))

    # order zeros at z=+1 (from s=0) and order at z=-1 (from s=inf): one of each per section
    sections = []
    for p, q in pairs:
        if q is None and np.iscomplexobj(p):
            sections.append(_section_from_poles(complex(p), (1.0, -1.0), 1.0))
        else:
            a1 = -(p + (q if q is not None else 0.0))
            a2 = p * (q if q is not None else 0.0)
            sections.append(Biquad(1.0, 0.0, -1.0, float(a1), float(a2)))
    cascade = BiquadCascade(tuple(sections))

    center = 2 * fs * np.arctan(w0 / (2 * fs)) / (2 * np.pi)
    g = abs(cascade.response([center], fs)[0])
    per = (1.0 / g) ** (1.0 / len(sections))
    sections = [Biquad(s.b0 * per, s.b1 * per, s.b2 * per, s.a1, s.a2) for s in sections]
    return BiquadCascade(tuple(sections))


def design_notch(f0_hz: float = 60.0, q: float = 30.0, fs: float = 250.0) -> BiquadCascade:
    """Second-order notch with zeros on the unit circle at ``f0``."""
    if not (0 < f0_hz < fs / 2):
        raise ConfigError(f"notch frequency must satisfy 0 < f0 < fs/2, got {f0_hz}")
    if not q > 0:
        raise ConfigError("notch q must be positive")
    w0 = 2 * np.pi * f0_hz / fs
    alpha = np.sin(w0) / (2 * q)
    a0 = 1 + alpha
    cw = np.cos(w0)
    return BiquadCascade((Biquad(1 / a0, -2 * cw / a0, 1 / a0, -2 * cw / a0, (1 - alpha) / a0),))


def chain(*cascades: BiquadCascade) -> BiquadCascade:
    return BiquadCascade(tuple(s for c in cascades for s in c.sections))


def _run_cascade(x: np.ndarray, filt: BiquadCascade) -> np.ndarray:
    y = x
    for s in filt.sections:
        # lfilter is direct form II transposed
        y = lfilter(s.b, s.a, y)
    return y


def df2t_reference(x, section: Biquad) -> np.ndarray:
    """Sample-by-sample direct form II transposed; slow, kept as a check."""
    y = np.empty(len(x))
    z1 = z2 = 0.0
    for n, xn in enumerate(np.asarray(x, dtype=float)):
        yn = section.b0 * xn + z1
        z1 = section.b1 * xn - section.a1 * yn + z2
        z2 = section.b2 * xn - section.a2 * yn
        y[n] = yn
    return y


def apply_filter(signal, filt: BiquadCascade, mode: str = FORWARD_BACKWARD) -> np.ndarray:
    """Filter ``signal`` through the cascade.

    ``forward_backward`` gives zero phase: the input is extended by odd
    reflection of ``3 * order`` samples at both ends, filtered forward, then
    reversed and filtered again.
    """
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1:
        raise DataError("apply_filter expects a 1-D signal")
    if mode == FORWARD:
        return _run_cascade(x, filt)
    if mode != FORWARD_BACKWARD:
        raise ConfigError(f"unknown filter mode {mode!r}")
    pad = 3 * filt.order
    if x.size <= pad:
        raise DataError(f"signal of length {x.size} too short for forward_backward (needs > {pad})")
    if pad:
        left = 2 * x[0] - x[pad:0:-1]
        right = 2 * x[-1] - x[-2:-pad - 2:-1]
        x = np.concatenate([left, x, right])
    y = _run_cascade(x, filt)
    y = _run_cascade(y[::-1], filt)[::-1]
    return y[pad:len(y) - pad] if pad else y


def resample(signal, fs_in: float, fs_out: float = 250.0) -> np.ndarray:
    """Linear interpolation onto a uniform ``fs_out`` grid starting at t=0."""
    if not (fs_in > 0 and fs_out > 0):
        raise ConfigError("sampling rates must be positive")
    x = np.asarray(signal, dtype=np.float64)
    if fs_in == fs_out:
        return x.copy()
    n_out = int(np.floor(len(x) * fs_out / fs_in + 1e-9))
    t_out = np.arange(n_out) * (fs_in / fs_out)
    return np.interp(t_out, np.arange(len(x)), x)


def preprocess(signal, fs_in: float, fs_out: float = 250.0, band=(0.3, 40.0),
               notch_hz: float = 60.0, notch_q: float = 30.0) -> np.ndarray:
    """Resample, band-pass and notch, all zero-phase."""
    x = resample(signal, fs_in, fs_out)
    filt = chain(design_bandpass(band[0], band[1], fs_out), design_notch(notch_hz, notch_q, fs_out))
    return apply_filter(x, filt, FORWARD_BACKWARD)
