"""Synthetic EEG-like recordings with labelled artifacts, and the pipeline
that turns them into train/validation/test segment sets.

Background is pink noise plus alpha (10 Hz) and beta (20 Hz) rhythms and
60 Hz mains hum.  Artifact archetypes, amplitudes relative to the
background standard deviation:

* eye: 0.5-2 Hz half-sine lobes, 3-5x
* muscle: 20-50 Hz band-limited noise, 2-4x
* electrode: step offset or flat line
* chewing: muscle-like bursts gated at 1-2 Hz, 2-4x
* shiver: 5-8 Hz tremor, 2-4x

Each artifact run lasts U(0.5 s, 6 s).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import filters
from .data import (FS, SEGMENT_SECONDS, Annotation, ArtifactKind, Recording, Segment, augment,
                   segment, split_dataset)
from .errors import ConfigError
from .seeding import rng_for

DEFAULT_RATES = {"eye": 0.8, "muscle": 0.8, "electrode": 0.3, "chewing": 0.5, "shiver": 0.5}


@dataclass
class SynthSpec:
    n_patients: int = 20
    minutes_per_patient: float = 2.0
    channels_per_patient: int = 1
    fs_native: float = 256.0
    # events per minute, per kind
    artifact_rates: dict = field(default_factory=lambda: dict(DEFAULT_RATES))
    min_artifact_s: float = 0.5
    max_artifact_s: float = 6.0
    line_noise: float = 0.5
    flatline_fraction: float = 0.7

    def validate(self) -> None:
        if self.n_patients < 1 or self.minutes_per_patient <= 0 or self.channels_per_patient < 1:
            raise ConfigError("generator spec needs at least one patient, channel and a positive duration")
        if not self.fs_native > 2 * 60:
            raise ConfigError("native sampling rate must exceed 120 Hz")
        unknown = set(self.artifact_rates) - {k.label for k in ArtifactKind if k != ArtifactKind.NONE}
        if unknown:
            raise ConfigError(f"unknown artifact kinds in rates: {sorted(unknown)}")
        if any(r < 0 for r in self.artifact_rates.values()):
            raise ConfigError("artifact rates must be non-negative")
        if not 0 < self.min_artifact_s <= self.max_artifact_s <= SEGMENT_SECONDS:
            raise ConfigError("artifact durations must satisfy 0 < min <= max <= segment length")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SynthResult:
    recordings: list
    annotations: list


def pink_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-variance 1/f noise by spectral shaping of white noise."""
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(spec.size)
    f[0] = 1
    x = np.fft.irfft(spec / np.sqrt(f), n)
    return (x - x.mean()) / x.std()


def _bandlimited(n: int, lo: float, hi: float, fs: float, rng) -> np.ndarray:
    w = rng.standard_normal(n + 64)
    y = filters.apply_filter(w, filters.design_bandpass(lo, hi, fs, 2), filters.FORWARD)[64:]
    return y / (y.std() + 1e-12)


def _artifact_waveform(kind: ArtifactKind, n: int, fs: float, sigma: float, rng) -> tuple[str, np.ndarray]:
    t = np.arange(n) / fs
    if kind == ArtifactKind.EYE:
        f = rng.uniform(0.5, 2.0)
        amp = rng.uniform(3, 5) * sigma
        return "add", rng.choice([-1.0, 1.0]) * amp * np.abs(np.sin(np.pi * f * t + rng.uniform(0, 0.3)))
    if kind == ArtifactKind.MUSCLE:
        return "add", rng.uniform(2, 4) * sigma * _bandlimited(n, 20, 50, fs, rng)
    if kind == ArtifactKind.CHEWING:
        f = rng.uniform(1, 2)
        gate = (np.sin(2 * np.pi * f * t) > 0).astype(float)
        return "add", rng.uniform(2, 4) * sigma * gate * _bandlimited(n, 20, 50, fs, rng)
    if kind == ArtifactKind.SHIVER:
        f = rng.uniform(5, 8)
        env = 1 + 0.3 * np.sin(2 * np.pi * rng.uniform(0.2, 1.0) * t)
        return "add", rng.uniform(2, 4) * sigma * np.sqrt(2) * env * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    if kind == ArtifactKind.ELECTRODE:
        return "electrode", np.full(n, rng.choice([-1.0, 1.0]) * rng.uniform(4, 8) * sigma)
    raise ConfigError(f"no waveform for {kind}")


def _place(n_events: int, duration: float, spec: SynthSpec, rng) -> list[tuple[float, float]]:
    """Non-overlapping intervals on the 250 Hz grid.  Pieces cut by the
    10 s window grid are kept at least two samples long."""
    tick = 1.0 / FS
    placed: list[tuple[float, float]] = []
    for _ in range(n_events):
        for _attempt in range(50):
            length = rng.uniform(spec.min_artifact_s, spec.max_artifact_s)
            start = rng.uniform(0, duration - length)
            s = round(start / tick) * tick
            e = round((start + length) / tick) * tick
            if e > duration or any(s < pe + 0.5 and e > ps - 0.5 for ps, pe in placed):
                continue
            cut = np.ceil(s / SEGMENT_SECONDS) * SEGMENT_SECONDS
            if s < cut < e and (cut - s < 2 * tick or e - cut < 2 * tick):
                continue
            placed.append((s, e))
            break
    return sorted(placed)


def generate_recording(spec: SynthSpec, patient_id: int, channel_id: int, seed: int):
    rng = rng_for(seed, "recording", patient_id, channel_id)
    fs = spec.fs_native
    duration = spec.minutes_per_patient * 60.0
    n = int(round(duration * fs))
    t = np.arange(n) / fs
    x = pink_noise(n, rng)
    x += 0.6 * np.sin(2 * np.pi * rng.uniform(9, 11) * t + rng.uniform(0, 2 * np.pi))
    x += 0.3 * np.sin(2 * np.pi * rng.uniform(18, 22) * t + rng.uniform(0, 2 * np.pi))
    x += spec.line_noise * np.sin(2 * np.pi * 60.0 * t + rng.uniform(0, 2 * np.pi))
    sigma = float(np.std(x))

    kinds = []
    for name in sorted(spec.artifact_rates):
        count = rng.poisson(spec.artifact_rates[name] * spec.minutes_per_patient)
        kinds += [ArtifactKind.parse(name)] * int(count)
    rng.shuffle(kinds)
    intervals = _place(len(kinds), duration, spec, rng)
    annotations = []
    for kind, (s, e) in zip(kinds, intervals):
        i0, i1 = int(np.ceil(s * fs)), min(n, int(np.ceil(e * fs)))
        how, wave = _artifact_waveform(kind, i1 - i0, fs, sigma, rng)
        if how == "add":
            x[i0:i1] += wave
        elif rng.random() < spec.flatline_fraction:
            x[i0:i1] = x[i0] if i0 < n else 0.0
        else:
            x[i0:i1] += wave
        annotations.append(Annotation(patient_id, channel_id, round(s, 6), round(e, 6), kind))
    return Recording(patient_id, channel_id, fs, x), annotations


def synth_generate(spec: SynthSpec, seed: int) -> SynthResult:
    """Generate every (patient, channel) recording; recording generators are
    derived from ``(seed, patient_id, channel_id)``."""
    spec.validate()
    recordings, annotations = [], []
    for pid in range(spec.n_patients):
        for ch in range(spec.channels_per_patient):
            rec, ann = generate_recording(spec, pid, ch, seed)
            recordings.append(rec)
            annotations.extend(ann)
    return SynthResult(recordings, annotations)


def preprocess_recording(rec: Recording, normalize: bool = True) -> Recording:
    """Resample to 250 Hz, band-pass 0.3-40 Hz, notch 60 Hz, then scale to
    unit robust deviation (median absolute deviation)."""
    x = filters.preprocess(rec.samples, rec.fs, FS)
    if normalize:
        mad = np.median(np.abs(x - np.median(x))) * 1.4826
        x = (x - np.median(x)) / (mad if mad > 0 else 1.0)
    return Recording(rec.patient_id, rec.channel_id, FS, x)


@dataclass
class DatasetSplits:
    train: list
    val: list
    test: list
    annotations: list

    def manifest(self) -> dict:
        def describe(segs):
            return {
                "segments": len(segs),
                "patients": sorted({int(s.patient_id) for s in segs}),
                "artifact_fraction": float(np.mean([s.y.mean() for s in segs])) if segs else 0.0,
            }
        return {"train": describe(self.train), "val": describe(self.val), "test": describe(self.test)}


def build_dataset(spec: SynthSpec, seed: int, shifts_per_artifact: int = 1,
                  mixes_per_artifact: int = 1, ratios=(0.8, 0.1, 0.1)) -> DatasetSplits:
    """Generate, preprocess, segment, augment and split."""
    result = synth_generate(spec, seed)
    segments: list[Segment] = []
    for rec in result.recordings:
        segments += segment(preprocess_recording(rec), result.annotations)
    segments = augment(segments, rng_for(seed, "augment"), shifts_per_artifact, mixes_per_artifact)
    train, val, test = split_dataset(segments, ratios, rng_for(seed, "split"))
    return DatasetSplits(train, val, test, result.annotations)
