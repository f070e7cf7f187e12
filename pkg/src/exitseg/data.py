"""Recordings, labelled segments, augmentation, patient-level splits and the
binary dataset format.

Dataset file layout (little-endian)::

    b"E4GD" | version u32 | count u32
    per segment: patient_id u32 | artifact_kind u8 | T x f32 signal | mask bits

The mask is packed MSB-first (``numpy.packbits``) into ``ceil(T/8)`` bytes,
313 bytes for T=2500 with the trailing 4 bits zero.
"""

from __future__ import annotations

import enum
import io
import struct
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CheckpointError, ConfigError, DataError

FS = 250.0
SEGMENT_SECONDS = 10.0
SEGMENT_LENGTH = 2500

DATASET_MAGIC = b"E4GD"
DATASET_VERSION = 1


class ArtifactKind(enum.IntEnum):
    NONE = 0
    EYE = 1
    MUSCLE = 2
    ELECTRODE = 3
    CHEWING = 4
    SHIVER = 5

    @classmethod
    def parse(cls, name) -> "ArtifactKind":
        if isinstance(name, (int, np.integer)):
            return cls(int(name))
        try:
            return cls[str(name).upper()]
        except KeyError:
            raise DataError(f"unknown artifact kind {name!r}") from None

    @property
    def label(self) -> str:
        return self.name.lower()


@dataclass(frozen=True)
class Annotation:
    patient_id: int
    channel_id: int
    start_s: float
    end_s: float
    kind: ArtifactKind


@dataclass
class Recording:
    patient_id: int
    channel_id: int
    fs: float
    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if not self.fs > 0:
            raise DataError("sampling rate must be positive")
        if self.samples.size == 0:
            raise DataError("recording has no samples")

    @property
    def duration(self) -> float:
        return self.samples.size / self.fs


@dataclass
class Segment:
    x: np.ndarray
    y: np.ndarray
    patient_id: int
    channel_id: int = 0
    artifact_kind: ArtifactKind = ArtifactKind.NONE

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float32)
        self.y = np.asarray(self.y, dtype=np.uint8)
        if self.x.shape != self.y.shape:
            raise DataError(f"signal {self.x.shape} and mask {self.y.shape} differ in length")


# --------------------------------------------------------------------------
# run helpers


def runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Half-open ``(start, stop)`` index ranges of consecutive ones."""
    m = np.concatenate([[0], np.asarray(mask, dtype=np.int8), [0]])
    d = np.diff(m)
    return list(zip(np.flatnonzero(d == 1).tolist(), np.flatnonzero(d == -1).tolist()))


def circular_runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Runs of ones treating the mask as circular; a wrapped run is reported
    once with ``stop > len(mask)``."""
    mask = np.asarray(mask)
    r = runs(mask)
    n = mask.size
    if len(r) >= 2 and r[0][0] == 0 and r[-1][1] == n:
        first = r.pop(0)
        last = r.pop()
        r.append((last[0], n + first[1]))
    return r


def valid_runs(mask: np.ndarray, circular: bool = False) -> bool:
    """Every artifact run has length ``s`` with ``1 < s <= T``."""
    found = circular_runs(mask) if circular else runs(mask)
    return all(1 < stop - start <= len(mask) for start, stop in found)


# --------------------------------------------------------------------------
# segmentation


def segment(recording: Recording, annotations: Iterable[Annotation],
            seconds: float = SEGMENT_SECONDS) -> list[Segment]:
    """Cut a preprocessed recording into non-overlapping windows with
    per-time-point masks; the trailing partial window is dropped."""
    fs = recording.fs
    n = recording.samples.size
    win = int(round(seconds * fs))
    mask = np.zeros(n, dtype=np.uint8)
    kinds = np.zeros(n, dtype=np.uint8)
    for a in annotations:
        if (a.patient_id, a.channel_id) != (recording.patient_id, recording.channel_id):
            continue
        if a.start_s < 0 or a.end_s > recording.duration + 1e-9 or a.end_s <= a.start_s:
            raise DataError(f"annotation {a.start_s}-{a.end_s}s outside recording of {recording.duration}s")
        i0, i1 = int(round(a.start_s * fs)), int(round(a.end_s * fs))
        mask[i0:i1] = 1
        kinds[i0:i1] = int(a.kind)
    segments = []
    for k in range(n // win):
        sl = slice(k * win, (k + 1) * win)
        m = mask[sl]
        if m.any():
            counts = np.bincount(kinds[sl][m == 1], minlength=len(ArtifactKind))
            kind = ArtifactKind(int(counts.argmax()))
        else:
            kind = ArtifactKind.NONE
        segments.append(Segment(recording.samples[sl], m.copy(), recording.patient_id,
                                recording.channel_id, kind))
    return segments


# --------------------------------------------------------------------------
# augmentation


def augment_shift(seg: Segment, shift: int, rng: np.random.Generator | None = None) -> Segment:
    """Circularly shift signal and mask together by ``shift`` samples."""
    del rng  # the shift is chosen by the caller
    n = seg.x.size
    if abs(shift) >= n:
        raise ConfigError(f"|shift| must be below the segment length {n}")
    return replace(seg, x=np.roll(seg.x, shift), y=np.roll(seg.y, shift))


def augment_mix(clean: Segment, artifact: Segment, gain: float = 1.0,
                rng: np.random.Generator | None = None) -> Segment:
    """Overlay the artifact-labelled part of ``artifact`` onto a clean
    segment of the same patient and channel."""
    del rng
    if clean.patient_id != artifact.patient_id or clean.channel_id != artifact.channel_id:
        raise DataError(
            f"refusing to mix patient {artifact.patient_id}/ch {artifact.channel_id} into "
            f"patient {clean.patient_id}/ch {clean.channel_id}")
    if clean.y.any():
        raise DataError("the clean segment contains artifact labels")
    if clean.x.shape != artifact.x.shape:
        raise DataError("segments differ in length")
    if gain == 0:
        warnings.warn("augment_mix with zero gain labels a clean signal as artifact", stacklevel=2)
    overlay = np.where(artifact.y == 1, artifact.x, 0).astype(np.float32)
    return Segment(clean.x + np.float32(gain) * overlay, artifact.y.copy(), clean.patient_id,
                   clean.channel_id, artifact.artifact_kind)


def augment(segments: Sequence[Segment], rng: np.random.Generator, shifts_per_artifact: int = 1,
            mixes_per_artifact: int = 1, gain_range=(0.8, 1.2)) -> list[Segment]:
    """Balance classes by adding shifted and mixed copies of artifact
    segments.  Mixing stays within one patient and channel."""
    out = list(segments)
    by_source: dict[tuple, list[Segment]] = {}
    for s in segments:
        by_source.setdefault((s.patient_id, s.channel_id), []).append(s)
    n = segments[0].x.size if segments else SEGMENT_LENGTH
    for key in sorted(by_source):
        group = by_source[key]
        clean = [s for s in group if not s.y.any()]
        for s in (s for s in group if s.y.any()):
            for _ in range(shifts_per_artifact):
                shift = int(rng.integers(-n // 2, n // 2))
                out.append(augment_shift(s, shift))
            for _ in range(mixes_per_artifact if clean else 0):
                c = clean[int(rng.integers(len(clean)))]
                out.append(augment_mix(c, s, float(rng.uniform(*gain_range))))
    return out


# --------------------------------------------------------------------------
# splitting


def split_dataset(segments: Sequence[Segment], ratios=(0.8, 0.1, 0.1),
                  rng: np.random.Generator | None = None) -> tuple[list, list, list]:
    """Patient-independent split.  Patients are visited in shuffled order
    and each goes to the split furthest (relatively) below its target
    segment count; ties favour train, then validation."""
    ratios = np.asarray(ratios, dtype=float)
    if ratios.shape != (3,) or (ratios <= 0).any():
        raise ConfigError("ratios must be three positive numbers")
    ratios = ratios / ratios.sum()
    patients = sorted({s.patient_id for s in segments})
    if len(patients) < 3:
        raise DataError(f"need at least 3 patients for a patient-independent split, got {len(patients)}")
    sizes = {p: 0 for p in patients}
    for s in segments:
        sizes[s.patient_id] += 1
    order = list(patients)
    if rng is not None:
        order = [order[i] for i in rng.permutation(len(order))]
    targets = ratios * len(segments)
    counts = np.zeros(3)
    assigned = {}
    members = [0, 0, 0]
    for idx, p in enumerate(order):
        left = len(order) - idx
        empty = [i for i in range(3) if members[i] == 0]
        if len(empty) >= left:
            k = empty[0]
        else:
            k = int(np.argmax((targets - counts) / targets))
        assigned[p] = k
        counts[k] += sizes[p]
        members[k] += 1
    out = ([], [], [])
    for s in segments:
        out[assigned[s.patient_id]].append(s)
    return out


# --------------------------------------------------------------------------
# arrays and files


@dataclass
class SegmentArrays:
    """Stacked segments: ``x`` is ``N x 1 x T`` float32, ``y`` ``N x T`` uint8."""

    x: np.ndarray
    y: np.ndarray
    patient_ids: np.ndarray
    kinds: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.kinds is None:
            self.kinds = np.zeros(len(self.x), dtype=np.uint8)

    def __len__(self) -> int:
        return len(self.x)

    @property
    def length(self) -> int:
        return self.x.shape[-1]

    @classmethod
    def from_segments(cls, segments: Sequence[Segment]) -> "SegmentArrays":
        if not segments:
            raise DataError("no segments")
        return cls(
            x=np.stack([s.x for s in segments])[:, None, :].astype(np.float32),
            y=np.stack([s.y for s in segments]).astype(np.uint8),
            patient_ids=np.array([s.patient_id for s in segments], dtype=np.uint32),
            kinds=np.array([int(s.artifact_kind) for s in segments], dtype=np.uint8),
        )

    def subset(self, idx) -> "SegmentArrays":
        return SegmentArrays(self.x[idx], self.y[idx], self.patient_ids[idx], self.kinds[idx])


def dataset_bytes(segments: Sequence[Segment], length: int = SEGMENT_LENGTH) -> bytes:
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    buf.write(struct.pack("<II", DATASET_VERSION, len(segments)))
    for s in segments:
        if s.x.size != length:
            raise DataError(f"segment length {s.x.size} != {length}")
        buf.write(struct.pack("<IB", int(s.patient_id), int(s.artifact_kind)))
        buf.write(np.asarray(s.x, dtype="<f4").tobytes())
        buf.write(np.packbits(s.y.astype(np.uint8)).tobytes())
    return buf.getvalue()


def write_dataset(path, segments: Sequence[Segment], length: int = SEGMENT_LENGTH) -> None:
    Path(path).write_bytes(dataset_bytes(segments, length))


def read_dataset(path, length: int = SEGMENT_LENGTH) -> list[Segment]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from None
    if len(raw) < 12 or raw[:4] != DATASET_MAGIC:
        raise CheckpointError(f"{path}: not a dataset file (bad magic)")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != DATASET_VERSION:
        raise CheckpointError(f"{path}: unsupported dataset version {version}")
    mask_bytes = (length + 7) // 8
    rec = 5 + 4 * length + mask_bytes
    if len(raw) != 12 + count * rec:
        raise CheckpointError(f"{path}: truncated or oversized ({len(raw)} bytes for {count} segments)")
    out = []
    off = 12
    for _ in range(count):
        pid, kind = struct.unpack_from("<IB", raw, off)
        off += 5
        x = np.frombuffer(raw, dtype="<f4", count=length, offset=off).astype(np.float32)
        off += 4 * length
        y = np.unpackbits(np.frombuffer(raw, dtype=np.uint8, count=mask_bytes, offset=off))[:length]
        off += mask_bytes
        out.append(Segment(x, y, pid, 0, ArtifactKind(kind)))
    return out


def load_arrays(path, length: int = SEGMENT_LENGTH) -> SegmentArrays:
    return SegmentArrays.from_segments(read_dataset(path, length))


def format_annotations(annotations: Iterable[Annotation]) -> str:
    """One line per interval: ``patient_id channel_id start_s end_s kind``."""
    return "".join(f"{a.patient_id} {a.channel_id} {a.start_s:.3f} {a.end_s:.3f} {a.kind.label}\n"
                   for a in annotations)


def parse_annotations(text: str) -> list[Annotation]:
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 5:
            raise DataError(f"annotation line {lineno}: expected 5 fields, got {len(parts)}")
        try:
            out.append(Annotation(int(parts[0]), int(parts[1]), float(parts[2]), float(parts[3]),
                                  ArtifactKind.parse(parts[4])))
        except ValueError as exc:
            raise DataError(f"annotation line {lineno}: {exc}") from None
    return out
