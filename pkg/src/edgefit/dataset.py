"""Ingestion, normalization, windowing, weighting, and leave-one-user-out splits.

Input files are comma-separated text with one header row and the canonical
columns timestamp, acc_x, acc_y, acc_z, gyro_x, gyro_y, gyro_z, hbc, label,
subject, session. A ColumnMap adapts files whose headers deviate from the
canonical names. Labels may be integers 0..11 or canonical class names.
"""

from __future__ import annotations

import csv
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import (
    CorruptFile,
    EmptyDataset,
    FewerThanTwoSubjects,
    MalformedRow,
    MissingColumn,
    UnseenLabel,
    VersionMismatch,
)

CLASS_NAMES = (
    "Null", "Adductor", "Armcurl", "Benchpress", "Legcurl", "Legpress",
    "Riding", "Ropeskipping", "Running", "Squat", "Stairsclimber", "Walking",
)
NUM_CLASSES = len(CLASS_NAMES)
NULL_CLASS = 0
NUM_CHANNELS = 7
WINDOW_SIZE = 40
RATE_HZ = 20
CHANNEL_NAMES = ("acc_x", "acc_y", "acc_z", "gyro_x", "gyro_y", "gyro_z", "hbc")

SUBJECT_RANGE = (1, 10)
SESSION_RANGE = (1, 5)

STD_FLOOR = 1e-6

_WINDOW_MAGIC = b"EFW1"

_NAME_TO_LABEL = {name.lower(): i for i, name in enumerate(CLASS_NAMES)}


@dataclass(frozen=True)
class ColumnMap:
    """Maps canonical column names to the header names actually in the file."""

    timestamp: str = "timestamp"
    acc_x: str = "acc_x"
    acc_y: str = "acc_y"
    acc_z: str = "acc_z"
    gyro_x: str = "gyro_x"
    gyro_y: str = "gyro_y"
    gyro_z: str = "gyro_z"
    hbc: str = "hbc"
    label: str = "label"
    subject: str = "subject"
    session: str = "session"

    def resolve(self, header: list[str], path: str = "") -> dict[str, int]:
        """Return canonical name -> column index, or raise MissingColumn."""
        positions = {name.strip(): i for i, name in enumerate(header)}
        indices = {}
        for f in fields(self):
            actual = getattr(self, f.name)
            if actual not in positions:
                raise MissingColumn(actual, path)
            indices[f.name] = positions[actual]
        return indices


@dataclass(frozen=True)
class SampleRecord:
    """One parsed sensor row: 7 signal channels plus label/subject/session."""

    timestamp: float
    channels: tuple[float, ...]   # acc xyz, gyro xyz, hbc
    label: int
    subject: int
    session: int


@dataclass
class Recording:
    """All samples of one (subject, session) pair, ordered by timestamp."""

    subject: int
    session: int
    timestamps: np.ndarray   # (N,) float64, strictly increasing
    data: np.ndarray         # (N, 7) float32
    labels: np.ndarray       # (N,) int16
    rate_hz: int = RATE_HZ

    def __len__(self) -> int:
        return len(self.timestamps)


@dataclass
class NormStats:
    """Per-channel mean and standard deviation of the training-fold samples."""

    mean: np.ndarray   # (7,) float64
    std: np.ndarray    # (7,) float64, >= STD_FLOOR


@dataclass
class Window:
    """A normalized 7x40 segment with its target label and training weight.

    sample_labels keeps the per-sample labels the window was cut from; it is
    needed to compute the weight and is dropped on serialization.
    """

    data: np.ndarray          # (7, 40) float32
    label: int
    weight: float
    subject: int
    session: int
    sample_labels: np.ndarray | None = field(default=None, repr=False)


@dataclass
class DatasetSplit:
    train: list[Window]
    test: list[Window]
    held_out_subject: int


def _parse_label(raw: str) -> int:
    raw = raw.strip()
    try:
        value = int(raw)
    except ValueError:
        key = raw.lower()
        if key not in _NAME_TO_LABEL:
            raise ValueError(f"unknown class name '{raw}'")
        return _NAME_TO_LABEL[key]
    if not 0 <= value < NUM_CLASSES:
        raise ValueError(f"label {value} outside [0, {NUM_CLASSES - 1}]")
    return value


def _parse_row(row: list[str], idx: dict[str, int]) -> SampleRecord:
    try:
        ts = float(row[idx["timestamp"]])
        channels = tuple(float(row[idx[name]]) for name in CHANNEL_NAMES)
    except (ValueError, IndexError) as e:
        raise ValueError(f"bad numeric field ({e})")
    if not all(np.isfinite(channels)) or not np.isfinite(ts):
        raise ValueError("non-finite value")
    label = _parse_label(row[idx["label"]])
    try:
        subject = int(row[idx["subject"]])
        session = int(row[idx["session"]])
    except (ValueError, IndexError):
        raise ValueError("subject/session not an integer")
    if not SUBJECT_RANGE[0] <= subject <= SUBJECT_RANGE[1]:
        raise ValueError(f"subject {subject} outside {SUBJECT_RANGE}")
    if not SESSION_RANGE[0] <= session <= SESSION_RANGE[1]:
        raise ValueError(f"session {session} outside {SESSION_RANGE}")
    return SampleRecord(ts, channels, label, subject, session)


def load_recordings(path: str | Path, schema: ColumnMap | None = None) -> list[Recording]:
    """Load every CSV under path (file or directory) into Recordings.

    One Recording per (subject, session) pair, merged across files and sorted
    by timestamp. Unparseable rows raise MalformedRow with their line number.
    """
    schema = schema or ColumnMap()
    path = Path(path)
    if not path.exists():
        raise EmptyDataset(f"path does not exist: {path}")
    files = sorted(path.glob("*.csv")) if path.is_dir() else [path]
    if not files:
        raise EmptyDataset(f"no .csv files under {path}")

    groups: dict[tuple[int, int], list[SampleRecord]] = {}
    for f in files:
        with open(f, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                continue
            idx = schema.resolve(header, str(f))
            for lineno, row in enumerate(reader, start=2):
                if not row or all(not cell.strip() for cell in row):
                    continue
                try:
                    rec = _parse_row(row, idx)
                except ValueError as e:
                    raise MalformedRow(lineno, str(e), str(f)) from None
                groups.setdefault((rec.subject, rec.session), []).append(rec)

    if not groups:
        raise EmptyDataset(f"no data rows found under {path}")

    recordings = []
    for (subject, session), records in sorted(groups.items()):
        records.sort(key=lambda r: r.timestamp)
        ts = np.array([r.timestamp for r in records], dtype=np.float64)
        if np.any(np.diff(ts) <= 0):
            dup = int(np.argmax(np.diff(ts) <= 0)) + 1
            raise MalformedRow(
                dup, f"timestamps not strictly increasing for subject "
                f"{subject} session {session}")
        data = np.array([r.channels for r in records], dtype=np.float32)
        labels = np.array([r.label for r in records], dtype=np.int16)
        recordings.append(Recording(subject, session, ts, data, labels))
    return recordings


def compute_norm_stats(recordings: list[Recording]) -> NormStats:
    """Per-channel mean and population std over all samples of the input."""
    if not recordings or sum(len(r) for r in recordings) == 0:
        raise EmptyDataset("cannot compute normalization statistics of nothing")
    stacked = np.concatenate([r.data.astype(np.float64) for r in recordings], axis=0)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)   # population convention
    return NormStats(mean=mean, std=np.maximum(std, STD_FLOOR))


def window_count(length: int, size: int, stride: int) -> int:
    if length < size:
        return 0
    return (length - size) // stride + 1


def label_window(labels: np.ndarray) -> int:
    """Most frequent label; ties go to the non-Null label with lowest id."""
    counts = np.bincount(labels, minlength=NUM_CLASSES)
    best = int(counts.max())
    candidates = [c for c in range(NUM_CLASSES) if counts[c] == best]
    candidates.sort(key=lambda c: (c == NULL_CLASS, c))
    return candidates[0]


def window_weight(labels: np.ndarray, class_freq: np.ndarray) -> float:
    """Mean inverse relative frequency of the window's per-sample labels.

    weight = mean over samples of N_total / (n_classes * N_label), so a
    perfectly uniform label distribution gives every window weight 1.
    """
    class_freq = np.asarray(class_freq, dtype=np.int64)
    n_classes = len(class_freq)
    n_total = int(class_freq.sum())
    present = np.unique(labels)
    for lbl in present:
        if class_freq[lbl] <= 0:
            raise UnseenLabel(int(lbl))
    inv = n_total / (n_classes * class_freq[labels].astype(np.float64))
    return float(inv.mean())


def segment_windows(rec: Recording, stats: NormStats, size: int = WINDOW_SIZE,
                    stride: int = RATE_HZ) -> list[Window]:
    """Cut rec into z-normalized windows of `size` samples every `stride`.

    Labels come from majority vote; weights are placeholder 1.0 until
    assign_weights runs with the training-fold class counts.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    n = window_count(len(rec), size, stride)
    if n == 0:
        return []
    normalized = ((rec.data.astype(np.float64) - stats.mean) / stats.std).astype(np.float32)
    windows = []
    for i in range(n):
        start = i * stride
        seg = normalized[start:start + size]          # (size, 7)
        labels = rec.labels[start:start + size].astype(np.int64)
        windows.append(Window(
            data=np.ascontiguousarray(seg.T),          # (7, size)
            label=label_window(labels),
            weight=1.0,
            subject=rec.subject,
            session=rec.session,
            sample_labels=labels,
        ))
    return windows


def segment_all(recordings: list[Recording], stats: NormStats,
                size: int = WINDOW_SIZE, stride: int = RATE_HZ,
                n_threads: int = 1) -> list[Window]:
    """Segment every recording, merged in (subject, session) order."""
    ordered = sorted(recordings, key=lambda r: (r.subject, r.session))
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            parts = list(pool.map(
                lambda r: segment_windows(r, stats, size, stride), ordered))
    else:
        parts = [segment_windows(r, stats, size, stride) for r in ordered]
    return [w for part in parts for w in part]


def class_counts(windows: list[Window]) -> np.ndarray:
    """Per-class counts of the per-sample labels across all windows."""
    counts = np.zeros(NUM_CLASSES, dtype=np.int64)
    for w in windows:
        if w.sample_labels is None:
            counts[w.label] += w.data.shape[1]
        else:
            counts += np.bincount(w.sample_labels, minlength=NUM_CLASSES)
    return counts


def assign_weights(windows: list[Window], class_freq: np.ndarray) -> None:
    for w in windows:
        labels = (w.sample_labels if w.sample_labels is not None
                  else np.full(w.data.shape[1], w.label, dtype=np.int64))
        w.weight = window_weight(labels, class_freq)


def loucv_splits(windows: list[Window]) -> list[DatasetSplit]:
    """One fold per subject: that subject's windows test, the rest train."""
    subjects = sorted({w.subject for w in windows})
    if len(subjects) < 2:
        raise FewerThanTwoSubjects(
            f"leave-one-user-out needs >= 2 subjects, got {len(subjects)}")
    splits = []
    for s in subjects:
        test = [w for w in windows if w.subject == s]
        train = [w for w in windows if w.subject != s]
        splits.append(DatasetSplit(train=train, test=test, held_out_subject=s))
    return splits


def build_fold(recordings: list[Recording], held_out_subject: int,
               size: int = WINDOW_SIZE, stride: int = RATE_HZ,
               n_threads: int = 1) -> DatasetSplit:
    """Full per-fold pipeline with training-fold-only normalization.

    Stats and class counts come exclusively from the training subjects;
    the held-out subject's windows are normalized with those same stats and
    carry weight 1.0 (weights only matter for training).
    """
    train_recs = [r for r in recordings if r.subject != held_out_subject]
    test_recs = [r for r in recordings if r.subject == held_out_subject]
    if not train_recs:
        raise EmptyDataset(f"no training subjects besides {held_out_subject}")
    stats = compute_norm_stats(train_recs)
    train = segment_all(train_recs, stats, size, stride, n_threads)
    test = segment_all(test_recs, stats, size, stride, n_threads)
    assign_weights(train, class_counts(train))
    return DatasetSplit(train=train, test=test, held_out_subject=held_out_subject)


def save_windows(path: str | Path, windows: list[Window]) -> None:
    """Write the flat binary window container.

    Layout: magic "EFW1", u32 count, u32 channels, u32 window size, then per
    window 40x7 little-endian float32 (time-major), label u8, weight f32,
    subject u8, session u8.
    """
    with open(path, "wb") as f:
        f.write(_WINDOW_MAGIC)
        f.write(struct.pack("<III", len(windows), NUM_CHANNELS, WINDOW_SIZE))
        for w in windows:
            f.write(np.ascontiguousarray(w.data.T, dtype="<f4").tobytes())
            f.write(struct.pack("<BfBB", w.label, w.weight, w.subject, w.session))


def load_windows(path: str | Path) -> list[Window]:
    path = Path(path)
    if not path.is_file():
        raise CorruptFile(f"window container not found: {path}")
    blob = path.read_bytes()
    if len(blob) < 16:
        raise CorruptFile(f"window container too short: {path}")
    if blob[:4] != _WINDOW_MAGIC:
        raise VersionMismatch(f"bad magic {blob[:4]!r}, expected {_WINDOW_MAGIC!r}")
    count, channels, size = struct.unpack_from("<III", blob, 4)
    if channels != NUM_CHANNELS or size != WINDOW_SIZE:
        raise VersionMismatch(f"unsupported geometry {channels}x{size}")
    record = size * channels * 4 + 1 + 4 + 1 + 1
    expected = 16 + count * record
    if len(blob) != expected:
        raise CorruptFile(
            f"window container has {len(blob)} bytes, expected {expected}")
    windows = []
    offset = 16
    for _ in range(count):
        data = np.frombuffer(blob, dtype="<f4", count=size * channels,
                             offset=offset).reshape(size, channels)
        offset += size * channels * 4
        label, weight, subject, session = struct.unpack_from("<BfBB", blob, offset)
        offset += 7
        windows.append(Window(
            data=np.ascontiguousarray(data.T),
            label=label, weight=weight, subject=subject, session=session,
        ))
    return windows
