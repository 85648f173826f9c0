"""Synthetic sensor data for tests and demos.

make_synthetic_dataset emits CSV files in the canonical ingestion schema:
each class gets a characteristic per-channel DC level plus a sinusoid at its
own frequency, subjects add gain/offset/noise nuisance, and Null segments
separate the exercises. The result is learnable across subjects but not
trivial, which is what the training and quantization tests need.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .dataset import (
    CHANNEL_NAMES,
    CLASS_NAMES,
    NUM_CHANNELS,
    NUM_CLASSES,
    RATE_HZ,
    WINDOW_SIZE,
    Window,
)


def make_synthetic_dataset(out_dir: str | Path, subjects: int = 10,
                           sessions: int = 5, class_seconds: float = 12.0,
                           null_seconds: float = 3.0, noise: float = 0.3,
                           seed: int = 0) -> list[Path]:
    """Write one CSV per (subject, session); returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    freqs = 0.5 + 0.27 * np.arange(NUM_CLASSES)            # Hz, class 0 unused
    amp = rng.uniform(0.4, 1.4, size=(NUM_CLASSES, NUM_CHANNELS))
    dc = rng.uniform(-1.2, 1.2, size=(NUM_CLASSES, NUM_CHANNELS))
    amp[0] = 0.0
    dc[0] = 0.0
    gain = 1.0 + 0.08 * rng.standard_normal((subjects + 1, NUM_CHANNELS))
    offset = 0.15 * rng.standard_normal((subjects + 1, NUM_CHANNELS))

    class_len = int(round(class_seconds * RATE_HZ))
    null_len = int(round(null_seconds * RATE_HZ))

    paths = []
    for subject in range(1, subjects + 1):
        for session in range(1, sessions + 1):
            order = rng.permutation(np.arange(1, NUM_CLASSES))
            segments = [(0, null_len)]
            for cls in order:
                segments.append((int(cls), class_len))
                segments.append((0, null_len))

            rows = []
            t = 0
            for cls, length in segments:
                steps = (t + np.arange(length)) / RATE_HZ
                phase = rng.uniform(0, 2 * np.pi)
                wave = np.sin(2 * np.pi * freqs[cls] * steps + phase)
                base = dc[cls][None, :] + amp[cls][None, :] * wave[:, None]
                sig = (gain[subject][None, :] * base
                       + offset[subject][None, :]
                       + noise * rng.standard_normal((length, NUM_CHANNELS)))
                for i in range(length):
                    rows.append(((t + i) / RATE_HZ, sig[i], cls))
                t += length

            path = out_dir / f"s{subject:02d}_sess{session}.csv"
            with open(path, "w") as f:
                f.write("timestamp," + ",".join(CHANNEL_NAMES)
                        + ",label,subject,session\n")
                for ts, sig, cls in rows:
                    values = ",".join(f"{v:.6f}" for v in sig)
                    f.write(f"{ts:.3f},{values},{CLASS_NAMES[cls]},"
                            f"{subject},{session}\n")
            paths.append(path)
    return paths


def make_separable_windows(n: int = 200, seed: int = 0,
                           labels: tuple[int, int] = (1, 2)) -> list[Window]:
    """Trivially separable two-class windows: opposite DC levels, tiny noise.

    Subjects alternate between 1 and 2 and sessions cycle 1..5 so the
    leave-one-user-out and validation-session machinery can run on them.
    """
    rng = np.random.default_rng(seed)
    windows = []
    for i in range(n):
        label = labels[i % 2]
        level = 1.0 if i % 2 == 0 else -1.0
        data = (level + 0.05 * rng.standard_normal(
            (NUM_CHANNELS, WINDOW_SIZE))).astype(np.float32)
        windows.append(Window(
            data=data, label=label, weight=1.0,
            subject=1 + (i % 2), session=1 + (i // 2) % 5,
            sample_labels=np.full(WINDOW_SIZE, label, dtype=np.int64),
        ))
    return windows


def make_random_windows(n: int, seed: int = 0, scale: float = 1.0) -> list[Window]:
    """Gaussian windows for calibration and agreement tests."""
    rng = np.random.default_rng(seed)
    return [Window(
        data=(scale * rng.standard_normal(
            (NUM_CHANNELS, WINDOW_SIZE))).astype(np.float32),
        label=int(rng.integers(NUM_CLASSES)), weight=1.0,
        subject=1 + int(rng.integers(10)), session=1 + int(rng.integers(5)),
    ) for _ in range(n)]
