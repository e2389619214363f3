"""Sensor time series: synthetic generation, CSV ingestion, windowing and splits."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

CSV_HEADER = ["t", "x", "y", "z", "label"]
PARTITION_MODES = ("iid", "label-skew")


class DataFormatError(ValueError):
    """Malformed input file; the message names the offending line."""


@dataclass(frozen=True)
class TimeSeriesRecord:
    channels: np.ndarray  # (C, L)
    labels: np.ndarray  # (L,)
    sample_rate_hz: int

    def __post_init__(self) -> None:
        if self.channels.ndim != 2 or self.channels.shape[1] != self.labels.shape[0]:
            raise ValueError("channels must be (C, L) with one label per sample")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("labels must be non-negative")
        if self.sample_rate_hz < 1:
            raise ValueError("sample_rate_hz must be positive")

    def __len__(self) -> int:
        return self.labels.shape[0]


@dataclass(frozen=True)
class WindowedDataset:
    windows: np.ndarray  # (N, C, T)
    labels: np.ndarray  # (N,)
    window_len: int
    stride: int
    num_classes: int

    def __post_init__(self) -> None:
        if self.windows.ndim != 3 or self.windows.shape[0] != self.labels.shape[0]:
            raise ValueError("windows must be (N, C, T) with one label per window")
        if self.windows.shape[2] != self.window_len:
            raise ValueError("window length does not match windows array")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"window labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, indices) -> "WindowedDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return WindowedDataset(self.windows[indices], self.labels[indices],
                               self.window_len, self.stride, self.num_classes)


@dataclass(frozen=True)
class PartitionPlan:
    assignment: np.ndarray  # window index -> client id
    mode: str
    num_clients: int

    def client_indices(self, client_id: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == client_id)

    def sizes(self) -> list[int]:
        return np.bincount(self.assignment, minlength=self.num_clients).tolist()


def gen_synthetic(num_classes: int, samples_per_class: int, sample_rate_hz: int, seed: int,
                  noise_std: float = 0.2) -> TimeSeriesRecord:
    """Three-channel sinusoids, one segment per class, concatenated in label order.

    Class ``k`` oscillates at ``1 + k`` Hz with amplitude ``1 + 0.25 k``; the
    channels are phase-shifted by 0, 2pi/3 and 4pi/3.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if samples_per_class < 1:
        raise ValueError("samples_per_class must be >= 1")
    t = np.arange(samples_per_class, dtype=np.float64)
    phases = (0.0, 2.0 * math.pi / 3.0, 4.0 * math.pi / 3.0)
    segments = []
    for k in range(num_classes):
        freq, amp = 1.0 + k, 1.0 + 0.25 * k
        segments.append(np.stack([
            amp * np.sin(2.0 * np.pi * freq * t / sample_rate_hz + phase) for phase in phases
        ]))
    channels = np.concatenate(segments, axis=1)
    if noise_std > 0:
        rng = np.random.default_rng(seed)
        channels = channels + rng.normal(0.0, noise_std, size=channels.shape)
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), samples_per_class)
    return TimeSeriesRecord(channels, labels, sample_rate_hz)


def window(record: TimeSeriesRecord, window_len: int, stride: int,
           num_classes: int | None = None) -> WindowedDataset:
    """Sliding windows from sample 0; each takes the majority label (ties to lowest class)."""
    length = len(record)
    if window_len < 1 or stride < 1:
        raise ValueError("window_len and stride must be positive")
    if window_len > length:
        raise ValueError(f"window_len={window_len} exceeds record length {length}")
    if num_classes is None:
        num_classes = int(record.labels.max()) + 1
    count = (length - window_len) // stride + 1
    starts = np.arange(count) * stride
    windows = np.stack([record.channels[:, s:s + window_len] for s in starts])
    labels = np.array(
        [np.argmax(np.bincount(record.labels[s:s + window_len], minlength=num_classes)) for s in starts],
        dtype=np.int64,
    )
    return WindowedDataset(windows, labels, window_len, stride, num_classes)


def channel_stats(dataset: WindowedDataset) -> tuple[np.ndarray, np.ndarray]:
    if len(dataset) == 0:
        raise ValueError("cannot compute statistics of an empty dataset")
    mean = dataset.windows.mean(axis=(0, 2))
    std = np.maximum(dataset.windows.std(axis=(0, 2)), 1e-8)
    return mean, std


def normalize(dataset: WindowedDataset, stats: tuple[np.ndarray, np.ndarray] | None = None):
    """Per-channel z-score. Pass the training split's ``stats`` when scaling test data."""
    if stats is None:
        stats = channel_stats(dataset)
    mean, std = stats
    windows = (dataset.windows - mean[None, :, None]) / std[None, :, None]
    out = WindowedDataset(windows, dataset.labels, dataset.window_len, dataset.stride,
                          dataset.num_classes)
    return out, (mean, std)


def kfold_split(labels, k: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Stratified folds: each class is shuffled and cut into ``k`` near-equal parts."""
    if isinstance(labels, WindowedDataset):
        labels = labels.labels
    labels = np.asarray(labels)
    n = labels.size
    if k < 2:
        raise ValueError("k must be >= 2")
    if n < k:
        raise ValueError(f"need at least k={k} windows, got {n}")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(n, dtype=np.int64)
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        if members.size < k:
            warnings.warn(f"class {cls} has {members.size} windows; it appears in fewer than {k} folds",
                          stacklevel=2)
        for fold, part in enumerate(np.array_split(rng.permutation(members), k)):
            fold_of[part] = fold
    return [(np.flatnonzero(fold_of != i), np.flatnonzero(fold_of == i)) for i in range(k)]


def partition_clients(labels, num_clients: int, mode: str = "iid", seed: int = 0,
                      spillover: float = 0.1) -> PartitionPlan:
    """Assign every window to exactly one client.

    ``iid`` deals a shuffled order round-robin. ``label-skew`` gives each client
    a disjoint block of classes; a ``spillover`` fraction of each class is dealt
    round-robin to the other clients instead.
    """
    if isinstance(labels, WindowedDataset):
        labels = labels.labels
    labels = np.asarray(labels)
    n = labels.size
    if num_clients < 1:
        raise ValueError("num_clients must be >= 1")
    if num_clients > n:
        raise ValueError(f"{num_clients} clients but only {n} windows")
    if mode not in PARTITION_MODES:
        raise ValueError(f"unknown partition mode {mode!r}; expected one of {PARTITION_MODES}")
    rng = np.random.default_rng(seed)
    assignment = np.empty(n, dtype=np.int64)
    if mode == "iid":
        order = rng.permutation(n)
        assignment[order] = np.arange(n) % num_clients
    else:
        classes = np.unique(labels)
        owner_blocks = np.array_split(rng.permutation(classes), num_clients)
        owner = {int(c): client for client, block in enumerate(owner_blocks) for c in block}
        for cls in classes:
            members = rng.permutation(np.flatnonzero(labels == cls))
            home = owner[int(cls)]
            others = [c for c in range(num_clients) if c != home]
            n_spill = int(round(spillover * members.size)) if others else 0
            assignment[members[n_spill:]] = home
            for i, idx in enumerate(members[:n_spill]):
                assignment[idx] = others[i % len(others)]
    plan = PartitionPlan(assignment, mode, num_clients)
    empty = [c for c, size in enumerate(plan.sizes()) if size == 0]
    if empty:
        raise ValueError(f"partition leaves clients {empty} without data")
    return plan


def load_csv(path: str | Path, sample_rate_hz: int,
             label_map: Mapping[str, int] | None = None) -> TimeSeriesRecord:
    """Read a ``t,x,y,z,label`` file into a three-channel record.

    Labels are non-negative integers unless ``label_map`` translates label text.
    """
    values, labels = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise DataFormatError(f"{path}:1: expected header {','.join(CSV_HEADER)}, got {header}")
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != 5:
                raise DataFormatError(f"{path}:{line}: expected 5 fields, got {len(row)}")
            try:
                xyz = [float(v) for v in row[1:4]]
                float(row[0])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{line}: non-numeric value ({exc})") from None
            if not all(math.isfinite(v) for v in xyz):
                raise DataFormatError(f"{path}:{line}: non-finite sensor value")
            text = row[4].strip()
            if label_map is not None:
                if text not in label_map:
                    raise DataFormatError(f"{path}:{line}: unknown label {text!r}")
                label = int(label_map[text])
            else:
                try:
                    label = int(text)
                except ValueError:
                    raise DataFormatError(f"{path}:{line}: unknown label {text!r}") from None
                if label < 0:
                    raise DataFormatError(f"{path}:{line}: unknown label {text!r}")
            values.append(xyz)
            labels.append(label)
    channels = np.array(values, dtype=np.float64).reshape(-1, 3).T
    return TimeSeriesRecord(np.ascontiguousarray(channels), np.array(labels, dtype=np.int64),
                            sample_rate_hz)


def write_csv(record: TimeSeriesRecord, path: str | Path) -> None:
    """Write a three-channel record in the ``t,x,y,z,label`` format (17 significant digits)."""
    if record.channels.shape[0] != 3:
        raise ValueError("CSV export needs exactly three channels")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for i in range(len(record)):
            x, y, z = record.channels[:, i]
            writer.writerow([f"{i / record.sample_rate_hz:.17g}", f"{x:.17g}", f"{y:.17g}",
                             f"{z:.17g}", int(record.labels[i])])
