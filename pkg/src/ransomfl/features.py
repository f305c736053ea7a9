"""Window-based feature extraction from trace runs.

A run's read/write streams are cut into fixed-length time windows anchored at
the first event; each window yields one labeled five-dimensional sample:
mean write entropy, write/read LBA variance, and write/read throughput.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence, TextIO

import numpy as np

from .trace import MICROS_PER_SEC, TraceRun

FEATURE_NAMES = (
    "avg_entropy_write",
    "var_lba_write",
    "avg_write_throughput",
    "var_lba_read",
    "avg_read_throughput",
)

CSV_HEADER = FEATURE_NAMES + ("label", "window_index", "server_id")

EMIT_ZEROS = "emit-zeros"
SKIP = "skip"


@dataclass(frozen=True)
class WindowConfig:
    """Window length and stride in seconds.

    The default is tumbling windows (hop == window). ``empty_window_policy``
    controls windows with no events at all: emit an all-zero sample or drop
    the window.
    """

    window_seconds: float = 30.0
    hop_seconds: float | None = None
    empty_window_policy: str = EMIT_ZEROS

    def __post_init__(self) -> None:
        if self.window_seconds <= 0:
            raise ValueError("window_seconds must be positive")
        if self.hop_seconds is None:
            object.__setattr__(self, "hop_seconds", self.window_seconds)
        if self.hop_seconds <= 0:
            raise ValueError("hop_seconds must be positive")
        if self.hop_seconds > self.window_seconds:
            raise ValueError("hop_seconds must not exceed window_seconds")
        if self.empty_window_policy not in (EMIT_ZEROS, SKIP):
            raise ValueError(f"unknown empty_window_policy {self.empty_window_policy!r}")

    @property
    def window_us(self) -> int:
        return round(self.window_seconds * MICROS_PER_SEC)

    @property
    def hop_us(self) -> int:
        return round(self.hop_seconds * MICROS_PER_SEC)


@dataclass(frozen=True)
class FeatureVector:
    """One training sample: the five window features plus provenance."""

    avg_entropy_write: float
    var_lba_write: float
    avg_write_throughput: float
    var_lba_read: float
    avg_read_throughput: float
    label: int
    window_index: int
    server_id: str

    def __post_init__(self) -> None:
        if not 0.0 <= self.avg_entropy_write <= 1.0:
            raise ValueError("avg_entropy_write must be in [0, 1]")
        for name in ("var_lba_write", "avg_write_throughput", "var_lba_read",
                     "avg_read_throughput"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.label not in (0, 1):
            raise ValueError("label must be 0 or 1")
        if self.window_index < 0:
            raise ValueError("window_index must be non-negative")

    @property
    def values(self) -> tuple[float, float, float, float, float]:
        return (self.avg_entropy_write, self.var_lba_write,
                self.avg_write_throughput, self.var_lba_read,
                self.avg_read_throughput)


def _window_stats(entropy: np.ndarray | None, lba: np.ndarray, nbytes: np.ndarray,
                  window_seconds: float) -> tuple[float, float, float]:
    """(mean entropy, population LBA variance, throughput) for one stream slice."""
    if lba.size == 0:
        return 0.0, 0.0, 0.0
    avg_e = float(np.mean(entropy)) if entropy is not None else 0.0
    var_lba = float(np.var(lba))
    throughput = float(np.sum(nbytes)) / window_seconds
    return avg_e, var_lba, throughput


def extract_windows(run: TraceRun, cfg: WindowConfig | None = None) -> list[FeatureVector]:
    """Cut a run into time windows and compute the five features per window.

    Window k spans [t0 + k*hop, t0 + k*hop + window) where t0 is the earliest
    event timestamp of the run; membership is decided in exact integer
    microseconds. Every emitted vector carries the run's label.
    """
    cfg = cfg or WindowConfig()

    reads = sorted(run.reads, key=lambda e: e.time_us)
    writes = sorted(run.writes, key=lambda e: e.time_us)
    r_times = np.array([e.time_us for e in reads], dtype=np.int64)
    w_times = np.array([e.time_us for e in writes], dtype=np.int64)
    r_lba = np.array([e.lba for e in reads], dtype=np.float64)
    w_lba = np.array([e.lba for e in writes], dtype=np.float64)
    r_bytes = np.array([e.bytes for e in reads], dtype=np.int64)
    w_bytes = np.array([e.bytes for e in writes], dtype=np.int64)
    w_entropy = np.array([e.entropy for e in writes], dtype=np.float64)

    firsts = [int(a[0]) for a in (r_times, w_times) if a.size]
    lasts = [int(a[-1]) for a in (r_times, w_times) if a.size]
    t0 = min(firsts)
    t_last = max(lasts)
    n_windows = (t_last - t0) // cfg.hop_us + 1

    r_rel = r_times - t0
    w_rel = w_times - t0

    out: list[FeatureVector] = []
    for k in range(n_windows):
        start = k * cfg.hop_us
        end = start + cfg.window_us
        r_lo, r_hi = np.searchsorted(r_rel, (start, end))
        w_lo, w_hi = np.searchsorted(w_rel, (start, end))
        if cfg.empty_window_policy == SKIP and r_lo == r_hi and w_lo == w_hi:
            continue
        avg_e, var_w, thr_w = _window_stats(
            w_entropy[w_lo:w_hi], w_lba[w_lo:w_hi], w_bytes[w_lo:w_hi],
            cfg.window_seconds)
        _, var_r, thr_r = _window_stats(
            None, r_lba[r_lo:r_hi], r_bytes[r_lo:r_hi], cfg.window_seconds)
        out.append(FeatureVector(
            avg_entropy_write=avg_e,
            var_lba_write=var_w,
            avg_write_throughput=thr_w,
            var_lba_read=var_r,
            avg_read_throughput=thr_r,
            label=run.label,
            window_index=k,
            server_id=run.server_id,
        ))
    return out


def feature_matrix(samples: Sequence[FeatureVector]) -> tuple[np.ndarray, np.ndarray]:
    """Stack samples into (X, y) arrays: X is (n, 5) float64, y is (n,) int64."""
    x = np.array([s.values for s in samples], dtype=np.float64).reshape(-1, 5)
    y = np.array([s.label for s in samples], dtype=np.int64)
    return x, y


def write_features_csv(samples: Iterable[FeatureVector], stream: TextIO) -> None:
    """Write samples in the canonical feature CSV format (with header)."""
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for s in samples:
        writer.writerow([repr(v) for v in s.values]
                        + [s.label, s.window_index, s.server_id])


def read_features_csv(stream: TextIO) -> list[FeatureVector]:
    """Read a feature CSV produced by :func:`write_features_csv`."""
    reader = csv.reader(stream)
    header = next(reader, None)
    if header is None or tuple(header) != CSV_HEADER:
        raise ValueError(f"unexpected feature CSV header: {header}")
    out = []
    for row in reader:
        if not row:
            continue
        out.append(FeatureVector(
            avg_entropy_write=float(row[0]),
            var_lba_write=float(row[1]),
            avg_write_throughput=float(row[2]),
            var_lba_read=float(row[3]),
            avg_read_throughput=float(row[4]),
            label=int(row[5]),
            window_index=int(row[6]),
            server_id=row[7],
        ))
    return out


def features_csv_bytes(samples: Iterable[FeatureVector]) -> bytes:
    buf = io.StringIO()
    write_features_csv(samples, buf)
    return buf.getvalue().encode("utf-8")
