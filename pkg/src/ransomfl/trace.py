"""ATA read/write trace ingestion.

Parses block-level storage access logs (one ``ata_read.csv`` and one
``ata_write.csv`` per software run) into typed event streams, and computes
the normalized byte entropy of written sectors.
"""

from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

SECTOR_SIZE = 512

READ_FIELDS = 4
WRITE_FIELDS = 5

MICROS_PER_SEC = 1_000_000


class TraceParseError(Exception):
    """A malformed record in a trace CSV.

    Carries the 1-based line number of the offending record.
    """

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


def _check_timestamp(ts_sec: int, ts_usec: int) -> None:
    if ts_sec < 0:
        raise ValueError(f"ts_sec must be non-negative, got {ts_sec}")
    if not 0 <= ts_usec < MICROS_PER_SEC:
        raise ValueError(f"ts_usec must be in [0, 999999], got {ts_usec}")


@dataclass(frozen=True)
class ReadEvent:
    """One block read: timestamp pair, logical block address, byte count."""

    ts_sec: int
    ts_usec: int
    lba: int
    bytes: int

    def __post_init__(self) -> None:
        _check_timestamp(self.ts_sec, self.ts_usec)
        if self.lba < 0:
            raise ValueError(f"lba must be non-negative, got {self.lba}")
        if self.bytes <= 0:
            raise ValueError(f"bytes must be positive, got {self.bytes}")

    @property
    def time_us(self) -> int:
        """Combined timestamp in integer microseconds."""
        return self.ts_sec * MICROS_PER_SEC + self.ts_usec


@dataclass(frozen=True)
class WriteEvent:
    """One block write; additionally carries the normalized entropy of the
    written data."""

    ts_sec: int
    ts_usec: int
    lba: int
    bytes: int
    entropy: float

    def __post_init__(self) -> None:
        _check_timestamp(self.ts_sec, self.ts_usec)
        if self.lba < 0:
            raise ValueError(f"lba must be non-negative, got {self.lba}")
        if self.bytes <= 0:
            raise ValueError(f"bytes must be positive, got {self.bytes}")
        if not 0.0 <= self.entropy <= 1.0:
            raise ValueError(f"entropy must be in [0, 1], got {self.entropy}")

    @property
    def time_us(self) -> int:
        return self.ts_sec * MICROS_PER_SEC + self.ts_usec


@dataclass(frozen=True)
class TraceRun:
    """All events captured during one software execution on one server."""

    server_id: str
    software_name: str
    label: int
    reads: tuple[ReadEvent, ...] = ()
    writes: tuple[WriteEvent, ...] = ()

    def __post_init__(self) -> None:
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if not self.reads and not self.writes:
            raise ValueError("a run must contain at least one read or write event")
        object.__setattr__(self, "reads", tuple(self.reads))
        object.__setattr__(self, "writes", tuple(self.writes))


def sector_entropy(sector: bytes) -> float:
    """Normalized Shannon entropy of a byte block.

    Entropy of the empirical byte-value distribution, divided by log2 of the
    block length, so the result lies in [0, 1]. A constant block maps to
    exactly 0. For 512-byte sectors the attainable ceiling is 8/9 (at most
    256 distinct byte values).
    """
    n = len(sector)
    if n < 2:
        raise ValueError(f"sector must contain at least 2 bytes, got {n}")
    counts = np.bincount(np.frombuffer(sector, dtype=np.uint8), minlength=256)
    counts = counts[counts > 0]
    if counts.size == 1:
        return 0.0
    p = counts / n
    return float(-np.sum(p * np.log2(p)) / math.log2(n))


def _coerce_lines(source: bytes | BinaryIO) -> Iterable[tuple[int, str]]:
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    for line_no, raw in enumerate(source, start=1):
        line = raw.decode("utf-8").strip()
        if line:
            yield line_no, line


def _order_events(events: list, strict_order: bool):
    for prev, cur in zip(events, events[1:]):
        if cur.time_us < prev.time_us:
            if strict_order:
                raise ValueError(
                    f"events out of order: {cur.time_us}us after {prev.time_us}us"
                )
            # UDP capture can reorder records; restore time order.
            return tuple(sorted(events, key=lambda e: e.time_us))
    return tuple(events)


def parse_read_csv(
    source: bytes | BinaryIO,
    lenient: bool = False,
    strict_order: bool = False,
) -> tuple[ReadEvent, ...]:
    """Parse an ``ata_read.csv`` stream: ``ts_sec,ts_usec,lba,bytes`` per line.

    Malformed lines raise :class:`TraceParseError` unless ``lenient``, in which
    case they are skipped with a warning. Out-of-order events are sorted by
    combined timestamp unless ``strict_order``.
    """
    events: list[ReadEvent] = []
    for line_no, line in _coerce_lines(source):
        fields = line.split(",")
        try:
            if len(fields) != READ_FIELDS:
                raise ValueError(f"expected {READ_FIELDS} fields, got {len(fields)}")
            events.append(ReadEvent(*(int(f) for f in fields)))
        except ValueError as exc:
            if lenient:
                log.warning("skipping malformed read record at line %d: %s", line_no, exc)
                continue
            raise TraceParseError(line_no, str(exc)) from exc
    return _order_events(events, strict_order)


def parse_write_csv(
    source: bytes | BinaryIO,
    lenient: bool = False,
    strict_order: bool = False,
) -> tuple[WriteEvent, ...]:
    """Parse an ``ata_write.csv`` stream: ``ts_sec,ts_usec,lba,bytes,entropy``."""
    events: list[WriteEvent] = []
    for line_no, line in _coerce_lines(source):
        fields = line.split(",")
        try:
            if len(fields) != WRITE_FIELDS:
                raise ValueError(f"expected {WRITE_FIELDS} fields, got {len(fields)}")
            events.append(
                WriteEvent(*(int(f) for f in fields[:4]), entropy=float(fields[4]))
            )
        except ValueError as exc:
            if lenient:
                log.warning("skipping malformed write record at line %d: %s", line_no, exc)
                continue
            raise TraceParseError(line_no, str(exc)) from exc
    return _order_events(events, strict_order)


def format_read_csv(events: Sequence[ReadEvent]) -> bytes:
    """Serialize read events back to CSV; inverse of :func:`parse_read_csv`."""
    lines = [f"{e.ts_sec},{e.ts_usec},{e.lba},{e.bytes}\n" for e in events]
    return "".join(lines).encode("utf-8")


def format_write_csv(events: Sequence[WriteEvent]) -> bytes:
    """Serialize write events back to CSV; entropy keeps full float precision."""
    lines = [
        f"{e.ts_sec},{e.ts_usec},{e.lba},{e.bytes},{e.entropy!r}\n" for e in events
    ]
    return "".join(lines).encode("utf-8")
