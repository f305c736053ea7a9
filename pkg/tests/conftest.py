"""Shared fixtures and generators for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from ransomfl.trace import ReadEvent, TraceRun, WriteEvent


def make_run(seed: int = 0, n_reads: int = 50, n_writes: int = 50,
             duration_s: float = 120.0, label: int = 1,
             server_id: str = "srv-test", software: str = "synthetic") -> TraceRun:
    """Random but reproducible trace run for structural tests."""
    rng = np.random.default_rng(seed)

    def stamps(n):
        t = np.sort(rng.uniform(0.0, duration_s, size=n))
        sec = t.astype(np.int64)
        usec = np.minimum(((t - sec) * 1_000_000).astype(np.int64), 999_999)
        return sec, usec

    rs, ru = stamps(n_reads)
    reads = tuple(
        ReadEvent(int(rs[i]), int(ru[i]), int(rng.integers(0, 1 << 28)),
                  int(rng.integers(1, 65)) * 512)
        for i in range(n_reads))
    ws, wu = stamps(n_writes)
    writes = tuple(
        WriteEvent(int(ws[i]), int(wu[i]), int(rng.integers(0, 1 << 28)),
                   int(rng.integers(1, 65)) * 512, float(rng.uniform(0.0, 1.0)))
        for i in range(n_writes))
    return TraceRun(server_id, software, label, reads=reads, writes=writes)


@pytest.fixture
def sample_run() -> TraceRun:
    return make_run(seed=7)
