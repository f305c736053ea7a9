"""Deterministic seed derivation for nested experiment stages.

Every randomized stage (corpus generation, per-node splits, balancing,
per-scenario training) gets its own seed derived from the master seed plus a
textual path. Runs are reproducible end to end from the single master seed,
and changing one stage's path never perturbs another stage's stream.
"""

from __future__ import annotations

import hashlib


def derive_seed(master: int, *parts: str | int) -> int:
    """Derive a stage seed from the master seed and a label path.

    Stable across processes and platforms (unlike ``hash()``).
    """
    h = hashlib.sha256()
    h.update(str(int(master)).encode("ascii"))
    for part in parts:
        h.update(b"/")
        h.update(str(part).encode("utf-8"))
    # keep it in the non-negative int64 range for numpy generators
    return int.from_bytes(h.digest()[:8], "big") >> 1
