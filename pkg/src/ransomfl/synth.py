"""Synthetic trace generation with controllable behavioral profiles.

Runs are drawn from per-software profiles (arrival rates, write-entropy
distribution, block-address pattern) modulated by per-server hardware knobs
(rate multipliers, disk size, entropy shifts). The defaults produce four
deliberately heterogeneous nodes: each node's classes are separable locally,
but class-conditional feature levels cross between servers, so a model
trained on one server transfers poorly to the others.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .seeds import derive_seed
from .trace import (
    ReadEvent,
    TraceRun,
    WriteEvent,
    format_read_csv,
    format_write_csv,
    parse_read_csv,
    parse_write_csv,
)

log = logging.getLogger(__name__)

SEQUENTIAL = "sequential"
UNIFORM_RANDOM = "uniform-random"
CLUSTERED = "clustered"
LBA_PATTERNS = (SEQUENTIAL, UNIFORM_RANDOM, CLUSTERED)

READ_FILE = "ata_read.csv"
WRITE_FILE = "ata_write.csv"
LABELS_FILE = "labels.txt"


@dataclass(frozen=True)
class ProfileSpec:
    """Behavioral profile of one software family."""

    label: int
    write_entropy_mean: float
    write_entropy_std: float = 0.05
    write_rate: float = 0.8
    read_rate: float = 0.8
    lba_pattern: str = UNIFORM_RANDOM
    n_clusters: int = 8
    cluster_spread: float = 4096.0
    bytes_mean: float = 16384.0
    bytes_std: float = 8192.0
    bytes_min: int = 512
    duration_seconds: float = 3600.0

    def __post_init__(self) -> None:
        if self.label not in (0, 1):
            raise ValueError("label must be 0 or 1")
        if not 0.0 <= self.write_entropy_mean <= 1.0:
            raise ValueError("write_entropy_mean must be in [0, 1]")
        if self.write_entropy_std < 0:
            raise ValueError("write_entropy_std must be non-negative")
        if self.write_rate < 0 or self.read_rate < 0:
            raise ValueError("event rates must be non-negative")
        if self.lba_pattern not in LBA_PATTERNS:
            raise ValueError(f"unknown lba_pattern {self.lba_pattern!r}")
        if self.n_clusters < 1 or self.cluster_spread < 0:
            raise ValueError("invalid cluster parameters")
        if self.bytes_min < 1 or self.bytes_mean <= 0 or self.bytes_std < 0:
            raise ValueError("invalid bytes distribution")
        if self.duration_seconds <= 0:
            raise ValueError("duration_seconds must be positive")


@dataclass(frozen=True)
class LabelKnobs:
    """How one server distorts one class relative to the base profile."""

    write_rate_multiplier: float = 1.0
    read_rate_multiplier: float = 1.0
    entropy_shift: float = 0.0

    def __post_init__(self) -> None:
        if self.write_rate_multiplier < 0 or self.read_rate_multiplier < 0:
            raise ValueError("rate multipliers must be non-negative")


@dataclass(frozen=True)
class ServerProfile:
    """Per-node hardware heterogeneity: per-label knobs plus disk size."""

    server_id: str
    lba_max: int = 234_000_000  # sectors; ~120 GB disk
    benign: LabelKnobs = LabelKnobs()
    ransom: LabelKnobs = LabelKnobs()

    def __post_init__(self) -> None:
        if not self.server_id:
            raise ValueError("server_id must be non-empty")
        if self.lba_max < 1:
            raise ValueError("lba_max must be positive")

    def knobs(self, label: int) -> LabelKnobs:
        return self.ransom if label == 1 else self.benign


DEFAULT_BENIGN_PROFILE = ProfileSpec(label=0, write_entropy_mean=0.4,
                                     write_entropy_std=0.08)
DEFAULT_RANSOMWARE_PROFILE = ProfileSpec(label=1, write_entropy_mean=0.9,
                                         write_entropy_std=0.04,
                                         lba_pattern=SEQUENTIAL)


def _event_times(rate: float, duration: float, rng: np.random.Generator) -> np.ndarray:
    """Arrival seconds of a homogeneous memoryless process."""
    if rate == 0.0:
        return np.empty(0)
    n = rng.poisson(rate * duration)
    return np.sort(rng.uniform(0.0, duration, size=n))


def _lbas(pattern: str, n: int, sizes: np.ndarray, lba_max: int,
          n_clusters: int, spread: float, rng: np.random.Generator) -> np.ndarray:
    if n == 0:
        return np.empty(0, dtype=np.int64)
    if pattern == SEQUENTIAL:
        start = int(rng.integers(0, max(lba_max // 2, 1)))
        sectors = sizes // 512
        lba = start + np.concatenate(([0], np.cumsum(sectors[:-1])))
        return np.minimum(lba, lba_max - 1).astype(np.int64)
    if pattern == UNIFORM_RANDOM:
        return rng.integers(0, lba_max, size=n, dtype=np.int64)
    centers = rng.integers(0, lba_max, size=n_clusters)
    member = rng.integers(0, n_clusters, size=n)
    offsets = rng.normal(0.0, spread, size=n)
    return np.clip(centers[member] + offsets, 0, lba_max - 1).astype(np.int64)


def _byte_counts(n: int, profile: ProfileSpec, rng: np.random.Generator) -> np.ndarray:
    raw = rng.normal(profile.bytes_mean, profile.bytes_std, size=n)
    sectors = np.maximum(np.round(raw / 512.0), 1).astype(np.int64)
    return np.maximum(sectors * 512, profile.bytes_min)


def _stamp(times: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    sec = times.astype(np.int64)
    usec = np.minimum(((times - sec) * 1_000_000).astype(np.int64), 999_999)
    return sec, usec


def generate_run(profile: ProfileSpec, server: ServerProfile, seed: int,
                 software_name: str = "synthetic") -> TraceRun:
    """One software execution's trace on one server; deterministic per seed."""
    rng = np.random.default_rng(seed)
    knobs = server.knobs(profile.label)
    # per-run intensity jitter spreads throughput within a class
    w_rate = profile.write_rate * knobs.write_rate_multiplier \
        * float(rng.lognormal(0.0, 0.10))
    r_rate = profile.read_rate * knobs.read_rate_multiplier \
        * float(rng.lognormal(0.0, 0.10))

    w_times = _event_times(w_rate, profile.duration_seconds, rng)
    r_times = _event_times(r_rate, profile.duration_seconds, rng)
    if w_times.size == 0 and r_times.size == 0:
        raise ValueError(
            f"profile for {software_name!r} produced an empty run; "
            "raise a rate or the duration")

    w_sizes = _byte_counts(w_times.size, profile, rng)
    r_sizes = _byte_counts(r_times.size, profile, rng)
    w_lba = _lbas(profile.lba_pattern, w_times.size, w_sizes, server.lba_max,
                  profile.n_clusters, profile.cluster_spread, rng)
    r_lba = _lbas(profile.lba_pattern, r_times.size, r_sizes, server.lba_max,
                  profile.n_clusters, profile.cluster_spread, rng)

    # small per-run drift so window averages vary run to run
    e_mean = profile.write_entropy_mean + knobs.entropy_shift \
        + float(rng.normal(0.0, 0.008))
    entropies = np.clip(
        rng.normal(e_mean, profile.write_entropy_std, size=w_times.size),
        0.0, 1.0)

    w_sec, w_usec = _stamp(w_times)
    r_sec, r_usec = _stamp(r_times)
    writes = tuple(
        WriteEvent(int(w_sec[i]), int(w_usec[i]), int(w_lba[i]),
                   int(w_sizes[i]), float(entropies[i]))
        for i in range(w_times.size))
    reads = tuple(
        ReadEvent(int(r_sec[i]), int(r_usec[i]), int(r_lba[i]), int(r_sizes[i]))
        for i in range(r_times.size))
    return TraceRun(server.server_id, software_name, profile.label,
                    reads=reads, writes=writes)


@dataclass(frozen=True)
class SoftwareSpec:
    """A named software family and its behavioral profile."""

    name: str
    profile: ProfileSpec

    @property
    def label(self) -> int:
        return self.profile.label


@dataclass(frozen=True)
class CorpusConfig:
    """Everything needed to generate a corpus deterministically."""

    servers: tuple[ServerProfile, ...]
    software: tuple[SoftwareSpec, ...]
    runs_per_software: int = 11
    master_seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "servers", tuple(self.servers))
        object.__setattr__(self, "software", tuple(self.software))
        if not self.servers or not self.software:
            raise ValueError("corpus needs at least one server and one software")
        if self.runs_per_software < 1:
            raise ValueError("runs_per_software must be positive")
        names = [s.name for s in self.software]
        if len(set(names)) != len(names):
            raise ValueError("duplicate software names")
        ids = [s.server_id for s in self.servers]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate server ids")


# Default four-node heterogeneous world. Class-conditional entropy levels and
# rate multipliers are staggered across servers so that each node's decision
# boundary sits at a different place: every locally trained model misreads a
# few foreign server/software cells, but for any given cell most nodes still
# vote correctly, so the pooled forest recovers. Rate multipliers are ordered
# differently from the entropy ladder to keep any single feature from being
# globally separable.
DEFAULT_SERVERS = (
    ServerProfile("win7-120gb-hdd", lba_max=234_000_000,
                  benign=LabelKnobs(1.15, 1.10, -0.16),
                  ransom=LabelKnobs(1.25, 1.20, -0.17)),
    ServerProfile("win7-120gb-ssd", lba_max=234_000_000,
                  benign=LabelKnobs(0.75, 0.78, -0.02),
                  ransom=LabelKnobs(1.20, 1.15, -0.06)),
    ServerProfile("win7-250gb-hdd", lba_max=488_000_000,
                  benign=LabelKnobs(1.00, 0.95, -0.03),
                  ransom=LabelKnobs(0.80, 0.82, -0.185)),
    ServerProfile("win7-250gb-ssd", lba_max=488_000_000,
                  benign=LabelKnobs(0.55, 0.58, +0.035),
                  ransom=LabelKnobs(1.10, 1.05, -0.14)),
)

DEFAULT_SOFTWARE = (
    SoftwareSpec("aescrypt", ProfileSpec(0, 0.58, 0.08, 0.55, 0.50, CLUSTERED)),
    SoftwareSpec("zip", ProfileSpec(0, 0.52, 0.08, 0.70, 0.80, SEQUENTIAL)),
    SoftwareSpec("sdelete", ProfileSpec(0, 0.30, 0.07, 0.80, 0.30, SEQUENTIAL)),
    SoftwareSpec("excel", ProfileSpec(0, 0.34, 0.08, 0.45, 0.55, CLUSTERED)),
    SoftwareSpec("firefox", ProfileSpec(0, 0.44, 0.10, 0.60, 0.70, UNIFORM_RANDOM)),
    SoftwareSpec("teslacrypt", ProfileSpec(1, 0.96, 0.025, 1.00, 0.90, SEQUENTIAL)),
    SoftwareSpec("cerber", ProfileSpec(1, 0.92, 0.04, 0.90, 0.85, CLUSTERED)),
    SoftwareSpec("wannacry", ProfileSpec(1, 0.94, 0.03, 1.10, 0.95, SEQUENTIAL)),
    SoftwareSpec("gandcrab", ProfileSpec(1, 0.89, 0.05, 0.85, 0.80, UNIFORM_RANDOM)),
    SoftwareSpec("ryuk", ProfileSpec(1, 0.91, 0.04, 1.05, 0.90, SEQUENTIAL)),
    SoftwareSpec("sodinokibi", ProfileSpec(1, 0.87, 0.07, 0.80, 0.75, CLUSTERED)),
    SoftwareSpec("darkside", ProfileSpec(1, 0.84, 0.10, 0.75, 0.70, UNIFORM_RANDOM)),
)


def default_corpus_config(master_seed: int = 0, runs_per_software: int = 11,
                          duration_seconds: float | None = None) -> CorpusConfig:
    """The stock 4-server x 12-software corpus, optionally rescaled."""
    software = DEFAULT_SOFTWARE
    if duration_seconds is not None:
        software = tuple(
            SoftwareSpec(s.name, replace(s.profile,
                                         duration_seconds=duration_seconds))
            for s in software)
    return CorpusConfig(servers=DEFAULT_SERVERS, software=software,
                        runs_per_software=runs_per_software,
                        master_seed=master_seed)


def iter_corpus_runs(config: CorpusConfig) -> Iterator[tuple[int, TraceRun]]:
    """Generate every run of the corpus in memory, with its run index."""
    for server in config.servers:
        for sw in config.software:
            for k in range(config.runs_per_software):
                seed = derive_seed(config.master_seed, "synth",
                                   server.server_id, sw.name, k)
                yield k, generate_run(sw.profile, server, seed, sw.name)


def generate_corpus(config: CorpusConfig, out_dir: str | Path) -> int:
    """Write the corpus as `<server>/<software>/run-<k>/` CSV pairs.

    A labels manifest maps each software name to its class. Returns the
    number of run directories written.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_runs = 0
    for k, run in iter_corpus_runs(config):
        run_dir = out / run.server_id / run.software_name / f"run-{k}"
        if run_dir.exists():
            raise FileExistsError(f"refusing to overwrite {run_dir}")
        run_dir.mkdir(parents=True)
        (run_dir / READ_FILE).write_bytes(format_read_csv(run.reads))
        (run_dir / WRITE_FILE).write_bytes(format_write_csv(run.writes))
        n_runs += 1
    labels = "".join(f"{s.name}={s.label}\n" for s in config.software)
    (out / LABELS_FILE).write_text(labels, encoding="utf-8")
    log.info("wrote %d runs under %s", n_runs, out)
    return n_runs


def _profile_to_doc(p: ProfileSpec) -> dict:
    return {
        "label": p.label,
        "write_entropy_dist": {"mean": p.write_entropy_mean,
                               "stddev": p.write_entropy_std},
        "write_rate": p.write_rate,
        "read_rate": p.read_rate,
        "lba_pattern": p.lba_pattern,
        "n_clusters": p.n_clusters,
        "cluster_spread": p.cluster_spread,
        "bytes_dist": {"mean": p.bytes_mean, "stddev": p.bytes_std,
                       "min": p.bytes_min},
        "duration_seconds": p.duration_seconds,
    }


def _profile_from_doc(doc: dict) -> ProfileSpec:
    ent = doc.get("write_entropy_dist", {})
    byt = doc.get("bytes_dist", {})
    base = ProfileSpec(label=int(doc["label"]),
                       write_entropy_mean=float(ent["mean"]))
    return replace(
        base,
        write_entropy_std=float(ent.get("stddev", base.write_entropy_std)),
        write_rate=float(doc.get("write_rate", base.write_rate)),
        read_rate=float(doc.get("read_rate", base.read_rate)),
        lba_pattern=doc.get("lba_pattern", base.lba_pattern),
        n_clusters=int(doc.get("n_clusters", base.n_clusters)),
        cluster_spread=float(doc.get("cluster_spread", base.cluster_spread)),
        bytes_mean=float(byt.get("mean", base.bytes_mean)),
        bytes_std=float(byt.get("stddev", base.bytes_std)),
        bytes_min=int(byt.get("min", base.bytes_min)),
        duration_seconds=float(doc.get("duration_seconds",
                                       base.duration_seconds)),
    )


def _knobs_to_doc(k: LabelKnobs) -> dict:
    return {
        "write_rate_multiplier": k.write_rate_multiplier,
        "read_rate_multiplier": k.read_rate_multiplier,
        "entropy_shift": k.entropy_shift,
    }


def _knobs_from_doc(doc: dict) -> LabelKnobs:
    return LabelKnobs(
        write_rate_multiplier=float(doc.get("write_rate_multiplier", 1.0)),
        read_rate_multiplier=float(doc.get("read_rate_multiplier", 1.0)),
        entropy_shift=float(doc.get("entropy_shift", 0.0)),
    )


def _server_to_doc(s: ServerProfile) -> dict:
    return {
        "server_id": s.server_id,
        "lba_max": s.lba_max,
        "benign": _knobs_to_doc(s.benign),
        "ransom": _knobs_to_doc(s.ransom),
    }


def _server_from_doc(doc: dict) -> ServerProfile:
    return ServerProfile(
        server_id=str(doc["server_id"]),
        lba_max=int(doc.get("lba_max", 234_000_000)),
        benign=_knobs_from_doc(doc.get("benign", {})),
        ransom=_knobs_from_doc(doc.get("ransom", {})),
    )


def corpus_config_to_doc(config: CorpusConfig) -> dict:
    return {
        "master_seed": config.master_seed,
        "runs_per_software": config.runs_per_software,
        "servers": [_server_to_doc(s) for s in config.servers],
        "software": [{"name": s.name, **_profile_to_doc(s.profile)}
                     for s in config.software],
    }


def corpus_config_from_doc(doc: dict) -> CorpusConfig:
    try:
        servers = tuple(_server_from_doc(d) for d in doc["servers"])
        software = tuple(SoftwareSpec(str(d["name"]), _profile_from_doc(d))
                         for d in doc["software"])
        return CorpusConfig(
            servers=servers, software=software,
            runs_per_software=int(doc.get("runs_per_software", 11)),
            master_seed=int(doc.get("master_seed", 0)))
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed corpus config: {exc}") from exc


def load_corpus_config(path: str | Path) -> CorpusConfig:
    """Read a corpus definition from a YAML file."""
    import yaml

    with open(path, "r", encoding="utf-8") as f:
        doc = yaml.safe_load(f)
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: corpus config must be a mapping")
    return corpus_config_from_doc(doc)


def read_labels_manifest(path: str | Path) -> dict[str, int]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        name, sep, value = line.partition("=")
        if not sep or value not in ("0", "1"):
            raise ValueError(f"malformed labels line: {line!r}")
        out[name] = int(value)
    return out


def load_corpus(corpus_dir: str | Path, lenient: bool = False) -> list[TraceRun]:
    """Parse an on-disk corpus tree back into trace runs."""
    root = Path(corpus_dir)
    labels_path = root / LABELS_FILE
    if not labels_path.is_file():
        raise FileNotFoundError(f"no {LABELS_FILE} in {root}")
    labels = read_labels_manifest(labels_path)

    runs: list[TraceRun] = []
    for server_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for sw_dir in sorted(p for p in server_dir.iterdir() if p.is_dir()):
            if sw_dir.name not in labels:
                raise ValueError(
                    f"{sw_dir}: software missing from the labels manifest")
            for run_dir in sorted(p for p in sw_dir.iterdir() if p.is_dir()):
                with open(run_dir / READ_FILE, "rb") as f:
                    reads = parse_read_csv(f, lenient=lenient)
                with open(run_dir / WRITE_FILE, "rb") as f:
                    writes = parse_write_csv(f, lenient=lenient)
                runs.append(TraceRun(server_dir.name, sw_dir.name,
                                     labels[sw_dir.name],
                                     reads=reads, writes=writes))
    if not runs:
        raise ValueError(f"no runs found under {root}")
    return runs
