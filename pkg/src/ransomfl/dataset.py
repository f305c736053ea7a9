"""Per-node dataset assembly: stratified hold-out, class balancing, scaling.

Samples are grouped by the server that produced them, split into train/test
with per-class proportions preserved, and optionally rebalanced (training
side only). A z-score normalizer can be fitted per owning scope; statistics
are never shared across nodes.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .features import FeatureVector, feature_matrix, read_features_csv, write_features_csv
from .seeds import derive_seed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SplitSpec:
    """Train/test hold-out parameters."""

    test_fraction: float = 0.25
    seed: int = 0
    stratify: bool = True

    def __post_init__(self) -> None:
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must be in (0, 1)")


@dataclass(frozen=True)
class BalanceSpec:
    """Two-stage class rebalancing: undersample majority, oversample minority.

    The majority class is first cut down to ``ratio`` times the minority
    count; the minority is then duplicated up to parity with the reduced
    majority when ``oversample_minority_to_parity`` is set.
    """

    undersample_majority_to_ratio: float = 1.5
    oversample_minority_to_parity: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.undersample_majority_to_ratio < 1.0:
            raise ValueError("undersample_majority_to_ratio must be >= 1")


@dataclass(frozen=True)
class NodeDataset:
    """One node's local data: disjoint train and test sample sequences."""

    node_id: str
    train: tuple[FeatureVector, ...] = ()
    test: tuple[FeatureVector, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "train", tuple(self.train))
        object.__setattr__(self, "test", tuple(self.test))

    @property
    def n_train(self) -> int:
        return len(self.train)

    @property
    def n_test(self) -> int:
        return len(self.test)


def class_counts(samples: Iterable[FeatureVector]) -> tuple[int, int]:
    """(benign count, ransomware count)."""
    n0 = n1 = 0
    for s in samples:
        if s.label == 0:
            n0 += 1
        else:
            n1 += 1
    return n0, n1


def _split_group(indices: np.ndarray, n_test: int,
                 rng: np.random.Generator) -> tuple[list[int], list[int]]:
    perm = rng.permutation(indices)
    test = sorted(int(i) for i in perm[:n_test])
    train = sorted(int(i) for i in perm[n_test:])
    return train, test


def stratified_split(samples: Sequence[FeatureVector],
                     spec: SplitSpec) -> tuple[list[FeatureVector], list[FeatureVector]]:
    """Partition samples into (train, test) per the hold-out spec.

    Per-class test counts are round(class_count * test_fraction), clamped so
    both sides keep at least one sample of every present class. Outputs
    preserve the input's relative order; the same spec always produces the
    same partition.
    """
    if not samples:
        raise ValueError("cannot split an empty sample sequence")
    labels = np.array([s.label for s in samples], dtype=np.int64)
    rng = np.random.default_rng(spec.seed)

    groups: list[np.ndarray]
    if spec.stratify:
        groups = [np.flatnonzero(labels == c) for c in (0, 1)]
        groups = [g for g in groups if g.size]
        for g in groups:
            if g.size < 2:
                raise ValueError(
                    f"class {int(labels[g[0]])} has only {g.size} sample(s); "
                    "need at least 2 to stratify")
    else:
        groups = [np.arange(len(samples))]
        if len(samples) < 2:
            raise ValueError("need at least 2 samples to split")

    train_idx: list[int] = []
    test_idx: list[int] = []
    for g in groups:
        n_test = int(round(g.size * spec.test_fraction))
        n_test = min(max(n_test, 1), g.size - 1)
        tr, te = _split_group(g, n_test, rng)
        train_idx.extend(tr)
        test_idx.extend(te)
    train_idx.sort()
    test_idx.sort()
    return [samples[i] for i in train_idx], [samples[i] for i in test_idx]


def balance_classes(train: Sequence[FeatureVector],
                    spec: BalanceSpec) -> list[FeatureVector]:
    """Rebalance a training set; never applied to test data.

    Kept samples stay in input order; duplicated minority samples are
    appended in draw order. A set that already satisfies the spec comes back
    unchanged.
    """
    n0, n1 = class_counts(train)
    if n0 == 0 or n1 == 0:
        raise ValueError("balancing requires both classes present")
    minority_label = 1 if n1 < n0 else 0
    n_min = min(n0, n1)
    n_maj = max(n0, n1)

    labels = np.array([s.label for s in train], dtype=np.int64)
    maj_idx = np.flatnonzero(labels != minority_label)
    min_idx = np.flatnonzero(labels == minority_label)

    rng = np.random.default_rng(spec.seed)
    target_maj = min(n_maj, int(round(spec.undersample_majority_to_ratio * n_min)))
    if target_maj < n_maj:
        kept_maj = set(int(i) for i in
                       rng.choice(maj_idx, size=target_maj, replace=False))
    else:
        kept_maj = set(int(i) for i in maj_idx)

    out = [s for i, s in enumerate(train)
           if labels[i] == minority_label or i in kept_maj]
    if spec.oversample_minority_to_parity and target_maj > n_min:
        extra = rng.choice(min_idx, size=target_maj - n_min, replace=True)
        out.extend(train[int(i)] for i in extra)
    return out


@dataclass(frozen=True)
class Normalizer:
    """Per-feature z-score statistics fitted on one scope's training data."""

    mean: tuple[float, ...]
    std: tuple[float, ...]

    def transform(self, x: np.ndarray) -> np.ndarray:
        """Scale a (n, 5) matrix; zero-variance features map to 0."""
        mean = np.array(self.mean)
        std = np.array(self.std)
        safe = np.where(std > 0.0, std, 1.0)
        out = (np.asarray(x, dtype=np.float64) - mean) / safe
        out[:, std == 0.0] = 0.0
        return out


def fit_normalizer(train: Sequence[FeatureVector] | np.ndarray) -> Normalizer:
    """Fit z-score statistics (population std) on training data only."""
    if isinstance(train, np.ndarray):
        x = np.asarray(train, dtype=np.float64)
    else:
        x, _ = feature_matrix(train)
    if x.shape[0] == 0:
        raise ValueError("cannot fit a normalizer on empty training data")
    return Normalizer(mean=tuple(float(v) for v in x.mean(axis=0)),
                      std=tuple(float(v) for v in x.std(axis=0)))


def apply_normalizer(norm: Normalizer,
                     samples: Sequence[FeatureVector] | np.ndarray) -> np.ndarray:
    """Apply fitted statistics without re-estimating them."""
    if isinstance(samples, np.ndarray):
        x = samples
    else:
        x, _ = feature_matrix(samples)
    return norm.transform(x)


def partition_by_server(samples: Sequence[FeatureVector], spec: SplitSpec,
                        node_ids: Sequence[str] | None = None) -> dict[str, NodeDataset]:
    """Group samples by server and split each node's data independently.

    Each node's split seed is derived from spec.seed and the node id, so one
    node's data never perturbs another's partition. Configured nodes with no
    samples yield empty datasets and a warning.
    """
    seen = sorted({s.server_id for s in samples})
    if node_ids is None:
        node_ids = seen
    unknown = set(seen) - set(node_ids)
    if unknown:
        raise ValueError(f"samples reference unconfigured server ids: {sorted(unknown)}")

    out: dict[str, NodeDataset] = {}
    for node in node_ids:
        local = [s for s in samples if s.server_id == node]
        if not local:
            log.warning("node %s has no samples; emitting empty dataset", node)
            out[node] = NodeDataset(node)
            continue
        node_spec = dataclasses.replace(spec, seed=derive_seed(spec.seed, "split", node))
        train, test = stratified_split(local, node_spec)
        out[node] = NodeDataset(node, train=tuple(train), test=tuple(test))
    return out


def pooled_test(nodes: Mapping[str, NodeDataset] | Sequence[NodeDataset]) -> list[FeatureVector]:
    """Union of per-node test sets in ascending node-id order."""
    if isinstance(nodes, Mapping):
        ordered = [nodes[k] for k in sorted(nodes)]
    else:
        ordered = sorted(nodes, key=lambda d: d.node_id)
    out: list[FeatureVector] = []
    for ds in ordered:
        out.extend(ds.test)
    return out


MANIFEST_NAME = "manifest.txt"


def save_node_dataset(ds: NodeDataset, directory: str | Path,
                      spec: SplitSpec | None = None) -> None:
    """Persist one node's dataset: train/test CSVs plus a key-value manifest."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "train.csv", "w", encoding="utf-8") as f:
        write_features_csv(ds.train, f)
    with open(d / "test.csv", "w", encoding="utf-8") as f:
        write_features_csv(ds.test, f)
    tr0, tr1 = class_counts(ds.train)
    te0, te1 = class_counts(ds.test)
    lines = [
        f"node_id={ds.node_id}",
        f"n_train={ds.n_train}",
        f"n_test={ds.n_test}",
        f"train_benign={tr0}",
        f"train_ransomware={tr1}",
        f"test_benign={te0}",
        f"test_ransomware={te1}",
    ]
    if spec is not None:
        lines += [
            f"test_fraction={spec.test_fraction!r}",
            f"seed={spec.seed}",
            f"stratify={str(spec.stratify).lower()}",
        ]
    (d / MANIFEST_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(directory: str | Path) -> dict[str, str]:
    text = (Path(directory) / MANIFEST_NAME).read_text(encoding="utf-8")
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"malformed manifest line: {line!r}")
        out[key] = value
    return out


def load_node_dataset(directory: str | Path) -> NodeDataset:
    """Load a dataset saved by :func:`save_node_dataset`, verifying counts."""
    d = Path(directory)
    manifest = read_manifest(d)
    with open(d / "train.csv", encoding="utf-8") as f:
        train = read_features_csv(f)
    with open(d / "test.csv", encoding="utf-8") as f:
        test = read_features_csv(f)
    ds = NodeDataset(manifest["node_id"], train=tuple(train), test=tuple(test))
    for key, actual in (("n_train", ds.n_train), ("n_test", ds.n_test)):
        if key in manifest and int(manifest[key]) != actual:
            raise ValueError(
                f"{d}: manifest says {key}={manifest[key]} but found {actual}")
    return ds
