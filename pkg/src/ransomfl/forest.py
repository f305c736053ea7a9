"""From-scratch binary Random Forest over the five window features.

Trees are grown on bootstrap resamples with a random feature subset at every
split, chosen by Gini impurity. The ensemble has a portable JSON form so
models can cross process and node boundaries; training is deterministic for
a fixed seed, including across serial and parallel schedules (per-tree seed
= seed + tree index).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numba import njit

from .features import FeatureVector, feature_matrix

N_FEATURES = 5
FORMAT_VERSION = 1


class ForestFormatError(Exception):
    """Base class for serialized-forest problems."""


class ForestSchemaError(ForestFormatError):
    """Payload is not valid JSON or violates the document schema."""


class ForestVersionError(ForestFormatError):
    """Payload declares an unsupported format version."""


class ForestStructureError(ForestFormatError):
    """Node graph is not a finite binary tree rooted at index 0."""


@dataclass(frozen=True)
class TrainConfig:
    """Forest training parameters; defaults follow common RF practice."""

    n_trees: int = 100
    max_features_per_split: str | int = "sqrt"
    max_depth: int | None = None
    min_samples_split: int = 2
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_trees < 1:
            raise ValueError("n_trees must be positive")
        if self.min_samples_split < 2:
            raise ValueError("min_samples_split must be >= 2")
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError("max_depth must be positive when set")
        mf = self.max_features_per_split
        if isinstance(mf, bool) or not (
                mf in ("sqrt", "all")
                or (isinstance(mf, int) and 1 <= mf <= N_FEATURES)):
            raise ValueError(f"invalid max_features_per_split: {mf!r}")

    def features_per_split(self) -> int:
        if self.max_features_per_split == "sqrt":
            return math.ceil(math.sqrt(N_FEATURES))
        if self.max_features_per_split == "all":
            return N_FEATURES
        return int(self.max_features_per_split)


@dataclass(frozen=True)
class Tree:
    """One decision tree as flat parallel arrays indexed by node id.

    feature[i] is -1 at leaves; child indices are -1 at leaves. Class counts
    are populated for every node during training but only leaf counts are
    part of the portable form.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    count0: np.ndarray
    count1: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Leaf node index reached by each row of x."""
        node = np.zeros(x.shape[0], dtype=np.int64)
        active = np.flatnonzero(self.feature[node] >= 0)
        while active.size:
            cur = node[active]
            f = self.feature[cur]
            go_left = x[active, f] <= self.threshold[cur]
            nxt = np.where(go_left, self.left[cur], self.right[cur])
            node[active] = nxt
            active = active[self.feature[nxt] >= 0]
        return node

    def leaf_fraction(self, x: np.ndarray) -> np.ndarray:
        """Positive-class fraction of the reached leaf, per row."""
        leaf = self.apply(x)
        c0 = self.count0[leaf].astype(np.float64)
        c1 = self.count1[leaf].astype(np.float64)
        return c1 / (c0 + c1)

    def votes(self, x: np.ndarray) -> np.ndarray:
        """Hard per-tree vote: majority class of the reached leaf (tie -> 1)."""
        leaf = self.apply(x)
        return (self.count1[leaf] >= self.count0[leaf]).astype(np.int64)


@dataclass(frozen=True)
class Forest:
    """Trained ensemble plus training provenance."""

    trees: tuple[Tree, ...]
    n_features: int = N_FEATURES
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.trees:
            raise ValueError("a forest must contain at least one tree")
        object.__setattr__(self, "trees", tuple(self.trees))

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def _as_matrix(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(1, -1)
        if x.shape[1] != self.n_features:
            raise ValueError(
                f"expected {self.n_features} features, got {x.shape[1]}")
        return x

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Majority of hard tree votes; exact tie resolved to ransomware."""
        x = self._as_matrix(x)
        votes = np.zeros(x.shape[0], dtype=np.int64)
        for tree in self.trees:
            votes += tree.votes(x)
        return (2 * votes >= self.n_trees).astype(np.int64)

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        """Mean over trees of the reached leaf's positive-class fraction."""
        x = self._as_matrix(x)
        total = np.zeros(x.shape[0], dtype=np.float64)
        for tree in self.trees:
            total += tree.leaf_fraction(x)
        return total / self.n_trees


def gini(class_counts: Sequence[int]) -> float:
    """Binary Gini impurity 1 - p0^2 - p1^2 of a count pair."""
    c0, c1 = class_counts
    if c0 < 0 or c1 < 0:
        raise ValueError("class counts must be non-negative")
    total = c0 + c1
    if total == 0:
        raise ValueError("gini undefined for an empty node")
    p0 = c0 / total
    p1 = c1 / total
    return 1.0 - p0 * p0 - p1 * p1


@njit(cache=True)
def _next_u64(state):
    # splitmix64: tiny deterministic generator for in-kernel feature subsets
    state = np.uint64(state + np.uint64(0x9E3779B97F4A7C15))
    z = state
    z = np.uint64((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9))
    z = np.uint64((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB))
    z = z ^ (z >> np.uint64(31))
    return state, z


@njit(cache=True)
def _grow_tree(x, y, idx, max_depth, min_split, k_features, rng_seed):
    m = idx.shape[0]
    n_feat = x.shape[1]
    max_nodes = 2 * m + 1

    feature = np.full(max_nodes, -1, dtype=np.int64)
    threshold = np.zeros(max_nodes, dtype=np.float64)
    left = np.full(max_nodes, -1, dtype=np.int64)
    right = np.full(max_nodes, -1, dtype=np.int64)
    count0 = np.zeros(max_nodes, dtype=np.int64)
    count1 = np.zeros(max_nodes, dtype=np.int64)

    vals = np.empty(m, dtype=np.float64)
    labs = np.empty(m, dtype=np.int64)
    tmp = np.empty(m, dtype=np.int64)
    pool = np.empty(n_feat, dtype=np.int64)

    stack_node = np.empty(max_nodes, dtype=np.int64)
    stack_start = np.empty(max_nodes, dtype=np.int64)
    stack_end = np.empty(max_nodes, dtype=np.int64)
    stack_depth = np.empty(max_nodes, dtype=np.int64)
    stack_node[0] = 0
    stack_start[0] = 0
    stack_end[0] = m
    stack_depth[0] = 0
    top = 1
    n_nodes = 1
    state = np.uint64(rng_seed)

    while top > 0:
        top -= 1
        node = stack_node[top]
        start = stack_start[top]
        end = stack_end[top]
        depth = stack_depth[top]

        c0 = 0
        c1 = 0
        for i in range(start, end):
            if y[idx[i]] == 1:
                c1 += 1
            else:
                c0 += 1
        count0[node] = c0
        count1[node] = c1
        n_node = end - start
        if (c0 == 0 or c1 == 0 or n_node < min_split
                or (max_depth >= 0 and depth >= max_depth)):
            continue

        # fresh random feature subset, evaluated in ascending index order
        for i in range(n_feat):
            pool[i] = i
        for i in range(k_features):
            state, z = _next_u64(state)
            j = i + np.int64(z % np.uint64(n_feat - i))
            t = pool[i]
            pool[i] = pool[j]
            pool[j] = t
        sub = np.sort(pool[:k_features])

        # best split = lowest weighted child impurity; ties keep the first
        # candidate, i.e. lowest feature index then lowest threshold
        best_score = np.inf
        best_feat = -1
        best_thr = 0.0
        for fi in range(k_features):
            f = sub[fi]
            for i in range(n_node):
                vals[i] = x[idx[start + i], f]
                labs[i] = y[idx[start + i]]
            order = np.argsort(vals[:n_node])
            l0 = 0
            l1 = 0
            for oi in range(n_node - 1):
                o = order[oi]
                if labs[o] == 1:
                    l1 += 1
                else:
                    l0 += 1
                v_cur = vals[o]
                v_next = vals[order[oi + 1]]
                if v_next <= v_cur:
                    continue
                thr = v_cur + 0.5 * (v_next - v_cur)
                if thr >= v_next:
                    # adjacent floats: fall back to the left value, which
                    # still separates under the x <= thr convention
                    thr = v_cur
                nl = l0 + l1
                nr = n_node - nl
                r0 = c0 - l0
                r1 = c1 - l1
                gl = 1.0 - (l0 / nl) ** 2 - (l1 / nl) ** 2
                gr = 1.0 - (r0 / nr) ** 2 - (r1 / nr) ** 2
                score = nl * gl + nr * gr
                if score < best_score:
                    best_score = score
                    best_feat = f
                    best_thr = thr
        if best_feat < 0:
            continue  # all candidate features constant here: leaf

        nl = 0
        for i in range(start, end):
            if x[idx[i], best_feat] <= best_thr:
                tmp[nl] = idx[i]
                nl += 1
        nr = nl
        for i in range(start, end):
            if x[idx[i], best_feat] > best_thr:
                tmp[nr] = idx[i]
                nr += 1
        for i in range(n_node):
            idx[start + i] = tmp[i]

        lid = n_nodes
        rid = n_nodes + 1
        n_nodes += 2
        feature[node] = best_feat
        threshold[node] = best_thr
        left[node] = lid
        right[node] = rid
        stack_node[top] = rid
        stack_start[top] = start + nl
        stack_end[top] = end
        stack_depth[top] = depth + 1
        top += 1
        stack_node[top] = lid
        stack_start[top] = start
        stack_end[top] = start + nl
        stack_depth[top] = depth + 1
        top += 1

    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(),
            left[:n_nodes].copy(), right[:n_nodes].copy(),
            count0[:n_nodes].copy(), count1[:n_nodes].copy())


def bootstrap_indices(n: int, rng: np.random.Generator) -> np.ndarray:
    """Size-n resample with replacement; the bagging step of training."""
    return rng.integers(0, n, size=n, dtype=np.int64)


def train_forest_arrays(x: np.ndarray, y: np.ndarray, cfg: TrainConfig,
                        provenance: Sequence[str] = ()) -> Forest:
    """Train on a prepared (n, 5) matrix and 0/1 label vector."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.int64)
    n = y.shape[0]
    if n == 0:
        raise ValueError("cannot train a forest on empty data")
    if x.shape != (n, N_FEATURES):
        raise ValueError(f"expected x of shape ({n}, {N_FEATURES}), got {x.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")

    k = cfg.features_per_split()
    depth = -1 if cfg.max_depth is None else cfg.max_depth
    trees = []
    for t in range(cfg.n_trees):
        rng = np.random.default_rng(cfg.seed + t)
        if cfg.bootstrap:
            idx = bootstrap_indices(n, rng)
        else:
            idx = np.arange(n, dtype=np.int64)
        subset_seed = int(rng.integers(0, 2**63, dtype=np.int64))
        trees.append(Tree(*_grow_tree(x, y, idx, depth, cfg.min_samples_split,
                                      k, subset_seed)))
    meta = {
        "seed": cfg.seed,
        "n_trees": cfg.n_trees,
        "max_features_per_split": cfg.max_features_per_split,
        "max_depth": cfg.max_depth,
        "min_samples_split": cfg.min_samples_split,
        "bootstrap": cfg.bootstrap,
        "provenance": sorted(provenance),
    }
    return Forest(trees=tuple(trees), meta=meta)


def train_forest(train: Sequence[FeatureVector], cfg: TrainConfig) -> Forest:
    """Train on labeled feature vectors; provenance is their server ids."""
    if not train:
        raise ValueError("cannot train a forest on empty data")
    x, y = feature_matrix(train)
    return train_forest_arrays(x, y, cfg,
                               provenance=sorted({s.server_id for s in train}))


def denormalize_thresholds(forest: Forest, mean: Sequence[float],
                           std: Sequence[float]) -> Forest:
    """Map split thresholds from z-scored space back to raw feature units.

    A forest trained on (x - mean)/std with thresholds mapped by
    t_raw = t * std + mean predicts identically on raw inputs, so exported
    models carry no scaler state.
    """
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    out = []
    for tree in forest.trees:
        thr = tree.threshold.copy()
        internal = tree.feature >= 0
        f = tree.feature[internal]
        thr[internal] = tree.threshold[internal] * std[f] + mean[f]
        out.append(Tree(tree.feature, thr, tree.left, tree.right,
                        tree.count0, tree.count1))
    return Forest(trees=tuple(out), n_features=forest.n_features,
                  meta=dict(forest.meta))


def _tree_to_nodes(tree: Tree) -> list[list]:
    nodes: list[list] = []
    for i in range(tree.n_nodes):
        if tree.feature[i] >= 0:
            nodes.append([int(tree.feature[i]), float(tree.threshold[i]),
                          int(tree.left[i]), int(tree.right[i])])
        else:
            nodes.append([int(tree.count0[i]), int(tree.count1[i])])
    return nodes


def forest_to_doc(forest: Forest) -> dict:
    """JSON-safe document form; the body of model-bearing protocol messages."""
    return {
        "version": FORMAT_VERSION,
        "n_features": forest.n_features,
        "trees": [{"nodes": _tree_to_nodes(t)} for t in forest.trees],
        "meta": forest.meta,
    }


def serialize_forest(forest: Forest) -> bytes:
    """Portable JSON form; byte-stable for a given forest."""
    return json.dumps(forest_to_doc(forest), sort_keys=True,
                      separators=(",", ":")).encode("utf-8")


def _nodes_to_tree(nodes: list, n_features: int, where: str) -> Tree:
    if not isinstance(nodes, list) or not nodes:
        raise ForestSchemaError(f"{where}: nodes must be a non-empty array")
    n = len(nodes)
    feature = np.full(n, -1, dtype=np.int64)
    threshold = np.zeros(n, dtype=np.float64)
    left = np.full(n, -1, dtype=np.int64)
    right = np.full(n, -1, dtype=np.int64)
    count0 = np.zeros(n, dtype=np.int64)
    count1 = np.zeros(n, dtype=np.int64)

    for i, node in enumerate(nodes):
        if not isinstance(node, list):
            raise ForestSchemaError(f"{where}: node {i} is not an array")
        if len(node) == 2:
            c0, c1 = node
            if not all(isinstance(c, int) and not isinstance(c, bool) and c >= 0
                       for c in (c0, c1)):
                raise ForestSchemaError(
                    f"{where}: node {i} leaf counts must be non-negative integers")
            if c0 == 0 and c1 == 0:
                raise ForestSchemaError(f"{where}: node {i} has empty class counts")
            count0[i] = c0
            count1[i] = c1
        elif len(node) == 4:
            f, thr, li, ri = node
            if not (isinstance(f, int) and not isinstance(f, bool)):
                raise ForestSchemaError(f"{where}: node {i} feature index not an integer")
            if not 0 <= f < n_features:
                raise ForestSchemaError(
                    f"{where}: node {i} feature index {f} out of range")
            if isinstance(thr, bool) or not isinstance(thr, (int, float)):
                raise ForestSchemaError(f"{where}: node {i} threshold not a number")
            for child in (li, ri):
                if isinstance(child, bool) or not isinstance(child, int):
                    raise ForestSchemaError(f"{where}: node {i} child index not an integer")
                if not 0 <= child < n:
                    raise ForestStructureError(
                        f"{where}: node {i} references out-of-range child {child}")
            feature[i] = f
            threshold[i] = float(thr)
            left[i] = li
            right[i] = ri
        else:
            raise ForestSchemaError(
                f"{where}: node {i} must have 2 (leaf) or 4 (internal) fields")

    # the node graph must be a binary tree rooted at 0: every node visited
    # exactly once by traversal
    seen = np.zeros(n, dtype=np.bool_)
    stack = [0]
    while stack:
        i = stack.pop()
        if seen[i]:
            raise ForestStructureError(f"{where}: node {i} reached twice (not a tree)")
        seen[i] = True
        if feature[i] >= 0:
            stack.append(int(right[i]))
            stack.append(int(left[i]))
    if not seen.all():
        orphan = int(np.flatnonzero(~seen)[0])
        raise ForestStructureError(f"{where}: node {orphan} unreachable from root")

    return Tree(feature, threshold, left, right, count0, count1)


def deserialize_forest(data: bytes) -> Forest:
    """Parse and validate the portable JSON form."""
    try:
        doc = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ForestSchemaError(f"payload is not valid JSON: {exc}") from exc
    return forest_from_doc(doc)


def forest_from_doc(doc) -> Forest:
    """Validate and load the document form produced by :func:`forest_to_doc`."""
    if not isinstance(doc, dict):
        raise ForestSchemaError("top-level document must be an object")
    version = doc.get("version")
    if not isinstance(version, int) or isinstance(version, bool):
        raise ForestSchemaError("missing or malformed version field")
    if version != FORMAT_VERSION:
        raise ForestVersionError(f"unsupported format version {version}")
    n_features = doc.get("n_features")
    if not isinstance(n_features, int) or isinstance(n_features, bool) \
            or n_features < 1:
        raise ForestSchemaError("n_features must be a positive integer")
    trees_doc = doc.get("trees")
    if not isinstance(trees_doc, list) or not trees_doc:
        raise ForestSchemaError("trees must be a non-empty array")
    trees = []
    for ti, tree_doc in enumerate(trees_doc):
        if not isinstance(tree_doc, dict) or "nodes" not in tree_doc:
            raise ForestSchemaError(f"tree {ti} must be an object with nodes")
        trees.append(_nodes_to_tree(tree_doc["nodes"], n_features, f"tree {ti}"))
    meta = doc.get("meta", {})
    if not isinstance(meta, dict):
        raise ForestSchemaError("meta must be an object")
    return Forest(trees=tuple(trees), n_features=n_features, meta=meta)
