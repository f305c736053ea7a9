"""Two-round federated Random Forest protocol.

Round 0: the aggregator broadcasts the training configuration. Round 1:
every node trains locally, uploads its forest with its sample count, and the
aggregator merges the uploads into a global forest that is broadcast back.
Only model parameters ever travel; a message-trace inspector can verify that
no raw samples appear in any envelope.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataset import BalanceSpec, NodeDataset
from .forest import (
    Forest,
    ForestFormatError,
    TrainConfig,
    Tree,
    forest_from_doc,
    forest_to_doc,
)
from .training import train_scope
from .transport import ReceiveTimeout, TransportError

log = logging.getLogger(__name__)

CONFIG_BROADCAST = "ConfigBroadcast"
LOCAL_MODEL_UPLOAD = "LocalModelUpload"
GLOBAL_MODEL_BROADCAST = "GlobalModelBroadcast"

ROUND_OF_KIND = {
    CONFIG_BROADCAST: 0,
    LOCAL_MODEL_UPLOAD: 1,
    GLOBAL_MODEL_BROADCAST: 1,
}

AGGREGATOR_ID = "aggregator"


class ProtocolError(Exception):
    """Protocol-level failure: no usable uploads, bad peer behavior."""


class SchemaError(ProtocolError):
    """Envelope violates the message schema."""


@dataclass(frozen=True)
class Abstention:
    """A node declining to participate; never put on the wire."""

    node_id: str
    reason: str


@dataclass(frozen=True)
class ConcatAll:
    """Aggregation that keeps every uploaded tree."""


@dataclass(frozen=True)
class SizeWeightedSubsample:
    """Aggregation that keeps target_trees trees, drawn without replacement
    with inclusion probability proportional to the owning node's sample
    count."""

    target_trees: int
    seed: int = 0

    def __post_init__(self) -> None:
        if self.target_trees < 1:
            raise ValueError("target_trees must be positive")


AggregationPolicy = ConcatAll | SizeWeightedSubsample


def config_to_doc(cfg: TrainConfig, balance: BalanceSpec | None) -> dict:
    doc = {
        "n_trees": cfg.n_trees,
        "max_features_per_split": cfg.max_features_per_split,
        "max_depth": cfg.max_depth,
        "min_samples_split": cfg.min_samples_split,
        "bootstrap": cfg.bootstrap,
        "seed": cfg.seed,
        "balance": None,
    }
    if balance is not None:
        doc["balance"] = {
            "undersample_majority_to_ratio": balance.undersample_majority_to_ratio,
            "oversample_minority_to_parity": balance.oversample_minority_to_parity,
            "seed": balance.seed,
        }
    return doc


def config_from_doc(doc: dict) -> tuple[TrainConfig, BalanceSpec | None]:
    try:
        cfg = TrainConfig(
            n_trees=doc["n_trees"],
            max_features_per_split=doc["max_features_per_split"],
            max_depth=doc["max_depth"],
            min_samples_split=doc["min_samples_split"],
            bootstrap=doc["bootstrap"],
            seed=doc["seed"],
        )
        bal_doc = doc.get("balance")
        balance = None
        if bal_doc is not None:
            balance = BalanceSpec(
                undersample_majority_to_ratio=bal_doc["undersample_majority_to_ratio"],
                oversample_minority_to_parity=bal_doc["oversample_minority_to_parity"],
                seed=bal_doc["seed"],
            )
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed training config: {exc}") from exc
    return cfg, balance


def build_config_broadcast(cfg: TrainConfig, balance: BalanceSpec | None = None,
                           sender: str = AGGREGATOR_ID) -> dict:
    return {"kind": CONFIG_BROADCAST, "round": 0, "sender": sender,
            "config": config_to_doc(cfg, balance)}


def build_model_upload(sender: str, forest: Forest, n_samples: int) -> dict:
    if n_samples <= 0:
        raise ValueError("n_samples must be positive")
    return {"kind": LOCAL_MODEL_UPLOAD, "round": 1, "sender": sender,
            "n_samples": n_samples, "model": forest_to_doc(forest)}


def build_global_broadcast(forest: Forest, sender: str = AGGREGATOR_ID) -> dict:
    return {"kind": GLOBAL_MODEL_BROADCAST, "round": 1, "sender": sender,
            "model": forest_to_doc(forest)}


_REQUIRED_KEYS = {
    CONFIG_BROADCAST: {"kind", "round", "sender", "config"},
    LOCAL_MODEL_UPLOAD: {"kind", "round", "sender", "n_samples", "model"},
    GLOBAL_MODEL_BROADCAST: {"kind", "round", "sender", "model"},
}


def parse_envelope(envelope: dict) -> dict:
    """Validate an incoming envelope's shape; returns it unchanged."""
    if not isinstance(envelope, dict):
        raise SchemaError("envelope must be an object")
    kind = envelope.get("kind")
    if kind not in ROUND_OF_KIND:
        raise SchemaError(f"unknown message kind {kind!r}")
    required = _REQUIRED_KEYS[kind]
    if set(envelope) != required:
        raise SchemaError(
            f"{kind} envelope must have exactly keys {sorted(required)}, "
            f"got {sorted(envelope)}")
    if envelope["round"] != ROUND_OF_KIND[kind]:
        raise SchemaError(
            f"{kind} must carry round {ROUND_OF_KIND[kind]}, "
            f"got {envelope['round']!r}")
    if not isinstance(envelope["sender"], str) or not envelope["sender"]:
        raise SchemaError("sender must be a non-empty string")
    if kind == LOCAL_MODEL_UPLOAD:
        n = envelope["n_samples"]
        if not isinstance(n, int) or isinstance(n, bool) or n <= 0:
            raise SchemaError("n_samples must be a positive integer")
    return envelope


def node_local_train(node: NodeDataset, cfg: TrainConfig,
                     balance: BalanceSpec | None = None) -> dict | Abstention:
    """Train a node's local forest and wrap it as an upload envelope.

    n_samples reports the node's original training size, before any
    rebalancing, since that is the node's true data contribution.
    """
    if node.n_train == 0:
        return Abstention(node.node_id, "no local training data")
    forest = train_scope(node.train, cfg, balance)
    return build_model_upload(node.node_id, forest, node.n_train)


def _pps_select(weights: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    """Without-replacement selection with inclusion probability ~ weight.

    Items whose scaled probability reaches 1 are taken with certainty and
    peeled off; the rest are chosen by a systematic pass over a random
    ordering, which keeps each item's inclusion probability exactly
    proportional to its weight.
    """
    remaining = np.arange(len(weights))
    chosen: list[int] = []
    while m > 0 and remaining.size:
        pi = m * weights[remaining] / weights[remaining].sum()
        certain = pi >= 1.0
        if not certain.any():
            break
        chosen.extend(int(i) for i in remaining[certain])
        m -= int(certain.sum())
        remaining = remaining[~certain]
    if m > 0 and remaining.size:
        order = rng.permutation(remaining)
        pi = m * weights[order] / weights[order].sum()
        bounds = np.cumsum(pi)
        marks = float(rng.uniform(0.0, 1.0)) + np.arange(m)
        sel = np.minimum(np.searchsorted(bounds, marks, side="right"),
                         len(order) - 1)
        chosen.extend(int(i) for i in order[sel])
    return np.array(sorted(chosen), dtype=np.int64)


def aggregate(uploads: Sequence[dict], policy: AggregationPolicy) -> Forest:
    """Merge model uploads into the global forest.

    Trees are ordered by ascending node id then upload-local tree index, so
    the result does not depend on arrival order.
    """
    if not uploads:
        raise ProtocolError("cannot aggregate zero uploads")
    parsed = []
    for envelope in uploads:
        parse_envelope(envelope)
        if envelope["kind"] != LOCAL_MODEL_UPLOAD:
            raise SchemaError(f"cannot aggregate a {envelope['kind']} message")
        parsed.append((envelope["sender"], envelope["n_samples"],
                       forest_from_doc(envelope["model"])))
    parsed.sort(key=lambda item: item[0])

    n_features = {forest.n_features for _, _, forest in parsed}
    if len(n_features) != 1:
        raise SchemaError(f"uploads disagree on feature count: {sorted(n_features)}")

    trees: list[Tree] = []
    weights: list[float] = []
    for sender, n_samples, forest in parsed:
        trees.extend(forest.trees)
        weights.extend([float(n_samples)] * forest.n_trees)

    senders = [sender for sender, _, _ in parsed]
    if isinstance(policy, ConcatAll):
        chosen = trees
        meta_policy: dict = {"aggregation": "concat_all"}
    else:
        if policy.target_trees > len(trees):
            raise ProtocolError(
                f"target_trees {policy.target_trees} exceeds the "
                f"{len(trees)} uploaded trees")
        rng = np.random.default_rng(policy.seed)
        keep = _pps_select(np.array(weights), policy.target_trees, rng)
        chosen = [trees[i] for i in keep]
        meta_policy = {"aggregation": "size_weighted_subsample",
                       "seed": policy.seed}
    meta = {"provenance": senders, **meta_policy}
    return Forest(trees=tuple(chosen), n_features=next(iter(n_features)),
                  meta=meta)


@dataclass(frozen=True)
class FederationRunRecord:
    """Outcome of one federation cycle."""

    participants: tuple[str, ...]
    abstained: tuple[str, ...]
    timed_out: tuple[str, ...]
    round_trips: dict[str, int]
    wall_time_seconds: float
    global_forest: Forest
    node_models: dict[str, Forest]
    message_trace: tuple[dict, ...]


class _NodeRuntime:
    """Node-side protocol driver; runs in its own thread."""

    def __init__(self, node: NodeDataset, endpoint, timeout: float):
        self.node = node
        self.endpoint = endpoint
        self.timeout = timeout
        self.abstention: Abstention | None = None
        self.rounds_seen: set[int] = set()
        self.global_model: Forest | None = None
        self.error: Exception | None = None

    def run(self) -> None:
        try:
            config_env = parse_envelope(self.endpoint.recv(self.timeout))
            if config_env["kind"] != CONFIG_BROADCAST:
                raise SchemaError(
                    f"expected {CONFIG_BROADCAST}, got {config_env['kind']}")
            self.rounds_seen.add(config_env["round"])
            cfg, balance = config_from_doc(config_env["config"])

            reply = node_local_train(self.node, cfg, balance)
            if isinstance(reply, Abstention):
                self.abstention = reply
            else:
                self.endpoint.send(config_env["sender"], reply)
                self.rounds_seen.add(reply["round"])

            global_env = parse_envelope(self.endpoint.recv(self.timeout))
            if global_env["kind"] != GLOBAL_MODEL_BROADCAST:
                raise SchemaError(
                    f"expected {GLOBAL_MODEL_BROADCAST}, got {global_env['kind']}")
            self.rounds_seen.add(global_env["round"])
            self.global_model = forest_from_doc(global_env["model"])
        except (TransportError, ProtocolError, ForestFormatError, ValueError) as exc:
            self.error = exc
            log.warning("node %s failed: %s", self.node.node_id, exc)


def run_federation(nodes: Sequence[NodeDataset], cfg: TrainConfig,
                   policy: AggregationPolicy, network, *,
                   balance: BalanceSpec | None = None,
                   timeout: float = 60.0) -> FederationRunRecord:
    """Execute one full federation cycle over the given transport network.

    Nodes that abstain or miss the upload deadline are excluded from
    aggregation; at least one upload is required. Every responsive node,
    including abstainers, receives the global model broadcast.
    """
    if not nodes:
        raise ProtocolError("federation requires at least one node")
    started = time.perf_counter()
    nodes = sorted(nodes, key=lambda n: n.node_id)
    node_ids = [n.node_id for n in nodes]
    if len(set(node_ids)) != len(node_ids):
        raise ProtocolError(f"duplicate node ids: {node_ids}")

    agg_endpoint = network.endpoint(AGGREGATOR_ID)
    runtimes = [_NodeRuntime(n, network.endpoint(n.node_id), timeout)
                for n in nodes]
    threads = [threading.Thread(target=rt.run, name=f"node-{rt.node.node_id}")
               for rt in runtimes]
    trace: list[dict] = []
    for t in threads:
        t.start()

    try:
        config_env = build_config_broadcast(cfg, balance)
        for node_id in node_ids:
            agg_endpoint.send(node_id, config_env)
            trace.append(config_env)

        uploads: dict[str, dict] = {}
        deadline = time.monotonic() + timeout
        while len(uploads) < len(nodes):
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                break
            try:
                envelope = agg_endpoint.recv(remaining)
            except ReceiveTimeout:
                break
            try:
                parse_envelope(envelope)
                if envelope["kind"] != LOCAL_MODEL_UPLOAD:
                    raise SchemaError(f"unexpected {envelope['kind']} at aggregator")
                sender = envelope["sender"]
                if sender not in node_ids or sender in uploads:
                    raise SchemaError(f"unexpected upload sender {sender!r}")
            except SchemaError as exc:
                log.warning("aggregator dropped a message: %s", exc)
                continue
            uploads[sender] = envelope
            trace.append(envelope)

        if not uploads:
            raise ProtocolError("no node uploaded a model before the deadline")
        ordered = [uploads[s] for s in sorted(uploads)]
        global_forest = aggregate(ordered, policy)

        global_env = build_global_broadcast(global_forest)
        for node_id in node_ids:
            try:
                agg_endpoint.send(node_id, global_env)
                trace.append(global_env)
            except TransportError as exc:
                log.warning("broadcast to %s failed: %s", node_id, exc)
    finally:
        for t in threads:
            t.join(timeout=timeout + 10.0)

    participants = tuple(sorted(uploads))
    abstained = tuple(rt.node.node_id for rt in runtimes if rt.abstention)
    timed_out = tuple(n for n in node_ids
                      if n not in participants and n not in abstained)
    round_trips = {rt.node.node_id: len(rt.rounds_seen)
                   for rt in runtimes if rt.node.node_id in participants}
    node_models = {rt.node.node_id: rt.global_model
                   for rt in runtimes if rt.global_model is not None}
    return FederationRunRecord(
        participants=participants,
        abstained=abstained,
        timed_out=timed_out,
        round_trips=round_trips,
        wall_time_seconds=time.perf_counter() - started,
        global_forest=global_forest,
        node_models=node_models,
        message_trace=tuple(trace),
    )


_TOP_KEYS = _REQUIRED_KEYS
_CONFIG_KEYS = {"n_trees", "max_features_per_split", "max_depth",
                "min_samples_split", "bootstrap", "seed", "balance"}
_BALANCE_KEYS = {"undersample_majority_to_ratio",
                 "oversample_minority_to_parity", "seed"}
_MODEL_KEYS = {"version", "n_features", "trees", "meta"}
_META_KEYS = {"seed", "n_trees", "max_features_per_split", "max_depth",
              "min_samples_split", "bootstrap", "provenance", "aggregation"}


def _scalar(value) -> bool:
    return value is None or isinstance(value, (bool, int, float, str))


def find_privacy_violations(envelope: dict) -> list[str]:
    """Strict structural audit of one envelope.

    Every key and value is checked against the protocol schema; anything
    outside it, such as embedded samples or event records, is reported with
    its path. An empty result means the message carries model parameters and
    configuration only.
    """
    findings: list[str] = []

    def check_keys(obj: dict, allowed: set, path: str) -> None:
        for key in set(obj) - allowed:
            findings.append(f"{path}{key}: key outside the protocol schema")

    if not isinstance(envelope, dict):
        return ["envelope is not an object"]
    kind = envelope.get("kind")
    if kind not in ROUND_OF_KIND:
        return [f"kind: unknown message kind {kind!r}"]
    check_keys(envelope, _TOP_KEYS[kind], "")

    config = envelope.get("config")
    if config is not None:
        if isinstance(config, dict):
            check_keys(config, _CONFIG_KEYS, "config.")
            balance = config.get("balance")
            if isinstance(balance, dict):
                check_keys(balance, _BALANCE_KEYS, "config.balance.")
            for key, value in config.items():
                if key != "balance" and not _scalar(value):
                    findings.append(f"config.{key}: non-scalar value")
        else:
            findings.append("config: not an object")

    model = envelope.get("model")
    if model is not None:
        if not isinstance(model, dict):
            findings.append("model: not an object")
        else:
            check_keys(model, _MODEL_KEYS, "model.")
            meta = model.get("meta", {})
            if isinstance(meta, dict):
                check_keys(meta, _META_KEYS, "model.meta.")
                prov = meta.get("provenance", [])
                if not (isinstance(prov, list)
                        and all(isinstance(p, str) for p in prov)):
                    findings.append("model.meta.provenance: not a list of node ids")
                for key, value in meta.items():
                    if key != "provenance" and not _scalar(value):
                        findings.append(f"model.meta.{key}: non-scalar value")
            else:
                findings.append("model.meta: not an object")
            trees = model.get("trees")
            if isinstance(trees, list):
                for ti, tree in enumerate(trees):
                    if not isinstance(tree, dict) or set(tree) != {"nodes"}:
                        findings.append(f"model.trees[{ti}]: not a nodes object")
                        continue
                    for ni, node in enumerate(tree["nodes"]):
                        if not (isinstance(node, list) and len(node) in (2, 4)
                                and all(isinstance(v, (int, float))
                                        and not isinstance(v, bool)
                                        for v in node)):
                            findings.append(
                                f"model.trees[{ti}].nodes[{ni}]: "
                                "not a numeric split or leaf record")
            else:
                findings.append("model.trees: not an array")
    return findings


def inspect_trace(trace: Sequence[dict]) -> list[str]:
    """Audit every captured message; empty result means no raw data leaked."""
    findings = []
    for i, envelope in enumerate(trace):
        for finding in find_privacy_violations(envelope):
            findings.append(f"message {i}: {finding}")
    return findings
