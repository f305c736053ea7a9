"""Classification metrics, experiment scenarios, and tabular reports.

Three training regimes are compared on one shared yardstick: every node's
model, a forest trained on the merged training data, and the federated
global forest are all evaluated on the identical pooled test set (the union
of the per-node held-out windows). Reports carry a config fingerprint and a
test-set hash so that numbers from different scenarios are only comparable
when those match.
"""

from __future__ import annotations

import hashlib
import json
import logging
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dataset import BalanceSpec, NodeDataset, pooled_test
from .features import FeatureVector, feature_matrix, features_csv_bytes
from .federation import (
    LOCAL_MODEL_UPLOAD,
    AggregationPolicy,
    ConcatAll,
    FederationRunRecord,
    SizeWeightedSubsample,
    config_to_doc,
    run_federation,
)
from .forest import Forest, TrainConfig, forest_from_doc
from .training import train_scope
from .transport import InProcBus

log = logging.getLogger(__name__)

CENTRALIZED = "centralized"
FEDERATED = "federated"
LOCAL = "local"
SCENARIOS = (CENTRALIZED, FEDERATED, LOCAL)

METRIC_ROWS = (("Accuracy", "accuracy"), ("Precision", "precision"),
               ("Recall", "recall"), ("F1-Score", "f1"))


@dataclass(frozen=True)
class ConfusionMatrix:
    """Binary confusion counts; ransomware (label 1) is the positive class."""

    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self) -> None:
        for name in ("tp", "fp", "tn", "fn"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion_from_predictions(y_true: np.ndarray,
                               y_pred: np.ndarray) -> ConfusionMatrix:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise ValueError(
            f"shape mismatch: {y_true.shape} labels vs {y_pred.shape} predictions")
    return ConfusionMatrix(
        tp=int(np.sum((y_true == 1) & (y_pred == 1))),
        fp=int(np.sum((y_true == 0) & (y_pred == 1))),
        tn=int(np.sum((y_true == 0) & (y_pred == 0))),
        fn=int(np.sum((y_true == 1) & (y_pred == 0))),
    )


@dataclass(frozen=True)
class Metrics:
    """The four headline metrics; zero-denominator cases are flagged, not NaN."""

    accuracy: float
    precision: float
    recall: float
    f1: float
    undefined: tuple[str, ...] = ()

    def value(self, key: str) -> float:
        return getattr(self, key)


def compute_metrics(cm: ConfusionMatrix) -> Metrics:
    """Accuracy, precision, recall, F1 from confusion counts.

    A metric whose denominator is zero is reported as 0.0 and listed in
    ``undefined`` so downstream tables stay numeric.
    """
    total = cm.total
    if total == 0:
        raise ValueError("empty confusion matrix")
    undefined = []
    accuracy = (cm.tp + cm.tn) / total
    if cm.tp + cm.fp > 0:
        precision = cm.tp / (cm.tp + cm.fp)
    else:
        precision, undefined = 0.0, undefined + ["precision"]
    if cm.tp + cm.fn > 0:
        recall = cm.tp / (cm.tp + cm.fn)
    else:
        recall, undefined = 0.0, undefined + ["recall"]
    if precision + recall > 0:
        f1 = 2.0 * precision * recall / (precision + recall)
    else:
        f1, undefined = 0.0, undefined + ["f1"]
    return Metrics(accuracy, precision, recall, f1, tuple(undefined))


def relative_gain(a: float, b: float) -> float:
    """Relative improvement of a over baseline b: (a - b) / b."""
    if b <= 0:
        raise ValueError(f"baseline must be positive, got {b}")
    return (a - b) / b


@dataclass(frozen=True)
class ScenarioReport:
    """One scenario's outcome on the pooled test set."""

    scenario: str
    confusion: ConfusionMatrix
    metrics: Metrics
    config_fingerprint: str
    test_hash: str
    seeds: tuple[int, ...]
    node_id: str | None = None
    participants: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if (self.scenario == LOCAL) != (self.node_id is not None):
            raise ValueError("node_id is set exactly for local reports")
        check = compute_metrics(self.confusion)
        for _, key in METRIC_ROWS:
            if abs(check.value(key) - self.metrics.value(key)) > 1e-12:
                raise ValueError(
                    f"{key} inconsistent with confusion counts: "
                    f"{self.metrics.value(key)} vs {check.value(key)}")

    @property
    def column_label(self) -> str:
        return self.node_id if self.scenario == LOCAL else self.scenario


def hash_test_set(test: Sequence[FeatureVector]) -> str:
    """Order-independent digest of a test multiset."""
    ordered = sorted(test, key=lambda s: (s.server_id, s.window_index,
                                          s.values, s.label))
    return hashlib.sha256(features_csv_bytes(ordered)).hexdigest()[:16]


def _policy_doc(policy: AggregationPolicy) -> dict:
    if isinstance(policy, ConcatAll):
        return {"kind": "concat-all"}
    if isinstance(policy, SizeWeightedSubsample):
        return {"kind": "size-weighted-subsample",
                "target_trees": policy.target_trees, "seed": policy.seed}
    return {"kind": type(policy).__name__}


def config_fingerprint(cfg: TrainConfig, balance: BalanceSpec | None,
                       policy: AggregationPolicy,
                       node_ids: Sequence[str]) -> str:
    doc = {"train": config_to_doc(cfg, balance),
           "policy": _policy_doc(policy),
           "nodes": sorted(node_ids)}
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def evaluate_forest(forest: Forest,
                    test: Sequence[FeatureVector]) -> ConfusionMatrix:
    if not test:
        raise ValueError("cannot evaluate on an empty test set")
    x, y = feature_matrix(test)
    return confusion_from_predictions(y, forest.predict(x))


def _as_node_list(nodes) -> list[NodeDataset]:
    if isinstance(nodes, Mapping):
        nodes = list(nodes.values())
    out = sorted(nodes, key=lambda n: n.node_id)
    if not out:
        raise ValueError("no nodes given")
    return out


@dataclass(frozen=True)
class ExperimentResult:
    """All scenario reports of one experiment, plus the trained models."""

    reports: tuple[ScenarioReport, ...]
    forests: Mapping[str, Forest] = field(compare=False)
    wall_time_seconds: float = 0.0
    federation: FederationRunRecord | None = field(default=None, compare=False)

    def report(self, scenario: str, node_id: str | None = None) -> ScenarioReport:
        for r in self.reports:
            if r.scenario == scenario and r.node_id == node_id:
                return r
        raise KeyError(f"no report for {scenario!r}/{node_id!r}")

    @property
    def local_reports(self) -> tuple[ScenarioReport, ...]:
        return tuple(r for r in self.reports if r.scenario == LOCAL)


def run_experiment(nodes, cfg: TrainConfig, *,
                   balance: BalanceSpec | None = None,
                   policy: AggregationPolicy = ConcatAll(),
                   network=None,
                   timeout: float = 60.0) -> ExperimentResult:
    """Run local, centralized, and federated scenarios on shared test data.

    The federation's round-1 uploads double as the local models: training
    is deterministic per config, so retraining them separately would yield
    bit-identical forests. Nodes without training data are skipped in the
    local scenario and appear as abstainers in the federated report.
    """
    node_list = _as_node_list(nodes)
    pooled = pooled_test(node_list)
    if not pooled:
        raise ValueError("pooled test set is empty")
    fingerprint = config_fingerprint(cfg, balance, policy,
                                     [n.node_id for n in node_list])
    t_hash = hash_test_set(pooled)
    seeds = (cfg.seed,) + ((balance.seed,) if balance is not None else ())

    net = InProcBus() if network is None else network
    record = run_federation(node_list, cfg, policy, net,
                            balance=balance, timeout=timeout)
    uploads = {env["sender"]: forest_from_doc(env["model"])
               for env in record.message_trace
               if env["kind"] == LOCAL_MODEL_UPLOAD}
    reports = []
    forests: dict[str, Forest] = {}
    for node_id in sorted(uploads):
        local = uploads[node_id]
        forests[node_id] = local
        cm = evaluate_forest(local, pooled)
        reports.append(ScenarioReport(LOCAL, cm, compute_metrics(cm),
                                      fingerprint, t_hash, seeds,
                                      node_id=node_id))

    merged_train = [s for n in node_list for s in n.train]
    central = train_scope(merged_train, cfg, balance)
    forests[CENTRALIZED] = central
    cm = evaluate_forest(central, pooled)
    reports.append(ScenarioReport(CENTRALIZED, cm, compute_metrics(cm),
                                  fingerprint, t_hash, seeds))

    forests[FEDERATED] = record.global_forest
    cm = evaluate_forest(record.global_forest, pooled)
    reports.append(ScenarioReport(FEDERATED, cm, compute_metrics(cm),
                                  fingerprint, t_hash, seeds,
                                  participants=record.participants))
    log.info("experiment done: %d reports, federation wall time %.1fs",
             len(reports), record.wall_time_seconds)
    return ExperimentResult(tuple(reports), forests,
                            wall_time_seconds=record.wall_time_seconds,
                            federation=record)


def run_scenario(kind: str, nodes, cfg: TrainConfig, *,
                 balance: BalanceSpec | None = None,
                 policy: AggregationPolicy = ConcatAll(),
                 network=None,
                 timeout: float = 60.0) -> list[ScenarioReport]:
    """Run a single scenario; local yields one report per populated node."""
    node_list = _as_node_list(nodes)
    pooled = pooled_test(node_list)
    if not pooled:
        raise ValueError("pooled test set is empty")
    fingerprint = config_fingerprint(cfg, balance, policy,
                                     [n.node_id for n in node_list])
    t_hash = hash_test_set(pooled)
    seeds = (cfg.seed,) + ((balance.seed,) if balance is not None else ())

    if kind == LOCAL:
        reports = []
        for node in node_list:
            if node.n_train == 0:
                log.warning("skipping local scenario for empty node %s",
                            node.node_id)
                continue
            forest = train_scope(node.train, cfg, balance)
            cm = evaluate_forest(forest, pooled)
            reports.append(ScenarioReport(LOCAL, cm, compute_metrics(cm),
                                          fingerprint, t_hash, seeds,
                                          node_id=node.node_id))
        return reports
    if kind == CENTRALIZED:
        merged = [s for n in node_list for s in n.train]
        forest = train_scope(merged, cfg, balance)
        cm = evaluate_forest(forest, pooled)
        return [ScenarioReport(CENTRALIZED, cm, compute_metrics(cm),
                               fingerprint, t_hash, seeds)]
    if kind == FEDERATED:
        net = InProcBus() if network is None else network
        record = run_federation(node_list, cfg, policy, net,
                                balance=balance, timeout=timeout)
        cm = evaluate_forest(record.global_forest, pooled)
        return [ScenarioReport(FEDERATED, cm, compute_metrics(cm),
                               fingerprint, t_hash, seeds,
                               participants=record.participants)]
    raise ValueError(f"unknown scenario {kind!r}")


def _ordered_columns(reports: Sequence[ScenarioReport]) -> list[ScenarioReport]:
    rank = {LOCAL: 0, CENTRALIZED: 1, FEDERATED: 2}
    ordered = sorted(reports, key=lambda r: (rank[r.scenario],
                                             r.column_label))
    labels = [r.column_label for r in ordered]
    if len(set(labels)) != len(labels):
        raise ValueError(f"duplicate report columns: {labels}")
    return ordered


def render_report_csv(reports: Sequence[ScenarioReport]) -> str:
    """Delimited table: one row per metric, one column per scenario."""
    if not reports:
        raise ValueError("no reports to render")
    cols = _ordered_columns(reports)
    lines = ["metric," + ",".join(r.column_label for r in cols)]
    for title, key in METRIC_ROWS:
        lines.append(title + ","
                     + ",".join(f"{r.metrics.value(key):.3f}" for r in cols))
    return "\n".join(lines) + "\n"


def render_report_text(reports: Sequence[ScenarioReport]) -> str:
    """Aligned fixed-width rendering of the same table."""
    if not reports:
        raise ValueError("no reports to render")
    cols = _ordered_columns(reports)
    labels = [r.column_label for r in cols]
    name_w = max(len(t) for t, _ in METRIC_ROWS)
    widths = [max(len(lbl), 5) for lbl in labels]
    header = " " * name_w + "  " + "  ".join(
        lbl.rjust(w) for lbl, w in zip(labels, widths))
    rule = "-" * len(header)
    lines = [header, rule]
    for title, key in METRIC_ROWS:
        cells = "  ".join(f"{r.metrics.value(key):.3f}".rjust(w)
                          for r, w in zip(cols, widths))
        lines.append(title.ljust(name_w) + "  " + cells)
    return "\n".join(lines) + "\n"


def emit_report(reports: Sequence[ScenarioReport], out_dir: str | Path, *,
                basename: str = "report", charts: bool = True) -> list[Path]:
    """Write the CSV and text tables, plus one bar chart per metric."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{basename}.csv"
    csv_path.write_text(render_report_csv(reports), encoding="utf-8")
    txt_path = out / f"{basename}.txt"
    txt_path.write_text(render_report_text(reports), encoding="utf-8")
    written = [csv_path, txt_path]
    if charts:
        from .plots import render_metric_charts

        written += render_metric_charts(reports, out, basename=basename)
    log.info("wrote %d report files under %s", len(written), out)
    return written


def report_to_doc(report: ScenarioReport) -> dict:
    """JSON-safe document for persisting a report between CLI stages."""
    cm = report.confusion
    return {
        "scenario": report.scenario,
        "node_id": report.node_id,
        "confusion": {"tp": cm.tp, "fp": cm.fp, "tn": cm.tn, "fn": cm.fn},
        "metrics": {key: report.metrics.value(key) for _, key in METRIC_ROWS},
        "undefined": list(report.metrics.undefined),
        "config_fingerprint": report.config_fingerprint,
        "test_hash": report.test_hash,
        "seeds": list(report.seeds),
        "participants": list(report.participants),
    }


def report_from_doc(doc: dict) -> ScenarioReport:
    try:
        cm = ConfusionMatrix(**{k: int(v) for k, v in doc["confusion"].items()})
        metrics = Metrics(undefined=tuple(doc.get("undefined", ())),
                          **{k: float(v) for k, v in doc["metrics"].items()})
        return ScenarioReport(
            scenario=doc["scenario"],
            confusion=cm,
            metrics=metrics,
            config_fingerprint=str(doc["config_fingerprint"]),
            test_hash=str(doc["test_hash"]),
            seeds=tuple(int(s) for s in doc["seeds"]),
            node_id=doc.get("node_id"),
            participants=tuple(doc.get("participants", ())),
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed scenario report: {exc}") from exc


def summarize_metrics(runs: Sequence[Sequence[ScenarioReport]]
                      ) -> dict[str, dict[str, tuple[float, float]]]:
    """Mean and stddev of each metric per column across repeated runs.

    Every run must contain the same set of columns. With a single run the
    stddev is 0.
    """
    if not runs:
        raise ValueError("no runs to summarize")
    columns = [r.column_label for r in _ordered_columns(runs[0])]
    out: dict[str, dict[str, tuple[float, float]]] = {}
    for label in columns:
        per_metric = {}
        for _, key in METRIC_ROWS:
            values = []
            for run in runs:
                match = [r for r in run if r.column_label == label]
                if len(match) != 1:
                    raise ValueError(f"run missing column {label!r}")
                values.append(match[0].metrics.value(key))
            mean = statistics.fmean(values)
            std = statistics.stdev(values) if len(values) > 1 else 0.0
            per_metric[key] = (mean, std)
        out[label] = per_metric
    return out
