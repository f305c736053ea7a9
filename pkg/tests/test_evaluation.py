"""Metrics, scenario orchestration, and report rendering."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ransomfl.dataset import NodeDataset
from ransomfl.evaluation import (
    ConfusionMatrix,
    Metrics,
    ScenarioReport,
    compute_metrics,
    confusion_from_predictions,
    emit_report,
    relative_gain,
    render_report_csv,
    render_report_text,
    run_experiment,
    run_scenario,
    hash_test_set,
    summarize_metrics,
)
from ransomfl.features import FeatureVector
from ransomfl.forest import TrainConfig

counts = st.integers(0, 500)


class TestConfusionMatrix:
    def test_total(self):
        assert ConfusionMatrix(1, 2, 3, 4).total == 10

    def test_negative_rejected(self):
        with pytest.raises(ValueError, match="fn"):
            ConfusionMatrix(1, 1, 1, -1)

    def test_from_predictions(self):
        y = np.array([1, 1, 1, 0, 0, 0])
        p = np.array([1, 1, 0, 0, 0, 1])
        assert confusion_from_predictions(y, p) == ConfusionMatrix(
            tp=2, fp=1, tn=2, fn=1)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="mismatch"):
            confusion_from_predictions(np.array([1, 0]), np.array([1]))


class TestComputeMetrics:
    def test_perfect_classifier(self):
        m = compute_metrics(ConfusionMatrix(tp=1, fp=0, tn=1, fn=0))
        assert (m.accuracy, m.precision, m.recall, m.f1) == (1.0, 1.0, 1.0, 1.0)
        assert m.undefined == ()

    def test_hand_worked_counts(self):
        m = compute_metrics(ConfusionMatrix(tp=3, fp=1, tn=5, fn=1))
        assert m.precision == 0.75
        assert m.recall == 0.75
        assert m.f1 == 0.75
        assert m.accuracy == 0.8

    def test_no_positive_predictions_flagged(self):
        m = compute_metrics(ConfusionMatrix(tp=0, fp=0, tn=5, fn=2))
        assert m.precision == 0.0
        assert "precision" in m.undefined

    def test_all_negative_world_flags_three(self):
        m = compute_metrics(ConfusionMatrix(tp=0, fp=0, tn=7, fn=0))
        assert m.accuracy == 1.0
        assert set(m.undefined) == {"precision", "recall", "f1"}

    def test_empty_matrix_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            compute_metrics(ConfusionMatrix(0, 0, 0, 0))

    @settings(max_examples=200, deadline=None)
    @given(tp=counts, fp=counts, tn=counts, fn=counts)
    def test_error_rate_identity(self, tp, fp, tn, fn):
        cm = ConfusionMatrix(tp, fp, tn, fn)
        if cm.total == 0:
            return
        m = compute_metrics(cm)
        assert abs(m.accuracy - (1.0 - (fp + fn) / cm.total)) <= 1e-12

    @settings(max_examples=200, deadline=None)
    @given(tp=st.integers(1, 500), fp=counts, tn=counts, fn=counts)
    def test_f1_between_precision_and_recall(self, tp, fp, tn, fn):
        m = compute_metrics(ConfusionMatrix(tp, fp, tn, fn))
        assert min(m.precision, m.recall) - 1e-12 <= m.f1
        assert m.f1 <= max(m.precision, m.recall) + 1e-12
        assert m.f1 <= math.sqrt(m.precision * m.recall) + 1e-12

    @settings(max_examples=100, deadline=None)
    @given(tp=counts, fp=counts, tn=counts, fn=counts)
    def test_recomputation_is_exact(self, tp, fp, tn, fn):
        cm = ConfusionMatrix(tp, fp, tn, fn)
        if cm.total == 0:
            return
        assert compute_metrics(cm) == compute_metrics(cm)


class TestRelativeGain:
    def test_published_shape(self):
        gain = relative_gain(0.986, 0.905)
        assert math.isclose(gain, 0.0895, abs_tol=5e-4)
        assert f"{gain:.0%}" == "9%"

    def test_equal_inputs(self):
        assert relative_gain(0.7, 0.7) == 0.0

    def test_doubling(self):
        assert relative_gain(1.0, 0.5) == 1.0

    def test_zero_baseline_rejected(self):
        with pytest.raises(ValueError, match="baseline"):
            relative_gain(0.9, 0.0)


def fv(entropy: float, label: int, server_id: str, idx: int) -> FeatureVector:
    rng = np.random.default_rng(idx * 7 + label)
    return FeatureVector(
        avg_entropy_write=entropy,
        var_lba_write=float(rng.uniform(0, 1e6)),
        avg_write_throughput=float(rng.uniform(1e3, 1e5)),
        var_lba_read=float(rng.uniform(0, 1e6)),
        avg_read_throughput=float(rng.uniform(1e3, 1e5)),
        label=label, window_index=idx, server_id=server_id)


def sep_node(node_id: str, seed: int, n_train: int = 60,
             n_test: int = 20) -> NodeDataset:
    """Cleanly separable node: benign entropy near 0.3, ransomware near 0.8."""
    rng = np.random.default_rng(seed)

    def batch(n, start):
        out = []
        for i in range(n):
            label = i % 2
            mean = 0.8 if label else 0.3
            out.append(fv(float(np.clip(rng.normal(mean, 0.05), 0, 1)),
                          label, node_id, start + i))
        return tuple(out)

    return NodeDataset(node_id, train=batch(n_train, 0),
                       test=batch(n_test, n_train))


CFG = TrainConfig(n_trees=10, seed=3)


@pytest.fixture(scope="module")
def small_experiment():
    nodes = [sep_node("srv-a", 0), sep_node("srv-b", 1), sep_node("srv-c", 2)]
    return run_experiment(nodes, CFG)


class TestRunExperiment:
    def test_report_set(self, small_experiment):
        labels = [r.column_label for r in small_experiment.reports]
        assert labels == ["srv-a", "srv-b", "srv-c", "centralized", "federated"]

    def test_shared_test_hash_and_fingerprint(self, small_experiment):
        assert len({r.test_hash for r in small_experiment.reports}) == 1
        assert len({r.config_fingerprint for r in small_experiment.reports}) == 1

    def test_concat_tree_count(self, small_experiment):
        assert small_experiment.forests["federated"].n_trees == 3 * CFG.n_trees

    def test_federated_at_least_worst_local(self, small_experiment):
        fed = small_experiment.report("federated").metrics.accuracy
        worst = min(r.metrics.accuracy for r in small_experiment.local_reports)
        assert fed >= worst

    def test_metrics_match_confusion_exactly(self, small_experiment):
        for r in small_experiment.reports:
            assert compute_metrics(r.confusion) == r.metrics

    def test_participants_recorded(self, small_experiment):
        fed = small_experiment.report("federated")
        assert fed.participants == ("srv-a", "srv-b", "srv-c")

    def test_single_node_federation_equals_local(self):
        node = sep_node("solo", 9)
        res = run_experiment([node], CFG)
        fed = res.report("federated")
        local = res.report("local", "solo")
        assert fed.confusion == local.confusion
        assert fed.metrics == local.metrics

    def test_deterministic(self):
        nodes = lambda: [sep_node("srv-a", 0), sep_node("srv-b", 1)]
        a = run_experiment(nodes(), CFG)
        b = run_experiment(nodes(), CFG)
        assert a.reports == b.reports

    def test_empty_nodes_rejected(self):
        with pytest.raises(ValueError, match="no nodes"):
            run_experiment([], CFG)


class TestRunScenario:
    def test_local_gives_one_report_per_node(self):
        nodes = [sep_node("srv-a", 0), sep_node("srv-b", 1)]
        reports = run_scenario("local", nodes, CFG)
        assert [r.node_id for r in reports] == ["srv-a", "srv-b"]

    def test_empty_node_skipped(self, caplog):
        nodes = [sep_node("srv-a", 0), NodeDataset("srv-b", test=sep_node("srv-b", 1).test)]
        with caplog.at_level("WARNING"):
            reports = run_scenario("local", nodes, CFG)
        assert [r.node_id for r in reports] == ["srv-a"]

    def test_matches_experiment(self, small_experiment):
        nodes = [sep_node("srv-a", 0), sep_node("srv-b", 1), sep_node("srv-c", 2)]
        for kind in ("local", "centralized", "federated"):
            for r in run_scenario(kind, nodes, CFG):
                assert small_experiment.report(kind, r.node_id).metrics == r.metrics

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="unknown scenario"):
            run_scenario("quantum", [sep_node("srv-a", 0)], CFG)


def report_with_accuracy(numerator: int, denominator: int,
                         scenario: str = "federated") -> ScenarioReport:
    cm = ConfusionMatrix(tp=numerator, fp=denominator - numerator, tn=0, fn=0)
    return ScenarioReport(scenario, cm, compute_metrics(cm), "cafe", "beef", (0,))


class TestScenarioReport:
    def test_unknown_scenario_rejected(self):
        cm = ConfusionMatrix(1, 0, 1, 0)
        with pytest.raises(ValueError, match="unknown scenario"):
            ScenarioReport("oracle", cm, compute_metrics(cm), "x", "y", (0,))

    def test_local_requires_node_id(self):
        cm = ConfusionMatrix(1, 0, 1, 0)
        with pytest.raises(ValueError, match="node_id"):
            ScenarioReport("local", cm, compute_metrics(cm), "x", "y", (0,))

    def test_inconsistent_metrics_rejected(self):
        cm = ConfusionMatrix(1, 0, 1, 0)
        wrong = Metrics(0.5, 1.0, 1.0, 1.0)
        with pytest.raises(ValueError, match="inconsistent"):
            ScenarioReport("federated", cm, wrong, "x", "y", (0,))

    def test_column_label(self):
        cm = ConfusionMatrix(1, 0, 1, 0)
        r = ScenarioReport("local", cm, compute_metrics(cm), "x", "y", (0,),
                           node_id="srv-q")
        assert r.column_label == "srv-q"


class TestRendering:
    def test_csv_header_and_rows(self, small_experiment):
        out = render_report_csv(small_experiment.reports)
        lines = out.strip().split("\n")
        assert lines[0] == "metric,srv-a,srv-b,srv-c,centralized,federated"
        assert [ln.split(",")[0] for ln in lines[1:]] == [
            "Accuracy", "Precision", "Recall", "F1-Score"]

    def test_three_decimal_rounding(self):
        r = report_with_accuracy(98649, 100000)
        out = render_report_csv([r])
        assert "Accuracy,0.986" in out
        assert "0.98649" not in out

    def test_single_report_single_column(self):
        out = render_report_csv([report_with_accuracy(1, 2)])
        assert out.startswith("metric,federated\n")

    def test_duplicate_columns_rejected(self):
        pair = [report_with_accuracy(1, 2), report_with_accuracy(1, 2)]
        with pytest.raises(ValueError, match="duplicate"):
            render_report_csv(pair)

    def test_text_table_aligned(self, small_experiment):
        out = render_report_text(small_experiment.reports)
        lines = out.rstrip("\n").split("\n")
        assert len({len(ln) for ln in lines}) == 1
        assert "centralized" in lines[0]
        assert lines[2].startswith("Accuracy")

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            render_report_csv([])


class TestEmitReport:
    def test_writes_tables_and_charts(self, small_experiment, tmp_path):
        written = emit_report(small_experiment.reports, tmp_path)
        names = [p.name for p in written]
        assert names[:2] == ["report.csv", "report.txt"]
        assert names[2:] == ["report-accuracy.png", "report-precision.png",
                             "report-recall.png", "report-f1.png"]
        for p in written[2:]:
            assert p.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    def test_charts_can_be_skipped(self, small_experiment, tmp_path):
        written = emit_report(small_experiment.reports, tmp_path, charts=False)
        assert [p.suffix for p in written] == [".csv", ".txt"]

    def test_chart_bytes_deterministic(self, small_experiment, tmp_path):
        a = emit_report(small_experiment.reports, tmp_path / "a")
        b = emit_report(small_experiment.reports, tmp_path / "b")
        for pa, pb in zip(a, b):
            assert pa.read_bytes() == pb.read_bytes()


class TestTestSetHash:
    def test_order_independent(self):
        node = sep_node("srv-a", 0)
        assert hash_test_set(node.test) == hash_test_set(node.test[::-1])

    def test_content_sensitive(self):
        a, b = sep_node("srv-a", 0), sep_node("srv-a", 1)
        assert hash_test_set(a.test) != hash_test_set(b.test)


class TestSummarize:
    def test_mean_and_stddev(self):
        runs = [[report_with_accuracy(80, 100)], [report_with_accuracy(90, 100)]]
        summary = summarize_metrics(runs)
        mean, std = summary["federated"]["accuracy"]
        assert math.isclose(mean, 0.85)
        assert math.isclose(std, math.sqrt(0.005))

    def test_single_run_zero_stddev(self):
        summary = summarize_metrics([[report_with_accuracy(80, 100)]])
        assert summary["federated"]["accuracy"][1] == 0.0

    def test_missing_column_rejected(self):
        runs = [[report_with_accuracy(80, 100)],
                [report_with_accuracy(80, 100, scenario="centralized")]]
        with pytest.raises(ValueError, match="missing column"):
            summarize_metrics(runs)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            summarize_metrics([])
