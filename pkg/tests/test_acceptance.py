"""End-to-end acceptance gates for the toolkit.

Run ``pytest tests/test_acceptance.py -v`` to get one pass/fail line per
gate. The corpus-scale ordering check dominates the runtime (a few
minutes); everything else finishes in seconds. The final gate needs a
real trace corpus on disk and is skipped unless ``RANSOMFL_REAL_CORPUS``
points at one.
"""

from __future__ import annotations

import math
import os
import time
from collections import Counter

import numpy as np
import pytest

from conftest import make_run
from ransomfl.dataset import (
    BalanceSpec,
    NodeDataset,
    SplitSpec,
    partition_by_server,
    pooled_test,
)
from ransomfl.evaluation import (
    CENTRALIZED,
    FEDERATED,
    ConfusionMatrix,
    compute_metrics,
    relative_gain,
    run_experiment,
)
from ransomfl.features import (
    FeatureVector,
    WindowConfig,
    extract_windows,
    feature_matrix,
)
from ransomfl.federation import ConcatAll, inspect_trace, run_federation
from ransomfl.forest import (
    TrainConfig,
    bootstrap_indices,
    gini,
    serialize_forest,
    train_forest,
)
from ransomfl.synth import default_corpus_config, iter_corpus_runs, load_corpus
from ransomfl.trace import sector_entropy
from ransomfl.training import train_scope
from ransomfl.transport import InProcBus, SocketNetwork

REAL_CORPUS_VAR = "RANSOMFL_REAL_CORPUS"


def audit_federation(record) -> None:
    """Every federation run must finish in two rounds and leak no raw data."""
    assert record.round_trips, "federation recorded no participants"
    for node_id, trips in record.round_trips.items():
        assert trips == 2, f"{node_id} used {trips} round trips, expected 2"
    findings = inspect_trace(record.message_trace)
    assert findings == [], f"privacy inspector flagged: {findings}"


def entropy_reference(sector: bytes) -> float:
    # Direct evaluation of normalized Shannon entropy, no numpy involved.
    n = len(sector)
    total = 0.0
    for count in Counter(sector).values():
        p = count / n
        total -= p * math.log2(p)
    return total / math.log2(n)


def test_sector_entropy_matches_brute_force_shannon_formula():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    for i in range(1000):
        if i % 2 == 0:
            sector = rng.integers(0, 256, size=512, dtype=np.uint8).tobytes()
        else:
            alphabet = int(rng.integers(2, 257))
            sector = rng.integers(0, alphabet, size=512,
                                  dtype=np.uint16).astype(np.uint8).tobytes()
        assert abs(sector_entropy(sector) - entropy_reference(sector)) <= 1e-12
    assert sector_entropy(bytes(512)) == 0.0
    assert sector_entropy(b"\x41" * 512) == 0.0
    assert time.perf_counter() - start < 1.0


def naive_windows(run, cfg: WindowConfig) -> list[FeatureVector]:
    """Reference extractor that rescans every event for every window.

    Per-window statistics use the same numpy reductions as the production
    code, over members gathered by brute force, so agreement is exact.
    """
    reads = sorted(run.reads, key=lambda e: e.time_us)
    writes = sorted(run.writes, key=lambda e: e.time_us)
    times = [e.time_us for e in reads] + [e.time_us for e in writes]
    t0 = min(times)
    n_windows = (max(times) - t0) // cfg.hop_us + 1

    out = []
    for k in range(n_windows):
        lo = t0 + k * cfg.hop_us
        hi = lo + cfg.window_us
        w_in = [e for e in writes if lo <= e.time_us < hi]
        r_in = [e for e in reads if lo <= e.time_us < hi]
        if cfg.empty_window_policy == "skip" and not w_in and not r_in:
            continue

        def stats(entropies, lbas, sizes):
            if not lbas:
                return 0.0, 0.0, 0.0
            avg_e = float(np.mean(np.array(entropies))) if entropies is not None else 0.0
            var = float(np.var(np.array(lbas, dtype=np.float64)))
            thr = float(np.sum(np.array(sizes, dtype=np.int64))) / cfg.window_seconds
            return avg_e, var, thr

        avg_e, var_w, thr_w = stats([e.entropy for e in w_in],
                                    [e.lba for e in w_in],
                                    [e.bytes for e in w_in])
        _, var_r, thr_r = stats(None, [e.lba for e in r_in],
                                [e.bytes for e in r_in])
        out.append(FeatureVector(avg_e, var_w, thr_w, var_r, thr_r,
                                 run.label, k, run.server_id))
    return out


def test_window_features_match_naive_rescan_oracle():
    rng = np.random.default_rng(55)
    start = time.perf_counter()
    for _ in range(100):
        n_reads = int(rng.integers(0, 120))
        n_writes = int(rng.integers(0, 120))
        if n_reads == 0 and n_writes == 0:
            n_writes = 1
        run = make_run(seed=int(rng.integers(0, 10_000)),
                       n_reads=n_reads, n_writes=n_writes,
                       duration_s=float(rng.uniform(3.0, 400.0)),
                       label=int(rng.integers(0, 2)))
        window = float(rng.choice([5.0, 20.0, 30.0, 60.0]))
        cfg = WindowConfig(
            window_seconds=window,
            hop_seconds=window / 2.0 if rng.integers(0, 2) else None,
            empty_window_policy="skip" if rng.integers(0, 4) == 0 else "emit-zeros")
        assert extract_windows(run, cfg) == naive_windows(run, cfg)
    assert time.perf_counter() - start < 10.0


def separable_samples(n_benign: int, n_ransom: int, seed: int,
                      server_id: str = "srv-sep") -> list[FeatureVector]:
    """Entropy-separated two-class samples; the other features are noise."""
    rng = np.random.default_rng(seed)

    def sample(entropy_lo, entropy_hi, label, idx):
        return FeatureVector(float(rng.uniform(entropy_lo, entropy_hi)),
                             float(rng.uniform(0.0, 1e9)),
                             float(rng.uniform(0.0, 5e5)),
                             float(rng.uniform(0.0, 1e9)),
                             float(rng.uniform(0.0, 5e5)),
                             label, idx, server_id)

    out = [sample(0.10, 0.30, 0, i) for i in range(n_benign)]
    out += [sample(0.60, 0.90, 1, n_benign + i) for i in range(n_ransom)]
    return out


def test_forest_separable_accuracy_bootstrap_and_gini_identities():
    train = separable_samples(100, 100, seed=7)
    forest = train_forest(train, TrainConfig(n_trees=25, seed=1))
    x, y = feature_matrix(train)
    assert float((forest.predict(x) == y).mean()) == 1.0

    fractions = [
        np.unique(bootstrap_indices(200, np.random.default_rng(s))).size / 200
        for s in range(500)
    ]
    assert abs(float(np.mean(fractions)) - 0.632) <= 0.02

    assert gini([1, 1]) == 0.5
    assert gini([2, 2]) == 0.5
    assert gini([2, 0]) == 0.0
    assert gini([0, 4]) == 0.0
    assert gini([3, 1]) == 0.375
    assert gini([1, 3]) == 0.375


def test_single_node_federation_equals_local_training():
    node = NodeDataset("node-solo",
                       train=separable_samples(120, 120, seed=11),
                       test=separable_samples(40, 40, seed=12))
    cfg = TrainConfig(n_trees=15, seed=5)
    with InProcBus() as net:
        record = run_federation([node], cfg, ConcatAll(), net)
    audit_federation(record)
    local = train_scope(node.train, cfg)
    assert record.global_forest.n_trees == local.n_trees

    x, _ = feature_matrix(pooled_test([node]))
    mismatches = int((record.global_forest.predict(x) != local.predict(x)).sum())
    assert mismatches == 0


def test_federation_uses_two_rounds_and_leaks_no_raw_samples():
    nodes = [
        NodeDataset(f"node-{tag}",
                    train=separable_samples(80, 80, seed=20 + k,
                                            server_id=f"srv-{tag}"),
                    test=separable_samples(20, 20, seed=40 + k,
                                           server_id=f"srv-{tag}"))
        for k, tag in enumerate("abcd")
    ]
    with InProcBus() as net:
        record = run_federation(nodes, TrainConfig(n_trees=10, seed=2),
                                ConcatAll(), net, balance=BalanceSpec(seed=2))
    audit_federation(record)
    assert set(record.round_trips) == {n.node_id for n in nodes}
    assert record.message_trace, "expected a captured message trace"


def test_scenario_ordering_holds_on_default_corpus_across_seeds():
    start = time.perf_counter()
    fed_beats_all_locals = []
    for master_seed in range(5):
        corpus = default_corpus_config(master_seed=master_seed)
        windows = []
        for _, run in iter_corpus_runs(corpus):
            windows.extend(extract_windows(run, WindowConfig()))
        nodes = partition_by_server(windows,
                                    SplitSpec(test_fraction=0.25,
                                              seed=master_seed))
        n_train = sum(d.n_train for d in nodes.values())
        n_test = sum(d.n_test for d in nodes.values())
        assert 40_000 <= n_train <= 56_000
        assert 13_000 <= n_test <= 19_000

        result = run_experiment(nodes,
                                TrainConfig(n_trees=100, seed=master_seed),
                                balance=BalanceSpec(seed=master_seed),
                                timeout=300.0)
        audit_federation(result.federation)
        assert len(result.local_reports) == 4

        fed = result.report(FEDERATED).metrics.accuracy
        cen = result.report(CENTRALIZED).metrics.accuracy
        best_local = max(r.metrics.accuracy for r in result.local_reports)
        fed_beats_all_locals.append(fed >= best_local)
        assert cen >= fed - 0.01, (
            f"seed {master_seed}: centralized {cen:.4f} trails "
            f"federated {fed:.4f} by more than 0.01")

    assert sum(fed_beats_all_locals) >= 4, (
        f"federated beat every local in only "
        f"{sum(fed_beats_all_locals)}/5 seeds")
    assert time.perf_counter() - start < 600.0


def test_metric_identities_and_relative_gain_formatting():
    m = compute_metrics(ConfusionMatrix(tp=3, fp=1, tn=5, fn=1))
    assert (m.accuracy, m.precision, m.recall, m.f1) == (0.8, 0.75, 0.75, 0.75)
    assert m.undefined == ()

    m = compute_metrics(ConfusionMatrix(tp=4, fp=0, tn=6, fn=0))
    assert (m.accuracy, m.precision, m.recall, m.f1) == (1.0, 1.0, 1.0, 1.0)

    m = compute_metrics(ConfusionMatrix(tp=0, fp=0, tn=5, fn=5))
    assert (m.accuracy, m.precision, m.recall, m.f1) == (0.5, 0.0, 0.0, 0.0)
    assert m.undefined == ("precision", "f1")

    gain = relative_gain(0.986, 0.905)
    assert abs(gain - 0.081 / 0.905) <= 1e-15
    assert f"{gain:.0%}" == "9%"


def test_in_process_and_socket_transports_agree():
    corpus = default_corpus_config(master_seed=9, runs_per_software=1,
                                   duration_seconds=300.0)
    windows = []
    for _, run in iter_corpus_runs(corpus):
        windows.extend(extract_windows(run, WindowConfig()))
    nodes = partition_by_server(windows, SplitSpec(test_fraction=0.25, seed=9))
    cfg = TrainConfig(n_trees=30, seed=9)
    balance = BalanceSpec(seed=9)

    on_bus = run_experiment(nodes, cfg, balance=balance)
    with SocketNetwork() as net:
        on_socket = run_experiment(nodes, cfg, balance=balance, network=net)
    audit_federation(on_bus.federation)
    audit_federation(on_socket.federation)

    assert (serialize_forest(on_bus.forests[FEDERATED])
            == serialize_forest(on_socket.forests[FEDERATED]))
    x, _ = feature_matrix(pooled_test(nodes))
    assert (on_bus.forests[FEDERATED].predict(x)
            == on_socket.forests[FEDERATED].predict(x)).all()
    assert on_bus.reports == on_socket.reports


def test_real_corpus_f1_floors_when_dataset_available():
    root = os.environ.get(REAL_CORPUS_VAR)
    if not root:
        pytest.skip(f"set {REAL_CORPUS_VAR} to a corpus directory to enable")
    runs = load_corpus(root, lenient=True)
    windows = [w for run in runs for w in extract_windows(run, WindowConfig())]
    nodes = partition_by_server(windows, SplitSpec(test_fraction=0.25, seed=0))
    result = run_experiment(nodes, TrainConfig(n_trees=100, seed=0),
                            balance=BalanceSpec(seed=0), timeout=600.0)
    assert result.report(FEDERATED).metrics.f1 >= 0.97
    assert result.report(CENTRALIZED).metrics.f1 >= 0.99
