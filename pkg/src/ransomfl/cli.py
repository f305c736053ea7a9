"""Command-line pipeline: generate, extract, train, predict, report.

Experiments are captured in a YAML config file; command-line flags override
individual config values. Every stage derives its randomness from the single
master seed, so a config plus a seed pins the whole pipeline down to the
byte level. Commands only write inside their ``--out`` directory.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import yaml

from .dataset import BalanceSpec, SplitSpec, partition_by_server
from .evaluation import (
    CENTRALIZED,
    FEDERATED,
    LOCAL,
    emit_report,
    render_report_text,
    report_from_doc,
    report_to_doc,
    run_experiment,
)
from .features import (
    WindowConfig,
    extract_windows,
    feature_matrix,
    features_csv_bytes,
    read_features_csv,
)
from .federation import ConcatAll, ProtocolError, SizeWeightedSubsample
from .forest import (
    ForestFormatError,
    TrainConfig,
    deserialize_forest,
    serialize_forest,
)
from .seeds import derive_seed
from .synth import default_corpus_config, generate_corpus, load_corpus, load_corpus_config
from .transport import InProcBus, SocketNetwork, TransportError

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_PROTOCOL = 3

FEATURES_FILE = "features.csv"
TRANSPORTS = ("in-proc", "socket")
MODES = (CENTRALIZED, FEDERATED, LOCAL)
POLICIES = ("concat-all", "size-weighted-subsample")


class _Parser(argparse.ArgumentParser):
    """argparse with the usage-error exit code pinned to 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a train run needs; see the README for the file format."""

    features: Path | None = None
    out: Path | None = None
    master_seed: int = 0
    mode: str = FEDERATED
    transport: str = "in-proc"
    timeout: float = 120.0
    window_seconds: float = 30.0
    hop_seconds: float | None = None
    test_fraction: float = 0.25
    balance_ratio: float | None = 1.5
    oversample: bool = True
    n_trees: int = 100
    max_features_per_split: str | int = "sqrt"
    max_depth: int | None = None
    min_samples_split: int = 2
    bootstrap: bool = True
    policy_kind: str = "concat-all"
    policy_target_trees: int | None = None

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.transport not in TRANSPORTS:
            raise ValueError(
                f"transport must be one of {TRANSPORTS}, got {self.transport!r}")
        if self.policy_kind not in POLICIES:
            raise ValueError(
                f"policy must be one of {POLICIES}, got {self.policy_kind!r}")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")

    def window(self) -> WindowConfig:
        return WindowConfig(self.window_seconds, self.hop_seconds)

    def split(self) -> SplitSpec:
        return SplitSpec(self.test_fraction,
                         seed=derive_seed(self.master_seed, "split"))

    def balance(self) -> BalanceSpec | None:
        if self.balance_ratio is None:
            return None
        return BalanceSpec(self.balance_ratio, self.oversample,
                           seed=derive_seed(self.master_seed, "balance"))

    def train(self) -> TrainConfig:
        return TrainConfig(self.n_trees, self.max_features_per_split,
                           self.max_depth, self.min_samples_split,
                           self.bootstrap,
                           seed=derive_seed(self.master_seed, "train"))

    def policy(self):
        if self.policy_kind == "concat-all":
            return ConcatAll()
        if self.policy_target_trees is None:
            raise ValueError("size-weighted-subsample needs policy_target_trees")
        return SizeWeightedSubsample(self.policy_target_trees,
                                     seed=derive_seed(self.master_seed, "policy"))


_CONFIG_KEYS = {f.name for f in fields(ExperimentConfig)}
_PATH_KEYS = {"features", "out"}


def experiment_config_from_doc(doc: dict, base_dir: Path) -> ExperimentConfig:
    """Build a config from a YAML mapping; paths resolve against base_dir."""
    if not isinstance(doc, dict):
        raise ValueError("experiment config must be a mapping")
    unknown = set(doc) - _CONFIG_KEYS
    if unknown:
        raise ValueError(f"unknown experiment config keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in doc.items():
        if key in _PATH_KEYS and value is not None:
            value = (base_dir / value).resolve()
        kwargs[key] = value
    try:
        return ExperimentConfig(**kwargs)
    except TypeError as exc:
        raise ValueError(f"malformed experiment config: {exc}") from exc


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        doc = yaml.safe_load(f)
    return experiment_config_from_doc(doc or {}, path.parent)


def _overlay_flags(cfg: ExperimentConfig, args: argparse.Namespace,
                   names: dict[str, str]) -> ExperimentConfig:
    """Apply explicitly given flags on top of the config file values."""
    updates = {}
    for attr, config_field in names.items():
        value = getattr(args, attr, None)
        if value is not None:
            updates[config_field] = value
    return replace(cfg, **updates) if updates else cfg


def _network(transport: str):
    if transport == "socket":
        return SocketNetwork()
    return contextlib.nullcontext(InProcBus())


def cmd_gen_synth(args) -> int:
    if args.config is not None:
        corpus = load_corpus_config(args.config)
        if args.seed is not None:
            corpus = replace(corpus, master_seed=args.seed)
        if args.runs is not None:
            corpus = replace(corpus, runs_per_software=args.runs)
    else:
        corpus = default_corpus_config(
            master_seed=args.seed if args.seed is not None else 0,
            runs_per_software=args.runs if args.runs is not None else 11,
            duration_seconds=args.duration)
    n = generate_corpus(corpus, args.out)
    print(f"wrote {n} runs ({len(corpus.servers)} servers x "
          f"{len(corpus.software)} software) under {args.out}")
    return EXIT_OK


def cmd_extract(args) -> int:
    cfg = (load_experiment_config(args.config) if args.config
           else ExperimentConfig())
    cfg = _overlay_flags(cfg, args, {"window_seconds": "window_seconds",
                                     "hop_seconds": "hop_seconds"})
    runs = load_corpus(args.corpus_dir, lenient=args.lenient)
    wcfg = cfg.window()
    samples = []
    for run in runs:
        samples.extend(extract_windows(run, wcfg))
    if not samples:
        raise ValueError("no feature windows extracted")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / FEATURES_FILE
    path.write_bytes(features_csv_bytes(samples))
    print(f"extracted {len(samples)} windows from {len(runs)} runs "
          f"into {path}")
    return EXIT_OK


def _load_features(cfg: ExperimentConfig, dataset_dir: str | None):
    source = Path(dataset_dir) if dataset_dir else cfg.features
    if source is None:
        raise ValueError("no dataset directory given (argument or config)")
    path = source / FEATURES_FILE if source.is_dir() else source
    with open(path, "r", encoding="utf-8", newline="") as f:
        samples = read_features_csv(f)
    if not samples:
        raise ValueError(f"{path}: no feature rows")
    return samples


_TRAIN_FLAGS = {"seed": "master_seed", "mode": "mode",
                "transport": "transport", "timeout": "timeout",
                "test_fraction": "test_fraction", "trees": "n_trees",
                "max_depth": "max_depth"}


def cmd_train(args) -> int:
    cfg = (load_experiment_config(args.config) if args.config
           else ExperimentConfig())
    cfg = _overlay_flags(cfg, args, _TRAIN_FLAGS)
    if args.no_balance:
        cfg = replace(cfg, balance_ratio=None)
    out = Path(args.out) if args.out else cfg.out
    if out is None:
        raise ValueError("no output directory given (--out or config)")

    samples = _load_features(cfg, args.dataset_dir)
    nodes = partition_by_server(samples, cfg.split())
    with _network(cfg.transport) as net:
        result = run_experiment(nodes, cfg.train(), balance=cfg.balance(),
                                policy=cfg.policy(), network=net,
                                timeout=cfg.timeout)

    wanted = [r for r in result.reports if r.scenario == cfg.mode]
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for report in wanted:
        label = report.column_label
        forest = result.forests[label]
        model_path = out / f"{label}.forest"
        model_path.write_bytes(serialize_forest(forest))
        report_path = out / f"{label}.json"
        report_path.write_text(
            json.dumps(report_to_doc(report), indent=2, sort_keys=True) + "\n",
            encoding="utf-8")
        written += [model_path, report_path]
    print(render_report_text(wanted), end="")
    print(f"wrote {len(written)} files under {out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model = deserialize_forest(Path(args.model).read_bytes())
    with open(args.features, "r", encoding="utf-8", newline="") as f:
        samples = read_features_csv(f)
    if not samples:
        raise ValueError(f"{args.features}: no feature rows")
    x, _ = feature_matrix(samples)
    labels = model.predict(x)
    text = "\n".join(str(int(v)) for v in labels) + "\n"
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")
        print(f"wrote {len(samples)} predictions to {out}")
    else:
        print(text, end="")
    return EXIT_OK


def cmd_report(args) -> int:
    reports = []
    for path in args.reports:
        with open(path, "r", encoding="utf-8") as f:
            reports.append(report_from_doc(json.load(f)))
    hashes = {r.test_hash for r in reports}
    prints = {r.config_fingerprint for r in reports}
    if len(hashes) > 1 or len(prints) > 1:
        raise ValueError(
            "reports come from different experiments "
            f"(test hashes {sorted(hashes)}, fingerprints {sorted(prints)})")
    written = emit_report(reports, args.out, charts=not args.no_charts)
    print(render_report_text(reports), end="")
    print(f"wrote {len(written)} files under {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ransomfl",
                     description="Federated ransomware detection experiments "
                                 "on storage access traces.")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write a synthetic trace corpus")
    p.add_argument("--config", help="corpus config YAML")
    p.add_argument("--out", required=True, help="corpus output directory")
    p.add_argument("--seed", type=int, help="master seed override")
    p.add_argument("--runs", type=int, help="runs per software override")
    p.add_argument("--duration", type=float,
                   help="run duration seconds (default config only)")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("extract", help="parse a corpus and extract windows")
    p.add_argument("corpus_dir", help="corpus directory (gen-synth layout)")
    p.add_argument("--out", required=True, help="feature output directory")
    p.add_argument("--config", help="experiment config YAML")
    p.add_argument("--window-seconds", type=float, dest="window_seconds")
    p.add_argument("--hop-seconds", type=float, dest="hop_seconds")
    p.add_argument("--lenient", action="store_true",
                   help="skip malformed trace records instead of failing")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="run a training scenario end to end")
    p.add_argument("dataset_dir", nargs="?",
                   help="directory holding features.csv (or a CSV path)")
    p.add_argument("--config", help="experiment config YAML")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--out", help="model/report output directory")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--transport", choices=TRANSPORTS)
    p.add_argument("--timeout", type=float, help="federation timeout seconds")
    p.add_argument("--test-fraction", type=float, dest="test_fraction")
    p.add_argument("--trees", type=int, help="trees per forest")
    p.add_argument("--max-depth", type=int, dest="max_depth")
    p.add_argument("--no-balance", action="store_true",
                   help="train on raw class frequencies")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="classify feature rows with a model")
    p.add_argument("model", help="serialized forest file")
    p.add_argument("features", help="feature CSV")
    p.add_argument("--out", help="write labels here instead of stdout")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("report", help="merge scenario reports into tables")
    p.add_argument("reports", nargs="+", help="scenario report JSON files")
    p.add_argument("--out", required=True, help="table output directory")
    p.add_argument("--no-charts", action="store_true",
                   help="skip the per-metric bar charts")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits on usage errors and --help
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ProtocolError, TransportError) as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (OSError, ValueError, ForestFormatError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
