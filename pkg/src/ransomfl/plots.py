"""Bar-chart rendering of scenario metrics to image files."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")  # headless; must precede pyplot import

import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import METRIC_ROWS, ScenarioReport, _ordered_columns

log = logging.getLogger(__name__)

_SCENARIO_COLORS = {"centralized": "#2a7f3f", "federated": "#2a4f7f"}
_LOCAL_COLOR = "#7f7f7f"


def metric_bar_chart(reports: Sequence[ScenarioReport], metric_key: str,
                     path: str | Path, title: str | None = None) -> Path:
    """One grouped bar chart for a single metric across all scenarios."""
    cols = _ordered_columns(reports)
    labels = [r.column_label for r in cols]
    values = [r.metrics.value(metric_key) for r in cols]
    colors = [_SCENARIO_COLORS.get(r.scenario, _LOCAL_COLOR) for r in cols]

    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(cols)), 3.2))
    bars = ax.bar(range(len(cols)), values, color=colors)
    ax.set_xticks(range(len(cols)))
    ax.set_xticklabels(labels, rotation=20, ha="right", fontsize=8)
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel(title or metric_key)
    ax.set_title(title or metric_key)
    ax.bar_label(bars, fmt="%.3f", fontsize=7)
    fig.tight_layout()
    out = Path(path)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def render_metric_charts(reports: Sequence[ScenarioReport],
                         out_dir: str | Path, *,
                         basename: str = "report") -> list[Path]:
    """One PNG per metric next to the tabular report files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for title, key in METRIC_ROWS:
        path = out / f"{basename}-{key}.png"
        written.append(metric_bar_chart(reports, key, path, title=title))
    log.info("wrote %d metric charts under %s", len(written), out)
    return written
