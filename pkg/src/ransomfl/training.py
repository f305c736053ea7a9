"""Scope-local training pipeline shared by all three experiment regimes.

One scope = one owner of training data (a single node, or the pooled
centralized set). The pipeline balances classes, fits a z-score normalizer
on the scope's own training data, trains in normalized space, and folds the
scaling back into the split thresholds so the exported model operates
directly on raw feature values. Models therefore need no scaler artifact
and can be aggregated across scopes.
"""

from __future__ import annotations

from typing import Sequence

from .dataset import BalanceSpec, balance_classes, class_counts, fit_normalizer
from .features import FeatureVector, feature_matrix
from .forest import Forest, TrainConfig, denormalize_thresholds, train_forest_arrays


def train_scope(samples: Sequence[FeatureVector], cfg: TrainConfig,
                balance: BalanceSpec | None = None) -> Forest:
    """Balance, normalize, train, and return a raw-feature-space forest."""
    if not samples:
        raise ValueError("cannot train on an empty scope")
    n0, n1 = class_counts(samples)
    if balance is not None and n0 > 0 and n1 > 0:
        samples = balance_classes(samples, balance)
    x, y = feature_matrix(samples)
    norm = fit_normalizer(x)
    forest = train_forest_arrays(
        norm.transform(x), y, cfg,
        provenance=sorted({s.server_id for s in samples}))
    return denormalize_thresholds(forest, norm.mean, norm.std)
