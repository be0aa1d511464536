"""Quality filtering, ratio features, KNN imputation and robust scaling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import FeatureTable
from .errors import AllRowsRemoved, DimensionMismatch, FeatureFullyMissing, MatchADError, TooFewRows


@dataclass(frozen=True)
class ScalerParams:
    medians: np.ndarray
    iqrs: np.ndarray

    def to_dict(self):
        return {"medians": self.medians.tolist(), "iqrs": self.iqrs.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["medians"], float), np.asarray(d["iqrs"], float))


@dataclass(frozen=True)
class DerivedFeatureRule:
    name: str
    numerator_feature: str
    denominator_feature: str

    def __post_init__(self):
        if self.numerator_feature == self.denominator_feature:
            raise MatchADError("numerator and denominator must differ")


DEFAULT_RULES = (
    DerivedFeatureRule("hippocampus_tbv_ratio", "Hippocampus", "TBV"),
    DerivedFeatureRule("abeta42_ptau_ratio", "Abeta42", "pTau"),
)


def quality_filter(table: FeatureTable, max_missing_fraction: float = 0.5):
    """Drop rows whose missing fraction exceeds ``max_missing_fraction``.

    Returns the filtered table and the removed row indices (ascending).
    """
    if table.n == 0:
        return table, np.empty(0, dtype=int)
    frac = table.missing.sum(axis=1) / max(table.d, 1)
    removed = np.flatnonzero(frac > max_missing_fraction)
    if removed.size == table.n:
        raise AllRowsRemoved(f"all {table.n} rows exceed the missingness threshold")
    keep = np.flatnonzero(frac <= max_missing_fraction)
    return table.take(keep), removed


def derive_features(table: FeatureTable, rules=DEFAULT_RULES) -> FeatureTable:
    """Append ratio columns for every rule whose source columns are present."""
    values, missing = table.values, table.missing
    names, tags = list(table.feature_names), list(table.modality)
    new_cols, new_miss = [], []
    for rule in rules:
        if rule.numerator_feature not in names or rule.denominator_feature not in names:
            continue
        if rule.name in names:
            raise MatchADError(f"derived feature {rule.name!r} already exists")
        a = names.index(rule.numerator_feature)
        b = names.index(rule.denominator_feature)
        den = values[:, b]
        miss = missing[:, a] | missing[:, b] | (den == 0)
        col = np.full(table.n, np.nan)
        ok = ~miss
        col[ok] = values[ok, a] / den[ok]
        new_cols.append(col)
        new_miss.append(miss)
        names.append(rule.name)
        tags.append("DERIVED")
    if not new_cols:
        return table
    return FeatureTable(
        np.column_stack([values] + new_cols),
        np.column_stack([missing] + new_miss),
        names,
        tags,
    )


def _partial_distances(values, observed, i):
    """Overlap-scaled Euclidean distance from row ``i`` to every row."""
    d = values.shape[1]
    both = observed & observed[i]
    overlap = both.sum(axis=1)
    diff = np.where(both, values - values[i], 0.0)
    sq = (diff * diff).sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        dist = np.sqrt(sq * d / overlap)
    dist[overlap == 0] = np.inf
    return dist


def knn_impute(table: FeatureTable, k: int = 5) -> np.ndarray:
    """Fill each missing cell with the mean of that feature over the ``k``
    nearest rows that observe it.

    Distances use only the features both rows observe, scaled by
    sqrt(d / overlap).  Ties go to the lower row index.  Observed cells are
    returned unchanged.
    """
    values, missing = table.values, table.missing
    n, d = values.shape
    if n < 2:
        raise TooFewRows(f"imputation needs at least 2 rows, got {n}")
    observed = ~missing
    for j in range(d):
        if not observed[:, j].any():
            raise FeatureFullyMissing(j)
    out = np.where(observed, values, 0.0)
    for i in np.flatnonzero(missing.any(axis=1)):
        dist = _partial_distances(out, observed, i)
        dist[i] = np.inf
        order = np.argsort(dist, kind="stable")
        order = order[order != i]
        for j in np.flatnonzero(missing[i]):
            donors = order[observed[order, j]][:k]
            out[i, j] = values[donors, j].mean()
    return out


def robust_scale(matrix):
    """Center on the column median and divide by the IQR (type-7 quantiles).

    Columns with zero IQR are divided by 1.0 instead.
    """
    X = np.asarray(matrix, dtype=float)
    if X.ndim != 2:
        raise DimensionMismatch("expected a 2-D matrix")
    med = np.median(X, axis=0)
    q1, q3 = np.percentile(X, [25, 75], axis=0)
    iqr = q3 - q1
    iqr = np.where(iqr > 0, iqr, 1.0)
    params = ScalerParams(med, iqr)
    return apply_scaler(X, params), params


def apply_scaler(matrix, params: ScalerParams):
    X = np.asarray(matrix, dtype=float)
    if X.ndim != 2 or X.shape[1] != params.medians.shape[0]:
        raise DimensionMismatch(
            f"matrix has {X.shape[-1] if X.ndim else 0} columns, scaler expects {params.medians.shape[0]}")
    return (X - params.medians) / params.iqrs


def preprocess(table: FeatureTable, rules=DEFAULT_RULES, k: int = 5,
               max_missing_fraction: float = 0.5):
    """Filter, derive, impute, scale.

    Returns ``(scaled matrix, ScalerParams, kept_row_indices, feature_names)``.
    """
    filtered, removed = quality_filter(table, max_missing_fraction)
    kept = np.setdiff1d(np.arange(table.n), removed)
    derived = derive_features(filtered, rules)
    complete = knn_impute(derived, k)
    scaled, params = robust_scale(complete)
    return scaled, params, kept, derived.feature_names
