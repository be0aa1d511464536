"""Cohort containers, CSV ingestion, a synthetic cohort generator, and
seeded split/mask helpers."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ClassTooSmall,
    MatchADError,
    MissingHeader,
    RaggedRow,
    UnknownLabelColumn,
    UnparseableValue,
)

UNLABELED = -1
MODALITIES = ("MRI", "CSF", "DEMO", "DERIVED")


@dataclass
class FeatureTable:
    """n x d feature values with a missingness mask.

    Missing cells hold NaN in ``values``; ``missing`` is the authoritative
    mask.
    """

    values: np.ndarray
    missing: np.ndarray
    feature_names: list[str]
    modality: list[str]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.missing = np.asarray(self.missing, dtype=bool)
        if self.values.ndim != 2 or self.values.shape != self.missing.shape:
            raise MatchADError("values and missing mask must be matching 2-D arrays")
        d = self.values.shape[1]
        if len(self.feature_names) != d or len(self.modality) != d:
            raise MatchADError("feature_names and modality must have one entry per column")
        if len(set(self.feature_names)) != d:
            raise MatchADError("feature names must be unique")
        bad = [m for m in self.modality if m not in MODALITIES]
        if bad:
            raise MatchADError(f"unknown modality tags {bad}")
        if not np.all(np.isfinite(self.values[~self.missing])):
            raise MatchADError("observed cells must be finite")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def take(self, rows) -> "FeatureTable":
        rows = np.asarray(rows, dtype=int)
        return FeatureTable(self.values[rows], self.missing[rows],
                            list(self.feature_names), list(self.modality))


@dataclass
class SemiLabels:
    """Class ids in ``0..class_count-1`` with ``UNLABELED`` (-1) for unknowns."""

    labels: np.ndarray
    class_count: int
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=int).reshape(-1)
        if self.class_count < 1:
            raise MatchADError("class_count must be positive")
        known = self.labels[self.labels != UNLABELED]
        if np.any(known < 0) or np.any(known >= self.class_count):
            raise MatchADError("label ids must lie in 0..class_count-1 or be UNLABELED")
        if not self.class_names:
            self.class_names = [str(i) for i in range(self.class_count)]

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    @property
    def labeled_mask(self) -> np.ndarray:
        return self.labels != UNLABELED

    @property
    def labeled_count(self) -> int:
        return int(self.labeled_mask.sum())

    def with_labels(self, labels) -> "SemiLabels":
        return SemiLabels(np.asarray(labels, dtype=int), self.class_count, list(self.class_names))

    def take(self, rows) -> "SemiLabels":
        return self.with_labels(self.labels[np.asarray(rows, dtype=int)])


@dataclass(frozen=True)
class SynthConfig:
    n_per_class: tuple[int, ...] = (125, 125, 125, 125)
    ambient_dim: int = 30
    manifold_dim: int = 4
    class_separation: float = 4.0
    noise_sigma: float = 0.5
    missing_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "n_per_class", tuple(int(c) for c in self.n_per_class))
        if not self.n_per_class or any(c <= 0 for c in self.n_per_class):
            raise MatchADError("n_per_class must be a non-empty list of positive counts")
        if self.ambient_dim <= 0 or self.manifold_dim <= 0:
            raise MatchADError("dimensions must be positive")
        if self.manifold_dim > self.ambient_dim:
            raise MatchADError("manifold_dim must not exceed ambient_dim")
        if self.class_separation < 0:
            raise MatchADError("class_separation must be >= 0")
        if self.noise_sigma <= 0:
            raise MatchADError("noise_sigma must be > 0")
        if not 0 <= self.missing_rate < 1:
            raise MatchADError("missing_rate must lie in [0, 1)")


def reference_cohort(seed: int = 7, class_separation: float = 4.0,
                     missing_rate: float = 0.02) -> SynthConfig:
    """Four ordered stages, 500 subjects, class sizes in the proportions of
    an imbalanced clinical cohort (63/4/20/13 percent)."""
    return SynthConfig(
        n_per_class=(315, 18, 100, 67),
        ambient_dim=30,
        manifold_dim=4,
        class_separation=class_separation,
        noise_sigma=0.75,
        missing_rate=missing_rate,
        seed=seed,
    )


def _parse_cell(text, nan_token):
    text = text.strip()
    if text == "" or text == nan_token:
        return None
    return float(text)


def load_csv(path, label_column: str, unlabeled_token: str = "-1",
             nan_token: str = "NaN", modality: dict | None = None):
    """Read a headered CSV into ``(FeatureTable, SemiLabels)``.

    Every column except ``label_column`` must be numeric.  Class names map
    to ids in first-appearance order.  ``modality`` optionally maps feature
    names to modality tags; unmapped columns are tagged MRI.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or all(h.strip() == "" for h in header):
            raise MissingHeader(f"{path}: no header row")
        header = [h.strip() for h in header]
        if label_column not in header:
            raise UnknownLabelColumn(f"{path}: no column named {label_column!r}")
        li = header.index(label_column)
        feature_names = [h for i, h in enumerate(header) if i != li]
        rows, raw_labels = [], []
        for r, record in enumerate(reader):
            if not record:
                continue
            if len(record) != len(header):
                raise RaggedRow(r, len(header), len(record))
            vals = []
            for c, cell in enumerate(record):
                if c == li:
                    continue
                try:
                    vals.append(_parse_cell(cell, nan_token))
                except ValueError:
                    raise UnparseableValue(r, header[c], cell) from None
            rows.append(vals)
            raw_labels.append(record[li].strip())

    d = len(feature_names)
    values = np.full((len(rows), d), np.nan)
    for i, vals in enumerate(rows):
        for j, v in enumerate(vals):
            if v is not None:
                values[i, j] = v
    missing = np.isnan(values)
    if np.any(np.isinf(values)):
        i, j = np.argwhere(np.isinf(values))[0]
        raise UnparseableValue(int(i), feature_names[j], "inf")

    class_names: list[str] = []
    ids = []
    for tok in raw_labels:
        if tok == unlabeled_token:
            ids.append(UNLABELED)
            continue
        if tok not in class_names:
            class_names.append(tok)
        ids.append(class_names.index(tok))
    modality = modality or {}
    tags = [modality.get(name, "MRI") for name in feature_names]
    table = FeatureTable(values, missing, feature_names, tags)
    semi = SemiLabels(np.array(ids, dtype=int), max(len(class_names), 1), class_names or ["0"])
    return table, semi


def synth_generate(config: SynthConfig):
    """Sample a cohort whose class means lie on a line in a low-dimensional
    subspace, embedded isometrically into ``ambient_dim`` with isotropic noise.

    Class ``t`` has latent mean ``t * class_separation * e1`` and unit
    within-class spread.  Rows are shuffled; every label is known.
    """
    rng = np.random.default_rng(config.seed)
    m, D = config.manifold_dim, config.ambient_dim
    embed, _ = np.linalg.qr(rng.standard_normal((D, m)))
    direction = np.zeros(m)
    direction[0] = 1.0

    labels = np.concatenate([np.full(c, t) for t, c in enumerate(config.n_per_class)])
    n = labels.shape[0]
    latent = rng.standard_normal((n, m)) + np.outer(labels * config.class_separation, direction)
    X = latent @ embed.T + config.noise_sigma * rng.standard_normal((n, D))

    order = rng.permutation(n)
    X, labels = X[order], labels[order]
    missing = rng.random((n, D)) < config.missing_rate
    X[missing] = np.nan

    names = [f"f{j:03d}" for j in range(D)]
    table = FeatureTable(X, missing, names, ["MRI"] * D)
    semi = SemiLabels(labels, len(config.n_per_class),
                      [f"stage{t}" for t in range(len(config.n_per_class))])
    return table, semi


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stratified_split(labels: SemiLabels, test_fraction: float, seed: int):
    """Per-class holdout of ``round(test_fraction * count)`` rows (at least 1,
    at most ``count - 1``).  Unlabeled rows appear in neither output."""
    if not 0 < test_fraction < 1:
        raise MatchADError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in range(labels.class_count):
        idx = np.flatnonzero(labels.labels == c)
        if idx.size == 0:
            continue
        if idx.size < 2:
            raise ClassTooSmall(c, idx.size)
        n_test = min(max(_round_half_up(test_fraction * idx.size), 1), idx.size - 1)
        perm = rng.permutation(idx)
        test.append(perm[:n_test])
        train.append(perm[n_test:])
    train_idx = np.sort(np.concatenate(train)) if train else np.empty(0, dtype=int)
    test_idx = np.sort(np.concatenate(test)) if test else np.empty(0, dtype=int)
    return train_idx, test_idx


def retained_count(keep_fraction: float, n: int) -> int:
    # the 1e-9 guard keeps e.g. 0.3 * 10 from rounding up to 4
    return min(n, int(math.ceil(keep_fraction * n - 1e-9)))


def mask_labels(labels: SemiLabels, keep_fraction: float, seed: int) -> SemiLabels:
    """Keep ``ceil(keep_fraction * n)`` uniformly chosen labels, hide the rest.

    ``n`` counts the currently labeled rows; rows already UNLABELED stay so.
    For a fixed seed the retained sets are nested as ``keep_fraction`` grows.
    """
    if not 0 < keep_fraction <= 1:
        raise MatchADError("keep_fraction must lie in (0, 1]")
    eligible = np.flatnonzero(labels.labeled_mask)
    m = retained_count(keep_fraction, eligible.size)
    rng = np.random.default_rng(seed)
    keep = rng.permutation(eligible)[:m]
    out = np.full(labels.n, UNLABELED, dtype=int)
    out[keep] = labels.labels[keep]
    return labels.with_labels(out)
