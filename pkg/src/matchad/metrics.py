"""Classification metrics: confusion matrix, Cohen's kappa, support-weighted
precision/recall/F1."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ClassOutOfRange, EmptyMatrix, LengthMismatch


@dataclass
class MetricsReport:
    accuracy: float
    kappa: float
    precision_weighted: float
    recall_weighted: float
    f1_weighted: float
    confusion: list[list[int]]
    support: list[int]

    def to_dict(self):
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def confusion(y_true, y_pred, c: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    y_true = np.asarray(y_true, dtype=int).reshape(-1)
    y_pred = np.asarray(y_pred, dtype=int).reshape(-1)
    if y_true.shape != y_pred.shape:
        raise LengthMismatch(f"{y_true.size} true labels vs {y_pred.size} predictions")
    for y in (y_true, y_pred):
        if y.size and (y.min() < 0 or y.max() >= c):
            raise ClassOutOfRange(f"labels must lie in 0..{c - 1}")
    M = np.zeros((c, c), dtype=np.int64)
    np.add.at(M, (y_true, y_pred), 1)
    return M


def _check(M):
    M = np.asarray(M)
    total = M.sum()
    if total <= 0:
        raise EmptyMatrix("confusion matrix has no samples")
    return M, float(total)


def cohen_kappa(M) -> float:
    """(p_o - p_e) / (1 - p_e); 0 when chance agreement is already 1.

    Integer counts are combined exactly before a single division, so hand
    cases such as ``[[20, 5], [10, 15]]`` come out as the nearest float.
    """
    M, total = _check(M)
    if np.issubdtype(M.dtype, np.integer):
        n = int(M.sum())
        agree = int(np.trace(M))
        chance = sum(int(r) * int(c) for r, c in zip(M.sum(axis=1), M.sum(axis=0)))
        if chance == n * n:
            return 0.0
        return (n * agree - chance) / (n * n - chance)
    p_o = np.trace(M) / total
    p_e = float(M.sum(axis=1) @ M.sum(axis=0)) / total**2
    if p_e >= 1.0:
        return 0.0
    return float((p_o - p_e) / (1.0 - p_e))


def prf_weighted(M):
    """Support-weighted precision, recall and F1; zero-denominator classes
    contribute 0."""
    M, total = _check(M)
    M = M.astype(float)
    tp = np.diag(M)
    pred = M.sum(axis=0)
    true = M.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        prec = np.where(pred > 0, tp / pred, 0.0)
        rec = np.where(true > 0, tp / true, 0.0)
        f1 = np.where(prec + rec > 0, 2 * prec * rec / (prec + rec), 0.0)
    w = true / total
    return float(w @ prec), float(w @ rec), float(w @ f1)


def evaluate(y_true, y_pred, c: int) -> MetricsReport:
    M = confusion(y_true, y_pred, c)
    _, total = _check(M)
    p, r, f = prf_weighted(M)
    return MetricsReport(
        accuracy=float(np.trace(M) / total),
        kappa=cohen_kappa(M),
        precision_weighted=p,
        recall_weighted=r,
        f1_weighted=f,
        confusion=M.tolist(),
        support=M.sum(axis=1).tolist(),
    )


def format_table(rows) -> str:
    """Aligned text table: Method | Accuracy | Kappa | Precision | Recall | F1."""
    header = ["Method", "Accuracy", "Kappa", "Precision", "Recall", "F1"]
    body = [[name, f"{r.accuracy:.3f}", f"{r.kappa:.3f}", f"{r.precision_weighted:.3f}",
             f"{r.recall_weighted:.3f}", f"{r.f1_weighted:.3f}"] for name, r in rows]
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(x.ljust(w) for x, w in zip(row, widths)) for row in body]
    return "\n".join(lines)
