"""Label propagation ``F <- alpha S F + (1 - alpha) Y`` and its fixed point."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .dataset import UNLABELED, SemiLabels
from .errors import MatchADError, NoLabeledRows, NotConvergedWarning, SolveFailure, ZeroRow

DENSE_SOLVE_LIMIT = 5000


@dataclass
class PropagationResult:
    F_star: np.ndarray
    labels: np.ndarray
    confidence: np.ndarray
    iterations_used: int
    residual: float
    converged: bool = True


def init_label_matrix(semi: SemiLabels):
    """One-hot rows for labeled subjects, uniform ``1/c`` rows otherwise.

    Returns ``(F0, Y)``; they are equal but independent arrays.
    """
    if semi.labeled_count == 0:
        raise NoLabeledRows("propagation needs at least one labeled row")
    c = semi.class_count
    Y = np.full((semi.n, c), 1.0 / c)
    lab = np.flatnonzero(semi.labels != UNLABELED)
    Y[lab] = 0.0
    Y[lab, semi.labels[lab]] = 1.0
    return Y.copy(), Y


def _check_alpha(alpha):
    if not 0 <= alpha < 1:
        raise MatchADError(f"alpha must lie in [0, 1), got {alpha}")


def assign(F):
    """Row-wise argmax (lowest index wins ties) and row-normalized max."""
    F = np.asarray(F, dtype=float)
    if F.shape[0] == 0:
        return np.empty(0, dtype=int), np.empty(0)
    mx = F.max(axis=1)
    zero = np.flatnonzero(mx <= 0)
    if zero.size:
        raise ZeroRow(int(zero[0]))
    labels = F.argmax(axis=1)
    conf = mx / F.sum(axis=1)
    return labels, conf


def iterate(S, Y, alpha, F0=None):
    """Yield successive iterates ``F^(1), F^(2), ...`` (infinite)."""
    F = np.array(Y if F0 is None else F0, dtype=float)
    base = (1.0 - alpha) * np.asarray(Y, dtype=float)
    while True:
        F = alpha * (S @ F) + base
        yield F


def propagate_iterative(S, Y, alpha: float, eps: float = 1e-6, t_max: int = 1000,
                        F0=None) -> PropagationResult:
    """Iterate until ``||F - F_old||_F < eps`` or ``t_max`` steps.

    Hitting ``t_max`` emits ``NotConvergedWarning`` and sets
    ``converged=False`` on the result.
    """
    _check_alpha(alpha)
    F_old = np.array(Y if F0 is None else F0, dtype=float)
    residual, t = np.inf, 0
    for t, F in enumerate(iterate(S, Y, alpha, F_old), start=1):
        residual = float(np.linalg.norm(F - F_old))
        F_old = F
        if residual < eps or t >= t_max:
            break
    converged = residual < eps
    if not converged:
        warnings.warn(f"propagation stopped at t_max={t_max} with residual {residual:.3e}",
                      NotConvergedWarning, stacklevel=2)
    labels, conf = assign(F_old)
    return PropagationResult(F_old, labels, conf, t, residual, converged)


def propagate_closed_form(S, Y, alpha: float) -> PropagationResult:
    """Solve ``(I - alpha S) F = (1 - alpha) Y`` directly (no explicit inverse)."""
    _check_alpha(alpha)
    Y = np.asarray(Y, dtype=float)
    n = Y.shape[0]
    rhs = (1.0 - alpha) * Y
    if alpha == 0:
        F = rhs.copy()
    elif n <= DENSE_SOLVE_LIMIT:
        A = np.eye(n) - alpha * (S.toarray() if sp.issparse(S) else np.asarray(S))
        try:
            F = scipy.linalg.solve(A, rhs, assume_a="sym")
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise SolveFailure(str(exc)) from exc
    else:
        A = sp.identity(n, format="csc") - alpha * sp.csc_matrix(S)
        try:
            F = spla.splu(A).solve(rhs)
        except RuntimeError as exc:
            raise SolveFailure(str(exc)) from exc
    if not np.all(np.isfinite(F)):
        raise SolveFailure("non-finite solution")
    res = float(np.linalg.norm(F - alpha * (S @ F) - rhs))
    labels, conf = assign(F)
    return PropagationResult(F, labels, conf, 0, res, True)


def propagate(S, Y, alpha, solver: str = "auto", eps: float = 1e-6, t_max: int = 1000):
    if solver == "auto":
        solver = "closed" if Y.shape[0] <= DENSE_SOLVE_LIMIT else "iterative"
    if solver == "closed":
        return propagate_closed_form(S, Y, alpha)
    if solver == "iterative":
        return propagate_iterative(S, Y, alpha, eps, t_max)
    raise MatchADError(f"unknown solver {solver!r}")
