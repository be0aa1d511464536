"""Entropic optimal transport between class-conditional latent clouds.

``sinkhorn`` runs the classic ``u = a / K v``, ``v = b / K^T u`` scaling
on ``K = exp(-C / lam)`` and switches to log-domain updates when the
kernel would underflow.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import (
    DimensionMismatch,
    EmptyStage,
    MatchADError,
    NonPositiveMarginal,
    NumericalUnderflow,
    SingleStage,
)

LOG_DOMAIN_RATIO = 1e-3


@dataclass
class TransportPlan:
    T: np.ndarray
    a: np.ndarray
    b: np.ndarray
    cost: float
    lam: float
    converged: bool
    iterations: int
    log_domain: bool = False


@dataclass
class StageProgression:
    stages: list[int]
    plans: dict[tuple[int, int], TransportPlan] = field(default_factory=dict)

    @property
    def distances(self) -> dict[tuple[int, int], float]:
        return {pair: plan.cost for pair, plan in self.plans.items()}

    @property
    def total(self) -> float:
        return float(sum(p.cost for p in self.plans.values()))


def cost_matrix(Za, Zb) -> np.ndarray:
    """Squared Euclidean costs between rows of ``Za`` and rows of ``Zb``."""
    Za = np.atleast_2d(np.asarray(Za, dtype=float))
    Zb = np.atleast_2d(np.asarray(Zb, dtype=float))
    if Za.shape[1] != Zb.shape[1]:
        raise DimensionMismatch(f"latent dims differ: {Za.shape[1]} vs {Zb.shape[1]}")
    diff = Za[:, None, :] - Zb[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def transport_cost(T, C) -> float:
    T = np.asarray(T, dtype=float)
    C = np.asarray(C, dtype=float)
    if T.shape != C.shape:
        raise DimensionMismatch(f"plan {T.shape} vs cost {C.shape}")
    return float(np.sum(T * C))


def _sinkhorn_plain(C, a, b, lam, eps, t_max):
    K = np.exp(-C / lam)
    u, v = np.ones_like(a), np.ones_like(b)
    converged, it = False, 0
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        for it in range(1, t_max + 1):
            u = a / (K @ v)
            v = b / (K.T @ u)
            err = np.abs(u * (K @ v) - a).sum()
            if not np.isfinite(err):
                return None
            if err < eps:
                converged = True
                break
        T = u[:, None] * K * v[None, :]
    if not np.all(np.isfinite(T)):
        return None
    return T, converged, it


def _log_updates(M, f, g, log_a, log_b, a, eps, t_max):
    converged, it = False, 0
    for it in range(1, t_max + 1):
        f = log_a - logsumexp(M + g[None, :], axis=1)
        g = log_b - logsumexp(M + f[:, None], axis=0)
        row = np.exp(f + logsumexp(M + g[None, :], axis=1))
        if np.abs(row - a).sum() < eps:
            converged = True
            break
    return f, g, converged, it


def _sinkhorn_log(C, a, b, lam, eps, t_max):
    """Log-domain scaling with lam annealed down from ``max(C)``.

    Dual potentials carry over between stages as warm starts; only the final
    stage at the requested ``lam`` decides convergence.
    """
    log_a, log_b = np.log(a), np.log(b)
    phi, psi = np.zeros_like(a), np.zeros_like(b)
    schedule = []
    cur = float(C.max())
    while cur > 2.0 * lam:
        schedule.append(cur)
        cur *= 0.5
    schedule.append(lam)
    used, converged = 0, False
    for i, stage_lam in enumerate(schedule):
        final = i == len(schedule) - 1
        budget = max(1, t_max - used) if final else max(1, min(50, t_max - used))
        f, g, converged, it = _log_updates(-C / stage_lam, phi / stage_lam, psi / stage_lam,
                                           log_a, log_b, a, eps, budget)
        phi, psi = f * stage_lam, g * stage_lam
        used += it
    M = -C / lam
    T = np.exp(M + (phi / lam)[:, None] + (psi / lam)[None, :])
    return T, converged, used


def sinkhorn(C, a, b, lam: float, eps: float = 1e-9, t_max: int = 1000,
             log_domain: bool | None = None) -> TransportPlan:
    """Entropy-regularized transport plan between marginals ``a`` and ``b``.

    Stops when the L1 row-marginal error drops below ``eps``.  Uses the
    log-domain path when ``lam / max(C) < 1e-3`` or when the plain scaling
    breaks down numerically; ``log_domain`` forces either path.
    """
    C = np.atleast_2d(np.asarray(C, dtype=float))
    a = np.asarray(a, dtype=float).reshape(-1)
    b = np.asarray(b, dtype=float).reshape(-1)
    if C.shape != (a.size, b.size):
        raise DimensionMismatch(f"cost {C.shape} vs marginals ({a.size}, {b.size})")
    if np.any(a <= 0) or np.any(b <= 0):
        raise NonPositiveMarginal("marginals must be strictly positive")
    if abs(a.sum() - 1) > 1e-12 or abs(b.sum() - 1) > 1e-12:
        raise NonPositiveMarginal("marginals must each sum to 1")
    if not lam > 0:
        raise MatchADError("lam must be positive")

    cmax = float(C.max()) if C.size else 0.0
    if log_domain is None:
        log_domain = cmax > 0 and lam / cmax < LOG_DOMAIN_RATIO
    out = None
    if not log_domain:
        out = _sinkhorn_plain(C, a, b, lam, eps, t_max)
    if out is None:
        log_domain = True
        out = _sinkhorn_log(C, a, b, lam, eps, t_max)
        if not np.all(np.isfinite(out[0])):
            raise NumericalUnderflow("both plain and log-domain Sinkhorn failed")
    T, converged, it = out
    return TransportPlan(T, a, b, transport_cost(T, C), lam, converged, it, log_domain)


def default_lambda(C) -> float:
    med = float(np.median(C))
    return 0.1 * med if med > 0 else 1.0


def stage_progression(Z, labels, lam: float | None = None, eps: float = 1e-9,
                      t_max: int = 1000, stages=None) -> StageProgression:
    """One transport plan per consecutive pair of sorted stages.

    ``lam=None`` picks ``0.1 * median(C)`` per pair.  ``stages`` optionally
    lists the expected stage ids; an expected stage without members raises
    ``EmptyStage``.
    """
    Z = np.asarray(Z, dtype=float)
    labels = np.asarray(labels, dtype=int)
    present = sorted(int(s) for s in np.unique(labels))
    if stages is None:
        stages = present
    else:
        stages = sorted(int(s) for s in stages)
        for s in stages:
            if s not in present:
                raise EmptyStage(s)
    if len(stages) < 2:
        raise SingleStage(f"need at least two stages, found {stages}")
    prog = StageProgression(list(stages))
    for s0, s1 in zip(stages[:-1], stages[1:]):
        Za, Zb = Z[labels == s0], Z[labels == s1]
        C = cost_matrix(Za, Zb)
        a = np.full(Za.shape[0], 1.0 / Za.shape[0])
        b = np.full(Zb.shape[0], 1.0 / Zb.shape[0])
        pair_lam = default_lambda(C) if lam is None else lam
        prog.plans[(s0, s1)] = sinkhorn(C, a, b, pair_lam, eps, t_max)
    return prog


def dump_plan(plan: TransportPlan, path) -> None:
    np.savetxt(path, plan.T, delimiter=",", fmt="%.17g")
