"""Alternating optimization: pretrain the autoencoder, then repeat
propagate -> transport -> representation update until labels settle.

The representation update minimizes

    L_AE + beta1 * L_prop + beta2 * sum_i <T_i, C_i(Z)>

with the graph operator, the label matrix and the transport plans frozen.
Gradients reach the encoder only through the transport costs (``L_prop``
does not depend on the weights once ``F`` and ``S`` are fixed).  Each
gradient step is accepted only if it does not increase this objective;
otherwise the step size is halved.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autoencoder as ae
from .dataset import SemiLabels
from .errors import DimensionMismatch, EmptyModel, MatchADError, NonFiniteLoss, SingleStage
from .graph import AffinityGraph, build_graph
from .propagation import PropagationResult, init_label_matrix, propagate
from .transport import StageProgression, stage_progression

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class JointConfig:
    beta1: float = 1.0
    beta2: float = 0.01
    beta3: float = 0.1
    alpha: float = 0.2
    k_neighbors: int = 15
    t_outer: int = 10
    eps_y: int | None = None  # None -> ceil(0.001 * n)
    inner_steps: int = 5
    inner_lr: float = 1e-3  # same step size as autoencoder pretraining
    max_halvings: int = 20
    lambda_ot: float | None = None  # None -> 0.1 * median(C) per stage pair
    sinkhorn_eps: float = 1e-9
    sinkhorn_t_max: int = 1000
    solver: str = "auto"

    def __post_init__(self):
        if min(self.beta1, self.beta2, self.beta3) < 0:
            raise MatchADError("betas must be non-negative")
        if not 0 <= self.alpha < 1:
            raise MatchADError("alpha must lie in [0, 1)")
        if self.k_neighbors < 1 or self.t_outer < 0 or self.inner_steps < 0:
            raise MatchADError("k_neighbors >= 1, t_outer >= 0 and inner_steps >= 0 required")
        if self.eps_y is not None and self.eps_y < 0:
            raise MatchADError("eps_y must be non-negative")

    def resolved_eps_y(self, n: int) -> int:
        return self.eps_y if self.eps_y is not None else int(math.ceil(0.001 * n))


@dataclass
class FittedModel:
    params: ae.MlpParams
    propagation: PropagationResult
    progression: StageProgression
    trace: list[dict]
    Z: np.ndarray
    graph: AffinityGraph | None = None
    ae_history: list[float] = field(default_factory=list)
    stopped_by_eps_y: bool = False
    n_propagations: int = 0

    @property
    def labels(self) -> np.ndarray:
        return self.propagation.labels


def propagation_residual(F, S, Y, alpha) -> float:
    """``||F - alpha S F - (1 - alpha) Y||_F^2``."""
    F = np.asarray(F, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if F.shape != Y.shape or S.shape != (F.shape[0], F.shape[0]):
        raise DimensionMismatch("F, S and Y shapes are inconsistent")
    R = F - alpha * (S @ F) - (1.0 - alpha) * Y
    return float(np.sum(R * R))


def smoothness_loss(W, F) -> float:
    """``sum_{i,j} w_ij ||f_i - f_j||^2`` over ordered pairs.

    Uses ``2 (tr(F^T D F) - tr(F^T W F))`` for symmetric ``W``.
    """
    F = np.asarray(F, dtype=float)
    if W.shape != (F.shape[0], F.shape[0]):
        raise DimensionMismatch("W and F shapes are inconsistent")
    deg = np.asarray(W.sum(axis=1)).reshape(-1)
    WF = W @ F
    return float(2.0 * (np.sum(deg[:, None] * F * F) - np.sum(F * WF)))


def total_loss(parts, config: JointConfig) -> float:
    """``L_AE + beta1 L_prop + beta2 L_OT + beta3 L_smooth`` for
    ``parts = (L_AE, L_prop, L_OT, L_smooth)``."""
    l_ae, l_prop, l_ot, l_smooth = parts
    return l_ae + config.beta1 * l_prop + config.beta2 * l_ot + config.beta3 * l_smooth


def transport_term(progression: StageProgression, labels, weight: float):
    """Latent objective ``weight * sum_i <T_i, C_i(Z)>`` with plans frozen."""
    labels = np.asarray(labels)
    groups = {s: np.flatnonzero(labels == s) for s in progression.stages}
    plans = [(groups[s0], groups[s1], plan.T) for (s0, s1), plan in progression.plans.items()]

    def term(Z):
        value = 0.0
        dZ = np.zeros_like(Z)
        for ia, ib, T in plans:
            Za, Zb = Z[ia], Z[ib]
            ra, cb = T.sum(axis=1), T.sum(axis=0)
            sq_a = np.einsum("ij,ij->i", Za, Za)
            sq_b = np.einsum("ij,ij->i", Zb, Zb)
            TZb = T @ Zb
            value += float(ra @ sq_a + cb @ sq_b - 2.0 * np.sum(Za * TZb))
            dZ[ia] += 2.0 * (ra[:, None] * Za - TZb)
            dZ[ib] += 2.0 * (cb[:, None] * Zb - T.T @ Za)
        return weight * value, weight * dZ

    return term


def _progression(Z, labels, config):
    try:
        return stage_progression(Z, labels, config.lambda_ot, config.sinkhorn_eps,
                                 config.sinkhorn_t_max)
    except SingleStage:
        return StageProgression(sorted(int(s) for s in np.unique(labels)))


def _propagate(Z, Y, config):
    graph = build_graph(Z, config.k_neighbors)
    return graph, propagate(graph.S, Y, config.alpha, config.solver)


def _inner_updates(params, X, ae_config, config, const, term, record):
    """Gradient steps with step-halving on the frozen-structure objective."""
    lam1, lam2 = ae_config.weight_decay, ae_config.kl_weight

    def objective(p, need_grad):
        parts, extra, g = ae.loss_and_grad(p, X, lam1, lam2, "train", term, need_grad)
        return parts.total + const + extra, g

    current, g = objective(params, True)
    record.append(current)
    for _ in range(config.inner_steps):
        step = config.inner_lr
        accepted = False
        for _ in range(config.max_halvings + 1):
            trial = params.copy()
            for k, gk in g.items():
                trial.arrays[k] -= step * gk
            value, _ = objective(trial, False)
            if math.isfinite(value) and value <= current:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        params = trial
        current, g = objective(params, True)
        record.append(current)
    return params


def fit(X, semi: SemiLabels, ae_config: ae.TrainConfig = ae.TrainConfig(),
        joint_config: JointConfig = JointConfig()) -> FittedModel:
    """Pretrain, then alternate propagation, transport and encoder updates.

    The loop stops as soon as a propagation pass changes fewer than
    ``eps_y`` labels relative to the previous pass; the first pass is never
    a stopping point.  If ``t_outer`` passes elapse without that, one final
    propagation is run on the last representation.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] != semi.n:
        raise DimensionMismatch(f"X has shape {X.shape} but there are {semi.n} labels")
    if not np.all(np.isfinite(X)):
        raise MatchADError("X must be complete and finite; run preprocessing first")
    cfg = joint_config
    n = X.shape[0]
    eps_y = cfg.resolved_eps_y(n)
    _, Y = init_label_matrix(semi)

    params, history = ae.train(X, ae_config)
    params = ae.recalibrate(params, X)
    Z = ae.encode(params, X)

    trace: list[dict] = []
    prev = None
    stopped = False
    n_prop = 0
    graph = result = progression = None
    for t in range(1, cfg.t_outer + 1):
        graph, result = _propagate(Z, Y, cfg)
        n_prop += 1
        changed = None if prev is None else int(np.sum(result.labels != prev))
        progression = _progression(Z, result.labels, cfg)

        parts_ae = ae.loss(params, X, ae_config.weight_decay, ae_config.kl_weight, "train").total
        l_prop = propagation_residual(result.F_star, graph.S, Y, cfg.alpha)
        l_smooth = smoothness_loss(graph.W, result.F_star)
        l_ot = progression.total
        entry = {
            "iteration": t,
            "L_AE": parts_ae,
            "L_prop": l_prop,
            "L_OT": l_ot,
            "L_smooth": l_smooth,
            "total": total_loss((parts_ae, l_prop, l_ot, l_smooth), cfg),
            "labels_changed": changed,
            "inner_objective": [],
        }
        trace.append(entry)
        if not math.isfinite(entry["total"]):
            raise NonFiniteLoss(t, "joint objective")
        if changed is not None and changed < eps_y:
            stopped = True
            break

        const = cfg.beta1 * l_prop + (cfg.beta3 * l_smooth if cfg.beta3 > 0 else 0.0)
        term = transport_term(progression, result.labels, cfg.beta2) if progression.plans else None
        params = _inner_updates(params, X, ae_config, cfg, const, term, entry["inner_objective"])
        params = ae.recalibrate(params, X)
        Z = ae.encode(params, X)
        prev = result.labels
        log.debug("outer %d: total %.5f changed %s", t, entry["total"], changed)

    if not stopped:
        graph, result = _propagate(Z, Y, cfg)
        n_prop += 1
        progression = _progression(Z, result.labels, cfg)

    return FittedModel(params, result, progression, trace, Z, graph, history, stopped, n_prop)


def predict(model: FittedModel, X_new):
    """Label new rows by their nearest training latent code."""
    if model is None or model.Z is None or model.Z.shape[0] == 0:
        raise EmptyModel("model has no training latents")
    X_new = np.asarray(X_new, dtype=float)
    if X_new.ndim == 2 and X_new.shape[0] == 0:
        return np.empty(0, dtype=int), np.empty(0)
    Z_new = ae.encode(model.params, X_new)
    Z = model.Z
    d2 = (np.einsum("ij,ij->i", Z_new, Z_new)[:, None]
          + np.einsum("ij,ij->i", Z, Z)[None, :] - 2.0 * Z_new @ Z.T)
    nn = np.argmin(d2, axis=1)
    return model.propagation.labels[nn].copy(), model.propagation.confidence[nn].copy()


def propagate_raw(X, semi: SemiLabels, alpha: float, k: int) -> PropagationResult:
    """Propagation on the input features directly (no autoencoder)."""
    _, Y = init_label_matrix(semi)
    graph = build_graph(X, k)
    return propagate(graph.S, Y, alpha)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def model_summary(model: FittedModel) -> dict:
    return _jsonable({
        "labels": model.labels,
        "confidence": model.propagation.confidence,
        "stages": model.progression.stages,
        "stage_distances": {f"{a}->{b}": c for (a, b), c in model.progression.distances.items()},
        "trace": model.trace,
        "stopped_by_eps_y": model.stopped_by_eps_y,
        "n_propagations": model.n_propagations,
        "ae_history": model.ae_history,
    })


def save_model(model: FittedModel, directory) -> None:
    """Write ``encoder.npz`` (checkpoint), ``latent.npy`` and ``model.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ae.save_checkpoint(model.params, directory / "encoder.npz")
    np.save(directory / "latent.npy", model.Z)
    with open(directory / "model.json", "w", encoding="utf-8") as fh:
        json.dump(model_summary(model), fh, indent=2, sort_keys=True)


def load_model(directory) -> FittedModel:
    directory = Path(directory)
    params = ae.load_checkpoint(directory / "encoder.npz")
    Z = np.load(directory / "latent.npy")
    with open(directory / "model.json", encoding="utf-8") as fh:
        doc = json.load(fh)
    labels = np.asarray(doc["labels"], dtype=int)
    conf = np.asarray(doc["confidence"], dtype=float)
    result = PropagationResult(np.empty((labels.size, 0)), labels, conf, 0, 0.0)
    prog = StageProgression(doc["stages"])
    return FittedModel(params, result, prog, doc["trace"], Z, None, doc["ae_history"],
                       doc["stopped_by_eps_y"], doc["n_propagations"])
