"""Fully connected autoencoder with batch normalization, trained by Adam.

Layout: every hidden layer is ``affine -> batch-norm -> ReLU``; the latent
layer and the reconstruction layer are affine only.  Weights are stored
``(fan_in, fan_out)`` and act on row vectors.

The loss is

    mean_i ||x_i - xhat_i||^2
    + lam1 * sum ||W||^2                      (weights only, no biases)
    + lam2 * 1/2 sum_k (v_k + mu_k^2 - 1 - ln v_k)

where ``mu_k`` and ``v_k`` are the batch mean and variance of latent
dimension ``k``, i.e. the KL divergence of the moment-matched Gaussian
from N(0, I).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .errors import BatchTooSmallForKL, DimensionMismatch, MatchADError, NonFiniteLoss

log = logging.getLogger(__name__)

BN_EPS = 1e-5
KL_EPS = 1e-8
BN_MOMENTUM = 0.1
CHECKPOINT_VERSION = 1


@dataclass
class MlpParams:
    """Encoder/decoder parameters.

    ``arrays`` holds everything trainable (``enc0.W``, ``enc0.b``,
    ``enc0.gamma``, ``enc0.beta``, ..., ``dec2.W``); ``buffers`` holds the
    batch-norm running statistics.
    """

    layer_dims: tuple[int, ...]
    arrays: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]

    @property
    def latent_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    def copy(self) -> "MlpParams":
        return MlpParams(self.layer_dims,
                         {k: v.copy() for k, v in self.arrays.items()},
                         {k: v.copy() for k, v in self.buffers.items()})

    def stack_dims(self, prefix: str):
        dims = self.layer_dims if prefix == "enc" else self.layer_dims[::-1]
        return list(zip(dims[:-1], dims[1:]))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-5
    kl_weight: float = 1e-3
    lr_decay: float = 0.95
    decay_every: int = 10
    hidden_dims: tuple[int, ...] = (128, 64)
    latent_dim: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size <= 0 or self.learning_rate <= 0:
            raise MatchADError("epochs must be >= 0; batch_size and learning_rate positive")
        if self.weight_decay < 0 or self.kl_weight < 0:
            raise MatchADError("regularization weights must be non-negative")


class LossParts(NamedTuple):
    total: float
    reconstruction: float
    weight_decay: float
    kl: float


def learning_rate_after(epoch: int, config: TrainConfig) -> float:
    """Learning rate in effect once ``epoch`` epochs have completed."""
    return config.learning_rate * config.lr_decay ** (epoch // config.decay_every)


def init_xavier(layer_dims, seed) -> MlpParams:
    """Xavier-uniform weights, zero biases, identity batch-norm."""
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise MatchADError("layer_dims needs at least two positive sizes")
    rng = np.random.default_rng(seed)
    arrays, buffers = {}, {}
    for prefix, stack in (("enc", dims), ("dec", dims[::-1])):
        L = len(stack) - 1
        for l, (fi, fo) in enumerate(zip(stack[:-1], stack[1:])):
            bound = math.sqrt(6.0 / (fi + fo))
            p = f"{prefix}{l}"
            arrays[f"{p}.W"] = rng.uniform(-bound, bound, size=(fi, fo))
            arrays[f"{p}.b"] = np.zeros(fo)
            if l < L - 1:
                arrays[f"{p}.gamma"] = np.ones(fo)
                arrays[f"{p}.beta"] = np.zeros(fo)
                buffers[f"{p}.running_mean"] = np.zeros(fo)
                buffers[f"{p}.running_var"] = np.ones(fo)
    return MlpParams(dims, arrays, buffers)


def _forward_stack(params: MlpParams, prefix: str, h, train: bool):
    A, B = params.arrays, params.buffers
    L = params.n_layers
    caches = []
    for l in range(L):
        p = f"{prefix}{l}"
        a = h @ A[f"{p}.W"] + A[f"{p}.b"]
        if l == L - 1:
            caches.append((h, None))
            h = a
            break
        if train:
            mu, var = a.mean(axis=0), a.var(axis=0)
        else:
            mu, var = B[f"{p}.running_mean"], B[f"{p}.running_var"]
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (a - mu) * inv_std
        y = A[f"{p}.gamma"] * xhat + A[f"{p}.beta"]
        caches.append((h, (xhat, inv_std, y > 0, mu, var)))
        h = np.maximum(y, 0.0)
    return h, caches


def _backward_stack(params: MlpParams, prefix: str, caches, dout, grads):
    A = params.arrays
    L = params.n_layers
    g = dout
    for l in reversed(range(L)):
        p = f"{prefix}{l}"
        h_in, bn = caches[l]
        if bn is not None:
            xhat, inv_std, active, _, _ = bn
            dy = g * active
            grads[f"{p}.gamma"] = (dy * xhat).sum(axis=0)
            grads[f"{p}.beta"] = dy.sum(axis=0)
            dxhat = dy * A[f"{p}.gamma"]
            m = dxhat.shape[0]
            g = inv_std / m * (m * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        grads[f"{p}.W"] = h_in.T @ g
        grads[f"{p}.b"] = g.sum(axis=0)
        g = g @ A[f"{p}.W"].T
    return g


def _check_input(params: MlpParams, X, width):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != width:
        raise DimensionMismatch(f"expected {width} columns, got shape {X.shape}")
    return X


def encode(params: MlpParams, X, mode: str = "eval") -> np.ndarray:
    X = _check_input(params, X, params.layer_dims[0])
    if mode not in ("train", "eval"):
        raise MatchADError("mode must be 'train' or 'eval'")
    Z, _ = _forward_stack(params, "enc", X, mode == "train")
    return Z


def decode(params: MlpParams, Z, mode: str = "eval") -> np.ndarray:
    Z = _check_input(params, Z, params.layer_dims[-1])
    if mode not in ("train", "eval"):
        raise MatchADError("mode must be 'train' or 'eval'")
    Xhat, _ = _forward_stack(params, "dec", Z, mode == "train")
    return Xhat


def _kl_and_grad(Z):
    m = Z.shape[0]
    mu = Z.mean(axis=0)
    v = Z.var(axis=0) + KL_EPS
    kl = 0.5 * float(np.sum(v + mu * mu - 1.0 - np.log(v)))
    dZ = ((1.0 - 1.0 / v) * (Z - mu) + mu) / m
    return kl, dZ


def loss_and_grad(params: MlpParams, batch, lam1: float, lam2: float, mode: str = "train",
                  latent_term: Callable | None = None, need_grad: bool = True):
    """Evaluate the loss (and optionally its gradient) on one batch.

    ``latent_term(Z) -> (value, dvalue/dZ)`` adds an extra objective on the
    latent codes; its value is returned separately and is not part of
    ``LossParts``.  Returns ``(LossParts, extra_value, grads_or_None)``.
    """
    X = _check_input(params, batch, params.layer_dims[0])
    m = X.shape[0]
    if m == 0:
        raise MatchADError("batch must be non-empty")
    train = mode == "train"
    if train and m < 2:
        raise BatchTooSmallForKL("batch statistics need at least 2 rows in train mode")

    Z, enc_cache = _forward_stack(params, "enc", X, train)
    Xhat, dec_cache = _forward_stack(params, "dec", Z, train)
    diff = Xhat - X
    rec = float(np.sum(diff * diff)) / m
    wsq = sum(float(np.sum(w * w)) for k, w in params.arrays.items() if k.endswith(".W"))
    kl_raw, dZ_kl = _kl_and_grad(Z)
    parts = LossParts(rec + lam1 * wsq + lam2 * kl_raw, rec, lam1 * wsq, lam2 * kl_raw)

    extra, dZ_extra = 0.0, None
    if latent_term is not None:
        extra, dZ_extra = latent_term(Z)
    if not need_grad:
        return parts, extra, None

    grads: dict[str, np.ndarray] = {}
    dZ = _backward_stack(params, "dec", dec_cache, 2.0 * diff / m, grads)
    dZ = dZ + lam2 * dZ_kl
    if dZ_extra is not None:
        dZ = dZ + dZ_extra
    _backward_stack(params, "enc", enc_cache, dZ, grads)
    for k, w in params.arrays.items():
        if k.endswith(".W"):
            grads[k] = grads[k] + 2.0 * lam1 * w
    return parts, extra, grads


def loss(params: MlpParams, batch, lam1: float, lam2: float, mode: str = "train") -> LossParts:
    parts, _, _ = loss_and_grad(params, batch, lam1, lam2, mode, need_grad=False)
    return parts


def grad(params: MlpParams, batch, lam1: float, lam2: float) -> dict[str, np.ndarray]:
    """Analytic gradient of the train-mode loss w.r.t. every trainable array."""
    _, _, g = loss_and_grad(params, batch, lam1, lam2, "train")
    return g


def _update_running_stats(params: MlpParams, X, momentum: float):
    Z, enc_cache = _forward_stack(params, "enc", X, True)
    _, dec_cache = _forward_stack(params, "dec", Z, True)
    for prefix, caches in (("enc", enc_cache), ("dec", dec_cache)):
        for l, (_, bn) in enumerate(caches):
            if bn is None:
                continue
            _, _, _, mu, var = bn
            rm, rv = f"{prefix}{l}.running_mean", f"{prefix}{l}.running_var"
            params.buffers[rm] = (1 - momentum) * params.buffers[rm] + momentum * mu
            params.buffers[rv] = (1 - momentum) * params.buffers[rv] + momentum * var


def recalibrate(params: MlpParams, X) -> MlpParams:
    """Set running statistics to the exact full-batch statistics of ``X``,
    so eval-mode encoding of ``X`` equals its train-mode encoding."""
    out = params.copy()
    X = _check_input(out, X, out.layer_dims[0])
    if X.shape[0] >= 2:
        _update_running_stats(out, X, 1.0)
    return out


class Adam:
    def __init__(self, arrays, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.t = 0

    def step(self, arrays, grads):
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            arrays[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def _minibatches(n, batch_size, rng):
    order = rng.permutation(n)
    batches = [order[s:s + batch_size] for s in range(0, n, batch_size)]
    # a trailing single row cannot carry batch statistics
    if len(batches) > 1 and batches[-1].size == 1:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def train(X, config: TrainConfig = TrainConfig(), params: MlpParams | None = None):
    """Minibatch Adam on the autoencoder loss.

    Returns ``(params, epoch_losses)`` where ``epoch_losses[e]`` is the mean
    batch loss of epoch ``e``.  Deterministic under ``config.seed``.
    """
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    if n < 2:
        raise MatchADError("training needs at least 2 rows")
    if params is None:
        dims = (X.shape[1],) + tuple(config.hidden_dims) + (config.latent_dim,)
        params = init_xavier(dims, config.seed)
    else:
        params = params.copy()
    rng = np.random.default_rng([config.seed, 1])
    opt = Adam(params.arrays, config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    history = []
    for epoch in range(1, config.epochs + 1):
        opt.lr = learning_rate_after(epoch - 1, config)
        total, count = 0.0, 0
        for idx in _minibatches(n, config.batch_size, rng):
            batch = X[idx]
            parts, _, g = loss_and_grad(params, batch, config.weight_decay, config.kl_weight)
            if not math.isfinite(parts.total):
                raise NonFiniteLoss(epoch, f"batch loss {parts.total}")
            opt.step(params.arrays, g)
            _update_running_stats(params, batch, BN_MOMENTUM)
            total += parts.total * idx.size
            count += idx.size
        history.append(total / count)
        if epoch % 25 == 0:
            log.debug("epoch %d loss %.6f", epoch, history[-1])
    return params, history


def save_checkpoint(params: MlpParams, path) -> None:
    payload = {
        "version": np.array(CHECKPOINT_VERSION),
        "layer_dims": np.array(params.layer_dims, dtype=np.int64),
    }
    for k, v in params.arrays.items():
        payload[f"arrays/{k}"] = v
    for k, v in params.buffers.items():
        payload[f"buffers/{k}"] = v
    np.savez(path, **payload)


def load_checkpoint(path) -> MlpParams:
    with np.load(path) as data:
        version = int(data["version"])
        if version != CHECKPOINT_VERSION:
            raise MatchADError(f"unsupported checkpoint version {version}")
        dims = tuple(int(d) for d in data["layer_dims"])
        arrays = {k[len("arrays/"):]: data[k].copy() for k in data.files if k.startswith("arrays/")}
        buffers = {k[len("buffers/"):]: data[k].copy() for k in data.files if k.startswith("buffers/")}
    params = init_xavier(dims, 0)
    if set(arrays) != set(params.arrays) or set(buffers) != set(params.buffers):
        raise MatchADError("checkpoint arrays do not match its layer_dims")
    return MlpParams(dims, {k: arrays[k] for k in params.arrays}, {k: buffers[k] for k in params.buffers})
