"""k-NN affinity graph with locally scaled Gaussian weights and its
symmetric normalization ``S = D^-1/2 W D^-1/2``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import IsolatedNode, KTooLarge, MatchADError

SIGMA_FLOOR = 1e-12


@dataclass(frozen=True)
class AffinityGraph:
    W: sp.csr_matrix
    degrees: np.ndarray
    S: sp.csr_matrix
    neighbor_lists: np.ndarray  # n x k
    sigmas: np.ndarray

    @property
    def n(self) -> int:
        return self.W.shape[0]


def pairwise_sq_dists(Z) -> np.ndarray:
    """Squared Euclidean distances; exactly symmetric with a zero diagonal."""
    Z = np.asarray(Z, dtype=float)
    if Z.ndim != 2 or Z.shape[0] < 2:
        raise MatchADError("need a 2-D matrix with at least two rows")
    sq = np.einsum("ij,ij->i", Z, Z)
    D = sq[:, None] + sq[None, :] - 2.0 * (Z @ Z.T)
    D = 0.5 * (D + D.T)
    np.maximum(D, 0.0, out=D)
    np.fill_diagonal(D, 0.0)
    return D


def knn_with_sigma(sq_dists, k: int):
    """Nearest ``k`` neighbors of each node (self excluded, ties to the lower
    index) and the mean unsquared distance to them."""
    sq_dists = np.asarray(sq_dists, dtype=float)
    n = sq_dists.shape[0]
    if not 1 <= k < n:
        raise KTooLarge(f"k={k} requires 1 <= k < n={n}")
    nbrs = np.empty((n, k), dtype=int)
    for i in range(n):
        order = np.argsort(sq_dists[i], kind="stable")
        order = order[order != i]
        nbrs[i] = order[:k]
    dist = np.sqrt(np.take_along_axis(sq_dists, nbrs, axis=1))
    sigmas = np.maximum(dist.mean(axis=1), SIGMA_FLOOR)
    return nbrs, sigmas


def build_affinity(sq_dists, neighbor_lists, sigmas) -> sp.csr_matrix:
    """``W_ij = exp(-D_ij^2 / (2 sigma_i sigma_j))`` on the symmetrized k-NN
    edge set, zero elsewhere and on the diagonal."""
    sq_dists = np.asarray(sq_dists, dtype=float)
    sigmas = np.asarray(sigmas, dtype=float)
    if np.any(sigmas <= 0):
        raise MatchADError("sigmas must be positive")
    n, k = neighbor_lists.shape
    rows = np.repeat(np.arange(n), k)
    cols = neighbor_lists.reshape(-1)
    r = np.concatenate([rows, cols])
    c = np.concatenate([cols, rows])
    keep = r != c
    r, c = r[keep], c[keep]
    # dedupe the union of i->j and j->i
    key = np.unique(r * n + c)
    r, c = key // n, key % n
    w = np.exp(-sq_dists[r, c] / (2.0 * sigmas[r] * sigmas[c]))
    W = sp.csr_matrix((w, (r, c)), shape=(n, n))
    W.sort_indices()
    return W


def normalize(W) -> tuple[sp.csr_matrix, np.ndarray]:
    """Return ``(S, degrees)`` with ``S_ij = W_ij / sqrt(d_i d_j)``."""
    W = sp.csr_matrix(W)
    deg = np.asarray(W.sum(axis=1)).reshape(-1)
    bad = np.flatnonzero(deg <= 0)
    if bad.size:
        raise IsolatedNode(int(bad[0]))
    inv = 1.0 / np.sqrt(deg)
    coo = W.tocoo()
    S = sp.csr_matrix((coo.data * inv[coo.row] * inv[coo.col], (coo.row, coo.col)), shape=W.shape)
    S.sort_indices()
    return S, deg


def build_graph(Z, k: int) -> AffinityGraph:
    D = pairwise_sq_dists(Z)
    nbrs, sigmas = knn_with_sigma(D, k)
    W = build_affinity(D, nbrs, sigmas)
    S, deg = normalize(W)
    return AffinityGraph(W, deg, S, nbrs, sigmas)


def dump_edges(W, path) -> None:
    """Write the upper triangle as ``i j w`` lines."""
    coo = sp.triu(sp.csr_matrix(W), k=1).tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w", encoding="utf-8") as fh:
        for t in order:
            fh.write(f"{coo.row[t]} {coo.col[t]} {float(coo.data[t])!r}\n")
