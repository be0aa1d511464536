import numpy as np
import pytest
import scipy.sparse as sp

from matchad.errors import IsolatedNode, KTooLarge
from matchad.graph import (
    SIGMA_FLOOR,
    build_affinity,
    build_graph,
    dump_edges,
    knn_with_sigma,
    normalize,
    pairwise_sq_dists,
)


def loop_sq_dists(Z):
    n = len(Z)
    D = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            D[i, j] = sum((a - b) ** 2 for a, b in zip(Z[i], Z[j]))
    return D


class TestPairwise:
    def test_three_four_five(self):
        D = pairwise_sq_dists(np.array([[0.0, 0.0], [3.0, 4.0]]))
        assert D[0, 1] == 25 and D[1, 0] == 25

    def test_identical_rows(self):
        D = pairwise_sq_dists(np.ones((3, 4)))
        assert not D.any()

    def test_loop_oracle(self):
        Z = np.random.default_rng(0).standard_normal((20, 5))
        D = pairwise_sq_dists(Z)
        np.testing.assert_allclose(D, loop_sq_dists(Z), atol=1e-10)
        assert np.array_equal(D, D.T) and not np.diag(D).any() and (D >= 0).all()


class TestKnn:
    def test_collinear(self):
        D = pairwise_sq_dists(np.array([[0.0], [1.0], [3.0]]))
        nbrs, sig = knn_with_sigma(D, 1)
        assert nbrs.ravel().tolist() == [1, 0, 1]
        assert sig.tolist() == [1, 1, 2]

    def test_all_identical(self):
        nbrs, sig = knn_with_sigma(np.zeros((4, 4)), 2)
        assert np.all(sig == SIGMA_FLOOR)
        assert nbrs.tolist() == [[1, 2], [0, 2], [0, 1], [0, 1]]

    @pytest.mark.parametrize("seed", range(3))
    def test_sort_oracle(self, seed):
        rng = np.random.default_rng(seed)
        Z = rng.integers(0, 4, size=(25, 2)).astype(float)  # many ties
        D = pairwise_sq_dists(Z)
        nbrs, sig = knn_with_sigma(D, 6)
        for i in range(25):
            ranked = sorted((D[i, j], j) for j in range(25) if j != i)
            assert nbrs[i].tolist() == [j for _, j in ranked[:6]]
            assert sig[i] == pytest.approx(np.mean([np.sqrt(d) for d, _ in ranked[:6]]))

    def test_k_too_large(self):
        with pytest.raises(KTooLarge):
            knn_with_sigma(np.zeros((3, 3)), 3)


class TestAffinity:
    def test_zero_distance_edge(self):
        D = np.zeros((2, 2))
        W = build_affinity(D, np.array([[1], [0]]), np.array([1.0, 1.0]))
        assert W[0, 1] == 1.0

    def test_kernel_value(self):
        s = np.array([0.5, 2.0])
        D = np.array([[0.0, 2 * 0.5 * 2.0], [2 * 0.5 * 2.0, 0.0]])
        W = build_affinity(D, np.array([[1], [0]]), s)
        assert W[0, 1] == pytest.approx(np.exp(-1))

    @pytest.mark.parametrize("seed", range(5))
    def test_exact_symmetry(self, seed):
        Z = np.random.default_rng(seed).standard_normal((40, 3))
        g = build_graph(Z, 5)
        assert abs(g.W - g.W.T).max() == 0
        assert not g.W.diagonal().any()

    def test_or_rule(self):
        D = pairwise_sq_dists(np.array([[0.0], [1.0], [1.5], [10.0]]))
        nbrs, sig = knn_with_sigma(D, 1)
        W = build_affinity(D, nbrs, sig).toarray()
        # node 3's nearest is node 2, but 2's nearest is 1: edge kept by the or-rule
        assert W[2, 3] > 0 and W[3, 2] > 0
        assert W[0, 3] == 0


class TestNormalize:
    def test_two_nodes(self):
        S, deg = normalize(sp.csr_matrix(np.array([[0, 0.3], [0.3, 0]])))
        assert S[0, 1] == pytest.approx(1.0)
        assert deg.tolist() == [0.3, 0.3]

    def test_regular_graph(self):
        n = 6
        W = np.zeros((n, n))
        for i in range(n):
            W[i, (i + 1) % n] = W[(i + 1) % n, i] = 0.7
        S, _ = normalize(sp.csr_matrix(W))
        np.testing.assert_allclose(S.toarray(), W / 1.4, rtol=1e-15)

    @pytest.mark.parametrize("seed", range(10))
    def test_spectral_radius(self, seed):
        Z = np.random.default_rng(seed).standard_normal((30, 4))
        g = build_graph(Z, 4)
        ev = np.linalg.eigvalsh(g.S.toarray())
        assert np.abs(ev).max() <= 1 + 1e-9

    def test_isolated(self):
        with pytest.raises(IsolatedNode):
            normalize(sp.csr_matrix(np.array([[0, 1.0, 0], [1.0, 0, 0], [0, 0, 0]])))


class TestInvariances:
    def test_row_permutation(self):
        rng = np.random.default_rng(3)
        Z = rng.standard_normal((25, 3))
        perm = rng.permutation(25)
        a = build_graph(Z, 5).W.toarray()
        b = build_graph(Z[perm], 5).W.toarray()
        np.testing.assert_allclose(b, a[np.ix_(perm, perm)], rtol=1e-12, atol=0)

    @pytest.mark.parametrize("c", [2.0, 0.25, 8.0])
    def test_scale_invariance(self, c):
        Z = np.random.default_rng(4).standard_normal((30, 5))
        g1, g2 = build_graph(Z, 6), build_graph(c * Z, 6)
        assert np.array_equal(g2.sigmas, c * g1.sigmas)
        assert (g1.W != g2.W).nnz == 0


def test_dump_edges(tmp_path):
    W = sp.csr_matrix(np.array([[0, 0.5, 0], [0.5, 0, 0.25], [0, 0.25, 0]]))
    path = tmp_path / "edges.txt"
    dump_edges(W, path)
    assert path.read_text().splitlines() == ["0 1 0.5", "1 2 0.25"]
