import math

import numpy as np
import pytest

from matchad import autoencoder as ae
from matchad.errors import BatchTooSmallForKL, DimensionMismatch


def perturbed_net(dims, seed, scale=0.3):
    """Xavier net with non-trivial biases and batch-norm affine parameters."""
    p = ae.init_xavier(dims, seed)
    rng = np.random.default_rng(seed + 100)
    for k in p.arrays:
        p.arrays[k] = p.arrays[k] + scale * rng.standard_normal(p.arrays[k].shape)
    return p


def rel_error(a, n, floor=1e-5):
    # the floor absorbs round-off where the exact gradient is zero
    # (biases feeding straight into batch-norm)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def finite_difference(p, X, lam1, lam2, h=1e-5):
    out = {}
    for k, a in p.arrays.items():
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            old = a[idx]
            a[idx] = old + h
            fp = ae.loss(p, X, lam1, lam2).total
            a[idx] = old - h
            fm = ae.loss(p, X, lam1, lam2).total
            a[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        out[k] = g
    return out


def scalar_loss(p, X, lam1, lam2):
    """Loop-based re-implementation of the train-mode loss."""
    def stack(prefix, H):
        L = p.n_layers
        for l in range(L):
            W, b = p.arrays[f"{prefix}{l}.W"], p.arrays[f"{prefix}{l}.b"]
            A = [[sum(H[r][i] * W[i, o] for i in range(W.shape[0])) + b[o]
                  for o in range(W.shape[1])] for r in range(len(H))]
            if l == L - 1:
                return A
            g, be = p.arrays[f"{prefix}{l}.gamma"], p.arrays[f"{prefix}{l}.beta"]
            m = len(A)
            out = [[0.0] * W.shape[1] for _ in range(m)]
            for o in range(W.shape[1]):
                col = [A[r][o] for r in range(m)]
                mu = sum(col) / m
                var = sum((c - mu) ** 2 for c in col) / m
                for r in range(m):
                    y = g[o] * (col[r] - mu) / math.sqrt(var + ae.BN_EPS) + be[o]
                    out[r][o] = max(y, 0.0)
            H = out
        return H

    X = X.tolist()
    Z = stack("enc", X)
    Xh = stack("dec", Z)
    m = len(X)
    rec = sum(sum((x - y) ** 2 for x, y in zip(r1, r2)) for r1, r2 in zip(X, Xh)) / m
    wd = sum(float((w ** 2).sum()) for k, w in p.arrays.items() if k.endswith(".W"))
    kl = 0.0
    for j in range(len(Z[0])):
        col = [Z[r][j] for r in range(m)]
        mu = sum(col) / m
        v = sum((c - mu) ** 2 for c in col) / m + ae.KL_EPS
        kl += 0.5 * (v + mu * mu - 1 - math.log(v))
    return rec + lam1 * wd + lam2 * kl, rec, lam1 * wd, lam2 * kl


class TestInit:
    def test_bounds(self):
        p = ae.init_xavier([4, 2], seed=0)
        assert np.all(np.abs(p.arrays["enc0.W"]) <= 1.0)

    def test_deterministic(self):
        a, b = ae.init_xavier([6, 5, 3], 4), ae.init_xavier([6, 5, 3], 4)
        assert all(np.array_equal(a.arrays[k], b.arrays[k]) for k in a.arrays)

    def test_variance(self):
        draws = np.concatenate([ae.init_xavier([10, 10], s).arrays["enc0.W"].ravel()
                                for s in range(100)])
        assert draws.size == 10**4
        assert abs(draws.var() / (2 / 20) - 1) < 0.1

    def test_zero_bias_identity_bn(self):
        p = ae.init_xavier([5, 4, 3], 1)
        assert not p.arrays["enc0.b"].any()
        assert np.all(p.arrays["enc0.gamma"] == 1) and not p.arrays["enc0.beta"].any()
        assert set(p.arrays) >= {"dec0.gamma", "dec1.W"} and "dec1.gamma" not in p.arrays


class TestForward:
    def test_zero_weights(self):
        p = ae.init_xavier([5, 4, 3], 0)
        for k in p.arrays:
            if k.endswith(".W") or k.endswith(".b"):
                p.arrays[k][:] = 0
        X = np.random.default_rng(0).standard_normal((6, 5))
        assert not ae.encode(p, X, "train").any()
        assert not ae.encode(p, X, "eval").any()

    def test_identity_hidden_layer(self):
        p = ae.init_xavier([2, 2, 2], 0)
        p.arrays["enc0.W"] = np.eye(2)
        p.arrays["enc1.W"] = np.eye(2)
        X = np.array([[1.0, -2.0], [0.5, 3.0]])
        expected = np.maximum(X / math.sqrt(1 + ae.BN_EPS), 0)
        np.testing.assert_allclose(ae.encode(p, X, "eval"), expected, rtol=1e-15)

    def test_eval_batch_invariant(self):
        p = perturbed_net([6, 5, 4, 3], 2)
        p = ae.recalibrate(p, np.random.default_rng(1).standard_normal((20, 6)))
        X = np.random.default_rng(2).standard_normal((7, 6))
        together = ae.encode(p, X)
        single = np.vstack([ae.encode(p, X[i:i + 1]) for i in range(7)])
        np.testing.assert_allclose(single, together, rtol=1e-12, atol=1e-14)
        rec_t = ae.decode(p, together)
        rec_s = np.vstack([ae.decode(p, together[i:i + 1]) for i in range(7)])
        np.testing.assert_allclose(rec_s, rec_t, rtol=1e-12, atol=1e-14)

    def test_decode_zero_weights(self):
        p = ae.init_xavier([5, 4, 3], 0)
        for k in p.arrays:
            if k.startswith("dec") and (k.endswith(".W") or k.endswith(".b")):
                p.arrays[k][:] = 0
        assert not ae.decode(p, np.ones((3, 3))).any()

    def test_decode_shape(self):
        p = ae.init_xavier([7, 5, 2], 0)
        assert ae.decode(p, np.zeros((4, 2))).shape == (4, 7)

    def test_dimension_mismatch(self):
        p = ae.init_xavier([5, 4, 3], 0)
        with pytest.raises(DimensionMismatch):
            ae.encode(p, np.zeros((2, 4)))
        with pytest.raises(DimensionMismatch):
            ae.decode(p, np.zeros((2, 5)))

    def test_recalibrate_matches_train_mode(self):
        p = perturbed_net([6, 5, 3], 3)
        X = np.random.default_rng(3).standard_normal((15, 6))
        q = ae.recalibrate(p, X)
        np.testing.assert_allclose(ae.encode(q, X, "eval"), ae.encode(p, X, "train"), atol=1e-13)


class TestLoss:
    def test_perfect_reconstruction_zero_weights(self):
        p = ae.init_xavier([4, 3, 2], 0)
        for k in p.arrays:
            if k.endswith(".W"):
                p.arrays[k][:] = 0
        X = np.zeros((5, 4))
        parts = ae.loss(p, X, 0.1, 0.5)
        assert parts.reconstruction == 0 and parts.weight_decay == 0
        assert parts.total == parts.kl > 0

    def test_standard_normal_moments(self):
        # latent = identity on input whose columns have mean 0, variance 1
        p = ae.init_xavier([2, 2], 0)
        p.arrays["enc0.W"] = np.eye(2)
        X = np.array([[1.0, 1.0], [-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0]])
        assert ae.loss(p, X, 0.0, 1.0).kl == pytest.approx(0.0, abs=1e-15)

    @pytest.mark.parametrize("seed", range(3))
    def test_scalar_oracle(self, seed):
        p = perturbed_net([5, 4, 3], seed)
        X = np.random.default_rng(seed).standard_normal((6, 5))
        got = ae.loss(p, X, 0.01, 0.2)
        want = scalar_loss(p, X, 0.01, 0.2)
        np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)

    def test_parts_nonnegative_and_sum(self):
        p = perturbed_net([5, 4, 3], 9)
        X = np.random.default_rng(9).standard_normal((10, 5))
        parts = ae.loss(p, X, 0.05, 0.3)
        assert min(parts[1:]) >= 0
        assert parts.total == parts.reconstruction + parts.weight_decay + parts.kl

    def test_batch_too_small(self):
        p = ae.init_xavier([3, 2], 0)
        with pytest.raises(BatchTooSmallForKL):
            ae.loss(p, np.ones((1, 3)), 0, 0)


class TestGrad:
    def test_weight_decay_single_layer(self):
        p = ae.init_xavier([3, 3], 0)
        X = np.random.default_rng(0).standard_normal((5, 3))
        g0 = ae.grad(p, X, 0.0, 0.0)
        g1 = ae.grad(p, X, 0.7, 0.0)
        for k in ("enc0.W", "dec0.W"):
            np.testing.assert_allclose(g1[k], g0[k] + 2 * 0.7 * p.arrays[k], rtol=1e-13, atol=1e-15)

    def test_zero_input_first_layer(self):
        p = perturbed_net([4, 3, 2], 1)
        g = ae.grad(p, np.zeros((5, 4)), 0.0, 0.0)
        assert not g["enc0.W"].any()

    @pytest.mark.parametrize("seed", range(3))
    def test_finite_differences(self, seed):
        p = perturbed_net([5, 4, 3], seed)
        X = np.random.default_rng(seed).standard_normal((8, 5))
        an = ae.grad(p, X, 0.01, 0.1)
        num = finite_difference(p, X, 0.01, 0.1)
        worst = max(rel_error(an[k], num[k]).max() for k in an)
        assert worst < 1e-4

    def test_latent_term_gradient(self):
        p = perturbed_net([5, 4, 3], 5)
        X = np.random.default_rng(5).standard_normal((8, 5))
        target = np.random.default_rng(6).standard_normal((8, 3))

        def term(Z):
            return float(((Z - target) ** 2).sum()), 2 * (Z - target)

        _, _, g = ae.loss_and_grad(p, X, 0.0, 0.0, latent_term=term)
        h, k, idx = 1e-6, "enc1.W", (2, 1)
        a = p.arrays[k]
        old = a[idx]
        vals = []
        for s in (1, -1):
            a[idx] = old + s * h
            parts, extra, _ = ae.loss_and_grad(p, X, 0.0, 0.0, latent_term=term, need_grad=False)
            vals.append(parts.total + extra)
        a[idx] = old
        assert g[k][idx] == pytest.approx((vals[0] - vals[1]) / (2 * h), rel=1e-6)


class TestTrain:
    def test_zero_epochs(self):
        X = np.random.default_rng(0).standard_normal((10, 4))
        cfg = ae.TrainConfig(epochs=0, hidden_dims=(3,), latent_dim=2, seed=3)
        p, hist = ae.train(X, cfg)
        init = ae.init_xavier([4, 3, 2], 3)
        assert hist == []
        assert all(np.array_equal(p.arrays[k], init.arrays[k]) for k in init.arrays)

    def test_rank_one_data(self):
        X = np.tile(np.array([[1.5, -0.5, 2.0, 0.3, -1.2, 0.8]]), (256, 1))
        p, _ = ae.train(X, ae.TrainConfig(epochs=200, seed=1))
        assert ae.loss(p, X[:64], 0, 0).reconstruction < 1e-3

    def test_deterministic(self):
        X = np.random.default_rng(1).standard_normal((70, 5))
        cfg = ae.TrainConfig(epochs=3, hidden_dims=(8,), latent_dim=2, seed=5)
        p1, h1 = ae.train(X, cfg)
        p2, h2 = ae.train(X, cfg)
        assert h1 == h2
        assert all(np.array_equal(p1.arrays[k], p2.arrays[k]) for k in p1.arrays)

    def test_loss_trace_trend(self):
        from matchad.dataset import reference_cohort, synth_generate
        from matchad.preprocessing import preprocess
        table, _ = synth_generate(reference_cohort(7))
        X = preprocess(table)[0]
        _, hist = ae.train(X, ae.TrainConfig(epochs=60, seed=7))
        for s in range(0, len(hist) - 20):
            window = hist[s:s + 20]
            ups = [b / a - 1 for a, b in zip(window, window[1:]) if b > a]
            assert all(u <= 0.05 for u in ups)
        assert hist[-1] < hist[0]

    def test_single_row_tail_merged(self):
        X = np.random.default_rng(2).standard_normal((65, 3))
        ae.train(X, ae.TrainConfig(epochs=1, hidden_dims=(4,), latent_dim=2))

    def test_learning_rate_schedule(self):
        cfg = ae.TrainConfig()
        for e in (0, 9, 10, 25, 100):
            assert ae.learning_rate_after(e, cfg) == pytest.approx(1e-3 * 0.95 ** (e // 10))


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        p = perturbed_net([6, 5, 4, 2], 0)
        p.buffers["enc0.running_var"] = np.full(5, 2.5)
        path = tmp_path / "ckpt.npz"
        ae.save_checkpoint(p, path)
        q = ae.load_checkpoint(path)
        assert q.layer_dims == p.layer_dims
        assert list(q.arrays) == list(p.arrays)
        assert all(np.array_equal(p.arrays[k], q.arrays[k]) for k in p.arrays)
        assert all(np.array_equal(p.buffers[k], q.buffers[k]) for k in p.buffers)
