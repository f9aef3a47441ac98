import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import two_blob_features
from nimos.dcec import (DcecError, assign_cluster_labels, cluster_purity,
                        dcec_loss, hard_labels, init_centers_kmeans,
                        kl_divergence, kl_gradients, soft_assign,
                        target_distribution, train_dcec)
from nimos.models import ClusteringLayer
from nimos.training import pretrain_autoencoder


# Independent direct-formula oracles: plain loops, no vectorized reuse.

def oracle_soft_assign(Z, U, alpha=1.0):
    n, j = Z.shape[0], U.shape[0]
    q = np.zeros((n, j))
    for i in range(n):
        for c in range(j):
            d2 = sum((Z[i, k] - U[c, k]) ** 2 for k in range(Z.shape[1]))
            q[i, c] = (1.0 + d2 / alpha) ** (-(alpha + 1.0) / 2.0)
        q[i] /= q[i].sum()
    return q


def oracle_target_distribution(Q):
    n, j = Q.shape
    f = [sum(Q[i, c] for i in range(n)) for c in range(j)]
    p = np.zeros_like(Q)
    for i in range(n):
        row = [Q[i, c] ** 2 / f[c] for c in range(j)]
        s = sum(row)
        for c in range(j):
            p[i, c] = row[c] / s
    return p


class TestSoftAssign:
    def test_single_cluster_column_of_ones(self):
        q = soft_assign(np.random.default_rng(0).normal(size=(7, 3)),
                        np.zeros((1, 3)))
        assert np.allclose(q, 1.0)

    def test_hand_case(self):
        q = soft_assign(np.array([[0.0]]), np.array([[0.0], [1.0]]))
        assert np.allclose(q, [[2 / 3, 1 / 3]], atol=1e-12)

    def test_matches_oracle_on_random_instances(self):
        rng = np.random.default_rng(1)
        for _ in range(500):
            n = int(rng.integers(1, 11))
            j = int(rng.integers(1, 5))
            d = int(rng.integers(1, 6))
            Z = rng.normal(size=(n, d)) * 3
            U = rng.normal(size=(j, d)) * 3
            q = soft_assign(Z, U)
            assert np.max(np.abs(q - oracle_soft_assign(Z, U))) < 1e-10

    def test_nonfinite_rejected(self):
        with pytest.raises(DcecError):
            soft_assign(np.array([[np.inf]]), np.zeros((1, 1)))

    def test_argmax_equals_nearest_center(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            Z = rng.normal(size=(20, 5))
            U = rng.normal(size=(4, 5))
            q = soft_assign(Z, U)
            d = ((Z[:, None, :] - U[None, :, :]) ** 2).sum(axis=2)
            assert np.array_equal(np.argmax(q, axis=1), np.argmin(d, axis=1))

    def test_torch_layer_matches_reference(self):
        rng = np.random.default_rng(3)
        Z = rng.normal(size=(16, 10)).astype(np.float32)
        U = rng.normal(size=(5, 10)).astype(np.float32)
        layer = ClusteringLayer(5, 10)
        with torch.no_grad():
            layer.centers.copy_(torch.from_numpy(U))
            q_torch = layer(torch.from_numpy(Z)).double().numpy()
        q_ref = soft_assign(Z.astype(np.float64), U.astype(np.float64))
        assert np.max(np.abs(q_torch - q_ref)) < 1e-6


class TestTargetDistribution:
    def test_hand_case(self):
        P = target_distribution(np.array([[0.9, 0.1], [0.6, 0.4]]))
        assert np.allclose(P, [[0.9643, 0.0357], [0.4286, 0.5714]], atol=1e-4)

    def test_single_sample_identity(self):
        q = np.array([[0.3, 0.5, 0.2]])
        assert np.array_equal(target_distribution(q), q)

    def test_uniform_stays_uniform(self):
        q = np.full((6, 4), 0.25)
        assert np.allclose(target_distribution(q), 0.25, atol=1e-12)

    def test_matches_oracle_on_random_instances(self):
        rng = np.random.default_rng(4)
        for _ in range(500):
            n = int(rng.integers(1, 11))
            j = int(rng.integers(2, 5))
            raw = rng.uniform(0.01, 1.0, size=(n, j))
            Q = raw / raw.sum(axis=1, keepdims=True)
            P = target_distribution(Q)
            assert np.max(np.abs(P - oracle_target_distribution(Q))) < 1e-10

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (5, 3), elements=st.floats(0.01, 1.0)))
    def test_rows_sum_to_one_property(self, raw):
        Q = raw / raw.sum(axis=1, keepdims=True)
        P = target_distribution(Q)
        assert np.max(np.abs(P.sum(axis=1) - 1.0)) < 1e-6
        assert np.all(P > 0)

    def test_sharpening_under_uniform_frequencies(self):
        # when f is uniform, P must not have higher entropy than Q per row
        rng = np.random.default_rng(5)
        for _ in range(50):
            base = rng.uniform(0.05, 1.0, size=(8, 3))
            Q = base / base.sum(axis=1, keepdims=True)
            # symmetrize so column sums are equal: stack row permutations
            Q = np.concatenate([Q, Q[:, [1, 2, 0]], Q[:, [2, 0, 1]]])
            f = Q.sum(axis=0)
            assert np.allclose(f, f[0])
            P = target_distribution(Q)
            ent_q = -(Q * np.log(Q)).sum(axis=1)
            ent_p = -(P * np.log(P)).sum(axis=1)
            assert np.all(ent_p <= ent_q + 1e-12)


class TestKlLoss:
    def test_nonnegative_and_zero_iff_equal(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            raw = rng.uniform(0.01, 1, size=(6, 4))
            Q = raw / raw.sum(axis=1, keepdims=True)
            raw2 = rng.uniform(0.01, 1, size=(6, 4))
            P = raw2 / raw2.sum(axis=1, keepdims=True)
            assert kl_divergence(P, Q) >= 0
            assert kl_divergence(Q, Q) == pytest.approx(0.0, abs=1e-12)
        assert kl_divergence(P, Q) > 0  # random P != Q

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(7)
        eps = 1e-6
        for _ in range(50):
            n = int(rng.integers(2, 9))
            j = int(rng.integers(2, 4))
            d = int(rng.integers(1, 5))
            Z = rng.normal(size=(n, d))
            U = rng.normal(size=(j, d))
            P = target_distribution(soft_assign(Z + 0.3 * rng.normal(size=(n, d)), U))
            gz, gu = kl_gradients(Z, U, P)

            def loss(Z_, U_):
                return kl_divergence(P, soft_assign(Z_, U_))

            for arr, grad in ((Z, gz), (U, gu)):
                num = np.zeros_like(arr)
                it = np.nditer(arr, flags=["multi_index"])
                while not it.finished:
                    idx = it.multi_index
                    plus, minus = arr.copy(), arr.copy()
                    plus[idx] += eps
                    minus[idx] -= eps
                    if arr is Z:
                        num[idx] = (loss(plus, U) - loss(minus, U)) / (2 * eps)
                    else:
                        num[idx] = (loss(Z, plus) - loss(Z, minus)) / (2 * eps)
                    it.iternext()
                scale = max(np.max(np.abs(num)), 1e-8)
                assert np.max(np.abs(grad - num)) / scale < 1e-3

    def test_torch_autograd_matches_analytic(self):
        rng = np.random.default_rng(8)
        Z = rng.normal(size=(12, 10))
        U = rng.normal(size=(5, 10))
        P = target_distribution(soft_assign(Z + 0.1, U))
        gz_ref, gu_ref = kl_gradients(Z, U, P)

        z_t = torch.tensor(Z, requires_grad=True)
        layer = ClusteringLayer(5, 10)
        with torch.no_grad():
            layer.centers.copy_(torch.tensor(U))
        q = layer(z_t)
        p_t = torch.tensor(P)
        loss = (p_t * (torch.log(p_t) - torch.log(q))).sum() / Z.shape[0]
        loss.backward()
        assert np.max(np.abs(z_t.grad.numpy() - gz_ref)) < 1e-8
        assert np.max(np.abs(layer.centers.grad.numpy() - gu_ref)) < 1e-8

    def test_loss_decomposition(self, tiny_config):
        torch.manual_seed(9)
        x = torch.randn(8, 1, 64, 16)
        recon = torch.randn(8, 1, 64, 16)
        raw = torch.rand(8, 5) + 0.01
        q = raw / raw.sum(dim=1, keepdim=True)
        raw2 = torch.rand(8, 5) + 0.01
        p = raw2 / raw2.sum(dim=1, keepdim=True)
        total, l_r, l_c = dcec_loss(x, recon, q, p, gamma=0.1)
        # independent float64 re-computation
        l_r_ref = np.mean((x.double().numpy() - recon.double().numpy()) ** 2)
        p64 = p.double().numpy()
        q64 = q.double().numpy()
        l_c_ref = (p64 * (np.log(p64) - np.log(q64))).sum() / 8
        assert abs(float(total) - (l_r_ref + 0.1 * l_c_ref)) < 1e-8
        assert abs(float(l_r) - l_r_ref) < 1e-12
        assert abs(float(l_c) - l_c_ref) < 1e-12

    def test_p_equals_q_gives_pure_reconstruction_loss(self):
        x = torch.randn(4, 1, 8, 8)
        recon = torch.randn(4, 1, 8, 8)
        raw = torch.rand(4, 3) + 0.1
        q = raw / raw.sum(dim=1, keepdim=True)
        total, l_r, l_c = dcec_loss(x, recon, q, q.clone())
        assert float(l_c) == pytest.approx(0.0, abs=1e-12)
        assert float(total) == pytest.approx(float(l_r), abs=1e-12)

    def test_perfect_reconstruction_gives_scaled_cluster_loss(self):
        x = torch.randn(4, 1, 8, 8)
        raw = torch.rand(4, 3) + 0.1
        q = raw / raw.sum(dim=1, keepdim=True)
        raw2 = torch.rand(4, 3) + 0.1
        p = raw2 / raw2.sum(dim=1, keepdim=True)
        total, l_r, l_c = dcec_loss(x, x.clone(), q, p, gamma=0.1)
        assert float(l_r) == 0.0
        assert float(total) == pytest.approx(0.1 * float(l_c), abs=1e-15)


class TestKmeans:
    def test_two_blob_centers(self):
        rng = np.random.default_rng(10)
        X = np.concatenate([rng.normal(0.0, 0.05, size=(100, 3)),
                            rng.normal(4.0, 0.05, size=(100, 3))])
        centers = init_centers_kmeans(X, 2, seed=0)
        means = sorted(centers.mean(axis=1))
        assert abs(means[0] - 0.0) < 0.1
        assert abs(means[1] - 4.0) < 0.1

    def test_n_equals_k_zero_inertia(self):
        X = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]])
        centers = init_centers_kmeans(X, 3, seed=1)
        assert sorted(map(tuple, centers)) == sorted(map(tuple, X))

    def test_deterministic(self):
        rng = np.random.default_rng(11)
        X = rng.normal(size=(60, 4))
        a = init_centers_kmeans(X, 5, seed=42)
        b = init_centers_kmeans(X, 5, seed=42)
        assert np.array_equal(a, b)

    def test_fewer_points_than_clusters(self):
        with pytest.raises(DcecError, match="at least"):
            init_centers_kmeans(np.zeros((2, 3)), 5, seed=0)

    def test_restarts_do_not_worsen_inertia(self):
        rng = np.random.default_rng(12)
        X = rng.normal(size=(80, 2))

        def inertia(C):
            d = ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)
            return d.min(axis=1).sum()

        one = init_centers_kmeans(X, 4, seed=3, restarts=1)
        many = init_centers_kmeans(X, 4, seed=3, restarts=10)
        assert inertia(many) <= inertia(one) + 1e-9


class TestTrainDcec:
    def test_converges_on_separable_blobs_with_high_purity(self, tiny_config):
        x, y = two_blob_features(60)
        ae = pretrain_autoencoder(x, tiny_config, seed=5)
        ckpt, result = train_dcec(x, ae.checkpoint, tiny_config, seed=5)
        assert result.converged
        assert result.refreshes[-1].label_change_fraction < \
            tiny_config.dcec.convergence_threshold
        labels = hard_labels(result.final_q)
        assert cluster_purity(labels, y) >= 0.9

    def test_refresh_every_batch_still_converges(self, tiny_config):
        tiny_config.dcec.refresh_interval = 1
        x, _ = two_blob_features(30)
        ae = pretrain_autoencoder(x, tiny_config, seed=6)
        ckpt, result = train_dcec(x, ae.checkpoint, tiny_config, seed=6)
        assert result.converged

    def test_label_change_sequence_recorded(self, tiny_config):
        x, _ = two_blob_features(40)
        ae = pretrain_autoencoder(x, tiny_config, seed=7)
        _, result = train_dcec(x, ae.checkpoint, tiny_config, seed=7)
        fractions = [r.label_change_fraction for r in result.refreshes]
        assert len(fractions) >= 2
        assert fractions[0] == 1.0  # first refresh has no predecessor
        assert fractions[-1] < tiny_config.dcec.convergence_threshold

    def test_refresh_log_lines_machine_readable(self, tiny_config):
        x, _ = two_blob_features(30)
        ae = pretrain_autoencoder(x, tiny_config, seed=8)
        lines = []
        train_dcec(x, ae.checkpoint, tiny_config, seed=8, log_fn=lines.append)
        assert lines
        for line in lines:
            fields = dict(kv.split("=", 1) for kv in line.split())
            assert set(fields) == {"epoch", "batch", "l_r", "l_c",
                                   "label_change_fraction"}
            float(fields["l_r"]), float(fields["l_c"])


class TestAssignClusterLabels:
    def test_argmax_and_tie_rule(self):
        assert hard_labels(np.array([[0.1, 0.2, 0.4, 0.2, 0.1]]))[0] == 2
        assert hard_labels(np.array([[0.5, 0.5]]))[0] == 0

    def test_batch_order_invariance(self, tiny_config):
        x, _ = two_blob_features(30)
        ae = pretrain_autoencoder(x, tiny_config, seed=9)
        ckpt, _ = train_dcec(x, ae.checkpoint, tiny_config, seed=9)
        a = assign_cluster_labels(x, ckpt, tiny_config, batch_size=7)
        b = assign_cluster_labels(x, ckpt, tiny_config, batch_size=64)
        assert np.array_equal(a, b)

    def test_labels_in_cluster_range(self, tiny_config):
        x, _ = two_blob_features(20)
        ae = pretrain_autoencoder(x, tiny_config, seed=10)
        ckpt, _ = train_dcec(x, ae.checkpoint, tiny_config, seed=10)
        labels = assign_cluster_labels(x, ckpt, tiny_config)
        assert labels.min() >= 0
        assert labels.max() < tiny_config.dcec.n_clusters
