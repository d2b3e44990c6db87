import numpy as np
import pytest

from fedxfer.errors import ConfigurationError, DivergenceError, InsufficientDataError
from fedxfer.eval import auc_score
from fedxfer.udl import (
    KMeansModel,
    anomaly_score,
    build_autoencoder,
    default_code_dim,
    kmeans,
    run_udl,
    train_autoencoder,
)
from oracles import brute_force_kmeans_inertia, central_differences, max_relative_error


class TestAutoencoder:
    def test_default_shape(self):
        ae = build_autoencoder(115)
        assert ae.encoder.layer_dims == [115, 64, 15] and ae.decoder.layer_dims == [15, 64, 115]
        assert default_code_dim(8) == 2 and default_code_dim(41) == 6

    def test_constant_dataset(self):
        x = np.tile([0.2, 0.7, 0.1, 0.9], (40, 1))
        _, trace = train_autoencoder(x, code_dim=2, epochs=200, hidden=8)
        assert trace[-1] < 1e-3 * trace[0]

    def test_identity_representable(self):
        x = np.random.default_rng(0).uniform(size=(40, 4))
        _, trace = train_autoencoder(x, code_dim=4, epochs=300, hidden=0, activation="identity", lr=1e-2)
        assert trace[-1] < 1e-6 * trace[0]

    def test_trace_contract(self):
        x = np.random.default_rng(1).uniform(size=(64, 6))
        _, trace = train_autoencoder(x, epochs=15, hidden=8)
        assert len(trace) == 16 and np.isfinite(trace).all() and trace[-1] < trace[0]

    def test_finite_differences(self):
        rng = np.random.default_rng(7)
        for trial in range(20):
            n = int(rng.integers(2, 5))
            m = int(rng.integers(1, 3))
            ae = build_autoencoder(n, m, hidden=int(rng.integers(0, 4)), seed=trial)
            for b in ae.encoder.biases + ae.decoder.biases:
                b[:] = rng.normal(scale=0.3, size=b.shape)
            x = rng.uniform(size=(int(rng.integers(1, 5)), n))
            _, ge, gd = ae.gradients(x)
            params = ae.encoder.parameters() + ae.decoder.parameters()
            numeric = central_differences(lambda: ae.reconstruction_error(x), params)
            assert max_relative_error(ge.parameters() + gd.parameters(), numeric) < 1e-4

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence(self):
        x = np.random.default_rng(2).uniform(size=(32, 4))
        with pytest.raises(DivergenceError, match="learning rate"):
            train_autoencoder(x, epochs=50, lr=1e6, hidden=4)

    def test_empty(self):
        with pytest.raises(InsufficientDataError):
            train_autoencoder(np.zeros((0, 3)))

    def test_bad_code_dim(self):
        with pytest.raises(ConfigurationError):
            build_autoencoder(4, 0)


class TestKMeans:
    def test_single_cluster_is_mean(self, rng):
        z = rng.normal(size=(30, 3))
        km = kmeans(z, k=1)
        assert np.allclose(km.centroids[0], z.mean(axis=0), rtol=0, atol=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_two_blobs(self, seed):
        g = np.random.default_rng([seed, 99])
        mu0, mu1 = np.array([0.0, 0.0]), np.array([10.0, 0.0])
        z = np.vstack([g.normal(mu0, 1.0, size=(100, 2)), g.normal(mu1, 1.0, size=(100, 2))])
        km = kmeans(z, 2, seed=seed)
        c = km.centroids[np.argsort(km.centroids[:, 0])]
        assert np.linalg.norm(c[0] - mu0) < 0.5 and np.linalg.norm(c[1] - mu1) < 0.5

    def test_identical_points(self):
        km = kmeans(np.ones((10, 3)), k=1)
        assert km.inertia == 0.0 and km.n_iter <= 2 and km.history[0] == 0.0

    def test_inertia_non_increasing_and_correct(self):
        for seed in range(20):
            z = np.random.default_rng(seed).normal(size=(60, 3))
            km = kmeans(z, k=int(seed % 4) + 2, seed=seed)
            assert all(b <= a + 1e-9 for a, b in zip(km.history, km.history[1:]))
            assert km.inertia == pytest.approx(brute_force_kmeans_inertia(z, km.centroids), rel=1e-9)

    def test_fixed_point(self, rng):
        z = rng.normal(size=(50, 2))
        km = kmeans(z, 3, seed=1)
        labels = km.assign(z)
        for j in range(3):
            assert np.allclose(km.centroids[j], z[labels == j].mean(axis=0))

    def test_too_few_rows(self):
        with pytest.raises(InsufficientDataError):
            kmeans(np.zeros((1, 2)), k=2)

    def test_deterministic(self, rng):
        z = rng.normal(size=(40, 2))
        assert kmeans(z, 2, seed=4).centroids.tobytes() == kmeans(z, 2, seed=4).centroids.tobytes()


class TestAnomalyScore:
    km = KMeansModel(np.array([[0.0, 0.0], [3.0, 4.0]]), 0.0)

    def test_equidistant(self):
        assert anomaly_score([[1.5, 2.0]], self.km)[0] == 0.0

    def test_at_second_centroid(self):
        assert anomaly_score([[3.0, 4.0]], self.km)[0] == 5.0

    def test_swap_negates(self, rng):
        z = rng.normal(size=(20, 2))
        swapped = KMeansModel(self.km.centroids[::-1].copy(), 0.0)
        s, t = anomaly_score(z, self.km), anomaly_score(z, swapped)
        assert np.array_equal(s, -t)
        y = np.where(rng.uniform(size=20) > 0.5, 1, -1)
        y[:2] = [1, -1]
        assert auc_score(s, y, orientation_free=True) == auc_score(t, y, orientation_free=True)

    def test_requires_two_clusters(self):
        with pytest.raises(ConfigurationError):
            anomaly_score([[0.0]], KMeansModel(np.zeros((3, 1)), 0.0))


def test_pipeline_deterministic():
    x = np.random.default_rng(5).uniform(size=(80, 6))
    r1 = run_udl(x, epochs=5, seed=3)
    r2 = run_udl(x, epochs=5, seed=3)
    assert r1.scores.tobytes() == r2.scores.tobytes() and r1.trace == r2.trace
