import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rfmem.constants import compute_constants
from rfmem.features import (
    RFModel,
    SpectralMeasure,
    build_gram_gep,
    build_gram_mc,
    build_U_tilde,
    gep_V,
    sample_gaussian_data,
    sample_weights,
    score,
)


class TestSpectralMeasure:
    def test_parse(self):
        m = SpectralMeasure.parse("0.5:0.5, 1.5:0.5")
        assert m.sigma_x2 == pytest.approx(1.0)
        np.testing.assert_allclose(m.eigenvalues, [0.5, 1.5])

    def test_bare_values_equal_weights(self):
        np.testing.assert_allclose(SpectralMeasure.parse("1,3").weights, [0.5, 0.5])

    @pytest.mark.parametrize("atoms", [(), ((1.0, 0.7),), ((-1.0, 1.0),), ((1.0, 0.0), (2.0, 1.0))])
    def test_invalid(self, atoms):
        with pytest.raises(ValueError):
            SpectralMeasure(atoms)

    def test_largest_remainder(self):
        m = SpectralMeasure(((1.0, 0.34), (2.0, 0.33), (3.0, 0.33)))
        counts = m.multiplicities(10)
        assert counts.sum() == 10
        np.testing.assert_array_equal(counts, [4, 3, 3])
        realized = m.realized(10)
        assert realized.weights.sum() == pytest.approx(1.0)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0.01, 1.0), min_size=1, max_size=6), st.integers(1, 300))
    def test_multiplicities_sum(self, w, d):
        w = np.array(w) / np.sum(w)
        w[-1] = 1.0 - w[:-1].sum()
        if w[-1] <= 0:
            return
        m = SpectralMeasure(tuple(zip(range(1, len(w) + 1), w)))
        counts = m.multiplicities(d)
        assert counts.sum() == d
        assert np.all(np.abs(counts - w * d) < 1.0 + 1e-9)


class TestSampling:
    def test_weights_deterministic(self):
        np.testing.assert_array_equal(sample_weights(4, 2, 7), sample_weights(4, 2, 7))

    def test_weights_mean(self):
        W = sample_weights(6400, 100, 0)
        assert abs(W.mean()) < 4 / math.sqrt(W.size)

    def test_weights_marchenko_pastur_edge(self):
        p, d = 6400, 100
        W = sample_weights(p, d, 1)
        # W W^T / d and W^T W / d share their nonzero spectrum
        top = np.linalg.eigvalsh(W.T @ W / d)[-1]
        edge = (1 + math.sqrt(p / d)) ** 2
        assert abs(top - edge) / edge < 0.15

    def test_isotropic_trace(self):
        ds = sample_gaussian_data(100, 800, SpectralMeasure.isotropic(1.0), 0)
        assert abs(np.trace(ds.X @ ds.X.T / ds.n) / ds.d - 1.0) < 0.05

    @pytest.mark.parametrize("text,sx2", [("0.5:0.5,1.5:0.5", 1.0), ("4:1", 4.0)])
    def test_measure_variance(self, text, sx2):
        m = SpectralMeasure.parse(text)
        assert m.sigma_x2 == pytest.approx(sx2)
        ds = sample_gaussian_data(100, 4000, m, 3)
        np.testing.assert_allclose(np.mean(ds.X**2, axis=1), ds.covariance_diag, rtol=0.15)
        assert np.trace(ds.X @ ds.X.T / ds.n) / ds.d == pytest.approx(sx2, rel=0.03)

    def test_empty_measure(self):
        with pytest.raises(ValueError):
            sample_gaussian_data(4, 4, None, 0)


class TestScore:
    def test_zero_A(self):
        model = RFModel(sample_weights(8, 3, 0), "tanh")
        np.testing.assert_array_equal(score(model, np.ones(3)), np.zeros(3))

    def test_zero_input(self):
        rng = np.random.default_rng(1)
        model = RFModel(sample_weights(8, 3, 0), "tanh", rng.standard_normal((3, 8)))
        np.testing.assert_allclose(score(model, np.zeros(3)), 0.0, atol=1e-15)

    def test_naive_loops(self):
        rng = np.random.default_rng(2)
        p, d = 8, 3
        W = sample_weights(p, d, 5)
        A = rng.standard_normal((d, p))
        x = rng.standard_normal(d)
        expected = np.zeros(d)
        for i in range(d):
            for k in range(p):
                pre = sum(W[k, j] * x[j] for j in range(d)) / math.sqrt(d)
                expected[i] += A[i, k] * math.tanh(pre) / math.sqrt(p)
        np.testing.assert_allclose(score(RFModel(W, "tanh", A), x), expected, rtol=1e-13)

    def test_dimension_mismatch(self):
        model = RFModel(sample_weights(8, 3, 0), "tanh")
        with pytest.raises(ValueError):
            model.score(np.ones(4))

    def test_W_frozen(self):
        model = RFModel(sample_weights(8, 3, 0), "tanh")
        with pytest.raises(ValueError):
            model.W[0, 0] = 1.0

    def test_bounded(self):
        rng = np.random.default_rng(0)
        model = RFModel(sample_weights(16, 4, 0), "tanh", rng.standard_normal((4, 16)))
        assert np.all(np.isfinite(model.score(1e300 * np.ones(4))))


def _entry_stderr(model, ds, t, n_noise, seed):
    """Per-entry standard error of the Monte-Carlo U and V at ``n_noise``."""
    rng = np.random.default_rng(seed)
    d, n = ds.X.shape
    var_u = np.zeros((model.p, model.p))
    var_v = np.zeros((model.p, d))
    for nu in range(n):
        xi = rng.standard_normal((d, 2000))
        y = math.exp(-t) * ds.X[:, [nu]] + math.sqrt(-math.expm1(-2 * t)) * xi
        phi = model.features(y)
        var_u += np.var(phi[:, None, :] * phi[None, :, :], axis=2)
        var_v += np.var(phi[:, None, :] * xi[None, :, :], axis=2)
    return np.sqrt(var_u / n_noise) / n, np.sqrt(var_v / n_noise) / n


class TestMonteCarloGram:
    def test_self_consistency(self):
        p, d, n, t = 32, 8, 16, 0.1
        model = RFModel(sample_weights(p, d, 0), "tanh")
        ds = sample_gaussian_data(d, n, SpectralMeasure.isotropic(1.0), 1)
        g1 = build_gram_mc(model, ds, t, n_noise=10_000, seed=2)
        g2 = build_gram_mc(model, ds, t, n_noise=100_000, seed=3)
        se_u, se_v = _entry_stderr(model, ds, t, 10_000, 4)
        tot_u = se_u * math.sqrt(1 + 0.1)
        tot_v = se_v * math.sqrt(1 + 0.1)
        assert np.all(np.abs(g1.U - g2.U) < 5 * tot_u + 1e-15)
        assert np.all(np.abs(g1.V - g2.V) < 5 * tot_v + 1e-15)

    def test_independent_of_A(self):
        W = sample_weights(16, 4, 0)
        ds = sample_gaussian_data(4, 8, SpectralMeasure.isotropic(1.0), 1)
        g1 = build_gram_mc(RFModel(W, "tanh"), ds, 0.1, 20, seed=5)
        g2 = build_gram_mc(RFModel(W, "tanh", np.ones((4, 16))), ds, 0.1, 20, seed=5)
        np.testing.assert_array_equal(g1.U, g2.U)
        np.testing.assert_array_equal(g1.V, g2.V)

    def test_default_noise_count(self):
        W = sample_weights(8, 2, 0)
        ds = sample_gaussian_data(2, 3, SpectralMeasure.isotropic(1.0), 1)
        assert build_gram_mc(RFModel(W, "tanh"), ds, 0.1).provenance["n_noise"] == 100

    @settings(max_examples=15, deadline=None)
    @given(st.integers(1, 24), st.integers(1, 6), st.integers(1, 10), st.integers(0, 2**31))
    def test_symmetric_psd(self, p, d, n, seed):
        model = RFModel(sample_weights(p, d, seed), "tanh")
        ds = sample_gaussian_data(d, n, SpectralMeasure.isotropic(1.0), seed + 1)
        g = build_gram_mc(model, ds, 0.05, 3, seed=seed)
        np.testing.assert_array_equal(g.U, g.U.T)
        assert np.linalg.eigvalsh(g.U).min() >= -1e-9 * max(1.0, np.abs(g.U).max())

    @pytest.mark.slow
    def test_moments_match_gep(self, ref):
        model = RFModel(ref.W, "tanh")
        g_mc = build_gram_mc(model, ref.data, ref.t, n_noise=100, seed=21)
        U_mc, U_gep = g_mc.U, ref.gram.U
        p = ref.p
        m_mc = [np.trace(U_mc) / p, np.sum(U_mc**2) / p, np.sum(U_mc * (U_mc @ U_mc)) / p]
        m_gep = [np.trace(U_gep) / p, np.sum(U_gep**2) / p, np.sum(U_gep * (U_gep @ U_gep)) / p]
        np.testing.assert_allclose(m_mc, m_gep, rtol=0.05)


class TestGaussianEquivalentGram:
    def test_delta_multiplicity(self, ref):
        ev = ref.eigenvalues
        count = int(np.sum(np.abs(ev - ref.constants.s_t2) < 1e-6))
        assert count == ref.p - ref.n - ref.d

    def test_eigenvalue_floor(self, ref):
        assert ref.eigenvalues.min() >= ref.constants.s_t2 - 1e-9

    def test_symmetric(self, ref):
        np.testing.assert_array_equal(ref.gram.U, ref.gram.U.T)

    def test_V_norm(self, ref):
        c = ref.constants
        expected = c.mu1**2 * c.delta_t / c.gamma_t2 * ref.p
        assert np.sum(ref.gram.V**2) == pytest.approx(expected, rel=0.05)

    def test_linear_limit_is_shifted_marchenko_pastur(self):
        p, d, n = 800, 50, 100
        c = dataclasses.replace(compute_constants("tanh", 1.0, 0.1), a_t=0.0, v_t2=0.0)
        W = sample_weights(p, d, 0)
        g = build_gram_gep(W, sample_gaussian_data(d, n, SpectralMeasure.isotropic(1.0), 1), c, seed=2)
        np.testing.assert_allclose(g.U, c.b_t**2 * W @ W.T / d + c.s_t2 * np.eye(p), atol=1e-12)
        ev = np.linalg.eigvalsh(g.U)
        x = (ev - c.s_t2) / c.b_t**2
        # moments of W W^T / d: 1 and (p + d + 1) / d in expectation
        assert np.mean(x) == pytest.approx(1.0, rel=0.05)
        assert np.mean(x**2) == pytest.approx((p + d + 1) / d, rel=0.05)

    def test_psi_n_consistency(self):
        W = sample_weights(20, 5, 0)
        ds = sample_gaussian_data(5, 10, SpectralMeasure.isotropic(1.0), 1)
        c = compute_constants("tanh", 1.0, 0.1)
        build_gram_gep(W, ds, c, psi_n=2.0, seed=0)
        with pytest.raises(ValueError):
            build_gram_gep(W, ds, c, psi_n=3.0, seed=0)

    def test_V_matches_monte_carlo(self):
        # the closed form is asymptotic in d; at d=64 the projection of the
        # Monte-Carlo V on it is ~1 and the residual is estimator noise
        p, d, n, t = 128, 64, 1024, 0.1
        c = compute_constants("tanh", 1.0, t)
        W = sample_weights(p, d, 3)
        ds = sample_gaussian_data(d, n, SpectralMeasure.isotropic(1.0), 4)
        g = build_gram_mc(RFModel(W, "tanh"), ds, t, 200, seed=5)
        V = gep_V(W, c)
        assert np.sum(g.V * V) / np.sum(V * V) == pytest.approx(1.0, abs=0.03)
        assert np.linalg.norm(g.V - V) / np.linalg.norm(V) < 0.1


class TestPopulationGram:
    def test_orthogonal_toy(self):
        d = 6
        measure = SpectralMeasure(((0.5, 0.5), (2.0, 0.5)))
        c = compute_constants("tanh", measure.sigma_x2, 0.1)
        U = build_U_tilde(math.sqrt(d) * np.eye(d), measure, c)
        sigma_t = c.decay * measure.diagonal(d) + c.delta_t
        expected = c.mu1**2 / c.gamma_t2 * sigma_t + c.sigma_norm2 - c.mu1**2
        np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(U)), np.sort(expected), rtol=1e-12)

    def test_psd_and_scaling(self):
        # the d nonzero eigenvalues of W W^T / d average psi_p exactly in
        # expectation, so the bulk of U_tilde sits at scale psi_p; its upper
        # edge follows the finite-size Marchenko-Pastur value
        d = 50
        c = compute_constants("tanh", 1.0, 0.01)
        m = SpectralMeasure.isotropic(1.0)
        shift = c.sigma_norm2 - c.mu1**2
        means = []
        for psi_p in (16, 32):
            U = build_U_tilde(sample_weights(psi_p * d, d, psi_p), m, c)
            ev = np.linalg.eigvalsh(U)
            assert ev.min() >= -1e-9
            np.testing.assert_array_equal(U, U.T)
            bulk = (ev[-d:] - shift) / c.mu1**2
            means.append(bulk.mean())
            assert bulk.max() == pytest.approx((1 + math.sqrt(psi_p)) ** 2, rel=0.05)
        assert means[1] / means[0] == pytest.approx(2.0, rel=0.05)
