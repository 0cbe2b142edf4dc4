import math

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from ktbo.gp import (
    FitConfig,
    HogpModel,
    ScalarGpModel,
    _mll_and_grad,
    fit_hogp,
    fit_scalar_gp,
    hogp_mll,
    hogp_posterior_mean,
)
from ktbo.kernels import InputKernelHyper, latent_kernel, latent_kernel_matrix, matern52_ard, matern52_matrix


def dense_joint_cov(model):
    cov = np.array([[1.0]])
    for f in model.cache.factor_mats:
        cov = np.kron(cov, f)
    return cov


def make_model(rng, n=4, out_shape=(2, 3), d=2, sigma2=0.1, q=2, y=None):
    x = rng.uniform(0, 1, (n, d))
    latents = [rng.standard_normal((dj, q)) for dj in out_shape]
    hyper = InputKernelHyper(np.full(d, 0.6), 1.3)
    if y is None:
        y = rng.standard_normal((n, *out_shape))
    return HogpModel.create(x, y, hyper, latents, sigma2)


class TestKernels:
    def test_zero_distance(self):
        hyper = InputKernelHyper(np.array([0.7, 1.1]), 1.0)
        x = np.array([0.3, 0.4])
        assert matern52_ard(x, x, hyper) == pytest.approx(1.0)

    def test_unit_distance_value(self):
        hyper = InputKernelHyper(np.array([1.0]), 1.0)
        expected = (1 + math.sqrt(5) + 5 / 3) * math.exp(-math.sqrt(5))
        assert matern52_ard(np.array([0.0]), np.array([1.0]), hyper) == pytest.approx(expected)
        assert expected == pytest.approx(0.5240, abs=1e-4)

    def test_joint_scaling_invariance(self):
        rng = np.random.default_rng(0)
        x, x2 = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
        ls = rng.uniform(0.3, 1.0, 3)
        c = 3.7
        v1 = matern52_ard(x, x2, InputKernelHyper(ls, 1.0))
        v2 = matern52_ard(c * x, c * x2, InputKernelHyper(c * ls, 1.0))
        assert v1 == pytest.approx(v2, rel=1e-12)

    def test_latent_kernel_identity(self):
        v = np.array([0.5, -0.2])
        assert latent_kernel(v, v) == pytest.approx(1.0)

    def test_latent_kernel_known_value(self):
        assert latent_kernel(np.array([0.0]), np.array([math.sqrt(2.0)])) == pytest.approx(math.exp(-1.0))

    def test_latent_kernel_symmetry(self):
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal(4), rng.standard_normal(4)
        assert latent_kernel(a, b) == pytest.approx(latent_kernel(b, a))

    def test_gram_diagonal_scales(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(0, 1, (5, 3))
        hyper = InputKernelHyper(np.array([0.5, 0.7, 0.9]), 2.5)
        k = matern52_matrix(x, x, hyper)
        np.testing.assert_allclose(np.diag(k), 2.5)
        np.testing.assert_allclose(k, k.T, atol=1e-14)
        v = rng.standard_normal((4, 2))
        kk = latent_kernel_matrix(v)
        np.testing.assert_allclose(np.diag(kk), 1.0)
        np.testing.assert_allclose(kk, kk.T, atol=1e-14)


class TestHogpMll:
    def test_single_point_unit_cov(self):
        model = HogpModel.create(
            np.array([[0.5]]), np.zeros((1, 1)),
            InputKernelHyper(np.array([1.0]), 1.0), [np.zeros((1, 1))], 0.0,
        )
        assert hogp_mll(model) == pytest.approx(-0.5 * math.log(2 * math.pi))

    def test_single_point_noise(self):
        model = HogpModel.create(
            np.array([[0.5]]), np.full((1, 1), 2.0),
            InputKernelHyper(np.array([1.0]), 1.0), [np.zeros((1, 1))], 1.0,
        )
        # N(0, 2) evaluated at 2: -1 - 0.5*log(4*pi)
        assert hogp_mll(model) == pytest.approx(-1.0 - 0.5 * math.log(4 * math.pi))

    def test_dense_logpdf_oracle(self):
        rng = np.random.default_rng(3)
        model = make_model(rng)
        cov = dense_joint_cov(model) + model.noise_sigma2 * np.eye(model.total_dim)
        expected = multivariate_normal(mean=np.zeros(model.total_dim), cov=cov).logpdf(
            model.cache.y_standardized.reshape(-1)
        )
        assert hogp_mll(model) == pytest.approx(expected, abs=1e-8)

    def test_joint_cov_psd_after_jitter(self):
        rng = np.random.default_rng(4)
        model = make_model(rng, n=5, out_shape=(3, 4))
        cov = dense_joint_cov(model) + model.noise_sigma2 * np.eye(model.total_dim)
        np.testing.assert_allclose(cov, cov.T, atol=1e-12)
        assert np.min(np.linalg.eigvalsh(cov)) > 0


class TestGradient:
    @pytest.mark.parametrize("out_shape", [(2, 3), (4,), ()])
    def test_matches_central_differences(self, out_shape):
        rng = np.random.default_rng(5)
        n, d, q = 6, 3, 2
        x = rng.uniform(0, 1, (n, d))
        y = rng.standard_normal((n, *out_shape))
        latent_shapes = [(dj, q) for dj in out_shape]
        params = np.concatenate([
            rng.uniform(-1.0, 0.5, d),         # log lengthscales
            rng.uniform(-0.5, 0.5, 2),         # log outputscale, log noise
            0.3 * rng.standard_normal(sum(a * b for a, b in latent_shapes)),
        ])
        _, grad = _mll_and_grad(x, y, params, latent_shapes)
        h = 1e-5
        for idx in range(params.size):
            lo, hi = params.copy(), params.copy()
            lo[idx] -= h
            hi[idx] += h
            fd = (_mll_and_grad(x, y, hi, latent_shapes)[0]
                  - _mll_and_grad(x, y, lo, latent_shapes)[0]) / (2 * h)
            assert grad[idx] == pytest.approx(fd, rel=1e-3, abs=1e-7)


class TestFitHogp:
    def test_constant_outputs(self):
        rng = np.random.default_rng(6)
        x = rng.uniform(0, 1, (8, 2))
        y = np.full((8, 2, 2), 3.25)
        model = fit_hogp(x, y, FitConfig(max_iters=30, restarts=0, seed=1))
        pred = model.posterior_mean(x)
        np.testing.assert_allclose(pred, 3.25, atol=1e-3)

    def test_generate_and_refit(self):
        rng = np.random.default_rng(7)
        n, d, out_shape = 20, 3, (3, 4)
        x = rng.uniform(0, 1, (n, d))
        gen_hyper = InputKernelHyper(np.array([0.4, 0.6, 0.5]), 1.0)
        gen_latents = [0.8 * rng.standard_normal((dj, 2)) for dj in out_shape]
        gen_sigma2 = 0.01
        ref = HogpModel.create(x, np.zeros((n, *out_shape)), gen_hyper, gen_latents, gen_sigma2)
        cov = dense_joint_cov(ref) + gen_sigma2 * np.eye(ref.total_dim)
        y = (np.linalg.cholesky(cov) @ rng.standard_normal(ref.total_dim)).reshape(n, *out_shape)

        model = fit_hogp(x, y, FitConfig(max_iters=150, restarts=1, seed=2))
        ref_model = HogpModel.create(x, y, gen_hyper, gen_latents, gen_sigma2,
                                     y_mean=model.y_mean, y_std=model.y_std)
        assert hogp_mll(model) >= hogp_mll(ref_model) - 5.0

    def test_deterministic(self):
        rng = np.random.default_rng(8)
        x = rng.uniform(0, 1, (6, 2))
        y = rng.standard_normal((6, 2, 2))
        cfg = FitConfig(max_iters=25, restarts=1, seed=11)
        m1 = fit_hogp(x, y, cfg)
        m2 = fit_hogp(x, y, cfg)
        np.testing.assert_array_equal(m1.hyper.lengthscales, m2.hyper.lengthscales)
        assert m1.hyper.outputscale == m2.hyper.outputscale
        assert m1.noise_sigma2 == m2.noise_sigma2
        for a, b in zip(m1.latents, m2.latents):
            np.testing.assert_array_equal(a, b)

    def test_requires_two_points(self):
        with pytest.raises(ValueError):
            fit_hogp(np.array([[0.5]]), np.zeros((1, 2, 2)))


class TestPosteriorMean:
    def test_interpolates_at_low_noise(self):
        rng = np.random.default_rng(9)
        model = make_model(rng, n=5, out_shape=(2, 3), sigma2=1e-10)
        pred = model.posterior_mean(model.train_x)
        np.testing.assert_allclose(pred, model.train_y, atol=1e-6)

    def test_dense_oracle(self):
        rng = np.random.default_rng(10)
        model = make_model(rng, n=5, out_shape=(2, 2), sigma2=0.05)
        x_test = rng.uniform(0, 1, (3, 2))
        k_cross = np.kron(
            matern52_matrix(x_test, model.train_x, model.hyper),
            np.kron(model.cache.factor_mats[1], model.cache.factor_mats[2]),
        )
        cov = dense_joint_cov(model) + model.noise_sigma2 * np.eye(model.total_dim)
        expected = (k_cross @ np.linalg.solve(cov, model.cache.y_standardized.reshape(-1)))
        expected = expected.reshape(3, 2, 2) * model.y_std + model.y_mean
        got = hogp_posterior_mean(model, x_test)
        np.testing.assert_allclose(got, expected, rtol=1e-6)

    def test_linear_in_observations(self):
        rng = np.random.default_rng(11)
        x = rng.uniform(0, 1, (4, 2))
        hyper = InputKernelHyper(np.array([0.5, 0.8]), 1.0)
        latents = [rng.standard_normal((2, 2)), rng.standard_normal((3, 2))]
        y1 = rng.standard_normal((4, 2, 3))
        y2 = rng.standard_normal((4, 2, 3))
        means = []
        for y in (y1, y2, y1 + y2):
            m = HogpModel.create(x, y, hyper, latents, 0.1)
            means.append(m.posterior_mean(rng.uniform(0, 1, (2, 2)) * 0 + 0.5))
        np.testing.assert_allclose(means[0] + means[1], means[2], rtol=1e-10)


class TestScalarGp:
    def test_zero_function(self):
        rng = np.random.default_rng(12)
        x = rng.uniform(0, 1, (6, 2))
        model = fit_scalar_gp(x, np.zeros(6), FitConfig(max_iters=20, restarts=0, seed=3))
        pred = model.posterior_mean(rng.uniform(0, 1, (4, 2)))
        np.testing.assert_allclose(pred, 0.0, atol=1e-6)

    def test_two_point_closed_form(self):
        x = np.array([[0.2], [0.8]])
        y = np.array([1.0, -1.0])
        hyper = InputKernelHyper(np.array([0.5]), 1.5)
        sigma2 = 0.1
        model = ScalarGpModel.create(x, y, hyper, sigma2)
        x_star = np.array([[0.4]])
        k = matern52_matrix(x, x, hyper) + sigma2 * np.eye(2)
        k_star = matern52_matrix(x_star, x, hyper)
        expected_mean = float((k_star @ np.linalg.solve(k, y))[0])
        expected_var = 1.5 - float((k_star @ np.linalg.solve(k, k_star.T))[0, 0])
        assert model.posterior_mean(x_star)[0] == pytest.approx(expected_mean, abs=1e-8)
        assert model.posterior_variance(x_star)[0] == pytest.approx(expected_var, abs=1e-8)

    def test_variance_bounded_when_noise_dominates(self):
        rng = np.random.default_rng(13)
        x = rng.uniform(0, 1, (5, 2))
        y = rng.standard_normal(5)
        sigma2 = 25.0
        model = ScalarGpModel.create(x, y, InputKernelHyper(np.array([0.5, 0.5]), 1.0), sigma2)
        var = model.posterior_variance(x)
        assert np.all(var <= sigma2 + 1e-6)

    def test_fit_deterministic(self):
        rng = np.random.default_rng(14)
        x = rng.uniform(0, 1, (8, 3))
        y = np.sin(x.sum(axis=1) * 3)
        cfg = FitConfig(max_iters=30, restarts=1, seed=5)
        m1 = fit_scalar_gp(x, y, cfg)
        m2 = fit_scalar_gp(x, y, cfg)
        np.testing.assert_array_equal(m1.hyper.lengthscales, m2.hyper.lengthscales)
        assert m1.noise_sigma2 == m2.noise_sigma2
