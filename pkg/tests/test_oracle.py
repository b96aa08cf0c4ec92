"""Exact mixture marginals, scores, Tweedie posterior means, flow velocities."""

import numpy as np
import pytest

from wsdiff.covariance import CirculantOperator, build_gaussian_kernel
from wsdiff.oracle import (
    GaussianMixture,
    GridGaussianPrior,
    exact_score,
    exact_ws,
    fm_conditional_velocity,
    fm_conditional_velocity_via_path,
    fm_marginal_velocity,
    log_marginal_density,
    marginal_params,
    posterior_mean,
    vector_field_grid,
)
from wsdiff.sde import BetaSchedule, VpSde

from conftest import finite_difference_gradient

SCHEDULE = BetaSchedule(0.01, 20.0)


def random_mixture(rng, dim, k):
    w = rng.uniform(0.2, 1.0, k)
    covs = []
    for _ in range(k):
        m = rng.standard_normal((dim, dim))
        covs.append(m @ m.T / dim + 0.2 * np.eye(dim))
    return GaussianMixture(w / w.sum(), rng.standard_normal((k, dim)), np.stack(covs))


def random_sde(rng, dim):
    return VpSde(SCHEDULE, CirculantOperator((dim,), rng.uniform(0.5, 1.5, dim)))


class TestMixtureValidation:
    def test_weights_must_sum_to_one(self):
        with pytest.raises(ValueError, match="sum to 1"):
            GaussianMixture(np.array([0.5, 0.4]), np.zeros((2, 2)), np.stack([np.eye(2)] * 2))

    def test_covariances_must_be_psd_and_symmetric(self):
        with pytest.raises(ValueError, match="PSD"):
            GaussianMixture(np.array([1.0]), np.zeros((1, 2)), -np.eye(2)[None])
        with pytest.raises(ValueError, match="symmetric"):
            GaussianMixture(np.array([1.0]), np.zeros((1, 2)),
                            np.array([[[1.0, 0.5], [0.1, 1.0]]]))

    def test_dense_dimension_cap(self):
        with pytest.raises(ValueError, match="capped"):
            GaussianMixture(np.array([1.0]), np.zeros((1, 17)), np.eye(17)[None])


class TestMarginalParams:
    def test_t_zero_returns_the_prior(self, rng):
        gm = random_mixture(rng, 2, 3)
        sde = random_sde(rng, 2)
        marg = marginal_params(gm, sde, 0.0)
        np.testing.assert_array_equal(marg.means, gm.means)
        np.testing.assert_allclose(marg.covariances, gm.covariances, atol=1e-15)

    def test_point_mass_prior_becomes_pure_noise(self, rng):
        sde = random_sde(rng, 3)
        gm = GaussianMixture(np.array([1.0]), np.zeros((1, 3)), np.zeros((1, 3, 3)))
        t = 0.8
        marg = marginal_params(gm, sde, t)
        a = float(sde.alpha(t))
        np.testing.assert_allclose(
            marg.covariances[0], (1 - a * a) * sde.K.dense_kkt(), atol=1e-14
        )

    def test_covariance_matches_monte_carlo(self, rng):
        """Mixture covariance at t=0.5 against 1e6 brute-force forward draws."""
        gm = GaussianMixture(
            np.array([0.4, 0.6]),
            np.array([[-1.0, 0.0], [1.0, 0.5]]),
            np.stack([0.2 * np.eye(2), np.array([[0.3, -0.1], [-0.1, 0.25]])]),
        )
        op = CirculantOperator((2,), np.array([1.0, 0.7]))
        sde = VpSde(SCHEDULE, op)
        t, n = 0.5, 1_000_000
        x0 = gm.sample(rng, n)
        a = float(sde.alpha(t))
        x_t = a * x0 + np.sqrt(1 - a * a) * op.apply(rng.standard_normal((n, 2)))
        marg = marginal_params(gm, sde, t)
        mix_mean = marg.weights @ marg.means
        mix_cov = sum(
            w * (c + np.outer(m - mix_mean, m - mix_mean))
            for w, m, c in zip(marg.weights, marg.means, marg.covariances)
        )
        emp_cov = np.cov(x_t.T)
        assert np.abs(emp_cov - mix_cov).max() < 6.0 * np.abs(mix_cov).max() / np.sqrt(n)

    def test_dimension_mismatch(self, rng):
        gm = random_mixture(rng, 2, 2)
        with pytest.raises(ValueError, match="match"):
            marginal_params(gm, random_sde(rng, 3), 0.5)


class TestExactScore:
    def test_single_isotropic_gaussian_closed_form(self, rng):
        """Score of N(alpha mu, c I) is (alpha mu - x) / c."""
        mu = np.array([0.3, -0.7])
        s2 = 0.4
        gm = GaussianMixture(np.array([1.0]), mu[None], (s2 * np.eye(2))[None])
        sde = VpSde(SCHEDULE, CirculantOperator((2,), np.ones(2)))
        t = 0.45
        a = float(sde.alpha(t))
        c = a * a * s2 + (1 - a * a)
        x = rng.standard_normal((20, 2))
        np.testing.assert_allclose(
            exact_score(gm, sde, x, t), (a * mu - x) / c, atol=1e-12
        )

    def test_matches_finite_differences(self, rng):
        """Analytic scores vs central differences of log p_t, dims 1/2/4."""
        worst = 0.0
        for dim in (1, 2, 4):
            gm = random_mixture(rng, dim, 4)
            sde = random_sde(rng, dim)
            for t in (0.1, 0.5, 0.9):
                for _ in range(3):
                    x = 1.5 * rng.standard_normal(dim)
                    fd = finite_difference_gradient(
                        lambda v: float(log_marginal_density(gm, sde, v, t)), x
                    )
                    an = exact_score(gm, sde, x, t)
                    worst = max(worst, np.abs(an - fd).max() / max(np.abs(fd).max(), 1e-12))
        assert worst <= 1e-5

    def test_symmetric_mixture_zero_at_midpoint(self):
        gm = GaussianMixture(
            np.array([0.5, 0.5]),
            np.array([[-1.0, 0.5], [1.0, -0.5]]),
            np.stack([0.3 * np.eye(2)] * 2),
        )
        sde = VpSde(SCHEDULE, CirculantOperator((2,), np.ones(2)))
        score = exact_score(gm, sde, np.zeros(2), 0.5)
        np.testing.assert_allclose(score, np.zeros(2), atol=1e-12)


class TestExactWs:
    def test_delta_kernel_reduces_to_beta_score(self, rng):
        gm = random_mixture(rng, 4, 3)
        sde = VpSde(SCHEDULE, build_gaussian_kernel(0.0, 4))
        x = rng.standard_normal((10, 4))
        t = 0.6
        np.testing.assert_allclose(
            exact_ws(gm, sde, x, t),
            float(sde.beta(t)) * exact_score(gm, sde, x, t),
            atol=1e-12,
        )

    def test_whitened_field_points_at_the_mean(self, rng):
        """Data covariance proportional to K KT: the whitened field is exactly
        collinear with (marginal mean - x) at every test point."""
        for kappa in (4.0, 64.0):
            op = CirculantOperator((2,), np.array([1.0, kappa**-0.5]))
            sde = VpSde(SCHEDULE, op)
            mu = np.array([0.5, -0.3])
            gm = GaussianMixture(np.array([1.0]), mu[None], op.dense_kkt()[None])
            t = 0.7
            a = float(sde.alpha(t))
            x = 3.0 * rng.standard_normal((50, 2))
            ws = exact_ws(gm, sde, x, t)
            direction = a * mu - x
            # sine of the enclosed angle via the 2D cross product: exact for
            # near-parallel vectors where arccos loses precision
            cross = ws[:, 0] * direction[:, 1] - ws[:, 1] * direction[:, 0]
            sin_angle = np.abs(cross) / (
                np.linalg.norm(ws, axis=1) * np.linalg.norm(direction, axis=1)
            )
            assert np.all(sin_angle <= 1e-8)
            assert np.all((ws * direction).sum(1) > 0)

    def test_magnitude_stable_while_score_grows(self, rng):
        """Sweeping anisotropy 1 -> 64 leaves max |ws| within 2x while
        max |score| grows by the condition number."""
        mu = np.array([0.5, -0.3])
        grid = np.stack(np.meshgrid(np.linspace(-3, 3, 15), np.linspace(-3, 3, 15),
                                    indexing="ij"), -1).reshape(-1, 2)
        ws_max, score_max = [], []
        for kappa in (1.0, 4.0, 16.0, 64.0):
            op = CirculantOperator((2,), np.array([1.0, kappa**-0.5]))
            sde = VpSde(SCHEDULE, op)
            gm = GaussianMixture(np.array([1.0]), mu[None], op.dense_kkt()[None])
            ws_max.append(np.linalg.norm(exact_ws(gm, sde, grid, 0.7), axis=1).max())
            score_max.append(np.linalg.norm(exact_score(gm, sde, grid, 0.7), axis=1).max())
        assert max(ws_max) / min(ws_max) < 2.0
        assert score_max[0] < score_max[1] < score_max[2] < score_max[3]
        assert score_max[3] / score_max[0] > 10.0


class TestPosteriorMean:
    def test_point_mass_prior_always_returns_its_location(self, rng):
        mu = np.array([0.7, -0.2, 0.1])
        sde = random_sde(rng, 3)
        gm = GaussianMixture(np.array([1.0]), mu[None], np.zeros((1, 3, 3)))
        x = rng.standard_normal((8, 3))
        np.testing.assert_allclose(
            posterior_mean(gm, sde, x, 0.5), np.broadcast_to(mu, (8, 3)), atol=1e-10
        )

    def test_tweedie_identity(self, rng):
        """alpha E[x0|x] = x + Sigma_t grad log p_t, both sides closed form."""
        worst = 0.0
        for dim in (1, 2, 4):
            gm = random_mixture(rng, dim, 5)
            sde = random_sde(rng, dim)
            sig = sde.K.dense_kkt()
            for t in (0.1, 0.5, 0.9):
                a = float(sde.alpha(t))
                x = 1.5 * rng.standard_normal((100, dim))
                lhs = a * posterior_mean(gm, sde, x, t)
                rhs = x + exact_score(gm, sde, x, t) @ ((1 - a * a) * sig).T
                worst = max(worst, float(np.abs(lhs - rhs).max()))
        assert worst <= 1e-8

    def test_small_time_limit_returns_the_observation(self, rng):
        gm = random_mixture(rng, 2, 2)
        sde = random_sde(rng, 2)
        x = rng.standard_normal(2)
        pm = posterior_mean(gm, sde, x, 1e-9)
        np.testing.assert_allclose(pm, x, atol=1e-6)


class TestFlowVelocities:
    def test_on_path_point_leaves_only_drift(self, rng):
        sde = random_sde(rng, 2)
        x0 = rng.standard_normal(2)
        t = 0.5
        a, f = float(sde.alpha(t)), float(sde.drift_coefficient(t))
        u = fm_conditional_velocity(sde, x0, a * x0, t)
        np.testing.assert_allclose(u, f * a * x0, atol=1e-12)

    def test_two_closed_forms_agree(self, rng):
        """Drift-plus-whitened-target route vs the probability-path derivative
        route evaluated densely."""
        for dim in (2, 4):
            sde = random_sde(rng, dim)
            x0 = rng.standard_normal((30, dim))
            x_t = rng.standard_normal((30, dim))
            for t in (0.15, 0.5, 0.85):
                u1 = fm_conditional_velocity(sde, x0, x_t, t)
                u2 = fm_conditional_velocity_via_path(sde, x0, x_t, t)
                assert np.abs(u1 - u2).max() <= 1e-8

    def test_marginal_velocity_equals_flow_drift(self, rng):
        """Posterior-mean form equals F_t x - ws/2 for mixtures at many points."""
        gm = random_mixture(rng, 2, 3)
        sde = random_sde(rng, 2)
        x = 2.0 * rng.standard_normal((1000, 2))
        for t in np.arange(0.1, 0.95, 0.1):
            t = float(t)
            pf = float(sde.drift_coefficient(t)) * x - 0.5 * exact_ws(gm, sde, x, t)
            fm = fm_marginal_velocity(gm, sde, x, t)
            assert np.abs(pf - fm).max() <= 1e-8

    def test_t_zero_rejected(self, rng):
        gm = random_mixture(rng, 2, 2)
        sde = random_sde(rng, 2)
        with pytest.raises(ValueError):
            fm_marginal_velocity(gm, sde, np.zeros(2), 0.0)


class TestVectorFieldGrid:
    def test_shape_contract(self, rng):
        gm = random_mixture(rng, 2, 2)
        sde = random_sde(rng, 2)
        rows = vector_field_grid(gm, sde, (-3.0, 3.0, 21), 0.5)
        assert rows.shape == (441, 6)

    def test_isotropic_case_fields_are_parallel(self, rng):
        gm = GaussianMixture(np.array([1.0]), np.zeros((1, 2)), (0.5 * np.eye(2))[None])
        sde = VpSde(SCHEDULE, CirculantOperator((2,), np.ones(2)))
        t = 0.5
        rows = vector_field_grid(gm, sde, (-2.0, 2.0, 11), t)
        np.testing.assert_allclose(
            rows[:, 4:6], float(sde.beta(t)) * rows[:, 2:4], atol=1e-12
        )

    def test_anisotropic_case_rotates_score_not_ws(self):
        """With anisotropy 16 the raw score turns more than 10 degrees from
        the mean direction somewhere on the grid; the whitened field never
        leaves it by more than a microradian."""
        op = CirculantOperator((2,), np.array([1.0, 16.0**-0.5]))
        sde = VpSde(SCHEDULE, op)
        mu = np.array([0.5, -0.3])
        gm = GaussianMixture(np.array([1.0]), mu[None], op.dense_kkt()[None])
        t = 0.7
        rows = vector_field_grid(gm, sde, (-3.0, 3.0, 21), t)
        direction = float(sde.alpha(t)) * mu - rows[:, 0:2]
        keep = np.linalg.norm(direction, axis=1) > 1e-9

        def angles(vecs):
            cos = (vecs * direction).sum(1) / (
                np.linalg.norm(vecs, axis=1) * np.linalg.norm(direction, axis=1)
            )
            return np.arccos(np.clip(cos, -1, 1))[keep]

        assert angles(rows[:, 2:4]).max() > np.radians(10.0)
        assert angles(rows[:, 4:6]).max() <= 1e-6

    def test_non_2d_prior_rejected(self, rng):
        gm = random_mixture(rng, 3, 2)
        sde = random_sde(rng, 3)
        with pytest.raises(ValueError):
            vector_field_grid(gm, sde, (-1.0, 1.0, 5), 0.5)


class TestGridGaussianPrior:
    def test_matches_dense_mixture_on_small_grid(self, rng):
        """Frequency-diagonal score and posterior mean equal the dense-mixture
        computation for a scalar-covariance Gaussian on a 4x4 grid."""
        mean_img = rng.standard_normal((4, 4))
        var = 0.3
        op = build_gaussian_kernel(0.9, (4, 4))
        sde = VpSde(SCHEDULE, op)
        prior = GridGaussianPrior(mean_img, var)
        gm = GaussianMixture(np.array([1.0]), mean_img.ravel()[None],
                             (var * np.eye(16))[None])
        x = rng.standard_normal((4, 4))
        for t in (0.2, 0.8):
            np.testing.assert_allclose(
                prior.score(sde, x, t).ravel(),
                exact_score(gm, sde, x.ravel(), t),
                atol=1e-10,
            )
            np.testing.assert_allclose(
                prior.posterior_mean(sde, x, t).ravel(),
                posterior_mean(gm, sde, x.ravel(), t),
                atol=1e-10,
            )
            np.testing.assert_allclose(
                exact_ws(prior, sde, x, t).ravel(),
                exact_ws(gm, sde, x.ravel(), t),
                atol=1e-10,
            )

    def test_marginal_velocity_identity_on_grid(self, rng):
        prior = GridGaussianPrior(rng.standard_normal((8, 8)), 0.2)
        sde = VpSde(SCHEDULE, build_gaussian_kernel(1.5, (8, 8)))
        x = rng.standard_normal((8, 8))
        for t in (0.3, 0.7):
            pf = float(sde.drift_coefficient(t)) * x - 0.5 * exact_ws(prior, sde, x, t)
            np.testing.assert_allclose(
                fm_marginal_velocity(prior, sde, x, t), pf, atol=1e-10
            )

    def test_singular_marginal_rejected(self):
        op = CirculantOperator((4,), np.array([1.0, 0.5, 0.0, 0.5]))
        sde = VpSde(SCHEDULE, op)
        prior = GridGaussianPrior(np.zeros(4), 0.0)
        with pytest.raises(ValueError, match="singular"):
            prior.score(sde, np.ones(4), 0.5)
