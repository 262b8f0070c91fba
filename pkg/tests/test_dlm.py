import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, special

from recouple import dlm
from recouple.errors import DegenerateForecastError, DimensionError, InputError


def _spec(p=1, delta=1.0, beta=1.0):
    return dlm.DlmSpec(np.eye(p), (p,), (delta,), beta)


def batch_conjugate(m0, C0, n0, s0, X, y):
    """Closed-form normal/inverse-gamma regression posterior."""
    P0 = s0 * np.linalg.inv(C0)
    K = P0 + X.T @ X
    m = np.linalg.solve(K, P0 @ m0 + X.T @ y)
    n = n0 + len(y)
    s = (n0 * s0 + y @ y + m0 @ P0 @ m0 - m @ K @ m) / n
    return m, s * np.linalg.inv(K), n, s


class TestEvolve:
    def test_scalar_discount(self):
        post = dlm.initial_posterior(1, 0.0, 1.0)
        prior = dlm.evolve(post, _spec(delta=0.8))
        assert prior.mean[0] == 0.0
        assert prior.scale[0, 0] == pytest.approx(1.25)

    def test_identity_case(self):
        post = dlm.NigPosterior(np.array([1.0, -2.0]), np.array([[2.0, 0.3], [0.3, 1.0]]), 7.0, 0.4)
        prior = dlm.evolve(post, _spec(2))
        np.testing.assert_array_equal(prior.mean, post.mean)
        np.testing.assert_array_equal(prior.scale, post.scale)
        assert prior.dof == post.dof

    def test_dof_discount(self):
        post = dlm.initial_posterior(1, dof=10.0)
        assert dlm.evolve(post, _spec(beta=0.98)).dof == pytest.approx(9.8)

    def test_blockwise_only_inflates_diagonal_blocks(self):
        spec = dlm.DlmSpec(np.eye(3), (2, 1), (0.5, 1.0))
        C = np.array([[1.0, 0.2, 0.1], [0.2, 2.0, 0.3], [0.1, 0.3, 3.0]])
        prior = dlm.evolve(dlm.NigPosterior(np.zeros(3), C, 5.0, 1.0), spec)
        np.testing.assert_allclose(prior.scale[:2, :2], 2 * C[:2, :2])
        np.testing.assert_allclose(prior.scale[2:, :], C[2:, :])
        np.testing.assert_allclose(prior.scale[:2, 2], C[:2, 2])

    def test_nonconformable_transition(self):
        with pytest.raises(DimensionError):
            dlm.DlmSpec(np.eye(3), (2,), (0.9,))
        spec = dlm.DlmSpec(lambda t: np.eye(3), (2,), (0.9,))
        with pytest.raises(DimensionError):
            dlm.evolve(dlm.initial_posterior(2), spec)


class TestForecast:
    def test_arithmetic(self):
        prior = dlm.NigPosterior(np.array([2.0, 5.0]), np.eye(2), 3.0, 1.0)
        fc = dlm.forecast_one(prior, [1.0, 0.0])
        assert fc.location == 2.0
        assert fc.spread == 2.0

    @given(st.lists(st.floats(-10, 10), min_size=3, max_size=3))
    def test_zero_mean(self, F):
        prior = dlm.NigPosterior(np.zeros(3), np.eye(3), 3.0, 1.0)
        assert dlm.forecast_one(prior, F).location == 0.0

    def test_density_normalised_by_quadrature(self):
        rng = np.random.default_rng(3)
        M = rng.normal(size=(3, 3))
        prior = dlm.NigPosterior(rng.normal(size=3), M @ M.T + 0.1 * np.eye(3), 4.5, 0.7)
        F = rng.normal(size=3)
        fc = dlm.forecast_one(prior, F)
        total, _ = integrate.quad(lambda y: np.exp(fc.logpdf(y)), -np.inf, np.inf, epsabs=1e-12, epsrel=1e-12)
        assert total == pytest.approx(1.0, abs=1e-6)
        # unnormalised kernel integrated numerically gives the same density
        y0 = fc.location + 0.7
        kernel = lambda y: (1 + (y - fc.location) ** 2 / (fc.dof * fc.spread)) ** (-(fc.dof + 1) / 2)
        Z, _ = integrate.quad(kernel, -np.inf, np.inf, epsabs=1e-13, epsrel=1e-13)
        assert np.exp(fc.logpdf(y0)) == pytest.approx(kernel(y0) / Z, rel=1e-8)

    def test_degenerate(self):
        prior = dlm.NigPosterior(np.zeros(1), np.zeros((1, 1)), 3.0, 1e-13)
        with pytest.raises(DegenerateForecastError):
            dlm.forecast_one(prior, [1.0])

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            dlm.forecast_one(dlm.initial_posterior(2), [1.0])


class TestUpdate:
    def test_hand_evaluation(self):
        prior = dlm.NigPosterior(np.zeros(1), np.eye(1), 1.0, 1.0)
        post, lp = dlm.update(prior, [1.0], 1.0)
        assert post.mean[0] == pytest.approx(0.5)
        assert post.dof == pytest.approx(2.0)
        assert post.point_volatility == pytest.approx(0.75)
        assert post.scale[0, 0] == pytest.approx(0.375)
        # Student t, 1 dof, scale sqrt(2), at 1
        assert lp == pytest.approx(np.log(1 / (np.pi * np.sqrt(2) * 1.5)))

    def test_zero_error(self):
        prior = dlm.NigPosterior(np.array([1.0, 2.0]), np.eye(2), 6.0, 2.0)
        F = np.array([1.0, 1.0])
        post, _ = dlm.update(prior, F, 3.0)
        np.testing.assert_allclose(post.mean, prior.mean)
        assert post.point_volatility == pytest.approx(2.0 * 6.0 / 7.0)

    def test_batch_conjugate_oracle(self):
        rng = np.random.default_rng(11)
        p, N = 3, 50
        X = rng.normal(size=(N, p))
        y = X @ np.array([1.0, -0.5, 2.0]) + rng.normal(scale=0.7, size=N)
        m0, C0, n0, s0 = np.array([0.1, 0.0, -0.2]), 2.0 * np.eye(p), 3.0, 0.5
        post = dlm.NigPosterior(m0, C0, n0, s0)
        spec = _spec(p)
        for t in range(N):
            post, _ = dlm.update(dlm.evolve(post, spec), X[t], y[t])
        m, C, n, s = batch_conjugate(m0, C0, n0, s0, X, y)
        np.testing.assert_allclose(post.mean, m, atol=1e-10)
        np.testing.assert_allclose(post.scale, C, atol=1e-10)
        assert post.dof == pytest.approx(n, abs=1e-10)
        assert post.point_volatility == pytest.approx(s, abs=1e-10)

    def test_non_finite(self):
        with pytest.raises(InputError):
            dlm.update(dlm.initial_posterior(1), [1.0], np.nan)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.5, 1.0), st.floats(0.5, 1.0))
    def test_scale_stays_psd_and_dof_positive(self, seed, delta, beta):
        rng = np.random.default_rng(seed)
        spec = dlm.DlmSpec(np.eye(2), (1, 1), (delta, 1.0), beta)
        post = dlm.initial_posterior(2)
        for _ in range(40):
            F = rng.normal(size=2) * rng.choice([1e-6, 1.0, 1e3])
            post, _ = dlm.update(dlm.evolve(post, spec), F, rng.normal() * 10)
            assert np.linalg.eigvalsh(post.scale).min() >= -1e-10
            np.testing.assert_array_equal(post.scale, post.scale.T)
            assert post.dof >= 1.0

    def test_batched_matches_loop(self):
        rng = np.random.default_rng(5)
        B = 4
        post = dlm.NigPosterior(rng.normal(size=(B, 2)), np.broadcast_to(np.eye(2), (B, 2, 2)).copy(),
                                np.full(B, 3.0), np.full(B, 0.5))
        spec = dlm.DlmSpec(np.eye(2), (2,), (0.9,), 0.95)
        F = rng.normal(size=(B, 2))
        y = rng.normal(size=B)
        bpost, blp = dlm.update(dlm.evolve(post, spec), F, y)
        for b in range(B):
            p1, lp1 = dlm.update(dlm.evolve(post[b], spec), F[b], y[b])
            np.testing.assert_allclose(bpost.mean[b], p1.mean)
            np.testing.assert_allclose(bpost.scale[b], p1.scale)
            assert blp[b] == pytest.approx(lp1)


class TestSimulate:
    def test_zero_scale(self):
        post = dlm.NigPosterior(np.array([1.0, 2.0]), np.zeros((2, 2)), 5.0, 1.0)
        theta, lam = dlm.simulate(post, 100, np.random.default_rng(0))
        np.testing.assert_array_equal(theta, np.broadcast_to(post.mean, theta.shape))
        assert np.all(lam > 0)

    def test_mean_within_four_standard_errors(self):
        post = dlm.NigPosterior(np.array([1.0, -1.0]), np.array([[1.0, 0.4], [0.4, 0.5]]), 6.0, 2.0)
        theta, lam = dlm.simulate(post, 1_000_000, np.random.default_rng(1))
        se = np.sqrt(np.diag(post.covariance()) / len(theta))
        assert np.all(np.abs(theta.mean(axis=0) - post.mean) < 4 * se)
        # lambda has gamma mean 1/s
        assert lam.mean() == pytest.approx(0.5, rel=4 * np.sqrt(2 / 6.0) / 1000)

    def test_determinism(self):
        post = dlm.initial_posterior(3, dof=4.0)
        a = dlm.simulate(post, 10, np.random.default_rng(42))
        b = dlm.simulate(post, 10, np.random.default_rng(42))
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_outcome_draws_match_forecast(self):
        # theta, lambda from the prior, then y | theta, lambda matches the T forecast
        prior = dlm.NigPosterior(np.array([0.5, 1.0]), np.array([[0.5, 0.1], [0.1, 0.3]]), 8.0, 1.5)
        F = np.array([1.0, 2.0])
        rng = np.random.default_rng(9)
        theta, lam = dlm.simulate(prior, 200_000, rng)
        y = theta @ F + rng.standard_normal(len(lam)) / np.sqrt(lam)
        fc = dlm.forecast_one(prior, F)
        for u in (0.1, 0.5, 0.9):
            assert np.mean(y <= fc.ppf(u)) == pytest.approx(u, abs=4 * np.sqrt(u * (1 - u) / len(y)))


def test_regressors_build():
    hist = np.arange(12.0).reshape(4, 3)  # 4 times, 3 series
    reg = dlm.Regressors(True, ((0, 1), (2, 2)), (1,))
    x = reg.build(hist, np.array([7.0, 8.0]))
    np.testing.assert_array_equal(x, [1.0, 9.0, 8.0, 8.0])
    assert reg.size == 4
    with pytest.raises(InputError):
        reg.build(hist[:1])


def test_t_logpdf_matches_special():
    y, loc, q, n = 0.3, -0.2, 1.7, 5.5
    z = (y - loc) / np.sqrt(q)
    ref = np.log(special.stdtr(n, z + 1e-6) - special.stdtr(n, z - 1e-6)) - np.log(2e-6 * np.sqrt(q))
    assert dlm.t_logpdf(y, loc, q, n) == pytest.approx(ref, abs=1e-6)


@pytest.mark.parametrize("dof", [3.0, 999.0, 1001.0, 1e6, 1e12])
def test_t_logpdf_large_dof(dof):
    from mpmath import mp, loggamma, log, pi, mpf
    mp.dps = 40
    n, z = mpf(dof), mpf("0.7")
    ref = loggamma((n + 1) / 2) - loggamma(n / 2) - log(n * pi) / 2 - (n + 1) / 2 * log(1 + z * z / n)
    assert dlm.t_logpdf(0.7, 0.0, 1.0, dof) == pytest.approx(float(ref), abs=1e-12)
