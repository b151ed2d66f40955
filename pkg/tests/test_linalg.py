import math

import numpy as np
import pytest
import scipy.integrate
import scipy.stats

from specbayes.exceptions import FactorizationError
from specbayes.linalg import (
    SpdMatrix,
    generalized_eigvals,
    linear_posterior_cov,
    nonneg_orthant_mass,
    sample_mvn,
    sample_truncated_mvn_nonneg,
)


def random_spd(rng, n, scale=1.0):
    a = rng.standard_normal((n, n))
    return scale * (a @ a.T + n * np.eye(n))


class TestSpdMatrix:
    def test_rejects_asymmetric(self):
        with pytest.raises(FactorizationError):
            SpdMatrix([[1.0, 0.1], [0.2, 1.0]])

    def test_rejects_indefinite(self):
        with pytest.raises(FactorizationError):
            SpdMatrix([[1.0, 2.0], [2.0, 1.0]])

    def test_rejects_nonsquare_and_nonfinite(self):
        with pytest.raises(FactorizationError):
            SpdMatrix(np.ones((2, 3)))
        with pytest.raises(FactorizationError):
            SpdMatrix([[np.nan, 0.0], [0.0, 1.0]])

    def test_label_appears_in_message(self):
        with pytest.raises(FactorizationError, match="soil"):
            SpdMatrix([[1.0, 2.0], [2.0, 1.0]], label="soil")

    def test_accepts_tiny_asymmetry(self):
        a = np.array([[2.0, 0.5], [0.5 + 1e-14, 2.0]])
        m = SpdMatrix(a)
        assert np.array_equal(m.values, m.values.T)

    def test_factor_and_solve(self):
        rng = np.random.default_rng(1)
        a = random_spd(rng, 6)
        m = SpdMatrix(a)
        assert np.allclose(m.chol @ m.chol.T, m.values, rtol=0, atol=1e-12 * np.max(a))
        b = rng.standard_normal(6)
        assert np.allclose(m.solve(b), np.linalg.solve(a, b), rtol=1e-10, atol=0)
        sign, logdet = np.linalg.slogdet(a)
        assert sign > 0
        assert m.logdet() == pytest.approx(logdet, rel=1e-12)

    def test_quad_matches_direct(self):
        rng = np.random.default_rng(2)
        a = random_spd(rng, 5)
        m = SpdMatrix(a)
        dx = rng.standard_normal(5)
        assert m.quad(dx) == pytest.approx(dx @ np.linalg.solve(a, dx), rel=1e-11)

    def test_inv_symmetric(self):
        rng = np.random.default_rng(3)
        m = SpdMatrix(random_spd(rng, 7))
        inv = m.inv()
        assert np.array_equal(inv, inv.T)
        assert np.allclose(inv @ m.values, np.eye(7), atol=1e-10)

    def test_from_diag(self):
        m = SpdMatrix.from_diag([1.0, 4.0, 9.0])
        assert np.allclose(np.diag(m.chol), [1.0, 2.0, 3.0])


class TestSampleMvn:
    def test_mean_within_clt_bound(self):
        rng = np.random.default_rng(10)
        cov = SpdMatrix(np.eye(3))
        mean = np.array([1.0, -2.0, 0.5])
        n = 100_000
        draws = np.array([sample_mvn(mean, cov, rng) for _ in range(n)])
        # 4 sigma / sqrt(n) bound per coordinate
        assert np.all(np.abs(draws.mean(axis=0) - mean) < 4.0 / math.sqrt(n))

    def test_variance_within_five_percent(self):
        rng = np.random.default_rng(11)
        cov = SpdMatrix(np.diag([4.0, 4.0]))
        n = 100_000
        draws = np.array([sample_mvn(np.zeros(2), cov, rng) for _ in range(n)])
        v = draws.var(axis=0, ddof=1)
        assert np.all(np.abs(v - 4.0) / 4.0 < 0.05)

    def test_deterministic_given_seed(self):
        cov = SpdMatrix(random_spd(np.random.default_rng(0), 4))
        a = sample_mvn(np.zeros(4), cov, np.random.default_rng(42))
        b = sample_mvn(np.zeros(4), cov, np.random.default_rng(42))
        assert np.array_equal(a, b)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            sample_mvn(np.zeros(3), SpdMatrix(np.eye(2)), np.random.default_rng(0))


def orthant_oracle(mean, cov):
    """Quadrature oracle for P(X >= 0, Y >= 0) under N(mean, cov)."""
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    inv = np.linalg.inv(cov)
    norm = 1.0 / (2.0 * math.pi * math.sqrt(np.linalg.det(cov)))

    def pdf(y, x):
        d = np.array([x, y]) - mean
        return norm * math.exp(-0.5 * d @ inv @ d)

    s1, s2 = math.sqrt(cov[0, 0]), math.sqrt(cov[1, 1])
    hi1 = mean[0] + 12 * s1
    hi2 = mean[1] + 12 * s2
    if hi1 <= 0 or hi2 <= 0:
        return 0.0
    val, err = scipy.integrate.dblquad(
        pdf, 0.0, hi1, 0.0, hi2, epsabs=1e-13, epsrel=1e-11
    )
    return val


class TestOrthantMass:
    def test_centered_standard_is_quarter(self):
        assert nonneg_orthant_mass([0.0, 0.0], np.eye(2)) == pytest.approx(0.25, abs=1e-12)

    def test_centered_with_correlation_closed_form(self):
        # P = 1/4 + asin(rho) / (2 pi) for a centered standardized pair
        for rho in (-0.8, -0.3, 0.2, 0.6, 0.9):
            expected = 0.25 + math.asin(rho) / (2.0 * math.pi)
            got = nonneg_orthant_mass([0.0, 0.0], [[1.0, rho], [rho, 1.0]])
            assert got == pytest.approx(expected, abs=1e-11), rho

    @pytest.mark.parametrize(
        "mean,cov",
        [
            ((1.0, -0.5), [[1.0, 0.6], [0.6, 2.0]]),
            ((-1.0, 0.5), [[2.0, -1.3], [-1.3, 1.0]]),
            ((3.0, 3.0), [[1.0, 0.0], [0.0, 1.0]]),
            ((-2.0, -1.0), [[1.0, 0.5], [0.5, 1.0]]),
            ((0.3, 0.1), [[0.04, 0.0], [0.0, 9.0]]),
            ((0.5, 0.5), [[1.0, -0.9], [-0.9, 1.0]]),
        ],
    )
    def test_against_quadrature_oracle(self, mean, cov):
        expected = orthant_oracle(mean, cov)
        got = nonneg_orthant_mass(mean, cov)
        assert got == pytest.approx(expected, abs=2e-10)

    def test_near_degenerate_correlation(self):
        cov = [[1.0, 0.998], [0.998, 1.0]]
        expected = orthant_oracle([0.2, -0.1], cov)
        got = nonneg_orthant_mass([0.2, -0.1], cov)
        assert got == pytest.approx(expected, abs=1e-7)

    def test_matches_scipy_mvn(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            mean = rng.uniform(-2, 3, size=2)
            cov = random_spd(rng, 2, scale=0.5)
            ref = scipy.stats.multivariate_normal(mean=-mean, cov=cov).cdf(np.zeros(2))
            got = nonneg_orthant_mass(mean, cov)
            # scipy's QMC integrator is only ~1e-6 accurate at defaults
            assert got == pytest.approx(ref, abs=2e-5)

    def test_far_from_boundary_is_one(self):
        assert nonneg_orthant_mass([10.0, 10.0], np.eye(2)) == 1.0


def truncated_moments_1d(mu, sigma):
    """Mean and variance of N(mu, sigma^2) conditioned on x >= 0, by quadrature."""
    def num(k):
        return scipy.integrate.quad(
            lambda x: x**k * math.exp(-0.5 * ((x - mu) / sigma) ** 2),
            0.0,
            mu + 12 * sigma,
            epsabs=1e-14,
        )[0]

    z = num(0)
    m1 = num(1) / z
    m2 = num(2) / z
    return m1, m2 - m1 * m1


class TestTruncatedSampler:
    def test_far_from_boundary_matches_untruncated(self):
        rng = np.random.default_rng(20)
        cov = SpdMatrix([[0.5, 0.2], [0.2, 0.8]])
        mean = np.array([10.0, 10.0])
        draws = []
        for _ in range(20_000):
            x, mass = sample_truncated_mvn_nonneg(mean, cov, rng)
            draws.append(x)
        assert mass == pytest.approx(1.0, abs=1e-9)
        draws = np.array(draws)
        se = np.sqrt(np.diag(cov.values) / len(draws))
        assert np.all(np.abs(draws.mean(axis=0) - mean) < 4 * se)

    def test_boundary_centered_all_nonnegative(self):
        rng = np.random.default_rng(21)
        cov = SpdMatrix(np.eye(2))
        for _ in range(2_000):
            x, _ = sample_truncated_mvn_nonneg(np.zeros(2), cov, rng)
            assert x[0] >= 0.0 and x[1] >= 0.0

    def test_diagonal_case_matches_quadrature_moments(self):
        mu = np.array([-1.0, 0.5])
        sig = np.array([1.0, 0.7])
        cov = SpdMatrix(np.diag(sig**2))
        # oracle first: per-coordinate truncated moments by quadrature
        want = [truncated_moments_1d(mu[i], sig[i]) for i in range(2)]
        rng = np.random.default_rng(22)
        draws = np.array(
            [sample_truncated_mvn_nonneg(mu, cov, rng)[0] for _ in range(60_000)]
        )
        for i in range(2):
            m_ref, v_ref = want[i]
            assert abs(draws[:, i].mean() - m_ref) / m_ref < 0.02
            assert abs(draws[:, i].var(ddof=1) - v_ref) / v_ref < 0.02

    def test_mass_matches_oracle(self):
        rng = np.random.default_rng(23)
        cov = SpdMatrix([[1.0, 0.6], [0.6, 2.0]])
        mean = np.array([0.5, -0.2])
        _, mass = sample_truncated_mvn_nonneg(mean, cov, rng)
        assert mass == pytest.approx(orthant_oracle(mean, cov.values), abs=1e-9)

    def test_fallback_warns_and_stays_nonnegative(self):
        rng = np.random.default_rng(24)
        cov = SpdMatrix(0.01 * np.eye(2))
        with pytest.warns(RuntimeWarning, match="quadrant mass"):
            x, mass = sample_truncated_mvn_nonneg(np.array([-2.0, -2.0]), cov, rng)
        assert mass < 1e-6
        assert np.all(x >= 0.0)

    def test_deterministic_given_seed(self):
        cov = SpdMatrix([[1.0, -0.4], [-0.4, 1.0]])
        a = sample_truncated_mvn_nonneg(np.zeros(2), cov, np.random.default_rng(7))[0]
        b = sample_truncated_mvn_nonneg(np.zeros(2), cov, np.random.default_rng(7))[0]
        assert np.array_equal(a, b)


class TestGeneralizedEigvals:
    def test_identical_matrices_give_ones(self):
        rng = np.random.default_rng(30)
        a = SpdMatrix(random_spd(rng, 5))
        w = generalized_eigvals(a, a)
        assert np.allclose(w, 1.0, rtol=0, atol=1e-12)

    def test_scaled_pair(self):
        rng = np.random.default_rng(31)
        base = random_spd(rng, 4)
        w = generalized_eigvals(SpdMatrix(2.0 * base), SpdMatrix(base))
        assert np.allclose(w, 2.0, rtol=1e-12)

    def test_descending_order(self):
        rng = np.random.default_rng(32)
        w = generalized_eigvals(
            SpdMatrix(random_spd(rng, 6)), SpdMatrix(random_spd(rng, 6))
        )
        assert np.all(np.diff(w) <= 0)

    def test_against_charpoly_root_oracle(self):
        rng = np.random.default_rng(33)
        a = random_spd(rng, 4)
        b = random_spd(rng, 4)
        # oracle: roots of det(a - sigma b) = 0 via the companion matrix of
        # the characteristic polynomial of inv(b) @ a
        m = np.linalg.solve(b, a)
        coeffs = np.poly(m)
        roots = np.sort(np.roots(coeffs).real)[::-1]
        got = generalized_eigvals(SpdMatrix(a), SpdMatrix(b))
        assert np.allclose(got, roots, rtol=1e-8)
        # cross-check with the dense nonsymmetric eigensolver
        direct = np.sort(np.linalg.eigvals(m).real)[::-1]
        assert np.allclose(got, direct, rtol=1e-10)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            generalized_eigvals(SpdMatrix(np.eye(2)), SpdMatrix(np.eye(3)))


class TestLinearPosteriorCov:
    def test_identity_case_is_half(self):
        out = linear_posterior_cov(np.ones(3), SpdMatrix(np.eye(3)), np.ones(3))
        assert np.allclose(out.values, 0.5 * np.eye(3), atol=1e-14)

    def test_zero_response_returns_prior(self):
        rng = np.random.default_rng(40)
        prior = SpdMatrix(random_spd(rng, 4))
        out = linear_posterior_cov(np.zeros(4), prior, np.full(4, 0.3))
        assert np.allclose(out.values, prior.values, atol=1e-14)

    @pytest.mark.parametrize("n", [5, 20, 50])
    def test_matches_information_form_oracle(self, n):
        rng = np.random.default_rng(41 + n)
        prior = SpdMatrix(random_spd(rng, n))
        a = rng.uniform(0.1, 2.0, size=n)
        obs = rng.uniform(0.01, 0.5, size=n)
        # independent oracle: dense information-form inverse
        oracle = np.linalg.inv(np.diag(a / obs * a) + np.linalg.inv(prior.values))
        got = linear_posterior_cov(a, prior, obs).values
        rel = np.linalg.norm(got - oracle) / np.linalg.norm(oracle)
        assert rel < 1e-10

    def test_result_is_symmetric(self):
        rng = np.random.default_rng(44)
        prior = SpdMatrix(random_spd(rng, 8))
        a = rng.uniform(0.0, 3.0, size=8)
        got = linear_posterior_cov(a, prior, np.full(8, 0.2)).values
        assert np.max(np.abs(got - got.T)) <= 1e-10 * np.max(np.abs(got))

    def test_zeroed_channels_equal_exclusion(self):
        rng = np.random.default_rng(45)
        n = 6
        prior_vals = random_spd(rng, n)
        a = rng.uniform(0.5, 1.5, size=n)
        obs = rng.uniform(0.05, 0.2, size=n)
        masked = np.array([True, False, True, True, False, True])
        a_masked = np.where(masked, a, 0.0)
        got = linear_posterior_cov(a_masked, SpdMatrix(prior_vals), obs).values
        # oracle excluding the masked channels from the information sum
        info = np.linalg.inv(prior_vals)
        for i in range(n):
            if masked[i]:
                info[i, i] += a[i] ** 2 / obs[i]
        oracle = np.linalg.inv(info)
        rel = np.linalg.norm(got - oracle) / np.linalg.norm(oracle)
        assert rel < 1e-10

    def test_rejects_bad_obs_var(self):
        with pytest.raises(ValueError):
            linear_posterior_cov(np.ones(2), SpdMatrix(np.eye(2)), np.array([1.0, 0.0]))
