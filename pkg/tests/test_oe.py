import numpy as np
import pytest

from specbayes.exceptions import DivergedError, IllConditionedError
from specbayes.lut import AtmLookupTable
from specbayes.model import ForwardModel, Geometry, StateVector, WavelengthGrid
from specbayes.optimal_estimation import (
    OeOptions,
    OeResult,
    RetrievalProblem,
    laplace_cov,
    map_cost,
    solve_map,
)
from specbayes.priors import assemble_prior, component_from_arrays


TIGHT = OeOptions(cost_rtol=1e-13, grad_tol=1e-9)


def constant_atm_lut(wavelengths, rho_a, s, t, aod_grid=(0.0, 1.0), h2o_grid=(0.0, 3.0)):
    """Tables identical at every atmospheric knot: exactly flat in (aod, h2o)."""
    na, nh = len(aod_grid), len(h2o_grid)
    tile = lambda v: np.tile(np.asarray(v, dtype=float), (na, nh, 1))
    return AtmLookupTable(
        aod_grid=np.asarray(aod_grid, dtype=float),
        h2o_grid=np.asarray(h2o_grid, dtype=float),
        rho_a=tile(rho_a),
        s=tile(s),
        t=tile(t),
        wavelengths=np.asarray(wavelengths, dtype=float),
    )


def smooth_lut(wavelengths, aod_grid, h2o_grid, s_level=0.1):
    """Tables varying smoothly in both atmospheric coordinates.

    Aerosol extinction follows a wavelength power law and water vapor a
    band near 1130 nm, so the two atmospheric coordinates imprint distinct
    channel-dependent signatures.
    """
    aod_grid = np.asarray(aod_grid, dtype=float)
    h2o_grid = np.asarray(h2o_grid, dtype=float)
    w = np.asarray(wavelengths, dtype=float)
    na, nh, n = aod_grid.size, h2o_grid.size, w.size
    k_aer = 0.45 * (550.0 / w) ** 1.3
    k_h2o = 0.06 + 0.5 * np.exp(-(((w - 1130.0) / 90.0) ** 2))
    rho = np.empty((na, nh, n))
    t = np.empty((na, nh, n))
    for i, a in enumerate(aod_grid):
        for j, h in enumerate(h2o_grid):
            t[i, j] = 0.85 * np.exp(-k_aer * (a - aod_grid[0]) - k_h2o * h)
            rho[i, j] = 0.015 + 0.06 * k_aer * (a - aod_grid[0]) + 0.003 * h
    s = np.full((na, nh, n), s_level)
    return AtmLookupTable(aod_grid, h2o_grid, rho, s, t, wavelengths=w)


def build_model(lut, mask=None):
    w = lut.wavelengths
    grid = WavelengthGrid(w, np.ones(w.size, bool) if mask is None else np.asarray(mask, bool))
    geom = Geometry(cos_solar_zenith=1.0, solar_irradiance=np.full(w.size, np.pi))
    return ForwardModel(lut=lut, geom=geom, grid=grid)


def make_prior(rng, n, refl_scale=0.2, atm_mean=(0.3, 1.2), atm_var=(0.5, 0.7)):
    a = rng.standard_normal((n, n))
    cov = refl_scale**2 * (a @ a.T / n + np.eye(n))
    comp = component_from_arrays("test", rng.uniform(0.2, 0.5, n), cov)
    return assemble_prior(comp, atm_mean=atm_mean, atm_var=atm_var)


def gaussian_map_oracle(design, offset, w, prior_mean, prior_cov, y):
    """Closed-form posterior of y = design @ x + offset + noise, dense numpy only."""
    prec = np.linalg.inv(prior_cov)
    hess = prec + design.T @ np.diag(w) @ design
    rhs = design.T @ (w * (y - (design @ prior_mean + offset)))
    mean = prior_mean + np.linalg.solve(hess, rhs)
    return mean, np.linalg.inv(hess)


class TestLinearClosedForm:
    def _setup(self, n=6, seed=0):
        rng = np.random.default_rng(seed)
        w = np.linspace(450.0, 2400.0, n)
        t = rng.uniform(0.4, 0.9, n)
        rho = rng.uniform(0.01, 0.08, n)
        lut = constant_atm_lut(w, rho, np.zeros(n), t)
        fm = build_model(lut)
        prior = make_prior(rng, n)
        truth = np.concatenate([rng.uniform(0.1, 0.6, n), [0.4, 1.0]])
        y = fm.forward(StateVector.from_array(truth)) + rng.normal(0, 2e-4, n)
        var = np.full(n, (2e-4) ** 2)
        return fm, prior, y, var, t, rho

    def test_map_matches_dense_oracle(self):
        fm, prior, y, var, t, rho = self._setup()
        n = fm.n
        problem = RetrievalProblem(fm, y, var, prior)
        res = solve_map(problem, options=TIGHT)

        design = np.zeros((n, n + 2))
        design[:, :n] = np.diag(fm.geom.coeff * t)
        offset = fm.geom.coeff * rho
        mean, _ = gaussian_map_oracle(
            design, offset, 1.0 / var, prior.mean, prior.cov.values, y
        )
        assert res.converged
        assert not res.boundary_clamped
        assert np.max(np.abs(res.state.as_array() - mean)) < 1e-8

    def test_laplace_matches_dense_oracle(self):
        fm, prior, y, var, t, rho = self._setup(seed=1)
        n = fm.n
        problem = RetrievalProblem(fm, y, var, prior)
        res = solve_map(problem, options=TIGHT)
        got = laplace_cov(problem, res.state).values

        design = np.zeros((n, n + 2))
        design[:, :n] = np.diag(fm.geom.coeff * t)
        offset = fm.geom.coeff * rho
        _, cov = gaussian_map_oracle(
            design, offset, 1.0 / var, prior.mean, prior.cov.values, y
        )
        rel = np.linalg.norm(got - cov) / np.linalg.norm(cov)
        assert rel < 1e-10

    def test_scalar_posterior_is_one_half(self):
        # y = x with unit prior and unit noise: posterior N(1/2, 1/2).
        lut = constant_atm_lut([1000.0], [0.0], [0.0], [1.0])
        fm = build_model(lut)
        comp = component_from_arrays("c", np.zeros(1), np.eye(1))
        prior = assemble_prior(comp)
        problem = RetrievalProblem(fm, np.array([1.0]), np.array([1.0]), prior)
        res = solve_map(problem, options=TIGHT)
        cov = laplace_cov(problem, res.state)
        assert res.state.refl[0] == pytest.approx(0.5, abs=1e-10)
        assert cov.values[0, 0] == pytest.approx(0.5, abs=1e-10)
        # Flat atmospheric response: those coordinates stay at the prior.
        assert res.state.aod == pytest.approx(0.2, abs=1e-10)
        assert res.state.h2o == pytest.approx(1.5, abs=1e-10)


class TestDegenerateInformation:
    def test_huge_noise_returns_prior_mean(self):
        rng = np.random.default_rng(2)
        lut = smooth_lut(np.linspace(500, 2200, 5), np.linspace(0, 1, 4), np.linspace(0, 3, 4))
        fm = build_model(lut)
        prior = make_prior(rng, 5)
        y = fm.forward(prior.mode_state()) + rng.normal(0, 0.01, 5)
        problem = RetrievalProblem(fm, y, np.full(5, 1e12), prior)
        res = solve_map(problem, options=TIGHT)
        assert np.max(np.abs(res.state.as_array() - prior.mean)) < 1e-8

    def test_zero_response_gives_prior_covariance(self):
        rng = np.random.default_rng(3)
        n = 4
        w = np.linspace(500, 2000, n)
        lut = constant_atm_lut(w, np.full(n, 0.05), np.zeros(n), np.zeros(n))
        fm = build_model(lut)
        prior = make_prior(rng, n)
        y = fm.geom.coeff * 0.05 + rng.normal(0, 1e-3, n)
        problem = RetrievalProblem(fm, y, np.full(n, 1e-6), prior)
        res = solve_map(problem)
        # Constant forward: gradient vanishes at the prior mean immediately.
        assert res.n_iterations == 1
        assert np.array_equal(res.state.as_array(), prior.mean)
        got = laplace_cov(problem, res.state).values
        want = prior.cov.values
        assert np.linalg.norm(got - want) / np.linalg.norm(want) < 1e-12


class TestNonlinear:
    def _problem(self, seed=4, n=5, snr_sigma=5e-4):
        rng = np.random.default_rng(seed)
        w = np.linspace(450, 2400, n)
        lut = smooth_lut(w, np.linspace(0.0, 1.3, 8), np.linspace(0.0, 4.0, 7), s_level=0.12)
        fm = build_model(lut)
        prior = make_prior(rng, n, atm_mean=(0.4, 1.6), atm_var=(0.25, 0.5))
        truth = StateVector(rng.uniform(0.15, 0.55, n), 0.52, 1.85)
        y = fm.forward(truth) + rng.normal(0, snr_sigma, n)
        return RetrievalProblem(fm, y, np.full(n, snr_sigma**2), prior), truth

    def test_gradient_matches_finite_differences(self):
        problem, truth = self._problem()
        from specbayes.optimal_estimation import _evaluate, _prior_precision

        x = truth.as_array() + 0.01
        prec = _prior_precision(problem.prior)
        _, grad, _ = _evaluate(problem, x, prec, clamp=True)
        fd = np.empty_like(x)
        for k in range(x.size):
            h = 1e-6 * max(1.0, abs(x[k]))
            xp, xm = x.copy(), x.copy()
            xp[k] += h
            xm[k] -= h
            fd[k] = (map_cost(problem, xp, clamp=True) - map_cost(problem, xm, clamp=True)) / (2 * h)
        assert np.allclose(grad, fd, rtol=2e-4, atol=1e-7 * max(1.0, np.max(np.abs(fd))))

    def test_prior_mode_is_exact_fixed_point(self):
        # Exact radiance at the prior mode makes the mode the global MAP:
        # both cost terms are zero there and nonnegative everywhere else.
        problem, _ = self._problem(seed=4)
        prior = problem.prior
        y = problem.model.forward(prior.mode_state())
        exact = RetrievalProblem(problem.model, y, problem.obs_var, prior)
        x0 = prior.mean + np.concatenate([np.full(problem.model.n, 0.05), [0.2, -0.3]])
        res = solve_map(exact, x0=x0)
        assert res.converged
        assert np.max(np.abs(res.state.as_array() - prior.mean)) < 1e-5

    def test_converges_with_default_options(self):
        problem, _ = self._problem(seed=5)
        res = solve_map(problem)
        assert res.converged
        x = res.state.as_array()
        assert res.grad_norm <= 1e-3 * max(1.0, np.linalg.norm(x))
        assert res.cost <= map_cost(problem, problem.prior.mean, clamp=True)

    def test_x0_forms_agree(self):
        problem, truth = self._problem(seed=6)
        a = solve_map(problem, x0=truth)
        b = solve_map(problem, x0=truth.as_array())
        assert np.array_equal(a.state.as_array(), b.state.as_array())


class TestMaskedChannels:
    def test_masked_data_is_inert(self):
        rng = np.random.default_rng(7)
        n = 6
        w = np.linspace(450, 2400, n)
        lut = smooth_lut(w, np.linspace(0, 1, 5), np.linspace(0, 3, 5))
        mask = np.array([True, False, True, True, False, True])
        fm = build_model(lut, mask=mask)
        prior = make_prior(rng, n)
        y = fm.forward(prior.mode_state()) + rng.normal(0, 1e-3, n)
        var = np.full(n, 1e-6)

        y2 = y.copy()
        y2[~mask] += rng.uniform(5.0, 9.0, 2)
        res1 = solve_map(RetrievalProblem(fm, y, var, prior), options=TIGHT)
        res2 = solve_map(RetrievalProblem(fm, y2, var, prior), options=TIGHT)
        assert np.array_equal(res1.state.as_array(), res2.state.as_array())
        c1 = laplace_cov(RetrievalProblem(fm, y, var, prior), res1.state)
        c2 = laplace_cov(RetrievalProblem(fm, y2, var, prior), res2.state)
        assert np.array_equal(c1.values, c2.values)


class TestBoundaryAndSigns:
    def test_negative_aod_map_on_extended_grid(self):
        # The table is the model: grids may start below zero, and a scene
        # generated there must pull the MAP below zero too.
        n = 4
        w = np.linspace(500, 2300, n)
        lut = smooth_lut(w, np.linspace(-0.3, 1.0, 8), np.linspace(0.0, 3.0, 7), s_level=0.08)
        fm = build_model(lut)
        # Tight reflectance prior centered on the truth: absorbing an
        # atmospheric shift into reflectance is expensive, so the aerosol
        # coordinate is pinned near its true, negative value.
        comp = component_from_arrays("c", np.full(n, 0.3), 1.6e-5 * np.eye(n))
        prior = assemble_prior(comp, atm_mean=(0.2, 1.5), atm_var=(1.0, 1.0))
        truth = StateVector(np.full(n, 0.3), -0.1, 1.4)
        y = fm.forward(truth)
        problem = RetrievalProblem(fm, y, np.full(n, 1e-8), prior)
        res = solve_map(problem)
        assert res.converged
        assert res.state.aod < -0.05
        assert res.state.aod == pytest.approx(-0.1, abs=1e-3)
        assert not res.boundary_clamped

    def test_boundary_flag_set_when_map_leaves_table(self):
        n = 3
        w = np.linspace(500, 2000, n)
        lut = constant_atm_lut(w, np.full(n, 0.03), np.zeros(n), np.full(n, 0.8))
        fm = build_model(lut)
        comp = component_from_arrays("c", np.full(n, 0.3), 0.04 * np.eye(n))
        prior = assemble_prior(comp, atm_mean=(1.5, 1.0), atm_var=(0.01, 0.01))
        y = fm.forward(StateVector(np.full(n, 0.3), 0.5, 1.0))
        res = solve_map(RetrievalProblem(fm, y, np.full(n, 1e-6), prior))
        # Flat atmospheric response: the MAP sits at the prior mean aod=1.5,
        # outside the tabulated [0, 1].
        assert res.state.aod == pytest.approx(1.5, abs=1e-8)
        assert res.boundary_clamped

    def test_diverges_when_no_finite_step_exists(self):
        # Forward model valid only at the starting point: every trial step
        # is singular, so the damping loop exhausts its budget.
        from specbayes.exceptions import ForwardSingularityError

        class BrokenModel:
            n = 1
            mask = np.array([True])

            def forward(self, state, *, clamp=False):
                if state.refl[0] == 0.0:
                    return np.array([0.5])
                raise ForwardSingularityError(0, 0.0)

            def jacobian(self, state, *, clamp=False):
                jac = np.zeros((1, 3))
                jac[0, 0] = 1.0
                return jac

            def contains(self, aod, h2o):
                return True

        comp = component_from_arrays("c", np.zeros(1), np.eye(1))
        prior = assemble_prior(comp)
        problem = RetrievalProblem(BrokenModel(), np.array([1.0]), np.array([1e-4]), prior)
        with pytest.raises(DivergedError, match="damping"):
            solve_map(problem)


class TestIllConditioned:
    def test_condition_limit_raises(self):
        n = 2
        w = np.array([500.0, 1000.0])
        lut = constant_atm_lut(w, np.zeros(n), np.zeros(n), np.zeros(n))
        fm = build_model(lut)
        comp = component_from_arrays("c", np.zeros(n), np.diag([1.0, 1e-14]))
        prior = assemble_prior(comp)
        problem = RetrievalProblem(fm, np.zeros(n), np.ones(n), prior)
        with pytest.raises(IllConditionedError) as err:
            laplace_cov(problem, prior.mode_state())
        assert err.value.cond_estimate > 1e12


class TestValidation:
    def _fm(self, n=3):
        w = np.linspace(500, 2000, n)
        return build_model(constant_atm_lut(w, np.zeros(n), np.zeros(n), np.ones(n)))

    def test_problem_shape_checks(self):
        fm = self._fm()
        comp = component_from_arrays("c", np.zeros(3), np.eye(3))
        prior = assemble_prior(comp)
        with pytest.raises(ValueError, match="y_obs"):
            RetrievalProblem(fm, np.zeros(4), np.ones(3), prior)
        with pytest.raises(ValueError, match="obs_var"):
            RetrievalProblem(fm, np.zeros(3), np.ones(4), prior)
        with pytest.raises(ValueError, match="positive"):
            RetrievalProblem(fm, np.zeros(3), np.array([1.0, 0.0, 1.0]), prior)
        with pytest.raises(ValueError, match="non-finite"):
            RetrievalProblem(fm, np.array([1.0, np.nan, 0.0]), np.ones(3), prior)
        comp2 = component_from_arrays("c", np.zeros(2), np.eye(2))
        with pytest.raises(ValueError, match="channels"):
            RetrievalProblem(fm, np.zeros(3), np.ones(3), assemble_prior(comp2))

    def test_options_validation(self):
        with pytest.raises(ValueError, match="max_iterations"):
            OeOptions(max_iterations=0)
        with pytest.raises(ValueError, match="grad_tol"):
            OeOptions(grad_tol=0.0)
        with pytest.raises(ValueError, match="damping"):
            OeOptions(lm_reject_factor=1.0)

    def test_bad_x0_rejected(self):
        fm = self._fm()
        comp = component_from_arrays("c", np.zeros(3), np.eye(3))
        prior = assemble_prior(comp)
        problem = RetrievalProblem(fm, np.zeros(3), np.ones(3), prior)
        with pytest.raises(ValueError, match="x0"):
            solve_map(problem, x0=np.zeros(3))
        with pytest.raises(ValueError, match="non-finite"):
            solve_map(problem, x0=np.full(5, np.nan))

    def test_max_iterations_warns(self):
        problem_factory = TestNonlinear()
        problem, _ = problem_factory._problem(seed=9)
        with pytest.warns(RuntimeWarning, match="max_iterations"):
            res = solve_map(problem, options=OeOptions(max_iterations=1, grad_tol=1e-15, cost_rtol=1e-16))
        assert not res.converged
        assert res.n_iterations == 1
