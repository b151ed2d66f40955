"""MAP retrieval by damped Gauss-Newton, plus the Laplace covariance.

The posterior for one spectrum combines a Gaussian likelihood (diagonal
measurement covariance, masked channels carry zero weight) with the joint
Gaussian prior over reflectance and atmosphere.  ``solve_map`` minimizes the
negative log posterior; ``laplace_cov`` inverts the Gauss-Newton Hessian at
the solution.  Out-of-table atmospheric iterates are handled by clamped
lookups, so the cost is flat beyond the grid and iterates are never rejected
for leaving it.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .exceptions import (
    DivergedError,
    ForwardSingularityError,
    IllConditionedError,
)
from .linalg import SpdMatrix
from .model import ForwardModel, StateVector
from .priors import GaussianPrior


@dataclass(frozen=True)
class RetrievalProblem:
    """One spectrum to invert: forward model, measurement, noise, prior."""

    model: ForwardModel
    y_obs: np.ndarray
    obs_var: np.ndarray
    prior: GaussianPrior

    def __post_init__(self):
        y = np.asarray(self.y_obs, dtype=float)
        v = np.asarray(self.obs_var, dtype=float)
        n = self.model.n
        if y.shape != (n,):
            raise ValueError(f"y_obs must have shape ({n},), got {y.shape}")
        if not np.all(np.isfinite(y)):
            raise ValueError("y_obs contains non-finite values")
        if v.shape != (n,):
            raise ValueError(f"obs_var must have shape ({n},), got {v.shape}")
        if not np.all(np.isfinite(v)) or np.any(v <= 0):
            raise ValueError("obs_var entries must be positive and finite")
        if self.prior.n_refl != n:
            raise ValueError(
                f"prior covers {self.prior.n_refl} channels, model has {n}"
            )
        object.__setattr__(self, "y_obs", y)
        object.__setattr__(self, "obs_var", v)
        # Masked channels contribute nothing to the misfit or its derivatives.
        object.__setattr__(
            self, "weights", np.where(self.model.mask, 1.0 / v, 0.0)
        )

    @property
    def dim(self) -> int:
        return self.model.n + 2


@dataclass(frozen=True)
class OeOptions:
    """Stopping rules and damping schedule for the Gauss-Newton solver."""

    max_iterations: int = 200
    cost_rtol: float = 1e-8
    grad_tol: float = 1e-6
    lm_lambda0: float = 1e-4
    lm_accept_factor: float = 3.0
    lm_reject_factor: float = 10.0
    lm_max_rejects: int = 50
    cond_limit: float = 1e12

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        for name in ("cost_rtol", "grad_tol", "lm_lambda0", "cond_limit"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.lm_accept_factor < 1 or self.lm_reject_factor <= 1:
            raise ValueError("damping factors must decrease/increase the damping")
        if self.lm_max_rejects < 1:
            raise ValueError("lm_max_rejects must be at least 1")


@dataclass(frozen=True)
class OeResult:
    """MAP estimate with solver bookkeeping."""

    state: StateVector
    cost: float
    grad_norm: float
    n_iterations: int
    converged: bool
    boundary_clamped: bool


def map_cost(problem: RetrievalProblem, x: np.ndarray, *, clamp: bool = False) -> float:
    """Negative log posterior up to an additive constant.

    Equal to half the weighted data misfit plus half the prior quadratic
    form; the samplers negate this same quantity, so the two agree exactly.
    """
    x = np.asarray(x, dtype=float)
    state = StateVector.from_array(x)
    f = problem.model.forward(state, clamp=clamp)
    r = problem.y_obs - f
    misfit = float(np.dot(problem.weights * r, r))
    return 0.5 * (misfit + problem.prior.quad(x))


def _prior_precision(prior: GaussianPrior) -> np.ndarray:
    """Block-diagonal inverse of the prior covariance."""
    n = prior.n_refl
    prec = np.zeros((prior.dim, prior.dim))
    prec[:n, :n] = prior.refl_cov.inv()
    prec[n:, n:] = prior.atm_cov.inv()
    return prec


def _evaluate(problem, x, prec, *, clamp):
    """Cost, gradient, and Gauss-Newton Hessian at ``x``."""
    state = StateVector.from_array(x)
    f = problem.model.forward(state, clamp=clamp)
    jac = problem.model.jacobian(state, clamp=clamp)
    r = problem.y_obs - f
    wr = problem.weights * r
    cost = 0.5 * (float(np.dot(wr, r)) + problem.prior.quad(x))
    grad = prec @ (x - problem.prior.mean) - jac.T @ wr
    hess = prec + jac.T @ (problem.weights[:, None] * jac)
    return cost, grad, 0.5 * (hess + hess.T)


def _try_solve_spd(mat: np.ndarray, rhs: np.ndarray):
    """Cholesky solve, or None if the matrix is not numerically SPD."""
    try:
        chol = np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        return None
    return scipy.linalg.cho_solve((chol, True), rhs)


def _coerce_x0(x0, problem: RetrievalProblem) -> np.ndarray:
    if x0 is None:
        return problem.prior.mean.copy()
    if isinstance(x0, StateVector):
        x0 = x0.as_array()
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (problem.dim,):
        raise ValueError(f"x0 must have {problem.dim} entries, got shape {x0.shape}")
    if not np.all(np.isfinite(x0)):
        raise ValueError("x0 contains non-finite values")
    return x0.copy()


def solve_map(
    problem: RetrievalProblem,
    x0=None,
    options: OeOptions | None = None,
) -> OeResult:
    """Minimize the negative log posterior from ``x0`` (default: prior mean).

    Gauss-Newton steps with multiplicative damping on the Hessian diagonal:
    an accepted step divides the damping by ``lm_accept_factor``, a rejected
    one multiplies it by ``lm_reject_factor``.  Stops when the gradient norm
    falls below ``grad_tol * max(1, |x|)``, when an accepted step changes the
    cost by less than ``cost_rtol`` relatively, or at ``max_iterations``
    (reported as ``converged=False`` with a warning).  Raises
    :class:`DivergedError` when ``lm_max_rejects`` consecutive trial steps
    fail to decrease the cost.
    """
    opt = options if options is not None else OeOptions()
    n = problem.model.n
    x = _coerce_x0(x0, problem)
    prec = _prior_precision(problem.prior)
    lam = opt.lm_lambda0
    boundary_clamped = not problem.model.contains(x[n], x[n + 1])
    cost = map_cost(problem, x, clamp=True)
    if not np.isfinite(cost):
        raise ValueError("initial state has non-finite cost")

    converged = False
    n_iterations = 0
    for iteration in range(1, opt.max_iterations + 1):
        n_iterations = iteration
        cost, grad, hess = _evaluate(problem, x, prec, clamp=True)
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm <= opt.grad_tol * max(1.0, float(np.linalg.norm(x))):
            converged = True
            break

        scale = np.diag(np.diag(hess))
        rejects = 0
        while True:
            step = _try_solve_spd(hess + lam * scale, -grad)
            trial_cost = np.inf
            if step is not None:
                try:
                    trial_cost = map_cost(problem, x + step, clamp=True)
                except ForwardSingularityError:
                    trial_cost = np.inf
            if np.isfinite(trial_cost) and trial_cost <= cost:
                x = x + step
                lam /= opt.lm_accept_factor
                break
            lam *= opt.lm_reject_factor
            rejects += 1
            if rejects > opt.lm_max_rejects:
                raise DivergedError(
                    f"no cost decrease after {rejects} damping increases "
                    f"at iteration {iteration}"
                )

        if not problem.model.contains(x[n], x[n + 1]):
            boundary_clamped = True
        if abs(cost - trial_cost) <= opt.cost_rtol * max(1.0, abs(cost)):
            cost = trial_cost
            converged = True
            break
        cost = trial_cost
    else:
        warnings.warn(
            f"MAP solve stopped at max_iterations={opt.max_iterations} "
            "without meeting a convergence criterion",
            RuntimeWarning,
        )

    cost, grad, _ = _evaluate(problem, x, prec, clamp=True)
    return OeResult(
        state=StateVector.from_array(x),
        cost=cost,
        grad_norm=float(np.linalg.norm(grad)),
        n_iterations=n_iterations,
        converged=converged,
        boundary_clamped=boundary_clamped,
    )


def laplace_cov(
    problem: RetrievalProblem,
    state: StateVector | np.ndarray,
    options: OeOptions | None = None,
) -> SpdMatrix:
    """Invert the Gauss-Newton Hessian at ``state``.

    Raises :class:`IllConditionedError` when the Hessian's spectral
    condition number exceeds ``options.cond_limit`` (the inverse would not
    be trustworthy as a covariance).
    """
    opt = options if options is not None else OeOptions()
    x = state.as_array() if isinstance(state, StateVector) else np.asarray(state, dtype=float)
    prec = _prior_precision(problem.prior)
    _, _, hess = _evaluate(problem, x, prec, clamp=True)
    eigs = np.linalg.eigvalsh(hess)
    cond = float(eigs[-1] / eigs[0]) if eigs[0] > 0 else float("inf")
    if not np.isfinite(cond) or cond > opt.cond_limit:
        raise IllConditionedError(
            f"posterior Hessian has condition number {cond:.3e}, "
            f"beyond the limit {opt.cond_limit:.1e}",
            cond_estimate=cond,
        )
    cov = SpdMatrix(hess, label="posterior Hessian").inv()
    return SpdMatrix(cov, label="Laplace covariance")
