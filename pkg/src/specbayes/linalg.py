"""Dense SPD matrix services used across the retrieval.

Everything here is deliberately small and explicit: a symmetric
positive-definite matrix wrapper with a cached Cholesky factor, Gaussian
and nonnegativity-truncated Gaussian sampling, generalized eigenvalues via
Cholesky reduction, and the posterior covariance of a conditionally linear
Gaussian model with diagonal response.

All random draws consume a caller-provided ``numpy.random.Generator`` so a
run is reproducible from a single seed.
"""

from __future__ import annotations

import math
import warnings

import numpy as np
import scipy.linalg
from scipy.special import ndtr, ndtri

from .exceptions import FactorizationError

_SYM_RTOL = 1e-12

# Fixed Gauss-Legendre rules for the bivariate normal orthant probability:
# one over z for the windowed tail integral (near-degenerate correlation),
# one over the correlation parameter for the moderate-correlation identity.
_GL_X, _GL_W = np.polynomial.legendre.leggauss(64)
_DW_X, _DW_W = np.polynomial.legendre.leggauss(48)


class SpdMatrix:
    """Symmetric positive-definite matrix with a cached Cholesky factor.

    Construction symmetrizes the input, rejects matrices whose asymmetry
    exceeds 1e-12 relative to the largest entry, and factors immediately so
    that a non-SPD matrix fails loudly at the construction site. The factor
    is computed once and reused by every solve.
    """

    __slots__ = ("values", "_chol")

    def __init__(self, values, *, label: str | None = None):
        a = np.array(values, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise FactorizationError(
                f"expected a square matrix, got shape {a.shape}"
                + (f" for {label}" if label else "")
            )
        if not np.all(np.isfinite(a)):
            raise FactorizationError(
                "matrix has non-finite entries" + (f" in {label}" if label else "")
            )
        scale = float(np.max(np.abs(a))) if a.size else 0.0
        asym = float(np.max(np.abs(a - a.T))) if a.size else 0.0
        if scale == 0.0 or asym > _SYM_RTOL * scale:
            if scale == 0.0:
                msg = "zero matrix is not positive definite"
            else:
                msg = (
                    f"matrix asymmetry {asym:.3e} exceeds {_SYM_RTOL:g} "
                    f"relative to max entry {scale:.3e}"
                )
            raise FactorizationError(msg + (f" in {label}" if label else ""))
        self.values = 0.5 * (a + a.T)
        try:
            self._chol = np.linalg.cholesky(self.values)
        except np.linalg.LinAlgError as exc:
            raise FactorizationError(
                "matrix is not positive definite"
                + (f" in {label}" if label else "")
            ) from exc

    @classmethod
    def from_diag(cls, diag, *, label: str | None = None) -> "SpdMatrix":
        d = np.asarray(diag, dtype=float)
        if d.ndim != 1:
            raise FactorizationError("from_diag expects a 1-D array")
        return cls(np.diag(d), label=label)

    @classmethod
    def _presymmetrized(cls, values: np.ndarray, *, label: str | None = None) -> "SpdMatrix":
        """Wrap a matrix already known to be exactly symmetric and finite.

        Skips the construction checks; for callers that build the matrix
        themselves in a tight loop.  The Cholesky factorization, and with it
        the positive-definiteness guarantee, still runs.
        """
        obj = cls.__new__(cls)
        obj.values = values
        try:
            obj._chol = np.linalg.cholesky(values)
        except np.linalg.LinAlgError as exc:
            raise FactorizationError(
                "matrix is not positive definite"
                + (f" in {label}" if label else "")
            ) from exc
        return obj

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    @property
    def chol(self) -> np.ndarray:
        """Lower-triangular factor L with values = L @ L.T."""
        return self._chol

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self._chol))))

    def solve(self, b: np.ndarray) -> np.ndarray:
        return scipy.linalg.cho_solve((self._chol, True), np.asarray(b, dtype=float))

    def inv(self) -> np.ndarray:
        out = scipy.linalg.cho_solve((self._chol, True), np.eye(self.dim))
        return 0.5 * (out + out.T)

    def quad(self, dx: np.ndarray) -> float:
        """Quadratic form dx.T @ inv(values) @ dx."""
        if self.values.shape[0] == 2:
            # Forward substitution spelled out; the call overhead of the
            # general solver dominates an MCMC iteration at this size.
            low = self._chol
            z0 = dx[0] / low[0, 0]
            z1 = (dx[1] - low[1, 0] * z0) / low[1, 1]
            return float(z0 * z0 + z1 * z1)
        z = scipy.linalg.solve_triangular(
            self._chol, np.asarray(dx, dtype=float), lower=True, check_finite=False
        )
        return float(z @ z)

    def scaled(self, factor: float) -> "SpdMatrix":
        if factor <= 0:
            raise FactorizationError(f"scale factor must be positive, got {factor}")
        return SpdMatrix(factor * self.values)

    def __repr__(self) -> str:
        return f"SpdMatrix(dim={self.dim})"


def sample_mvn(mean: np.ndarray, cov: SpdMatrix, rng: np.random.Generator) -> np.ndarray:
    """One draw from N(mean, cov) via mean + L z."""
    mean = np.asarray(mean, dtype=float)
    if mean.shape != (cov.dim,):
        raise ValueError(f"mean has shape {mean.shape}, expected ({cov.dim},)")
    z = rng.standard_normal(cov.dim)
    return mean + cov.chol @ z


_SQRT_2PI = math.sqrt(2.0 * math.pi)


def _std_bvn_upper(a: float, b: float, rho: float) -> float:
    """P(Z1 >= a, Z2 >= b) for standard bivariate normal with correlation rho.

    Written as the 1-D integral of phi(z) * Phi_bar((b - rho z)/c) over
    z >= a with c = sqrt(1 - rho^2). The conditional factor is flat (0 or 1
    to machine precision) outside a transition window around z = b/rho, so
    the flat side is accumulated exactly from the normal CDF and only the
    window is integrated, with piecewise Gauss-Legendre panels no wider than
    three z-units. That keeps the rule accurate both for small |rho| (broad
    window, clipped to the effective support) and near degeneracy (narrow
    step-like window).
    """
    if abs(rho) >= 1.0 - 1e-12:
        if rho > 0:
            return float(ndtr(-max(a, b)))
        return float(max(0.0, ndtr(-b) - ndtr(a)))
    if a <= -7.0 and b <= -7.0:
        # Quadrant mass within 1.3e-12 of 1, below the quadrature accuracy.
        return 1.0
    if a >= 8.3 or b >= 8.3:
        # Mass below ~5e-17; a crude product bound is plenty here.
        c = math.sqrt(1.0 - rho * rho)
        tail = ndtr(-a) * ndtr(-(b - rho * a) / c)
        return float(min(max(tail, 0.0), 1.0))
    if rho == 0.0:
        return float(ndtr(-a) * ndtr(-b))
    if abs(rho) <= 0.925:
        # Integrate the bivariate density over the correlation parameter
        # (the Drezner-Wesolowsky identity): the integrand is analytic on
        # [0, rho], so the fixed rule is accurate to well below 1e-12 and
        # much cheaper than quadrature in z.
        half = 0.5 * rho
        r = half * (_DW_X + 1.0)
        omr2 = 1.0 - r * r
        num = a * a + b * b - 2.0 * a * b * r
        integral = half * float(
            _DW_W @ (np.exp(-0.5 * num / omr2) / np.sqrt(omr2))
        )
        total = ndtr(-a) * ndtr(-b) + integral / (2.0 * math.pi)
        return float(min(max(total, 0.0), 1.0))

    c = math.sqrt(1.0 - rho * rho)
    lo = max(a, -8.6)
    hi = 9.0
    z1 = (b - 8.0 * c) / rho
    z2 = (b + 8.0 * c) / rho
    zl, zu = (z1, z2) if z1 <= z2 else (z2, z1)

    total = 0.0
    if rho > 0:
        # g == 1 (to 6e-16) for z >= zu
        total += float(ndtr(-max(lo, zu)))
    else:
        # g == 1 for z <= zl
        upper = min(zl, hi)
        if upper > lo:
            total += float(ndtr(upper) - ndtr(lo))
    qlo = max(lo, zl)
    qhi = min(hi, zu)
    if qhi > qlo:
        n_panels = max(1, int(math.ceil((qhi - qlo) / 3.0)))
        edges = np.linspace(qlo, qhi, n_panels + 1)
        half = 0.5 * (edges[1] - edges[0])
        mids = 0.5 * (edges[:-1] + edges[1:])
        z = (mids[:, None] + half * _GL_X[None, :]).ravel()
        f = np.exp(-0.5 * z * z) / _SQRT_2PI * ndtr(-(b - rho * z) / c)
        w = np.tile(half * _GL_W, n_panels)
        total += float(w @ f)
    return float(min(max(total, 0.0), 1.0))


def nonneg_orthant_mass(mean, cov) -> float:
    """P(X1 >= 0, X2 >= 0) for X ~ N(mean, cov), 2-D, deterministic.

    ``cov`` may be an SpdMatrix or a plain 2x2 array. Accurate to roughly
    1e-10 for |rho| <= 0.99 and a few digits less very close to
    degeneracy; always deterministic, which is what the Metropolis
    truncation correction requires.
    """
    mean = np.asarray(mean, dtype=float)
    c = cov.values if isinstance(cov, SpdMatrix) else np.asarray(cov, dtype=float)
    if mean.shape != (2,) or c.shape != (2, 2):
        raise ValueError("nonneg_orthant_mass is defined for the 2-D case only")
    s1 = math.sqrt(c[0, 0])
    s2 = math.sqrt(c[1, 1])
    rho = c[0, 1] / (s1 * s2)
    rho = min(max(rho, -1.0), 1.0)
    a = -mean[0] / s1
    b = -mean[1] / s2
    return _std_bvn_upper(a, b, rho)


def _truncated_normal_1d(mu: float, sigma: float, rng: np.random.Generator) -> float:
    """Inverse-CDF draw from N(mu, sigma^2) conditioned on x >= 0."""
    alpha = -mu / sigma
    tail = float(ndtr(-alpha))  # P(Z >= alpha)
    if tail <= 0.0:
        return 0.0
    u = rng.random() * tail
    # P(Z >= z) = u  =>  z = -ndtri(u); stable because u is small when the
    # tail is small and ndtri is accurate near 0.
    z = -ndtri(max(u, 5e-324))
    return mu + sigma * z


def sample_truncated_mvn_nonneg(
    mean,
    cov: SpdMatrix,
    rng: np.random.Generator,
    *,
    mass_floor: float = 1e-6,
) -> tuple[np.ndarray, float]:
    """Draw from N(mean, cov) restricted to the nonnegative quadrant.

    Returns (sample, mass) where mass is the deterministic probability of
    the quadrant under the untruncated Gaussian; it is the normalization the
    Metropolis-Hastings correction needs. Sampling is by rejection from the
    untruncated Gaussian. When the quadrant mass falls below ``mass_floor``
    the sampler falls back to coordinatewise inverse-CDF truncated draws
    (ignoring cross-correlation) and warns, since rejection would be
    hopeless there.
    """
    mean = np.asarray(mean, dtype=float)
    if cov.dim != 2 or mean.shape != (2,):
        raise ValueError("truncated sampler is defined for the 2-D case only")
    mass = nonneg_orthant_mass(mean, cov)
    if mass < mass_floor:
        warnings.warn(
            f"quadrant mass {mass:.3e} below {mass_floor:g}; falling back to "
            "coordinatewise truncated sampling",
            RuntimeWarning,
            stacklevel=2,
        )
        s1 = math.sqrt(cov.values[0, 0])
        s2 = math.sqrt(cov.values[1, 1])
        out = np.array(
            [
                _truncated_normal_1d(mean[0], s1, rng),
                _truncated_normal_1d(mean[1], s2, rng),
            ]
        )
        return out, mass

    chol_t = cov.chol.T
    chunk = 1
    drawn = 0
    limit = int(math.ceil(50.0 / mass)) + 1000
    while drawn < limit:
        z = rng.standard_normal((chunk, 2))
        x = mean + z @ chol_t
        ok = np.nonzero((x[:, 0] >= 0.0) & (x[:, 1] >= 0.0))[0]
        if ok.size:
            return x[ok[0]].copy(), mass
        drawn += chunk
        chunk = min(chunk * 8, 4096)
    # Unreachable in practice given the mass bound; keep a safe exit.
    warnings.warn(
        "rejection sampling exhausted its draw budget; using coordinatewise fallback",
        RuntimeWarning,
        stacklevel=2,
    )
    s1 = math.sqrt(cov.values[0, 0])
    s2 = math.sqrt(cov.values[1, 1])
    out = np.array(
        [
            _truncated_normal_1d(mean[0], s1, rng),
            _truncated_normal_1d(mean[1], s2, rng),
        ]
    )
    return out, mass


def generalized_eigvals(a: SpdMatrix, b: SpdMatrix) -> np.ndarray:
    """Eigenvalues of the pencil (a, b), descending.

    Solves det(a - sigma b) = 0 by reducing with b = L L^T to the standard
    symmetric problem L^-1 a L^-T.
    """
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    low = b.chol
    c = scipy.linalg.solve_triangular(low, a.values, lower=True)
    c = scipy.linalg.solve_triangular(low, c.T, lower=True)
    c = 0.5 * (c + c.T)
    w = scipy.linalg.eigvalsh(c)
    return w[::-1].copy()


def linear_posterior_cov(
    a_diag: np.ndarray,
    prior_refl: SpdMatrix,
    obs_var: np.ndarray,
) -> SpdMatrix:
    """Posterior covariance of a linear-Gaussian model with diagonal response.

    For y = A x + b + noise with A = diag(a_diag), prior N(mu, prior_refl)
    and independent noise variances obs_var, returns

        (I - prior A^T (A prior A^T + diag(obs_var))^-1 A) prior,

    symmetrized. Channels that should carry no information (masked) are
    handled by passing a_diag = 0 at those positions, which is algebraically
    identical to excluding them.
    """
    a_diag = np.asarray(a_diag, dtype=float)
    obs_var = np.asarray(obs_var, dtype=float)
    n = prior_refl.dim
    if a_diag.shape != (n,) or obs_var.shape != (n,):
        raise ValueError(
            f"dimension mismatch: a_diag {a_diag.shape}, obs_var {obs_var.shape}, "
            f"prior dim {n}"
        )
    if np.any(obs_var <= 0):
        raise ValueError("observation variances must be positive")
    b = a_diag[:, None] * prior_refl.values  # A @ prior
    gy = b * a_diag[None, :]
    gy[np.diag_indices(n)] += obs_var
    try:
        cho = np.linalg.cholesky(gy)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError("data-space covariance is not positive definite") from exc
    s = scipy.linalg.cho_solve((cho, True), b)
    out = prior_refl.values - b.T @ s
    out = 0.5 * (out + out.T)
    return SpdMatrix(out)
