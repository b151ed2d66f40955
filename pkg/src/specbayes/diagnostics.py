"""Chain quality and posterior-comparison diagnostics.

Three groups of tools:

* Sampling efficiency: integrated autocorrelation time per parameter and the
  effective sample size derived from it.
* Covariance comparison: scalar distances between two posterior covariance
  estimates (trace, Frobenius, and a generalized-eigenvalue metric), and the
  per-direction variance quotient along the eigenvectors of a reference
  covariance.
* Gaussianity checks for scalar marginals: one-sample Kolmogorov-Smirnov
  tests and Q-Q data against a normal or zero-truncated normal null.

Everything here is a pure function of sample arrays; nothing mutates a chain
or touches the forward model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
import scipy.fft
import scipy.linalg
import scipy.optimize
import scipy.special
import scipy.stats

from .exceptions import DegenerateSeriesError, FactorizationError
from .linalg import SpdMatrix, generalized_eigvals

_SQRT2 = math.sqrt(2.0)

# Eigendirections with eigenvalue below this fraction of the largest one are
# flagged unreliable: the variance quotient divides by the eigenvalue, so a
# near-null direction turns rounding noise into an arbitrary ratio.
_RELIABLE_EIGVAL_FACTOR = 1e-12

_KNOWN_NULLS = ("normal", "truncated_normal_at_zero")


# ---------------------------------------------------------------------------
# autocorrelation time and effective sample size
# ---------------------------------------------------------------------------


def autocorr_time(series) -> float:
    """Integrated autocorrelation time of a scalar series.

    Estimates tau = 1 + 2 * sum of autocorrelations, truncating the sum with
    the initial-positive-sequence rule: consecutive lag pairs
    rho(2m) + rho(2m+1) are accumulated until the first non-positive pair.
    The result is clamped to at least 1.  A constant series carries no
    information about mixing, so tau is defined as the series length (one
    effective sample); ``ess`` flags that case as degenerate.

    Needs at least 100 finite values.
    """
    x = np.asarray(series, dtype=float)
    if x.ndim != 1:
        raise ValueError(f"expected a 1-d series, got shape {x.shape}")
    n = x.size
    if n < 100:
        raise ValueError(f"need at least 100 samples to estimate tau, got {n}")
    if not np.all(np.isfinite(x)):
        raise ValueError("series contains non-finite values")
    if np.all(x == x[0]):
        return float(n)

    # Autocovariance via FFT, zero-padded so circular wraparound never
    # reaches the lags we keep.  The 1/n-vs-1/(n-k) normalization cancels
    # when dividing by the lag-0 value.
    x = x - x.mean()
    m = scipy.fft.next_fast_len(2 * n)
    f = scipy.fft.rfft(x, m)
    acov = scipy.fft.irfft(f * np.conj(f), m)[:n]
    if acov[0] <= 0.0:
        return float(n)
    rho = acov / acov[0]

    n_pairs = n // 2
    gamma = rho[0 : 2 * n_pairs : 2] + rho[1 : 2 * n_pairs : 2]
    nonpos = np.nonzero(gamma <= 0.0)[0]
    cut = int(nonpos[0]) if nonpos.size else n_pairs
    tau = -1.0 + 2.0 * float(np.sum(gamma[:cut]))
    return max(tau, 1.0)


@dataclass(frozen=True)
class EssReport:
    """Per-parameter autocorrelation times and effective sample sizes.

    Column order follows the chain layout: reflectance channels first, then
    the two atmospheric parameters.  ``degenerate`` marks constant columns,
    whose tau is pinned to ``n`` (one effective sample).
    """

    tau: np.ndarray
    ess: np.ndarray
    n: int
    degenerate: np.ndarray

    def __post_init__(self):
        if not (self.tau.shape == self.ess.shape == self.degenerate.shape):
            raise ValueError("tau, ess, and degenerate must have equal shapes")
        if np.any(self.tau < 1.0):
            raise ValueError("tau must be >= 1 everywhere")
        if np.any(self.ess > self.n):
            raise ValueError("ess cannot exceed the number of samples")

    @property
    def summary(self) -> dict:
        """Headline numbers: reflectance min/median/max ESS plus both atm ESS."""
        refl = self.ess[:-2]
        return {
            "refl_min": float(refl.min()),
            "refl_med": float(np.median(refl)),
            "refl_max": float(refl.max()),
            "aod": float(self.ess[-2]),
            "h2o": float(self.ess[-1]),
        }


def _sample_matrix(chain) -> np.ndarray:
    samples = np.asarray(getattr(chain, "samples", chain), dtype=float)
    if samples.ndim != 2:
        raise ValueError(f"expected a 2-d sample array, got shape {samples.shape}")
    return samples


def ess(chain) -> EssReport:
    """Effective sample size n/tau for every parameter of a chain.

    Accepts a ``Chain`` or a plain (n_kept, n_params) array whose last two
    columns are the atmospheric parameters.  Needs at least three columns
    (one reflectance channel plus the two atmospheric ones) and at least 100
    kept samples.
    """
    samples = _sample_matrix(chain)
    n, dim = samples.shape
    if dim < 3:
        raise ValueError(
            f"chain has {dim} columns; need at least one reflectance column "
            "plus the two atmospheric ones"
        )
    tau = np.empty(dim)
    degenerate = np.zeros(dim, dtype=bool)
    for j in range(dim):
        col = samples[:, j]
        if np.all(col == col[0]):
            tau[j] = float(n)
            degenerate[j] = True
        else:
            tau[j] = autocorr_time(col)
    return EssReport(tau=tau, ess=n / tau, n=n, degenerate=degenerate)


# ---------------------------------------------------------------------------
# covariance comparison
# ---------------------------------------------------------------------------


def _as_spd(value, label: str) -> SpdMatrix:
    if isinstance(value, SpdMatrix):
        return value
    return SpdMatrix(np.asarray(value, dtype=float), label=label)


def forstner_distance(a, b) -> float:
    """sqrt(sum of squared log generalized eigenvalues) of the pencil (a, b).

    Zero exactly when the two matrices are equal, symmetric in its arguments
    (the eigenvalues of the swapped pencil are the reciprocals), and invariant
    under a joint change of basis.
    """
    sigma = generalized_eigvals(_as_spd(a, "a"), _as_spd(b, "b"))
    if np.any(sigma <= 0.0):
        raise FactorizationError(
            "generalized eigenvalues not all positive; inputs are too "
            "ill-conditioned to compare"
        )
    return float(np.sqrt(np.sum(np.log(sigma) ** 2)))


@dataclass(frozen=True)
class CovCompare:
    """Scalar distances between a sampled covariance and an approximation."""

    d_tr: float
    d_norm: float
    d_f_raw: float
    d_f_normalized: float

    def __post_init__(self):
        for name in ("d_tr", "d_norm", "d_f_raw", "d_f_normalized"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be nonnegative")


def cov_compare(gamma_m, gamma_l, gamma_pr) -> CovCompare:
    """Distance from a reference covariance to an approximating one.

    ``gamma_m`` is the reference (it normalizes the trace and Frobenius
    differences), ``gamma_l`` the approximation under test, and ``gamma_pr``
    the prior covariance, which normalizes the generalized-eigenvalue metric:
    d_f_normalized = d_f(gamma_m, gamma_l) / d_f(gamma_m, gamma_pr), i.e. the
    disagreement between the two posteriors measured against how far the
    posterior moved from the prior.
    """
    gm = _as_spd(gamma_m, "gamma_m")
    gl = _as_spd(gamma_l, "gamma_l")
    gpr = _as_spd(gamma_pr, "gamma_pr")
    if not (gm.dim == gl.dim == gpr.dim):
        raise ValueError(
            f"dimension mismatch: {gm.dim}, {gl.dim}, {gpr.dim}"
        )
    tr_m = float(np.trace(gm.values))
    d_tr = abs(tr_m - float(np.trace(gl.values))) / tr_m
    d_norm = float(
        np.linalg.norm(gm.values - gl.values) / np.linalg.norm(gm.values)
    )
    d_f_raw = forstner_distance(gm, gl)
    denom = forstner_distance(gm, gpr)
    if denom == 0.0:
        d_f_normalized = 0.0 if d_f_raw == 0.0 else math.inf
    else:
        d_f_normalized = d_f_raw / denom
    return CovCompare(
        d_tr=d_tr, d_norm=d_norm, d_f_raw=d_f_raw, d_f_normalized=d_f_normalized
    )


class EigenDirection(NamedTuple):
    eigval: float
    quotient: float
    eigvec: np.ndarray
    reliable: bool


@dataclass(frozen=True)
class EigenQuotient:
    """Variance of one covariance along the eigendirections of another.

    Direction i is the i-th eigenvector of the reference matrix, ordered by
    descending eigenvalue; ``quotients[i]`` is the approximating matrix's
    variance in that direction divided by the eigenvalue.  A quotient above 1
    means the approximation spreads wider than the reference along that
    direction.  Directions whose eigenvalue is negligible next to the largest
    one are marked unreliable, since the ratio there is dominated by rounding.
    """

    eigvals: np.ndarray
    quotients: np.ndarray
    eigvecs: np.ndarray
    reliable: np.ndarray

    def __len__(self) -> int:
        return self.eigvals.size

    def __getitem__(self, i: int) -> EigenDirection:
        return EigenDirection(
            eigval=float(self.eigvals[i]),
            quotient=float(self.quotients[i]),
            eigvec=self.eigvecs[:, i].copy(),
            reliable=bool(self.reliable[i]),
        )

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


def eigen_quotient(gamma_m, gamma_l) -> EigenQuotient:
    """Directional variance quotients v_i' gamma_l v_i / lambda_i.

    ``v_i`` and ``lambda_i`` are the eigenvectors and eigenvalues of
    ``gamma_m``, sorted by descending eigenvalue.
    """
    gm = _as_spd(gamma_m, "gamma_m")
    gl = _as_spd(gamma_l, "gamma_l")
    if gm.dim != gl.dim:
        raise ValueError(f"dimension mismatch: {gm.dim} vs {gl.dim}")
    w, v = scipy.linalg.eigh(gm.values)
    w = w[::-1].copy()
    v = v[:, ::-1].copy()
    quot = np.einsum("ij,ij->j", v, gl.values @ v) / w
    reliable = w >= _RELIABLE_EIGVAL_FACTOR * w[0]
    return EigenQuotient(eigvals=w, quotients=quot, eigvecs=v, reliable=reliable)


# ---------------------------------------------------------------------------
# one-dimensional Gaussianity checks
# ---------------------------------------------------------------------------


def _normal_hazard(alpha: float) -> float:
    """phi(alpha) / (1 - Phi(alpha)), computed without underflow."""
    return math.sqrt(2.0 / math.pi) / scipy.special.erfcx(alpha / _SQRT2)


def _tn_moment_ratio(alpha: float) -> float:
    """variance / mean^2 of a normal truncated at zero, as a function of
    alpha = -loc/scale.  Increases from 0 (no truncation, concentrated far
    from zero) toward 1 (deep truncation, exponential-like tail)."""
    lam = _normal_hazard(alpha)
    gap = lam - alpha
    return (1.0 + alpha * lam - lam * lam) / (gap * gap)


def fit_truncated_normal(mean: float, variance: float) -> tuple[float, float]:
    """Parent (loc, scale) of a zero-truncated normal with the given moments.

    Inverts the truncated-normal moment map: finds the parent normal whose
    restriction to [0, inf) has exactly this mean and variance.  Requires
    mean > 0 and variance/mean^2 < 1; a relative spread of 1 is the
    exponential limit of the family and cannot be exceeded by any parent.
    """
    if not math.isfinite(mean) or mean <= 0.0:
        raise ValueError(
            f"zero-truncated normal needs a positive mean, got {mean!r}"
        )
    if variance <= 0.0:
        raise DegenerateSeriesError(
            f"cannot fit a distribution to variance {variance!r}"
        )
    target = variance / (mean * mean)
    if target >= 1.0:
        raise ValueError(
            f"variance/mean^2 = {target:.6g} >= 1; no zero-truncated normal "
            "is this dispersed"
        )

    def excess(alpha: float) -> float:
        return _tn_moment_ratio(alpha) - target

    lo, hi = -1.0, 1.0
    for _ in range(200):
        if excess(lo) < 0.0:
            break
        lo *= 2.0
    else:
        raise RuntimeError("failed to bracket the moment-matching equation")
    for _ in range(200):
        if excess(hi) > 0.0:
            break
        hi *= 2.0
    else:
        raise RuntimeError("failed to bracket the moment-matching equation")
    alpha = scipy.optimize.brentq(excess, lo, hi, xtol=1e-13, maxiter=200)
    scale = mean / (_normal_hazard(alpha) - alpha)
    return (-alpha * scale, scale)


def _resolve_null(series: np.ndarray, null: str, params) -> tuple[float, float]:
    """(loc, scale) for the null, fitted from the series unless given."""
    if null not in _KNOWN_NULLS:
        raise ValueError(f"unknown null {null!r}; expected one of {_KNOWN_NULLS}")
    if params is not None:
        loc, scale = float(params[0]), float(params[1])
        if not (scale > 0.0):
            raise ValueError(f"null scale must be positive, got {scale!r}")
        return loc, scale
    mean = float(series.mean())
    var = float(series.var(ddof=1))
    if null == "normal":
        if var <= 0.0:
            raise DegenerateSeriesError(
                "series has zero variance; cannot fit a normal null"
            )
        return mean, math.sqrt(var)
    return fit_truncated_normal(mean, var)


def _null_cdf(null: str, loc: float, scale: float) -> Callable[[np.ndarray], np.ndarray]:
    if null == "normal":
        return lambda v: scipy.special.ndtr((v - loc) / scale)
    a = -loc / scale
    dist = scipy.stats.truncnorm(a, np.inf, loc=loc, scale=scale)
    return dist.cdf


def _null_ppf(null: str, loc: float, scale: float) -> Callable[[np.ndarray], np.ndarray]:
    if null == "normal":
        return lambda p: loc + scale * scipy.special.ndtri(p)
    a = -loc / scale
    dist = scipy.stats.truncnorm(a, np.inf, loc=loc, scale=scale)
    return dist.ppf


def ks_statistic(series, cdf: Callable[[np.ndarray], np.ndarray]) -> float:
    """Sup-distance between the empirical CDF of ``series`` and ``cdf``."""
    x = np.sort(np.asarray(series, dtype=float))
    n = x.size
    if n == 0:
        raise ValueError("empty series")
    f = np.asarray(cdf(x), dtype=float)
    k = np.arange(1, n + 1)
    d_plus = float(np.max(k / n - f))
    d_minus = float(np.max(f - (k - 1) / n))
    return max(d_plus, d_minus, 0.0)


class KsResult(NamedTuple):
    statistic: float
    p_value: float


def ks_normality(series, null: str = "normal", *, params=None) -> KsResult:
    """One-sample Kolmogorov-Smirnov test of a scalar marginal.

    ``null`` is "normal" or "truncated_normal_at_zero".  By default the null
    parameters are fitted from the series itself (mean/std for the normal;
    moment-matched parent parameters for the truncated case).  Fitting makes
    the returned p-value approximate and conservative: the fit shrinks the
    statistic, so true-null p-values pile up near 1 instead of being uniform.
    Pass ``params=(loc, scale)`` to test against a fully specified null, in
    which case the asymptotic p-value is exact.

    Needs at least 50 samples.  Returns (statistic, p_value).
    """
    x = np.asarray(series, dtype=float)
    if x.ndim != 1:
        raise ValueError(f"expected a 1-d series, got shape {x.shape}")
    if x.size < 50:
        raise ValueError(f"need at least 50 samples, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise ValueError("series contains non-finite values")
    loc, scale = _resolve_null(x, null, params)
    d = ks_statistic(x, _null_cdf(null, loc, scale))
    p = float(scipy.special.kolmogorov(math.sqrt(x.size) * d))
    return KsResult(statistic=d, p_value=p)


def qq_data(series, null: str = "normal", *, params=None) -> np.ndarray:
    """Quantile-quantile points of a series against a null distribution.

    Returns an (n, 2) array: column 0 holds the null quantiles at plotting
    positions (k - 0.5)/n, column 1 the sorted sample.  Null parameters are
    fitted from the series unless ``params=(loc, scale)`` is given; the
    truncated null uses the zero-truncated normal with moment-matched parent
    parameters.  Needs at least 10 samples.
    """
    x = np.asarray(series, dtype=float)
    if x.ndim != 1:
        raise ValueError(f"expected a 1-d series, got shape {x.shape}")
    n = x.size
    if n < 10:
        raise ValueError(f"need at least 10 samples, got {n}")
    if not np.all(np.isfinite(x)):
        raise ValueError("series contains non-finite values")
    loc, scale = _resolve_null(x, null, params)
    positions = (np.arange(1, n + 1) - 0.5) / n
    theoretical = np.asarray(_null_ppf(null, loc, scale)(positions), dtype=float)
    return np.column_stack([theoretical, np.sort(x)])


# ---------------------------------------------------------------------------
# posterior moment summary
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PosteriorSummary:
    """Per-parameter chain moments, optionally compared to a reference.

    ``rel_diff`` is |mean - reference| / |mean| (None when no reference was
    given).  ``near_zero_mean`` flags parameters whose mean is negligible on
    the scale of the largest one; the relative difference there divides by
    almost nothing and should not be read as a percentage.
    """

    mean: np.ndarray
    variance: np.ndarray
    rel_diff: np.ndarray | None
    near_zero_mean: np.ndarray


def posterior_summary(chain, reference=None) -> PosteriorSummary:
    """Mean and marginal variance per parameter, plus relative difference
    against a reference vector if one is supplied."""
    samples = _sample_matrix(chain)
    n, dim = samples.shape
    if n == 0:
        raise ValueError("empty chain")
    mean = samples.mean(axis=0)
    variance = samples.var(axis=0, ddof=1) if n > 1 else np.zeros(dim)
    scale = float(np.max(np.abs(mean)))
    if scale > 0.0:
        near_zero = np.abs(mean) <= 1e-12 * scale
    else:
        near_zero = np.ones(dim, dtype=bool)
    rel_diff = None
    if reference is not None:
        ref = np.asarray(reference, dtype=float)
        if ref.shape != mean.shape:
            raise ValueError(
                f"reference shape {ref.shape} does not match {mean.shape}"
            )
        num = np.abs(mean - ref)
        den = np.abs(mean)
        with np.errstate(divide="ignore", invalid="ignore"):
            rel_diff = num / den
        rel_diff = np.where(
            den == 0.0, np.where(num == 0.0, 0.0, math.inf), rel_diff
        )
    return PosteriorSummary(
        mean=mean, variance=variance, rel_diff=rel_diff, near_zero_mean=near_zero
    )
