"""Surface prior mixture, atmospheric prior, and the measurement noise model.

The surface prior is a Gaussian mixture over reflectance spectra; one
component is committed to per retrieval by shortest Mahalanobis distance to
an initial state estimate. The committed component is combined with an
independent Gaussian over (AOD, H2O) into a block-diagonal joint prior.

Measurement noise is diagonal: shot noise scaled by SNR, a calibration
fraction of the signal, and an optional per-channel forward-model variance,
with a small floor keeping the covariance invertible.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .exceptions import FactorizationError
from .linalg import SpdMatrix
from .model import StateVector

VARIANCE_FLOOR = 1e-12

# Default atmospheric prior: weakly informative, AOD in optical depths and
# H2O in cm of precipitable water vapor.
ATM_PRIOR_MEAN = (0.2, 1.5)
ATM_PRIOR_VAR = (1.0, 1.0)


@dataclass(frozen=True)
class MixtureComponent:
    """One Gaussian surface-prior component with a human-readable label."""

    label: str
    mean: np.ndarray
    cov: SpdMatrix

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))
        if self.mean.ndim != 1:
            raise ValueError(f"component {self.label!r}: mean must be 1-D")
        if self.mean.size != self.cov.dim:
            raise ValueError(
                f"component {self.label!r}: mean has {self.mean.size} entries, "
                f"covariance is {self.cov.dim}x{self.cov.dim}"
            )

    @property
    def n(self) -> int:
        return self.mean.size

    def mahalanobis_sq(self, x: np.ndarray) -> float:
        return self.cov.quad(np.asarray(x, dtype=float) - self.mean)


def component_from_arrays(label: str, mean, cov) -> MixtureComponent:
    """Build a component, attaching the label to factorization failures."""
    try:
        spd = SpdMatrix(cov, label=f"component {label!r} covariance")
    except FactorizationError:
        raise
    return MixtureComponent(label=label, mean=mean, cov=spd)


def select_component(
    components: list[MixtureComponent], x0: np.ndarray
) -> MixtureComponent:
    """Component with the smallest Mahalanobis distance to x0; ties keep the
    lowest index."""
    if not components:
        raise ValueError("component list is empty")
    x0 = np.asarray(x0, dtype=float)
    best = None
    best_d = math.inf
    for comp in components:
        if comp.n != x0.size:
            raise ValueError(
                f"component {comp.label!r} has {comp.n} channels, x0 has {x0.size}"
            )
        d = comp.mahalanobis_sq(x0)
        if d < best_d:
            best = comp
            best_d = d
    return best


@dataclass(frozen=True)
class NoiseModel:
    """Diagonal radiance noise description."""

    snr: float = 500.0
    calib_frac: float = 0.01
    rt_model_var: float | np.ndarray = 0.0

    def __post_init__(self):
        if not self.snr > 0:
            raise ValueError(f"snr must be positive, got {self.snr!r}")
        if self.calib_frac < 0:
            raise ValueError(f"calib_frac must be nonnegative, got {self.calib_frac!r}")
        rt = np.asarray(self.rt_model_var, dtype=float)
        if np.any(rt < 0):
            raise ValueError("rt_model_var must be nonnegative")
        object.__setattr__(self, "rt_model_var", rt)


def build_noise_cov(y_obs: np.ndarray, noise: NoiseModel) -> np.ndarray:
    """Diagonal observation variances for a measured radiance spectrum.

    var_i = (y_i / snr)^2 + (calib_frac * y_i)^2 + rt_model_var_i, plus a
    1e-12 floor added to every channel. The measurement predicts its own
    noise level, so y_obs is the observed (not modeled) radiance.
    """
    y = np.asarray(y_obs, dtype=float)
    if not np.all(np.isfinite(y)):
        raise ValueError("y_obs contains non-finite values")
    var = (y / noise.snr) ** 2 + (noise.calib_frac * y) ** 2 + noise.rt_model_var
    var = var + VARIANCE_FLOOR
    if np.any(var <= 2 * VARIANCE_FLOOR):
        warnings.warn(
            "noise variance at the floor for some channels (zero signal and "
            "no model-error variance); covariance is near-degenerate",
            RuntimeWarning,
            stacklevel=2,
        )
    return var


class GaussianPrior:
    """Block-diagonal joint prior over [reflectance, AOD, H2O]."""

    def __init__(self, mean: np.ndarray, refl_cov: SpdMatrix, atm_cov: SpdMatrix):
        mean = np.asarray(mean, dtype=float)
        if atm_cov.dim != 2:
            raise ValueError("atmospheric block must be 2x2")
        if mean.size != refl_cov.dim + 2:
            raise ValueError(
                f"mean has {mean.size} entries, blocks give {refl_cov.dim + 2}"
            )
        self.mean = mean
        self.refl_cov = refl_cov
        self.atm_cov = atm_cov
        self._full: SpdMatrix | None = None

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def n_refl(self) -> int:
        return self.refl_cov.dim

    @property
    def refl_mean(self) -> np.ndarray:
        return self.mean[:-2]

    @property
    def atm_mean(self) -> np.ndarray:
        return self.mean[-2:]

    @property
    def cov(self) -> SpdMatrix:
        """Assembled full covariance; off-diagonal blocks are exactly zero."""
        if self._full is None:
            n = self.n_refl
            full = np.zeros((self.dim, self.dim))
            full[:n, :n] = self.refl_cov.values
            full[n:, n:] = self.atm_cov.values
            self._full = SpdMatrix(full)
        return self._full

    def logdet(self) -> float:
        return self.refl_cov.logdet() + self.atm_cov.logdet()

    def quad(self, x: np.ndarray) -> float:
        """Mahalanobis form (x - mean)^T cov^-1 (x - mean), blockwise."""
        x = np.asarray(x, dtype=float)
        d_refl = x[:-2] - self.refl_mean
        d_atm = x[-2:] - self.atm_mean
        return self.refl_cov.quad(d_refl) + self.atm_cov.quad(d_atm)

    def mode_state(self) -> StateVector:
        return StateVector.from_array(self.mean)


def assemble_prior(
    surface: MixtureComponent,
    atm_mean=ATM_PRIOR_MEAN,
    atm_var=ATM_PRIOR_VAR,
) -> GaussianPrior:
    """Combine the committed surface component with the atmospheric prior.

    ``atm_var`` may be a pair of variances (diagonal block) or a full 2x2
    covariance.
    """
    atm_mean = np.asarray(atm_mean, dtype=float)
    if atm_mean.shape != (2,):
        raise ValueError("atm_mean must have exactly two entries")
    av = np.asarray(atm_var, dtype=float)
    if av.shape == (2,):
        atm_cov = SpdMatrix(np.diag(av))
    elif av.shape == (2, 2):
        atm_cov = SpdMatrix(av)
    else:
        raise ValueError("atm_var must be a pair of variances or a 2x2 covariance")
    mean = np.concatenate([surface.mean, atm_mean])
    return GaussianPrior(mean=mean, refl_cov=surface.cov, atm_cov=atm_cov)


def log_prior(state: StateVector | np.ndarray, prior: GaussianPrior) -> float:
    """Log density of the joint prior, normalization constant included.

    The constant is -(d/2) log(2 pi) - (1/2) log det(cov); callers that only
    need relative densities (the samplers) use the quadratic form via
    ``prior.quad`` instead.
    """
    x = state.as_array() if isinstance(state, StateVector) else np.asarray(state, dtype=float)
    if x.size != prior.dim:
        raise ValueError(f"state has {x.size} entries, prior has {prior.dim}")
    quad = prior.quad(x)
    return -0.5 * (quad + prior.logdet() + prior.dim * math.log(2.0 * math.pi))
