"""Nonlinear radiative-transfer forward model.

Top-of-atmosphere radiance at channel i for surface reflectance x and
interpolated atmospheric quantities (rho_a, s, t):

    y_i = (phi0 / pi) * e0_i * (rho_a_i + t_i * x_i / (1 - s_i * x_i))

with phi0 the cosine of the solar zenith angle and e0 the exoatmospheric
solar irradiance. The reflectance block of the Jacobian is analytic and
diagonal; the two atmospheric columns are central finite differences
through the lookup table.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import ForwardSingularityError
from .lut import AtmLookupTable, interpolate_atm

WAVELENGTH_MIN_NM = 380.0
WAVELENGTH_MAX_NM = 2500.0

# Relative finite-difference step for the atmospheric Jacobian columns,
# scaled by the grid span of each axis.
FD_REL_STEP = 1e-4


@dataclass(frozen=True)
class WavelengthGrid:
    """Channel centers in nanometers plus the retained-channel mask."""

    wavelengths: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.wavelengths, dtype=float)
        m = np.asarray(self.mask, dtype=bool)
        object.__setattr__(self, "wavelengths", w)
        object.__setattr__(self, "mask", m)
        if w.ndim != 1 or w.size == 0:
            raise ValueError("wavelengths must be a nonempty 1-D array")
        if np.any(np.diff(w) <= 0):
            raise ValueError("wavelengths must be strictly increasing")
        if w[0] < WAVELENGTH_MIN_NM or w[-1] > WAVELENGTH_MAX_NM:
            raise ValueError(
                f"wavelengths must lie within [{WAVELENGTH_MIN_NM:g}, "
                f"{WAVELENGTH_MAX_NM:g}] nm"
            )
        if m.shape != w.shape:
            raise ValueError("mask must match wavelengths in shape")

    @property
    def n(self) -> int:
        return self.wavelengths.size

    @property
    def n_retained(self) -> int:
        return int(np.count_nonzero(self.mask))


@dataclass(frozen=True)
class Geometry:
    """Solar geometry and irradiance spectrum."""

    cos_solar_zenith: float
    solar_irradiance: np.ndarray

    def __post_init__(self):
        e0 = np.asarray(self.solar_irradiance, dtype=float)
        object.__setattr__(self, "solar_irradiance", e0)
        if not 0.0 < self.cos_solar_zenith <= 1.0:
            raise ValueError(
                f"cos_solar_zenith must be in (0, 1], got {self.cos_solar_zenith!r}"
            )
        if e0.ndim != 1 or np.any(e0 <= 0) or not np.all(np.isfinite(e0)):
            raise ValueError("solar_irradiance must be a positive finite 1-D array")

    @property
    def coeff(self) -> np.ndarray:
        """(phi0 / pi) * e0, the per-channel radiance scale."""
        return (self.cos_solar_zenith / math.pi) * self.solar_irradiance


@dataclass(frozen=True)
class StateVector:
    """Retrieval state: per-channel reflectance plus (AOD, H2O).

    Nonnegativity of the atmospheric parameters is a property of stored
    MCMC samples, not of the type; optimizer iterates may go negative.
    """

    refl: np.ndarray
    aod: float
    h2o: float

    def __post_init__(self):
        r = np.asarray(self.refl, dtype=float)
        object.__setattr__(self, "refl", r)
        object.__setattr__(self, "aod", float(self.aod))
        object.__setattr__(self, "h2o", float(self.h2o))
        if r.ndim != 1:
            raise ValueError("refl must be 1-D")

    @property
    def n(self) -> int:
        return self.refl.size

    @property
    def atm(self) -> np.ndarray:
        return np.array([self.aod, self.h2o])

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.refl, [self.aod, self.h2o]])

    @classmethod
    def from_array(cls, x: np.ndarray) -> "StateVector":
        x = np.asarray(x, dtype=float)
        return cls(refl=x[:-2], aod=float(x[-2]), h2o=float(x[-1]))


@dataclass(frozen=True)
class LinearSubmodel:
    """Affine radiance model in reflectance at fixed atmosphere.

    y ~= a_diag * x_refl + b, exact when the spherical albedo vanishes.
    """

    a_diag: np.ndarray
    b: np.ndarray

    def apply(self, x_refl: np.ndarray) -> np.ndarray:
        return self.a_diag * np.asarray(x_refl, dtype=float) + self.b


def radiance_from_tables(x_refl, rho_a, s, t, coeff):
    """Radiance from already-interpolated coefficient tables."""
    denom = 1.0 - s * x_refl
    bad = np.nonzero(denom <= 0.0)[0]
    if bad.size:
        ch = int(bad[0])
        raise ForwardSingularityError(ch, float(denom[ch]))
    return coeff * (rho_a + t * x_refl / denom)


def forward(
    state: StateVector,
    lut: AtmLookupTable,
    geom: Geometry,
    *,
    clamp: bool = False,
) -> np.ndarray:
    """Radiance spectrum for every channel (masking is a likelihood concern)."""
    if state.n != lut.n_channels:
        raise ValueError(
            f"state has {state.n} channels, lookup table has {lut.n_channels}"
        )
    rho_a, s, t = interpolate_atm(lut, state.aod, state.h2o, clamp=clamp)
    return radiance_from_tables(state.refl, rho_a, s, t, geom.coeff)


def linearize_given_atm(
    atm: tuple[float, float],
    lut: AtmLookupTable,
    geom: Geometry,
    *,
    clamp: bool = False,
) -> LinearSubmodel:
    """Conditional linear model at fixed atmosphere: a = c*t, b = c*rho_a."""
    rho_a, _, t = interpolate_atm(lut, atm[0], atm[1], clamp=clamp)
    coeff = geom.coeff
    return LinearSubmodel(a_diag=coeff * t, b=coeff * rho_a)


def jacobian(
    state: StateVector,
    lut: AtmLookupTable,
    geom: Geometry,
    *,
    clamp: bool = False,
) -> np.ndarray:
    """Forward-model Jacobian, shape (n, n + 2).

    The reflectance block is analytic and diagonal:
    d y_i / d x_i = c_i * t_i / (1 - s_i x_i)^2. The AOD and H2O columns are
    central finite differences with step FD_REL_STEP times the grid span;
    evaluation points are kept inside the grid (shrinking to a one-sided
    difference at the boundary), and a state clamped outside the grid gets
    zero atmospheric derivative, consistent with the clamped forward model.
    """
    n = state.n
    if n != lut.n_channels:
        raise ValueError(
            f"state has {n} channels, lookup table has {lut.n_channels}"
        )
    coeff = geom.coeff
    aod, h2o = state.aod, state.h2o
    if clamp:
        aod = min(max(aod, lut.aod_grid[0]), lut.aod_grid[-1])
        h2o = min(max(h2o, lut.h2o_grid[0]), lut.h2o_grid[-1])
    rho_a, s, t = interpolate_atm(lut, aod, h2o)
    denom = 1.0 - s * state.refl
    bad = np.nonzero(denom <= 0.0)[0]
    if bad.size:
        ch = int(bad[0])
        raise ForwardSingularityError(ch, float(denom[ch]))
    jac = np.zeros((n, n + 2))
    jac[np.arange(n), np.arange(n)] = coeff * t / denom**2

    for col, (value, grid) in enumerate(
        ((state.aod, lut.aod_grid), (state.h2o, lut.h2o_grid))
    ):
        step = FD_REL_STEP * float(grid[-1] - grid[0])
        lo = min(max(value - step, grid[0]), grid[-1])
        hi = min(max(value + step, grid[0]), grid[-1])
        spread = hi - lo
        if spread <= 0.0:
            continue  # state clamped past the grid edge: model is flat here
        atm_lo = (lo, h2o) if col == 0 else (aod, lo)
        atm_hi = (hi, h2o) if col == 0 else (aod, hi)
        r_lo = radiance_from_tables(state.refl, *interpolate_atm(lut, *atm_lo), coeff)
        r_hi = radiance_from_tables(state.refl, *interpolate_atm(lut, *atm_hi), coeff)
        jac[:, n + col] = (r_hi - r_lo) / spread
    return jac


@dataclass(frozen=True)
class ForwardModel:
    """Bundle of lookup table, geometry, and wavelength grid.

    Convenience wrapper so the inversion layers can carry one object; the
    module-level functions remain the primary API.
    """

    lut: AtmLookupTable
    geom: Geometry
    grid: WavelengthGrid

    def __post_init__(self):
        if self.lut.n_channels != self.grid.n:
            raise ValueError(
                f"lookup table has {self.lut.n_channels} channels, "
                f"wavelength grid has {self.grid.n}"
            )
        if self.geom.solar_irradiance.size != self.grid.n:
            raise ValueError("solar irradiance length must match the grid")

    @property
    def n(self) -> int:
        return self.grid.n

    @property
    def mask(self) -> np.ndarray:
        return self.grid.mask

    def forward(self, state: StateVector, *, clamp: bool = False) -> np.ndarray:
        return forward(state, self.lut, self.geom, clamp=clamp)

    def jacobian(self, state: StateVector, *, clamp: bool = False) -> np.ndarray:
        return jacobian(state, self.lut, self.geom, clamp=clamp)

    def linearize(self, atm: tuple[float, float], *, clamp: bool = False) -> LinearSubmodel:
        return linearize_given_atm(atm, self.lut, self.geom, clamp=clamp)

    def contains(self, aod: float, h2o: float) -> bool:
        return self.lut.contains(aod, h2o)
