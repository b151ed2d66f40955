"""Self-contained synthetic inputs: wavelength grid, lookup table, solar
spectrum, surface prior components, and noisy scenes.

Everything here is a smooth parametric stand-in with the right qualitative
structure, not a radiative-transfer calculation: molecular scattering falls
off steeply with wavelength, aerosol extinction follows a power law scaled
by the AOD parameter, and water vapour carves absorption bands whose depth
scales with the column amount.  The tables it produces satisfy the lookup
table invariants on any strictly increasing grid, including grids extended
to negative AOD for boundary experiments (coefficients are clamped to their
physical ranges there, which flattens them where an extended grid reaches
nonphysical atmospheres).

Radiance and irradiance are in arbitrary-but-consistent units; the solar
spectrum is a thermal-emission shape normalized to peak at ``SOLAR_PEAK``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import SpdMatrix, sample_mvn
from .lut import AtmLookupTable
from .model import ForwardModel, Geometry, StateVector, WavelengthGrid, forward
from .priors import MixtureComponent, NoiseModel, build_noise_cov

DEFAULT_N_CHANNELS = 64
WAVELENGTH_LO_NM = 380.0
WAVELENGTH_HI_NM = 2500.0

# Retained-channel gaps: intervals where water vapour absorbs so strongly
# that the surface signal vanishes, so the channels carry no usable signal.
MASKED_BANDS_NM = ((1350.0, 1450.0), (1800.0, 1950.0))

DEFAULT_AOD_GRID = np.linspace(0.0, 1.0, 9)
DEFAULT_H2O_GRID = np.linspace(0.0, 5.0, 9)
DEFAULT_COS_SOLAR_ZENITH = 0.85

# Two-way slant path factor applied to all optical depths: one pass down at
# the solar zenith angle plus one vertical pass up to the sensor.
_AIRMASS = 1.0 / DEFAULT_COS_SOLAR_ZENITH + 1.0

# Water vapour absorption bands: (center nm, width nm, strength per cm).
_H2O_BANDS = (
    (940.0, 35.0, 0.12),
    (1130.0, 45.0, 0.20),
    (1380.0, 45.0, 0.65),
    (1870.0, 60.0, 0.75),
    (2450.0, 120.0, 0.30),
)

# Within-class variability is a few percent of reflectance, correlated over
# hundreds of nanometers: broad brightness and moisture modes rather than
# narrow spectral features (the means carry those).  Keeping the kernels
# this smooth and this tight matters for the sampler demo: a looser surface
# prior absorbs the smooth atmospheric fingerprints cheaply, which inflates
# the atmospheric marginals far beyond the conditionals and starves both
# block acceptance rates.
_TERRAIN_KERNELS = {
    "vegetation-like": {"sigma": 0.03, "length_nm": 240.0, "jitter": 1e-6},
    "soil-like": {"sigma": 0.025, "length_nm": 500.0, "jitter": 1e-6},
}


def default_wavelengths(n: int = DEFAULT_N_CHANNELS) -> np.ndarray:
    """Evenly spaced channel centers spanning the instrument range."""
    if n < 2:
        raise ValueError(f"need at least 2 channels, got {n}")
    return np.linspace(WAVELENGTH_LO_NM, WAVELENGTH_HI_NM, n)


def water_band_mask(wavelengths) -> np.ndarray:
    """True for retained channels, False inside the opaque water bands."""
    w = np.asarray(wavelengths, dtype=float)
    mask = np.ones(w.shape, dtype=bool)
    for lo, hi in MASKED_BANDS_NM:
        mask &= ~((w >= lo) & (w <= hi))
    return mask


def default_wavelength_grid(n: int = DEFAULT_N_CHANNELS) -> WavelengthGrid:
    w = default_wavelengths(n)
    return WavelengthGrid(wavelengths=w, mask=water_band_mask(w))


SOLAR_PEAK = 150.0


def solar_spectrum(wavelengths) -> np.ndarray:
    """Thermal-emission-shaped irradiance, normalized to peak at SOLAR_PEAK.

    A 5800 K blackbody spectral shape: proportional to
    lambda^-5 / (exp(c / lambda) - 1), evaluated in nanometers.  The peak
    value plays the role of a physical irradiance magnitude so that
    radiances land well above the observation-noise variance floor; the
    unit is arbitrary but shared consistently by radiances and noise levels.
    """
    w = np.asarray(wavelengths, dtype=float)
    # h*c/(k_B * 5800 K): second radiation constant 1.4388e7 nm*K over T
    c_nm = 1.4388e7 / 5800.0
    shape = (1.0 / w) ** 5 / np.expm1(c_nm / w)
    return SOLAR_PEAK * shape / shape.max()


def default_geometry(
    wavelengths, cos_solar_zenith: float = DEFAULT_COS_SOLAR_ZENITH
) -> Geometry:
    return Geometry(
        cos_solar_zenith=cos_solar_zenith,
        solar_irradiance=solar_spectrum(wavelengths),
    )


def _optical_depths(wavelengths, aod: float, h2o: float):
    """(molecular, aerosol, water) optical depths per channel."""
    w_um = np.asarray(wavelengths, dtype=float) / 1000.0
    tau_mol = 0.09 * (0.55 / w_um) ** 4
    tau_aer = aod * (0.55 / w_um) ** 1.1
    w_nm = np.asarray(wavelengths, dtype=float)
    k_h2o = np.zeros_like(w_nm)
    for center, width, strength in _H2O_BANDS:
        k_h2o += strength * np.exp(-(((w_nm - center) / width) ** 2))
    return tau_mol, tau_aer, h2o * k_h2o


def make_lut(
    wavelengths=None,
    aod_grid=None,
    h2o_grid=None,
) -> AtmLookupTable:
    """Tabulate path reflectance, spherical albedo, and transmission.

    The three coefficients are smooth closed forms in (aod, h2o) evaluated
    at every grid knot, so bilinear interpolation between knots is a good
    approximation of the generating functions.  Path reflectance and
    spherical albedo grow with scattering optical depth and are clamped at
    zero (only reachable on grids extended below zero AOD); transmission is
    a two-way exponential attenuation.
    """
    w = default_wavelengths() if wavelengths is None else np.asarray(wavelengths, dtype=float)
    aod_grid = DEFAULT_AOD_GRID if aod_grid is None else np.asarray(aod_grid, dtype=float)
    h2o_grid = DEFAULT_H2O_GRID if h2o_grid is None else np.asarray(h2o_grid, dtype=float)
    na, nh, n = aod_grid.size, h2o_grid.size, w.size
    rho_a = np.empty((na, nh, n))
    s = np.empty((na, nh, n))
    t = np.empty((na, nh, n))
    for i, aod in enumerate(aod_grid):
        for j, h2o in enumerate(h2o_grid):
            tau_mol, tau_aer, tau_h2o = _optical_depths(w, aod, h2o)
            t[i, j] = np.exp(-_AIRMASS * (tau_mol + tau_aer + tau_h2o))
            scatter = 0.5 * tau_mol + 0.4 * tau_aer
            rho_a[i, j] = np.maximum(
                0.25 * -np.expm1(-scatter) * np.exp(-0.5 * tau_h2o), 0.0
            )
            s[i, j] = np.maximum(-np.expm1(-(0.35 * tau_mol + 0.25 * tau_aer)), 0.0)
    return AtmLookupTable(
        aod_grid=aod_grid, h2o_grid=h2o_grid, rho_a=rho_a, s=s, t=t, wavelengths=w
    )


def default_forward_model(n: int = DEFAULT_N_CHANNELS) -> ForwardModel:
    grid = default_wavelength_grid(n)
    return ForwardModel(
        lut=make_lut(grid.wavelengths),
        geom=default_geometry(grid.wavelengths),
        grid=grid,
    )


def _vegetation_mean(w: np.ndarray) -> np.ndarray:
    green_bump = 0.02 * np.exp(-(((w - 550.0) / 45.0) ** 2))
    red_edge = 1.0 / (1.0 + np.exp(-(w - 715.0) / 28.0))
    swir_decay = np.exp(-0.00055 * np.maximum(w - 1100.0, 0.0))
    water_dips = (
        1.0
        - 0.35 * np.exp(-(((w - 1450.0) / 120.0) ** 2))
        - 0.45 * np.exp(-(((w - 1940.0) / 140.0) ** 2))
    )
    return 0.05 + green_bump + 0.40 * red_edge * swir_decay * water_dips


def _soil_mean(w: np.ndarray) -> np.ndarray:
    rise = 1.0 - np.exp(-(w - WAVELENGTH_LO_NM) / 800.0)
    clay_dip = 0.05 * np.exp(-(((w - 2200.0) / 90.0) ** 2))
    return 0.08 + 0.30 * rise - clay_dip


_TERRAIN_MEANS = {
    "vegetation-like": _vegetation_mean,
    "soil-like": _soil_mean,
}

TERRAIN_LABELS = tuple(_TERRAIN_MEANS)


def squared_exponential_cov(
    wavelengths, sigma: float, length_nm: float, jitter: float = 1e-6
) -> SpdMatrix:
    """Stationary smooth covariance over wavelength with a diagonal jitter.

    The jitter keeps the factorization well posed: the smooth kernel alone
    is numerically rank-deficient once channels are much closer together
    than the correlation length.
    """
    w = np.asarray(wavelengths, dtype=float)
    gap = w[:, None] - w[None, :]
    values = sigma**2 * np.exp(-(gap**2) / (2.0 * length_nm**2))
    values[np.diag_indices_from(values)] += jitter
    return SpdMatrix(values, label="surface component covariance")


def make_surface_components(wavelengths=None) -> list[MixtureComponent]:
    """The bundled terrain classes as Gaussian components.

    Means are smooth parametric spectra in [0, 1]; covariances are
    squared-exponential kernels whose parameters are recorded alongside the
    component when written to disk.
    """
    w = default_wavelengths() if wavelengths is None else np.asarray(wavelengths, dtype=float)
    components = []
    for label, mean_fn in _TERRAIN_MEANS.items():
        kern = _TERRAIN_KERNELS[label]
        components.append(
            MixtureComponent(
                label=label,
                mean=mean_fn(w),
                cov=squared_exponential_cov(
                    w, kern["sigma"], kern["length_nm"], kern["jitter"]
                ),
            )
        )
    return components


def terrain_kernel_params(label: str) -> dict:
    """Generator parameters of a bundled terrain component's covariance."""
    if label not in _TERRAIN_KERNELS:
        raise ValueError(
            f"unknown terrain {label!r}; bundled: {sorted(_TERRAIN_KERNELS)}"
        )
    return dict(_TERRAIN_KERNELS[label])


@dataclass(frozen=True)
class SyntheticScene:
    """A generated observation together with its ground truth."""

    y_obs: np.ndarray
    x_true: StateVector
    model: ForwardModel
    terrain: str


def generate_synthetic_scene(
    terrain: str,
    atm_true: tuple[float, float],
    noise: NoiseModel | None,
    seed: int,
    *,
    model: ForwardModel | None = None,
    components: list[MixtureComponent] | None = None,
) -> SyntheticScene:
    """Draw a ground-truth state from a terrain component and observe it.

    The reflectance spectrum is one draw from the named component, clipped
    to [0, 1]; the atmospheric truth is taken as given.  The observation is
    the forward radiance plus one draw of the observation noise evaluated at
    the clean signal.  Passing ``noise=None`` skips the noise draw entirely,
    so the observation equals the forward radiance bit for bit.
    """
    if model is None:
        model = default_forward_model()
    if components is None:
        components = make_surface_components(model.grid.wavelengths)
    by_label = {c.label: c for c in components}
    if terrain not in by_label:
        raise ValueError(
            f"unknown terrain {terrain!r}; available: {sorted(by_label)}"
        )
    component = by_label[terrain]
    if component.n != model.n:
        raise ValueError(
            f"component {terrain!r} has {component.n} channels, model has {model.n}"
        )
    rng = np.random.default_rng(seed)
    refl = np.clip(sample_mvn(component.mean, component.cov, rng), 0.0, 1.0)
    x_true = StateVector(refl=refl, aod=float(atm_true[0]), h2o=float(atm_true[1]))
    y_clean = forward(x_true, model.lut, model.geom)
    if noise is None:
        y_obs = y_clean
    else:
        var = build_noise_cov(y_clean, noise)
        y_obs = y_clean + np.sqrt(var) * rng.standard_normal(y_clean.size)
    return SyntheticScene(y_obs=y_obs, x_true=x_true, model=model, terrain=terrain)
