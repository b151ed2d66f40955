"""Atmospheric lookup table and its bilinear interpolation.

The table stores precomputed path reflectance, spherical albedo, and total
transmission spectra on a rectangular (AOD, H2O) grid. Queries interpolate
bilinearly, separably in the two atmospheric axes, and reproduce the stored
spectra exactly at the knots.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DomainBoundsError


@dataclass(frozen=True)
class AtmLookupTable:
    """Tabulated (rho_a, s, t) spectra on an AOD x H2O grid.

    Arrays are indexed [aod, h2o, channel]. Grids must be strictly
    increasing with at least two knots each; spherical albedo must satisfy
    0 <= s < 1 and transmission and path reflectance must be nonnegative.
    """

    aod_grid: np.ndarray
    h2o_grid: np.ndarray
    rho_a: np.ndarray
    s: np.ndarray
    t: np.ndarray
    wavelengths: np.ndarray

    def __post_init__(self):
        for name in ("aod_grid", "h2o_grid", "rho_a", "s", "t", "wavelengths"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        for name, grid in (("aod_grid", self.aod_grid), ("h2o_grid", self.h2o_grid)):
            if grid.ndim != 1 or grid.size < 2:
                raise ValueError(f"{name} needs at least two knots, got shape {grid.shape}")
            if np.any(np.diff(grid) <= 0):
                raise ValueError(f"{name} must be strictly increasing")
        if self.wavelengths.ndim != 1 or np.any(np.diff(self.wavelengths) <= 0):
            raise ValueError("wavelengths must be a strictly increasing 1-D array")
        shape = (self.aod_grid.size, self.h2o_grid.size, self.wavelengths.size)
        for name, arr in (("rho_a", self.rho_a), ("s", self.s), ("t", self.t)):
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
        if np.any(self.rho_a < 0):
            raise ValueError("rho_a must be nonnegative")
        if np.any(self.t < 0):
            raise ValueError("t must be nonnegative")
        if np.any(self.s < 0) or np.any(self.s >= 1):
            raise ValueError("s must satisfy 0 <= s < 1")

    @property
    def n_channels(self) -> int:
        return self.wavelengths.size

    def contains(self, aod: float, h2o: float) -> bool:
        return (
            self.aod_grid[0] <= aod <= self.aod_grid[-1]
            and self.h2o_grid[0] <= h2o <= self.h2o_grid[-1]
        )

    @property
    def aod_span(self) -> float:
        return float(self.aod_grid[-1] - self.aod_grid[0])

    @property
    def h2o_span(self) -> float:
        return float(self.h2o_grid[-1] - self.h2o_grid[0])


def _cell(grid: np.ndarray, value: float) -> tuple[int, float]:
    """Cell index and barycentric weight for a query inside the grid."""
    i = int(np.searchsorted(grid, value, side="right")) - 1
    if i < 0:
        i = 0
    last = grid.size - 2
    if i > last:
        i = last
    w = (value - grid[i]) / (grid[i + 1] - grid[i])
    return i, w


def interpolate_atm(
    lut: AtmLookupTable,
    aod: float,
    h2o: float,
    *,
    clamp: bool = False,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Bilinearly interpolated (rho_a, s, t) spectra at one atmospheric point.

    Raises DomainBoundsError outside the grid unless ``clamp`` is set, in
    which case the query is projected onto the grid boundary (callers that
    clamp are expected to track that themselves via ``lut.contains``).
    """
    aod = float(aod)
    h2o = float(h2o)
    ag, hg = lut.aod_grid, lut.h2o_grid
    if clamp:
        aod = min(max(aod, ag[0]), ag[-1])
        h2o = min(max(h2o, hg[0]), hg[-1])
    else:
        if not ag[0] <= aod <= ag[-1]:
            raise DomainBoundsError("aod", aod, float(ag[0]), float(ag[-1]))
        if not hg[0] <= h2o <= hg[-1]:
            raise DomainBoundsError("h2o", h2o, float(hg[0]), float(hg[-1]))
    ia, wa = _cell(ag, aod)
    ih, wh = _cell(hg, h2o)
    w00 = (1.0 - wa) * (1.0 - wh)
    w01 = (1.0 - wa) * wh
    w10 = wa * (1.0 - wh)
    w11 = wa * wh
    out = []
    for arr in (lut.rho_a, lut.s, lut.t):
        out.append(
            w00 * arr[ia, ih]
            + w01 * arr[ia, ih + 1]
            + w10 * arr[ia + 1, ih]
            + w11 * arr[ia + 1, ih + 1]
        )
    return out[0], out[1], out[2]
