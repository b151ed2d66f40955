import numpy as np
import pytest

from specbayes import synthetic
from specbayes.lut import interpolate_atm
from specbayes.model import forward
from specbayes.optimal_estimation import RetrievalProblem, solve_map
from specbayes.priors import (
    GaussianPrior,
    NoiseModel,
    assemble_prior,
    build_noise_cov,
    component_from_arrays,
)


class TestWavelengthsAndMask:
    def test_default_wavelengths_span_instrument_range(self):
        w = synthetic.default_wavelengths()
        assert w.size == 64
        assert w[0] == 380.0
        assert w[-1] == 2500.0
        assert np.all(np.diff(w) > 0)

    def test_water_bands_masked(self):
        w = synthetic.default_wavelengths()
        mask = synthetic.water_band_mask(w)
        inside = ((w >= 1350) & (w <= 1450)) | ((w >= 1800) & (w <= 1950))
        np.testing.assert_array_equal(mask, ~inside)
        grid = synthetic.default_wavelength_grid()
        assert grid.n_retained == 57

    def test_solar_spectrum_peaks_in_the_visible(self):
        w = synthetic.default_wavelengths(256)
        e0 = synthetic.solar_spectrum(w)
        assert np.all(e0 > 0)
        assert e0.max() == pytest.approx(synthetic.SOLAR_PEAK)
        assert 450 <= w[np.argmax(e0)] <= 560


class TestMakeLut:
    def test_transmission_monotone_in_both_parameters(self):
        lut = synthetic.make_lut()
        # aerosol load only attenuates
        assert np.all(np.diff(lut.t, axis=0) < 0)
        # more water never increases transmission
        assert np.all(np.diff(lut.t, axis=1) <= 1e-15)

    def test_path_reflectance_grows_with_aerosol(self):
        lut = synthetic.make_lut()
        assert np.all(np.diff(lut.rho_a, axis=0) > 0)

    def test_spherical_albedo_independent_of_water(self):
        lut = synthetic.make_lut()
        np.testing.assert_array_equal(lut.s, np.broadcast_to(lut.s[:, :1], lut.s.shape))

    def test_extended_negative_grid_clamps_and_boosts(self):
        lut = synthetic.make_lut(aod_grid=np.linspace(-0.3, 1.0, 12))
        assert np.all(lut.rho_a >= 0)
        assert np.all(lut.s >= 0)
        assert np.all(lut.s < 1)
        # below zero aerosol load the attenuation formally reverses
        assert lut.t.max() > 1.0

    def test_bilinear_error_small_between_knots_on_retained_channels(self):
        # The fine grid's extra knots sit exactly at the coarse cell centers,
        # so comparing there measures the coarse table's interpolation error.
        # Only retained channels matter: the masked water bands attenuate
        # through an optical depth of order one per grid cell, where a
        # piecewise-linear table understates the exponential sag.
        w = synthetic.default_wavelengths()
        retained = synthetic.water_band_mask(w)
        coarse = synthetic.make_lut(w)
        fine = synthetic.make_lut(
            w,
            aod_grid=np.linspace(0.0, 1.0, 17),
            h2o_grid=np.linspace(0.0, 5.0, 17),
        )
        worst = 0.0
        for aod in np.linspace(0.0625, 0.9375, 8):
            for h2o in np.linspace(0.3125, 4.6875, 8):
                for got, ref in zip(
                    interpolate_atm(coarse, aod, h2o),
                    interpolate_atm(fine, aod, h2o),
                ):
                    worst = max(
                        worst, float(np.max(np.abs(got[retained] - ref[retained])))
                    )
        assert worst < 0.03


class TestSurfaceComponents:
    def test_bundled_labels_and_ranges(self):
        components = synthetic.make_surface_components()
        assert [c.label for c in components] == ["vegetation-like", "soil-like"]
        for c in components:
            assert c.n == 64
            assert np.all(c.mean > 0.0)
            assert np.all(c.mean < 1.0)

    def test_vegetation_has_a_red_edge(self):
        w = synthetic.default_wavelengths(256)
        veg = next(
            c
            for c in synthetic.make_surface_components(w)
            if c.label == "vegetation-like"
        )
        red = veg.mean[np.argmin(np.abs(w - 650))]
        nir = veg.mean[np.argmin(np.abs(w - 860))]
        assert nir > 3.0 * red

    def test_soil_brightens_toward_swir(self):
        w = synthetic.default_wavelengths(256)
        soil = next(
            c for c in synthetic.make_surface_components(w) if c.label == "soil-like"
        )
        assert soil.mean[-1] > 2.0 * soil.mean[0]

    def test_kernel_params_exposed(self):
        params = synthetic.terrain_kernel_params("vegetation-like")
        assert set(params) == {"sigma", "length_nm", "jitter"}
        with pytest.raises(ValueError, match="unknown terrain"):
            synthetic.terrain_kernel_params("asphalt")

    def test_covariance_matches_kernel_formula(self):
        w = synthetic.default_wavelengths(16)
        cov = synthetic.squared_exponential_cov(w, sigma=0.1, length_nm=200.0)
        i, j = 3, 11
        expected = 0.01 * np.exp(-((w[i] - w[j]) ** 2) / (2.0 * 200.0**2))
        assert cov.values[i, j] == pytest.approx(expected, rel=1e-12)
        assert cov.values[i, i] == pytest.approx(0.01 + 1e-6, rel=1e-12)


class TestGenerateScene:
    def test_zero_noise_is_exact_forward_radiance(self):
        scene = synthetic.generate_synthetic_scene(
            "soil-like", (0.3, 2.0), None, seed=5
        )
        expected = forward(scene.x_true, scene.model.lut, scene.model.geom)
        np.testing.assert_array_equal(scene.y_obs, expected)

    def test_fixed_seed_reproducible(self):
        a = synthetic.generate_synthetic_scene(
            "vegetation-like", (0.2, 1.5), NoiseModel(snr=500), seed=7
        )
        b = synthetic.generate_synthetic_scene(
            "vegetation-like", (0.2, 1.5), NoiseModel(snr=500), seed=7
        )
        np.testing.assert_array_equal(a.y_obs, b.y_obs)
        np.testing.assert_array_equal(a.x_true.refl, b.x_true.refl)
        c = synthetic.generate_synthetic_scene(
            "vegetation-like", (0.2, 1.5), NoiseModel(snr=500), seed=8
        )
        assert not np.array_equal(a.y_obs, c.y_obs)

    def test_truth_reflectance_in_unit_interval(self):
        scene = synthetic.generate_synthetic_scene(
            "vegetation-like", (0.2, 1.5), NoiseModel(snr=500), seed=11
        )
        assert np.all(scene.x_true.refl >= 0.0)
        assert np.all(scene.x_true.refl <= 1.0)
        assert scene.x_true.aod == 0.2
        assert scene.x_true.h2o == 1.5

    def test_noise_standardizes_against_declared_covariance(self):
        noise = NoiseModel(snr=500)
        deviations = []
        for seed in range(40):
            scene = synthetic.generate_synthetic_scene(
                "soil-like", (0.2, 1.5), noise, seed=seed
            )
            clean = forward(scene.x_true, scene.model.lut, scene.model.geom)
            z = (scene.y_obs - clean) / np.sqrt(build_noise_cov(clean, noise))
            deviations.append(z)
        z = np.concatenate(deviations)
        assert abs(z.mean()) < 0.05
        assert 0.95 < z.std() < 1.05

    def test_unknown_terrain_rejected(self):
        with pytest.raises(ValueError, match="unknown terrain"):
            synthetic.generate_synthetic_scene("water", (0.2, 1.5), None, seed=0)

    def test_oe_round_trip_recovers_reflectance(self):
        # Noiseless observation with a wide surface prior so the likelihood
        # dominates wherever there is signal: the generating component's
        # covariance scaled by 100 keeps the prior pull well under the 1e-3
        # tolerance even at the weak 380 nm edge channel.  The atmosphere
        # must stay pinned by its prior: a free per-channel reflectance fits
        # the data exactly under any atmosphere, so the likelihood is flat
        # along that direction and a loose atmospheric prior lets the MAP
        # slide away from the truth.
        scene = synthetic.generate_synthetic_scene(
            "vegetation-like", (0.2, 1.5), None, seed=3
        )
        components = synthetic.make_surface_components(scene.model.grid.wavelengths)
        surface = next(c for c in components if c.label == scene.terrain)
        wide = component_from_arrays(
            surface.label, surface.mean, 100.0 * surface.cov.values
        )
        prior = assemble_prior(wide, atm_mean=(0.2, 1.5), atm_var=(1e-8, 1e-8))
        problem = RetrievalProblem(
            model=scene.model,
            y_obs=scene.y_obs,
            obs_var=build_noise_cov(scene.y_obs, NoiseModel(snr=500)),
            prior=prior,
        )
        result = solve_map(problem)
        assert result.converged
        mask = scene.model.mask
        err = np.abs(result.state.refl - scene.x_true.refl)
        assert np.max(err[mask]) < 1e-3
        # Masked channels carry no data weight; they stay prior-dominated
        # and are rightly excluded from the recovery bound.
        assert np.max(err) > np.max(err[mask])
