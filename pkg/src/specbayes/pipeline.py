"""End-to-end retrieval runs: load inputs, solve, sample, diagnose, write.

Every run writes into ``config.output_dir`` with fixed filenames:

===========================  ==================================================
``manifest.json``            config + hash + versions (written first, so a
                             failed run still records what was attempted)
``oe_result.json``           MAP state and solver bookkeeping
``oe_cov.bin``               Laplace covariance (container, column-major)
``chain.bin`` (+ sidecars)   kept samples, ``.json`` metadata, ``.lp`` trace
``trace.csv``                kept-sample log posterior and atmosphere trace
``ess_vs_wavelength.csv``    integrated autocorrelation time and ESS per channel
``variance_vs_wavelength.csv`` posterior mean/variance, sampler vs Laplace
``quotient_vs_rank.csv``     directional variance quotients, ranked
``qq_aod.csv``/``qq_h2o.csv`` Q-Q points against the truncated-normal null
``ks_p_values.csv``          KS statistic and p-value per parameter
``atm_hist.csv``             2-D histogram of the atmospheric marginal
``report.json``              schema-validated summary tying it all together
===========================  ==================================================

Modes nest: ``oe_only`` stops after the MAP solve, ``mcmc_only`` adds the
chain and its per-channel CSVs, ``compare`` adds the Gaussian-approximation
diagnostics.  The chain always initializes at the MAP state, so every mode
starts with the optimizer.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io as sio
from .config import RetrievalConfig
from .diagnostics import (
    cov_compare,
    eigen_quotient,
    ess,
    ks_normality,
    posterior_summary,
    qq_data,
)
from .exceptions import ConfigError
from .linalg import SpdMatrix
from .lut import interpolate_atm
from .mcmc import Chain, run_chain
from .model import ForwardModel, Geometry
from .optimal_estimation import (
    OeResult,
    RetrievalProblem,
    laplace_cov,
    solve_map,
)
from .priors import (
    GaussianPrior,
    MixtureComponent,
    assemble_prior,
    build_noise_cov,
    select_component,
)
from .synthetic import solar_spectrum

ACCEPT_TARGET = 0.23
ACCEPT_BAND = (0.2, 0.3)
_HIST_BINS = 32
_KS_REJECT_LEVEL = 0.05


@dataclass(frozen=True)
class LoadedInputs:
    """Everything read off disk plus the assembled forward model."""

    y_obs: np.ndarray
    model: ForwardModel
    components: list[MixtureComponent]


def initial_reflectance_estimate(y_obs, model: ForwardModel, atm) -> np.ndarray:
    """Exact per-channel inversion of the forward model at a fixed atmosphere.

    With the atmosphere given, each channel solves to
    ``x = q / (t + s q)`` where ``q = y / coeff - rho_a``.  The result is
    clipped to [0, 1]: masked or noisy channels can invert to nonsense, and
    this estimate only seeds the component selection and the optimizer.
    """
    y_obs = np.asarray(y_obs, dtype=float)
    rho_a, s, t = interpolate_atm(model.lut, atm[0], atm[1], clamp=True)
    q = y_obs / model.geom.coeff - rho_a
    den = t + s * q
    x = np.where(np.abs(den) > 1e-12, q / np.where(den == 0.0, 1.0, den), 0.0)
    return np.clip(x, 0.0, 1.0)


def load_inputs(config: RetrievalConfig) -> LoadedInputs:
    """Read spectrum, lookup table, and components; build the forward model."""
    grid, y_obs = sio.load_spectrum(config.radiance_path)
    lut = sio.load_lut(config.lut_path)
    if not np.array_equal(lut.wavelengths, grid.wavelengths):
        raise ConfigError(
            f"lookup table wavelengths ({config.lut_path}) do not match the "
            f"radiance wavelengths ({config.radiance_path})"
        )
    components = sio.load_components(config.components_path)
    geom = Geometry(
        cos_solar_zenith=config.cos_solar_zenith,
        solar_irradiance=solar_spectrum(grid.wavelengths),
    )
    model = ForwardModel(lut=lut, geom=geom, grid=grid)
    return LoadedInputs(y_obs=y_obs, model=model, components=components)


def build_problem(
    inputs: LoadedInputs, config: RetrievalConfig
) -> tuple[RetrievalProblem, np.ndarray]:
    """Select the surface component and assemble the posterior problem.

    Returns the problem plus the initial state (channel-inverse reflectance
    at the prior-mean atmosphere), which seeds both the component choice and
    the optimizer.
    """
    x0_refl = initial_reflectance_estimate(inputs.y_obs, inputs.model, config.atm_mean)
    surface = select_component(inputs.components, x0_refl)
    prior = assemble_prior(surface, atm_mean=config.atm_mean, atm_var=config.atm_var)
    problem = RetrievalProblem(
        model=inputs.model,
        y_obs=inputs.y_obs,
        obs_var=build_noise_cov(inputs.y_obs, config.noise),
        prior=prior,
    )
    x0 = np.concatenate([x0_refl, list(config.atm_mean)])
    return problem, x0


def tune_refl_scale(
    inputs: LoadedInputs,
    prior: GaussianPrior,
    config: RetrievalConfig,
    oe_result: OeResult,
    *,
    max_pilots: int = 8,
    pilot_samples: int = 4000,
    pilot_burn_in: int = 500,
) -> tuple[float, list[dict]]:
    """Adjust eps2 with short pilot chains until the overall acceptance rate
    lands in the target band.

    The atmospheric block adapts on its own, so only the reflectance scale
    is tuned: each pilot measures both block rates, computes the reflectance
    rate that would center the overall rate on the target given the observed
    atmospheric rate, and moves eps2 multiplicatively (acceptance falls as
    the proposal widens).  Stops early once the overall rate is in band.
    """
    eps2 = config.mcmc.eps2
    pilots = []
    for k in range(max_pilots):
        pilot_cfg = dataclasses.replace(
            config.mcmc,
            n_samples=pilot_samples,
            burn_in=pilot_burn_in,
            thin=10,
            eps2=eps2,
            seed=config.mcmc.seed + 7001 + k,
        )
        chain = run_chain(
            inputs.y_obs,
            prior,
            config.noise,
            inputs.model,
            oe_result,
            pilot_cfg,
        )
        overall = chain.accept_rate_overall
        rate_refl = chain.accept_rate_refl
        rate_atm = chain.accept_rate_atm
        pilots.append(
            {
                "eps2": float(eps2),
                "accept_overall": float(overall),
                "accept_refl": float(rate_refl),
                "accept_atm": float(rate_atm),
            }
        )
        if ACCEPT_BAND[0] <= overall <= ACCEPT_BAND[1]:
            break
        target_refl = min(max(2.0 * ACCEPT_TARGET - rate_atm, 0.02), 0.95)
        factor = ((rate_refl + 1e-3) / target_refl) ** 1.5
        eps2 *= min(max(factor, 0.2), 5.0)
    return float(eps2), pilots


# ---------------------------------------------------------------------------
# CSV emitters (plot data; machine-readable per the report contract)


def _write_csv(path, header: str, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")


def _fmt(x) -> str:
    return format(float(x), ".17g")


def write_trace_csv(path, chain: Chain) -> None:
    cfg = chain.config
    steps = cfg.burn_in + cfg.thin * np.arange(1, chain.n_kept + 1)
    rows = (
        (str(int(step)), _fmt(lp), _fmt(aod), _fmt(h2o))
        for step, lp, (aod, h2o) in zip(
            steps, chain.log_posterior_trace, chain.atm
        )
    )
    _write_csv(path, "step,log_posterior,aod,h2o", rows)


def write_ess_csv(path, chain: Chain, model: ForwardModel, report) -> None:
    rows = (
        (_fmt(w), str(int(m)), _fmt(tau), _fmt(e))
        for w, m, tau, e in zip(
            model.grid.wavelengths,
            model.mask,
            report.tau[:-2],
            report.ess[:-2],
        )
    )
    _write_csv(path, "wavelength_nm,retained,tau,ess", rows)


def write_variance_csv(
    path, chain_summary, oe_result: OeResult, gamma_l: SpdMatrix, model: ForwardModel
) -> None:
    n = model.n
    var_l = np.diag(gamma_l.values)[:n]
    rows = (
        (
            _fmt(w),
            str(int(m)),
            _fmt(mean_m),
            _fmt(mean_o),
            _fmt(var_m),
            _fmt(vl),
        )
        for w, m, mean_m, mean_o, var_m, vl in zip(
            model.grid.wavelengths,
            model.mask,
            chain_summary.mean[:n],
            oe_result.state.refl,
            chain_summary.variance[:n],
            var_l,
        )
    )
    _write_csv(
        path,
        "wavelength_nm,retained,mean_mcmc,mean_oe,var_mcmc,var_laplace",
        rows,
    )


def write_quotient_csv(path, quot) -> None:
    rows = (
        (str(rank), _fmt(ev), _fmt(q), str(int(rel)))
        for rank, (ev, q, _, rel) in enumerate(quot, start=1)
    )
    _write_csv(path, "rank,eigval_mcmc,quotient,reliable", rows)


def write_qq_csv(path, points: np.ndarray) -> None:
    rows = ((_fmt(a), _fmt(b)) for a, b in points)
    _write_csv(path, "theoretical_quantile,sample_quantile", rows)


def write_ks_csv(path, entries) -> None:
    rows = (
        (name, null, _fmt(stat), _fmt(p)) for name, null, stat, p in entries
    )
    _write_csv(path, "parameter,null,statistic,p_value", rows)


def write_atm_hist_csv(path, chain: Chain, bins: int = _HIST_BINS) -> None:
    aod, h2o = chain.atm[:, 0], chain.atm[:, 1]
    counts, aod_edges, h2o_edges = np.histogram2d(aod, h2o, bins=bins)
    rows = (
        (
            _fmt(aod_edges[i]),
            _fmt(aod_edges[i + 1]),
            _fmt(h2o_edges[j]),
            _fmt(h2o_edges[j + 1]),
            str(int(counts[i, j])),
        )
        for i in range(bins)
        for j in range(bins)
    )
    _write_csv(path, "aod_lo,aod_hi,h2o_lo,h2o_hi,count", rows)


# ---------------------------------------------------------------------------
# report assembly


def _oe_block(result: OeResult) -> dict:
    return {
        "converged": bool(result.converged),
        "n_iterations": int(result.n_iterations),
        "cost": float(result.cost),
        "grad_norm": float(result.grad_norm),
        "boundary_clamped": bool(result.boundary_clamped),
        "aod": float(result.state.aod),
        "h2o": float(result.state.h2o),
        "refl": [float(v) for v in result.state.refl],
    }


def _mcmc_block(chain: Chain, ess_report) -> dict:
    cfg = chain.config
    atm = chain.atm
    return {
        "n_samples": int(cfg.n_samples),
        "burn_in": int(cfg.burn_in),
        "thin": int(cfg.thin),
        "n_kept": int(chain.n_kept),
        "accept_rate_atm": float(chain.accept_rate_atm),
        "accept_rate_refl": float(chain.accept_rate_refl),
        "accept_rate_overall": float(chain.accept_rate_overall),
        "init_projected": bool(chain.init_projected),
        "positivity_ok": bool(np.all(atm >= 0.0)),
        "ess": {k: float(v) for k, v in ess_report.summary.items()},
        "atm_mean": [float(v) for v in atm.mean(axis=0)],
        "atm_variance": [float(v) for v in atm.var(axis=0, ddof=1)],
    }


def _ks_entries(chain: Chain, model: ForwardModel):
    """KS test per parameter: normal null for reflectances, zero-truncated
    for the positivity-constrained atmospheric parameters."""
    entries = []
    for i in range(chain.n_refl):
        res = ks_normality(chain.samples[:, i], "normal")
        entries.append((f"refl_{i:03d}", "normal", res.statistic, res.p_value))
    for name, col in (("aod", -2), ("h2o", -1)):
        res = ks_normality(chain.samples[:, col], "truncated_normal_at_zero")
        entries.append(
            (name, "truncated_normal_at_zero", res.statistic, res.p_value)
        )
    return entries


def _comparison_block(
    chain: Chain,
    summary,
    gamma_l: SpdMatrix,
    prior: GaussianPrior,
    model: ForwardModel,
    ks_entries,
) -> tuple[dict, object]:
    gamma_m = SpdMatrix(np.cov(chain.samples, rowvar=False))
    metrics = cov_compare(gamma_m, gamma_l, prior.cov)
    quot = eigen_quotient(gamma_m, gamma_l)
    reliable_q = quot.quotients[quot.reliable]
    refl_ps = np.array([p for name, _, _, p in ks_entries if name.startswith("refl")])
    retained_ps = refl_ps[model.mask]
    atm_ks = {e[0]: e for e in ks_entries if e[0] in ("aod", "h2o")}
    # Relative difference of posterior means, sampler vs optimizer, excluding
    # channels whose sampler mean sits at zero (division is meaningless there).
    ok = ~summary.near_zero_mean
    rel_max = float(np.max(summary.rel_diff[ok])) if np.any(ok) else 0.0
    block = {
        "covariance": {
            "d_tr": float(metrics.d_tr),
            "d_norm": float(metrics.d_norm),
            "d_f_raw": float(metrics.d_f_raw),
            "d_f_normalized": float(metrics.d_f_normalized),
        },
        "ks": {
            "aod": {
                "null": "truncated_normal_at_zero",
                "statistic": float(atm_ks["aod"][2]),
                "p_value": float(atm_ks["aod"][3]),
                "params_fitted": True,
            },
            "h2o": {
                "null": "truncated_normal_at_zero",
                "statistic": float(atm_ks["h2o"][2]),
                "p_value": float(atm_ks["h2o"][3]),
                "params_fitted": True,
            },
            "refl_p_min": float(np.min(retained_ps)),
            "refl_reject_frac": float(np.mean(retained_ps < _KS_REJECT_LEVEL)),
        },
        "rel_diff_mean_max": rel_max,
        "eigen_quotient_max": float(np.max(reliable_q)),
        "eigen_quotient_min": float(np.min(reliable_q)),
    }
    return block, quot


# ---------------------------------------------------------------------------
# run drivers


def _base_report(config: RetrievalConfig, model: ForwardModel, mode: str) -> dict:
    return {
        "report_version": 1,
        "mode": mode,
        "n_channels": int(model.n),
        "n_retained": int(model.grid.n_retained),
        "seed": int(config.mcmc.seed),
        "config_hash": sio.config_hash(config.to_dict()),
        "files": {},
    }


def _solve_oe(config: RetrievalConfig, out: Path):
    """Shared front half: inputs, problem, manifest, MAP solve, Laplace."""
    inputs = load_inputs(config)
    problem, x0 = build_problem(inputs, config)
    sio.write_manifest(
        out / "manifest.json", config=config.to_dict(), seed=config.mcmc.seed
    )
    result = solve_map(problem, x0)
    sio.save_oe_result(out / "oe_result.json", result)
    gamma_l = laplace_cov(problem, result.state)
    sio.save_covariance(
        out / "oe_cov.bin", gamma_l.values, {"kind_note": "laplace_full_state"}
    )
    return inputs, problem, result, gamma_l


def _run_sampler(inputs, problem, config, result):
    """Optionally tune eps2, then run the production chain."""
    mcmc_cfg = config.mcmc
    pilots = []
    if config.tune_proposal:
        eps2, pilots = tune_refl_scale(inputs, problem.prior, config, result)
        mcmc_cfg = dataclasses.replace(mcmc_cfg, eps2=eps2)
    chain = run_chain(
        inputs.y_obs, problem.prior, config.noise, inputs.model, result, mcmc_cfg
    )
    return chain, mcmc_cfg, pilots


def _write_chain_outputs(out: Path, chain: Chain, model: ForwardModel, report: dict):
    sio.save_chain(out / "chain.bin", chain)
    ess_report = ess(chain)
    write_trace_csv(out / "trace.csv", chain)
    write_ess_csv(out / "ess_vs_wavelength.csv", chain, model, ess_report)
    write_atm_hist_csv(out / "atm_hist.csv", chain)
    report["files"].update(
        {
            "chain": "chain.bin",
            "chain_sidecar": "chain.bin.json",
            "chain_trace": "chain.bin.lp",
            "trace_csv": "trace.csv",
            "ess_csv": "ess_vs_wavelength.csv",
            "atm_hist_csv": "atm_hist.csv",
        }
    )
    return ess_report


def _write_compare_outputs(
    out: Path,
    chain: Chain,
    result: OeResult,
    gamma_l: SpdMatrix,
    prior: GaussianPrior,
    model: ForwardModel,
    report: dict,
):
    summary = posterior_summary(chain, reference=result.state.as_array())
    ks_entries = _ks_entries(chain, model)
    block, quot = _comparison_block(
        chain, summary, gamma_l, prior, model, ks_entries
    )
    report["comparison"] = block
    write_variance_csv(
        out / "variance_vs_wavelength.csv", summary, result, gamma_l, model
    )
    write_quotient_csv(out / "quotient_vs_rank.csv", quot)
    write_ks_csv(out / "ks_p_values.csv", ks_entries)
    write_qq_csv(
        out / "qq_aod.csv", qq_data(chain.atm[:, 0], "truncated_normal_at_zero")
    )
    write_qq_csv(
        out / "qq_h2o.csv", qq_data(chain.atm[:, 1], "truncated_normal_at_zero")
    )
    report["files"].update(
        {
            "variance_csv": "variance_vs_wavelength.csv",
            "quotient_csv": "quotient_vs_rank.csv",
            "ks_csv": "ks_p_values.csv",
            "qq_aod_csv": "qq_aod.csv",
            "qq_h2o_csv": "qq_h2o.csv",
        }
    )


def run_retrieval(config: RetrievalConfig, mode: str | None = None) -> dict:
    """Run one retrieval in the given mode (default: the config's mode).

    Returns the report dict; all artifacts land in ``config.output_dir``.
    On optimizer divergence or a numerical failure the exception propagates
    after the manifest (and any artifacts already written) are on disk.
    """
    mode = mode or config.mode
    if mode not in ("oe_only", "mcmc_only", "compare"):
        raise ConfigError(f"unknown mode {mode!r}")
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)

    inputs, problem, result, gamma_l = _solve_oe(config, out)
    report = _base_report(config, inputs.model, mode)
    report["oe"] = _oe_block(result)
    report["files"].update(
        {
            "manifest": "manifest.json",
            "oe_result": "oe_result.json",
            "oe_cov": "oe_cov.bin",
        }
    )

    if mode != "oe_only":
        chain, mcmc_cfg, pilots = _run_sampler(inputs, problem, config, result)
        ess_report = _write_chain_outputs(out, chain, inputs.model, report)
        report["mcmc"] = _mcmc_block(chain, ess_report)
        if pilots:
            report["mcmc"]["tuning_pilots"] = pilots
            report["mcmc"]["eps2_tuned"] = float(mcmc_cfg.eps2)
        if mode == "compare":
            _write_compare_outputs(
                out, chain, result, gamma_l, problem.prior, inputs.model, report
            )

    report["files"]["report"] = "report.json"
    sio.save_report(out / "report.json", report)
    return report


def rebuild_report(config: RetrievalConfig) -> dict:
    """Recompute diagnostics from artifacts already on disk.

    Loads the stored chain and MAP result instead of re-running them, then
    rebuilds every diagnostic CSV and the report.  The chain's own stored
    config (seed included) describes the sampler run, so the report states
    what actually ran even if the config file has drifted since.
    """
    out = config.output_dir
    chain_path = out / "chain.bin"
    oe_path = out / "oe_result.json"
    missing = [str(p) for p in (chain_path, oe_path) if not p.is_file()]
    if missing:
        raise ConfigError(
            f"cannot rebuild report, missing artifacts: {', '.join(missing)}; "
            "run mcmc or compare first"
        )
    inputs = load_inputs(config)
    problem, _ = build_problem(inputs, config)
    result = sio.load_oe_result(oe_path)
    chain = sio.load_chain(chain_path)
    gamma_l_values = sio.load_covariance(out / "oe_cov.bin")
    gamma_l = SpdMatrix(gamma_l_values, label="stored Laplace covariance")

    stored_seed = chain.config.seed
    report = _base_report(config, inputs.model, "compare")
    report["seed"] = int(stored_seed)
    report["oe"] = _oe_block(result)
    report["files"].update(
        {
            "manifest": "manifest.json",
            "oe_result": "oe_result.json",
            "oe_cov": "oe_cov.bin",
        }
    )
    ess_report = _write_chain_outputs(out, chain, inputs.model, report)
    report["mcmc"] = _mcmc_block(chain, ess_report)
    _write_compare_outputs(
        out, chain, result, gamma_l, problem.prior, inputs.model, report
    )
    report["files"]["report"] = "report.json"
    sio.save_report(out / "report.json", report)
    return report
