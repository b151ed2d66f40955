"""Command-line driver.

Subcommands::

    specbayes gen-lut OUT.lut [--channels N] [--aod-grid LO,HI,N] ...
    specbayes gen-scene OUTDIR [--terrain T] [--aod A] [--h2o W] [--seed S]
    specbayes oe RUN.ini
    specbayes mcmc RUN.ini [--jobs N]
    specbayes compare RUN.ini [--jobs N]
    specbayes report RUN.ini

``gen-scene`` writes a complete, self-consistent working set: lookup table,
prior components, observed radiance (CSV + mask sidecar), the ground truth,
and a ready-to-run ``run.ini`` sized so the full compare pipeline finishes
in well under a minute on a laptop.

``oe``/``mcmc``/``compare`` run the retrieval in the named mode (the
subcommand overrides the config file's ``[run] mode``).  ``report`` rebuilds
every diagnostic from artifacts already in the output directory without
re-running the sampler.  ``--jobs N`` runs N independent replicas with
seeds ``seed, seed+1, ...`` in ``output_dir/replica_00`` etc., in parallel
worker processes.

Exit codes: 0 success; 2 configuration or file-format problem; 3 numerical
failure (optimizer divergence, factorization failure, forward-model
singularity, or a state outside the lookup table).
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import io as sio
from . import synthetic
from .config import RetrievalConfig, load_config, render_config, validate_paths
from .exceptions import (
    ConfigError,
    DivergedError,
    DomainBoundsError,
    FactorizationError,
    FileFormatError,
    ForwardSingularityError,
)
from .mcmc import McmcConfig
from .model import ForwardModel
from .pipeline import rebuild_report, run_retrieval

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

_CONFIG_ERRORS = (ConfigError, FileFormatError, FileNotFoundError)
_NUMERICAL_ERRORS = (
    DivergedError,
    FactorizationError,
    ForwardSingularityError,
    DomainBoundsError,
)

# Desk-scale demo chain: long enough for stable diagnostics, short enough
# to finish interactively.  Full-scale values go in by editing run.ini.
_DEMO_MCMC = dict(n_samples=200_000, burn_in=20_000, thin=10)


def _parse_grid(raw: str) -> np.ndarray:
    parts = raw.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(
            f"expected LO,HI,N (three comma-separated values), got {raw!r}"
        )
    lo, hi, n = float(parts[0]), float(parts[1]), int(parts[2])
    if n < 2 or hi <= lo:
        raise argparse.ArgumentTypeError(f"grid {raw!r} needs HI > LO and N >= 2")
    return np.linspace(lo, hi, n)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="specbayes",
        description="Bayesian surface-reflectance retrieval for VSWIR spectra",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-lut", help="write a synthetic atmospheric lookup table")
    p.add_argument("out", type=Path, help="output container path")
    p.add_argument("--channels", type=int, default=synthetic.DEFAULT_N_CHANNELS)
    p.add_argument(
        "--aod-grid",
        type=_parse_grid,
        default=None,
        metavar="LO,HI,N",
        help="AOD knots (default 0,1,9)",
    )
    p.add_argument(
        "--h2o-grid",
        type=_parse_grid,
        default=None,
        metavar="LO,HI,N",
        help="H2O-column knots (default 0,5,9)",
    )
    p.add_argument("--csv", action="store_true", help="also write a CSV export")

    p = sub.add_parser(
        "gen-scene", help="write a synthetic scene plus a ready run.ini"
    )
    p.add_argument("outdir", type=Path)
    p.add_argument(
        "--terrain",
        default="vegetation-like",
        choices=list(synthetic.TERRAIN_LABELS),
    )
    p.add_argument("--aod", type=float, default=0.2)
    p.add_argument("--h2o", type=float, default=1.5)
    p.add_argument("--channels", type=int, default=synthetic.DEFAULT_N_CHANNELS)
    # Demo noise is deliberately generous: wide atmospheric marginals keep
    # the adaptive proposal's fixed floors well scaled, which is what makes
    # the out-of-the-box acceptance rate land near the classic 23% target.
    p.add_argument("--snr", type=float, default=8.0)
    p.add_argument("--calib-frac", type=float, default=0.15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument(
        "--noiseless", action="store_true", help="skip the observation noise draw"
    )
    p.add_argument(
        "--aod-grid", type=_parse_grid, default=None, metavar="LO,HI,N",
        help="override the lookup-table AOD knots",
    )

    for mode in ("oe", "mcmc", "compare"):
        p = sub.add_parser(mode, help=f"run the retrieval in {mode} mode")
        p.add_argument("config", type=Path, help="run.ini path")
        if mode != "oe":
            p.add_argument(
                "--jobs",
                type=int,
                default=1,
                help="independent replicas with consecutive seeds",
            )

    p = sub.add_parser("report", help="rebuild diagnostics from stored artifacts")
    p.add_argument("config", type=Path)

    return parser


def cmd_gen_lut(args) -> int:
    wavelengths = synthetic.default_wavelengths(args.channels)
    lut = synthetic.make_lut(
        wavelengths=wavelengths, aod_grid=args.aod_grid, h2o_grid=args.h2o_grid
    )
    args.out.parent.mkdir(parents=True, exist_ok=True)
    sio.save_lut(args.out, lut, {"origin": "synthetic"})
    print(f"wrote {args.out}")
    if args.csv:
        csv_path = args.out.with_suffix(args.out.suffix + ".csv")
        sio.save_lut_csv(csv_path, lut)
        print(f"wrote {csv_path}")
    return EXIT_OK


def cmd_gen_scene(args) -> int:
    outdir = args.outdir
    outdir.mkdir(parents=True, exist_ok=True)
    grid = synthetic.default_wavelength_grid(args.channels)
    lut = synthetic.make_lut(wavelengths=grid.wavelengths, aod_grid=args.aod_grid)
    components = synthetic.make_surface_components(grid.wavelengths)
    noise = None
    if not args.noiseless:
        noise = synthetic.NoiseModel(snr=args.snr, calib_frac=args.calib_frac)
    model = ForwardModel(
        lut=lut, geom=synthetic.default_geometry(grid.wavelengths), grid=grid
    )
    scene = synthetic.generate_synthetic_scene(
        args.terrain,
        (args.aod, args.h2o),
        noise,
        seed=args.seed,
        model=model,
        components=components,
    )

    sio.save_lut(outdir / "table.lut", lut, {"origin": "synthetic"})
    sio.save_components(
        outdir / "components.bin",
        components,
        {"origin": "synthetic", "terrain_true": args.terrain},
    )
    sio.save_spectrum(outdir / "radiance.csv", scene.model.grid, scene.y_obs)
    sio.save_state(outdir / "truth.json", scene.x_true)

    config = RetrievalConfig(
        radiance_path="radiance.csv",
        lut_path="table.lut",
        components_path="components.bin",
        output_dir="out",
        noise=noise if noise is not None else synthetic.NoiseModel(snr=args.snr),
        mcmc=McmcConfig(seed=args.seed, **_DEMO_MCMC),
        mode="compare",
    )
    (outdir / "run.ini").write_text(render_config(config), encoding="utf-8")
    for name in ("table.lut", "components.bin", "radiance.csv", "truth.json", "run.ini"):
        print(f"wrote {outdir / name}")
    return EXIT_OK


def _replica_config(config: RetrievalConfig, index: int) -> RetrievalConfig:
    mcmc = dataclasses.replace(config.mcmc, seed=config.mcmc.seed + index)
    return dataclasses.replace(
        config,
        mcmc=mcmc,
        output_dir=config.output_dir / f"replica_{index:02d}",
    )


def _run_one(config: RetrievalConfig, mode: str) -> tuple[str, dict]:
    report = run_retrieval(config, mode)
    return str(config.output_dir / "report.json"), report


def cmd_run(args, mode: str) -> int:
    config = load_config(args.config)
    validate_paths(config)
    jobs = getattr(args, "jobs", 1)
    if jobs <= 1:
        path, report = _run_one(config, mode)
        print(f"wrote {path}")
        _print_summary(report)
        return EXIT_OK
    replicas = [_replica_config(config, i) for i in range(jobs)]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        for path, report in pool.map(_run_one, replicas, [mode] * jobs):
            print(f"wrote {path}")
            _print_summary(report)
    return EXIT_OK


def _print_summary(report: dict) -> None:
    oe = report["oe"]
    print(
        f"  oe: converged={oe['converged']} iterations={oe['n_iterations']} "
        f"aod={oe['aod']:.4f} h2o={oe['h2o']:.4f}"
    )
    mcmc = report.get("mcmc")
    if mcmc:
        print(
            f"  mcmc: kept={mcmc['n_kept']} "
            f"accept_overall={mcmc['accept_rate_overall']:.3f} "
            f"ess_aod={mcmc['ess']['aod']:.0f}"
        )
    comparison = report.get("comparison")
    if comparison:
        cov = comparison["covariance"]
        print(
            f"  compare: d_tr={cov['d_tr']:.3f} d_norm={cov['d_norm']:.3f} "
            f"d_f={cov['d_f_normalized']:.3f} "
            f"ks_aod_p={comparison['ks']['aod']['p_value']:.3g}"
        )


def cmd_report(args) -> int:
    config = load_config(args.config)
    validate_paths(config)
    report = rebuild_report(config)
    print(f"wrote {config.output_dir / 'report.json'}")
    _print_summary(report)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gen-lut":
            return cmd_gen_lut(args)
        if args.command == "gen-scene":
            return cmd_gen_scene(args)
        if args.command == "report":
            return cmd_report(args)
        mode = {"oe": "oe_only", "mcmc": "mcmc_only", "compare": "compare"}[
            args.command
        ]
        return cmd_run(args, mode)
    except _CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
