"""Run configuration: a small INI dialect mapped onto one frozen dataclass.

The file format is plain ``configparser`` INI with five sections, all keys
optional except the four paths::

    [paths]
    radiance = radiance.csv        # observed spectrum (CSV + optional .mask)
    lut = table.lut                # atmospheric lookup table container
    components = components.bin    # surface prior components container
    output_dir = out               # artifacts land here; created if missing

    [geometry]
    cos_solar_zenith = 0.85

    [noise]
    snr = 500.0
    calib_frac = 0.01
    rt_model_var = 0.0

    [prior]
    atm_mean = 0.2, 1.5            # AOD, H2O column
    atm_var = 1.0, 1.0             # diagonal variances

    [mcmc]
    n_samples = 200000
    burn_in = 20000
    thin = 10
    eps2 = 0.11
    eps1 = 0.14
    adapt_start = 1000
    eps0 = 0.001
    eps_am = 0.001
    s2 = 2.8322
    refl_proposal_mode = laplace   # or linear_inversion
    truncation_correction = true
    seed = 0

    [run]
    mode = compare                 # oe_only | mcmc_only | compare
    tune_proposal = false          # pilot-tune eps2 into the target band

Relative paths resolve against the directory containing the config file.
Unknown sections or keys are rejected rather than ignored: a typo that
silently falls back to a default would poison reproducibility.

The solar irradiance spectrum is always the bundled synthetic solar model
evaluated on the radiance file's wavelengths; only ``cos_solar_zenith`` is
configurable here.  Supplying a measured irradiance spectrum would need a
second spectrum input, which no current workflow requires.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from .exceptions import ConfigError
from .mcmc import McmcConfig
from .priors import ATM_PRIOR_MEAN, ATM_PRIOR_VAR, NoiseModel

MODES = ("oe_only", "mcmc_only", "compare")

_KNOWN_KEYS = {
    "paths": ("radiance", "lut", "components", "output_dir"),
    "geometry": ("cos_solar_zenith",),
    "noise": ("snr", "calib_frac", "rt_model_var"),
    "prior": ("atm_mean", "atm_var"),
    "mcmc": (
        "n_samples",
        "burn_in",
        "thin",
        "eps2",
        "eps1",
        "adapt_start",
        "eps0",
        "eps_am",
        "s2",
        "refl_proposal_mode",
        "truncation_correction",
        "seed",
    ),
    "run": ("mode", "tune_proposal"),
}


@dataclass(frozen=True)
class RetrievalConfig:
    """Everything one retrieval run needs, with paths fully resolved."""

    radiance_path: Path
    lut_path: Path
    components_path: Path
    output_dir: Path
    cos_solar_zenith: float = 0.85
    noise: NoiseModel = field(default_factory=NoiseModel)
    atm_mean: tuple[float, float] = ATM_PRIOR_MEAN
    atm_var: tuple[float, float] = ATM_PRIOR_VAR
    mcmc: McmcConfig = field(default_factory=McmcConfig)
    mode: str = "compare"
    tune_proposal: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(
                f"run.mode must be one of {', '.join(MODES)}, got {self.mode!r}"
            )
        if not 0.0 < self.cos_solar_zenith <= 1.0:
            raise ConfigError(
                f"geometry.cos_solar_zenith must be in (0, 1], "
                f"got {self.cos_solar_zenith!r}"
            )
        for name, pair in (("atm_mean", self.atm_mean), ("atm_var", self.atm_var)):
            if len(pair) != 2:
                raise ConfigError(f"prior.{name} needs exactly two values")
            object.__setattr__(self, name, (float(pair[0]), float(pair[1])))
        if self.atm_var[0] <= 0 or self.atm_var[1] <= 0:
            raise ConfigError("prior.atm_var entries must be positive")
        for name in ("radiance_path", "lut_path", "components_path", "output_dir"):
            object.__setattr__(self, name, Path(getattr(self, name)))

    def to_dict(self) -> dict:
        """Plain JSON-able form: the manifest/hash representation."""
        return {
            "paths": {
                "radiance": str(self.radiance_path),
                "lut": str(self.lut_path),
                "components": str(self.components_path),
                "output_dir": str(self.output_dir),
            },
            "geometry": {"cos_solar_zenith": self.cos_solar_zenith},
            "noise": {
                "snr": float(self.noise.snr),
                "calib_frac": float(self.noise.calib_frac),
                "rt_model_var": float(self.noise.rt_model_var),
            },
            "prior": {
                "atm_mean": list(self.atm_mean),
                "atm_var": list(self.atm_var),
            },
            "mcmc": dataclasses.asdict(self.mcmc),
            "run": {"mode": self.mode, "tune_proposal": self.tune_proposal},
        }


def _get(parser, section, key, conv, default, origin):
    if not parser.has_option(section, key):
        return default
    raw = parser.get(section, key)
    try:
        return conv(raw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{origin}: [{section}] {key} = {raw!r}: {exc}") from exc


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("true", "yes", "on", "1"):
        return True
    if lowered in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


def _parse_pair(raw: str) -> tuple[float, float]:
    parts = [p for p in raw.replace(",", " ").split() if p]
    if len(parts) != 2:
        raise ValueError(f"expected two numbers, got {raw!r}")
    return float(parts[0]), float(parts[1])


def load_config(path) -> RetrievalConfig:
    """Parse and validate an INI run configuration.

    Raises :class:`ConfigError` for unreadable files, unknown sections or
    keys, missing paths, or values that fail type or range checks.
    """
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    for section in parser.sections():
        if section not in _KNOWN_KEYS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key in parser.options(section):
            if key not in _KNOWN_KEYS[section]:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")

    if not parser.has_section("paths"):
        raise ConfigError(f"{path}: missing required section [paths]")
    base = path.parent
    paths = {}
    for key in ("radiance", "lut", "components", "output_dir"):
        if not parser.has_option("paths", key):
            raise ConfigError(f"{path}: [paths] {key} is required")
        paths[key] = base / parser.get("paths", key)

    try:
        noise = NoiseModel(
            snr=_get(parser, "noise", "snr", float, 500.0, path),
            calib_frac=_get(parser, "noise", "calib_frac", float, 0.01, path),
            rt_model_var=_get(parser, "noise", "rt_model_var", float, 0.0, path),
        )
    except ValueError as exc:
        raise ConfigError(f"{path}: [noise] {exc}") from exc
    mcmc_kwargs = {}
    for key, conv in (
        ("n_samples", int),
        ("burn_in", int),
        ("thin", int),
        ("eps2", float),
        ("eps1", float),
        ("adapt_start", int),
        ("eps0", float),
        ("eps_am", float),
        ("s2", float),
        ("refl_proposal_mode", str),
        ("truncation_correction", _parse_bool),
        ("seed", int),
    ):
        sentinel = object()
        value = _get(parser, "mcmc", key, conv, sentinel, path)
        if value is not sentinel:
            mcmc_kwargs[key] = value
    try:
        mcmc = McmcConfig(**mcmc_kwargs)
    except ValueError as exc:
        raise ConfigError(f"{path}: [mcmc] {exc}") from exc

    try:
        return RetrievalConfig(
            radiance_path=paths["radiance"],
            lut_path=paths["lut"],
            components_path=paths["components"],
            output_dir=paths["output_dir"],
            cos_solar_zenith=_get(
                parser, "geometry", "cos_solar_zenith", float, 0.85, path
            ),
            noise=noise,
            atm_mean=_get(parser, "prior", "atm_mean", _parse_pair, ATM_PRIOR_MEAN, path),
            atm_var=_get(parser, "prior", "atm_var", _parse_pair, ATM_PRIOR_VAR, path),
            mcmc=mcmc,
            mode=_get(parser, "run", "mode", str, "compare", path),
            tune_proposal=_get(parser, "run", "tune_proposal", _parse_bool, False, path),
        )
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def validate_paths(config: RetrievalConfig) -> None:
    """Check input files exist and make the output directory usable."""
    missing = [
        str(p)
        for p in (config.radiance_path, config.lut_path, config.components_path)
        if not p.is_file()
    ]
    if missing:
        raise ConfigError(f"missing input files: {', '.join(missing)}")
    try:
        config.output_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output dir {config.output_dir}: {exc}") from exc
    if not os.access(config.output_dir, os.W_OK):
        raise ConfigError(f"output dir {config.output_dir} is not writable")


def render_config(config: RetrievalConfig) -> str:
    """Serialize to the INI dialect.

    Floats print with ``repr`` so nothing quantizes: loading the rendered
    text reproduces every non-path field exactly.  Paths are written as
    stored; since ``load_config`` resolves relative paths against the config
    file's directory, render with paths relative to where the file will live
    (as the scene generator does) or use absolute paths.
    """
    noise = config.noise
    mcmc = config.mcmc
    lines = [
        "[paths]",
        f"radiance = {config.radiance_path}",
        f"lut = {config.lut_path}",
        f"components = {config.components_path}",
        f"output_dir = {config.output_dir}",
        "",
        "[geometry]",
        f"cos_solar_zenith = {config.cos_solar_zenith!r}",
        "",
        "[noise]",
        f"snr = {float(noise.snr)!r}",
        f"calib_frac = {float(noise.calib_frac)!r}",
        f"rt_model_var = {float(noise.rt_model_var)!r}",
        "",
        "[prior]",
        f"atm_mean = {config.atm_mean[0]!r}, {config.atm_mean[1]!r}",
        f"atm_var = {config.atm_var[0]!r}, {config.atm_var[1]!r}",
        "",
        "[mcmc]",
        f"n_samples = {mcmc.n_samples}",
        f"burn_in = {mcmc.burn_in}",
        f"thin = {mcmc.thin}",
        f"eps2 = {mcmc.eps2!r}",
        f"eps1 = {mcmc.eps1!r}",
        f"adapt_start = {mcmc.adapt_start}",
        f"eps0 = {mcmc.eps0!r}",
        f"eps_am = {mcmc.eps_am!r}",
        f"s2 = {mcmc.s2!r}",
        f"refl_proposal_mode = {mcmc.refl_proposal_mode}",
        f"truncation_correction = {str(mcmc.truncation_correction).lower()}",
        f"seed = {mcmc.seed}",
        "",
        "[run]",
        f"mode = {config.mode}",
        f"tune_proposal = {str(config.tune_proposal).lower()}",
        "",
    ]
    return "\n".join(lines)
