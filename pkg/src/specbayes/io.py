"""Serialization for every on-disk artifact the retrieval pipeline touches.

Two file layouts cover everything binary:

* **Container** (lookup tables, prior components, covariances): the 8-byte
  magic ``SPECBAY1``, a little-endian uint64 header length, a canonical JSON
  header ``{"format", "version", "kind", "arrays": [{"name", "dtype",
  "shape"}, ...], "meta": {...}}``, then the raw array payloads concatenated
  in header order.  Payloads are column-major (Fortran order), little-endian,
  with dtypes restricted to float64, int64, and bool.

* **Chain** (MCMC samples): a bare row-major little-endian float64 matrix,
  described by a JSON sidecar at ``<path>.json`` and accompanied by the
  log-posterior trace at ``<path>.lp`` in the same raw encoding.  The split
  keeps the big matrix mmap-friendly while the sidecar stays greppable.

Text artifacts are two-column CSV spectra (with an optional mask sidecar),
JSON summaries for solver results and state vectors, a JSON run manifest
keyed by a SHA-256 hash of the canonical config encoding, and a CSV
import/export pair for small chains.  All floats print with ``%.17g``, which
round-trips IEEE doubles exactly.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
import sys
from importlib import metadata, resources
from pathlib import Path

import jsonschema
import numpy as np

from .exceptions import FileFormatError
from .lut import AtmLookupTable
from .mcmc import Chain, McmcConfig
from .model import StateVector, WavelengthGrid
from .optimal_estimation import OeResult
from .priors import MixtureComponent, component_from_arrays

_MAGIC = b"SPECBAY1"
_CONTAINER_VERSION = 1
_CHAIN_VERSION = 1
_ALLOWED_DTYPES = ("<f8", "<i8", "|b1")
_SPECTRUM_HEADER = "wavelength_nm,value"
_MASK_HEADER = "wavelength_nm,retained"
_CHAIN_CSV_PREFIX = "# specbayes-chain-v1 "


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def canonical_json(obj) -> str:
    """Deterministic JSON encoding: sorted keys, no whitespace, no NaN."""
    return json.dumps(
        obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False
    )


def config_hash(obj) -> str:
    """SHA-256 hex digest of the canonical JSON encoding of ``obj``."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# named-array container


def _payload_dtype(arr: np.ndarray) -> np.dtype:
    if arr.dtype == np.bool_:
        return np.dtype("|b1")
    if np.issubdtype(arr.dtype, np.integer):
        return np.dtype("<i8")
    if np.issubdtype(arr.dtype, np.floating):
        return np.dtype("<f8")
    raise ValueError(f"cannot store arrays of dtype {arr.dtype}")


def write_container(path, kind: str, arrays: dict, meta: dict | None = None) -> None:
    """Write named arrays plus JSON metadata under one self-describing file."""
    entries = []
    payloads = []
    for name, raw in arrays.items():
        arr = np.asarray(raw)
        dt = _payload_dtype(arr)
        entries.append({"name": name, "dtype": dt.str, "shape": list(arr.shape)})
        payloads.append(np.asarray(arr, dtype=dt).tobytes(order="F"))
    header = {
        "format": "specbayes-container",
        "version": _CONTAINER_VERSION,
        "kind": kind,
        "arrays": entries,
        "meta": meta or {},
    }
    blob = canonical_json(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for chunk in payloads:
            fh.write(chunk)


def read_container(path, *, expect_kind: str | None = None):
    """Read a container file back as ``(kind, arrays, meta)``."""
    data = Path(path).read_bytes()
    if len(data) < len(_MAGIC) + 8 or data[: len(_MAGIC)] != _MAGIC:
        raise FileFormatError(f"{path}: not a specbayes container (bad magic)")
    (header_len,) = struct.unpack_from("<Q", data, len(_MAGIC))
    start = len(_MAGIC) + 8
    if start + header_len > len(data):
        raise FileFormatError(f"{path}: truncated header")
    try:
        header = json.loads(data[start : start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FileFormatError(f"{path}: unreadable header ({exc})") from exc
    if header.get("format") != "specbayes-container":
        raise FileFormatError(f"{path}: unknown format {header.get('format')!r}")
    if header.get("version") != _CONTAINER_VERSION:
        raise FileFormatError(f"{path}: unsupported version {header.get('version')!r}")
    kind = header.get("kind")
    if expect_kind is not None and kind != expect_kind:
        raise FileFormatError(f"{path}: kind is {kind!r}, expected {expect_kind!r}")
    arrays = {}
    offset = start + header_len
    for entry in header.get("arrays", []):
        dtype_str = entry["dtype"]
        if dtype_str not in _ALLOWED_DTYPES:
            raise FileFormatError(f"{path}: disallowed dtype {dtype_str!r}")
        dt = np.dtype(dtype_str)
        shape = tuple(int(s) for s in entry["shape"])
        nbytes = dt.itemsize * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(data):
            raise FileFormatError(
                f"{path}: truncated payload for array {entry['name']!r}"
            )
        flat = np.frombuffer(data, dtype=dt, count=nbytes // dt.itemsize, offset=offset)
        arrays[entry["name"]] = flat.reshape(shape, order="F").copy()
        offset += nbytes
    if offset != len(data):
        raise FileFormatError(f"{path}: {len(data) - offset} trailing bytes")
    return kind, arrays, header.get("meta", {})


# ---------------------------------------------------------------------------
# lookup tables

_LUT_ARRAY_ORDER = ("aod_grid", "h2o_grid", "rho_a", "s", "t", "wavelengths")


def save_lut(path, lut: AtmLookupTable, meta: dict | None = None) -> None:
    write_container(
        path, "lut", {name: getattr(lut, name) for name in _LUT_ARRAY_ORDER}, meta
    )


def load_lut(path) -> AtmLookupTable:
    _, arrays, _ = read_container(path, expect_kind="lut")
    missing = [name for name in _LUT_ARRAY_ORDER if name not in arrays]
    if missing:
        raise FileFormatError(f"{path}: lookup table is missing arrays {missing}")
    try:
        return AtmLookupTable(**{name: arrays[name] for name in _LUT_ARRAY_ORDER})
    except ValueError as exc:
        raise FileFormatError(f"{path}: invalid lookup table ({exc})") from exc


def save_lut_csv(path, lut: AtmLookupTable) -> None:
    """Long-format CSV export: one row per (aod, h2o, wavelength) knot."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("aod,h2o,wavelength_nm,rho_a,s,t\n")
        for i, aod in enumerate(lut.aod_grid):
            for j, h2o in enumerate(lut.h2o_grid):
                for k, w in enumerate(lut.wavelengths):
                    fh.write(
                        ",".join(
                            _fmt(v)
                            for v in (
                                aod,
                                h2o,
                                w,
                                lut.rho_a[i, j, k],
                                lut.s[i, j, k],
                                lut.t[i, j, k],
                            )
                        )
                        + "\n"
                    )


def load_lut_csv(path) -> AtmLookupTable:
    """Rebuild a lookup table from the long-format CSV export.

    Every (aod, h2o, wavelength) combination must appear exactly once; the
    grids are recovered from the distinct values in the first three columns.
    """
    rows = _read_csv_rows(path, "aod,h2o,wavelength_nm,rho_a,s,t", 6)
    if not rows:
        raise FileFormatError(f"{path}: no data rows")
    raw = np.array([vals for _, vals in rows])
    aod_grid = np.unique(raw[:, 0])
    h2o_grid = np.unique(raw[:, 1])
    wavelengths = np.unique(raw[:, 2])
    shape = (aod_grid.size, h2o_grid.size, wavelengths.size)
    expected = shape[0] * shape[1] * shape[2]
    if raw.shape[0] != expected:
        raise FileFormatError(
            f"{path}: {raw.shape[0]} rows do not fill a "
            f"{shape[0]}x{shape[1]}x{shape[2]} grid ({expected} knots)"
        )
    i = np.searchsorted(aod_grid, raw[:, 0])
    j = np.searchsorted(h2o_grid, raw[:, 1])
    k = np.searchsorted(wavelengths, raw[:, 2])
    seen = np.zeros(shape, dtype=bool)
    seen[i, j, k] = True
    if not np.all(seen):
        # Row count matches the grid size, so a duplicate knot necessarily
        # leaves another knot unfilled.
        raise FileFormatError(f"{path}: duplicate rows leave grid knots unfilled")
    tables = {}
    for col, name in ((3, "rho_a"), (4, "s"), (5, "t")):
        arr = np.empty(shape)
        arr[i, j, k] = raw[:, col]
        tables[name] = arr
    try:
        return AtmLookupTable(
            aod_grid=aod_grid, h2o_grid=h2o_grid, wavelengths=wavelengths, **tables
        )
    except ValueError as exc:
        raise FileFormatError(f"{path}: invalid lookup table ({exc})") from exc


# ---------------------------------------------------------------------------
# prior components


def save_components(
    path, components: list[MixtureComponent], meta: dict | None = None
) -> None:
    """Store each component's mean and packed covariance lower triangle."""
    arrays = {}
    labels = []
    for idx, comp in enumerate(components):
        labels.append(comp.label)
        tril = comp.cov.values[np.tril_indices(comp.n)]
        arrays[f"mean_{idx:02d}"] = comp.mean
        arrays[f"cov_tril_{idx:02d}"] = tril
    full_meta = dict(meta or {})
    full_meta["labels"] = labels
    write_container(path, "components", arrays, full_meta)


def load_components(path) -> list[MixtureComponent]:
    _, arrays, meta = read_container(path, expect_kind="components")
    labels = meta.get("labels")
    if not isinstance(labels, list) or not labels:
        raise FileFormatError(f"{path}: component file lists no labels")
    components = []
    for idx, label in enumerate(labels):
        try:
            mean = arrays[f"mean_{idx:02d}"]
            tril = arrays[f"cov_tril_{idx:02d}"]
        except KeyError as exc:
            raise FileFormatError(
                f"{path}: missing arrays for component {label!r}"
            ) from exc
        n = mean.size
        if tril.size != n * (n + 1) // 2:
            raise FileFormatError(
                f"{path}: component {label!r} has {tril.size} packed covariance "
                f"entries, expected {n * (n + 1) // 2}"
            )
        cov = np.zeros((n, n))
        cov[np.tril_indices(n)] = tril
        cov = cov + cov.T - np.diag(np.diag(cov))
        components.append(component_from_arrays(str(label), mean, cov))
    return components


# ---------------------------------------------------------------------------
# spectra


def _read_csv_rows(path, expected_header: str, n_cols: int):
    """Parse a strict CSV: exact header, float cells, errors carry line numbers."""
    rows = []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise FileFormatError(f"{path}: {exc}") from exc
    if not lines or lines[0].strip() != expected_header:
        got = lines[0].strip() if lines else "<empty file>"
        raise FileFormatError(
            f"{path}:1: expected header {expected_header!r}, got {got!r}"
        )
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != n_cols:
            raise FileFormatError(
                f"{path}:{lineno}: expected {n_cols} columns, got {len(cells)}"
            )
        try:
            rows.append((lineno, [float(c) for c in cells]))
        except ValueError as exc:
            raise FileFormatError(f"{path}:{lineno}: {exc}") from exc
    return rows


def mask_sidecar_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".mask")


def save_spectrum(path, grid: WavelengthGrid, values: np.ndarray) -> None:
    """Write a two-column spectrum; a mask sidecar appears only when needed.

    Channels are written in full, masked or not; the sidecar records which
    are retained.  An all-retained grid writes no sidecar, and ``load_spectrum``
    treats its absence as all-retained, so the round trip is exact.
    """
    values = np.asarray(values, dtype=float)
    if values.shape != grid.wavelengths.shape:
        raise ValueError(
            f"values shape {values.shape} does not match grid {grid.wavelengths.shape}"
        )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_SPECTRUM_HEADER + "\n")
        for w, v in zip(grid.wavelengths, values):
            fh.write(f"{_fmt(w)},{_fmt(v)}\n")
    if not np.all(grid.mask):
        with open(mask_sidecar_path(path), "w", encoding="utf-8") as fh:
            fh.write(_MASK_HEADER + "\n")
            for w, m in zip(grid.wavelengths, grid.mask):
                fh.write(f"{_fmt(w)},{int(m)}\n")


def load_spectrum(path) -> tuple[WavelengthGrid, np.ndarray]:
    """Read a spectrum CSV, applying the mask sidecar when one exists."""
    rows = _read_csv_rows(path, _SPECTRUM_HEADER, 2)
    if not rows:
        raise FileFormatError(f"{path}: no data rows")
    wavelengths = np.array([vals[0] for _, vals in rows])
    values = np.array([vals[1] for _, vals in rows])
    diffs = np.diff(wavelengths)
    if np.any(diffs <= 0):
        bad = int(np.nonzero(diffs <= 0)[0][0])
        raise FileFormatError(
            f"{path}:{rows[bad + 1][0]}: wavelengths must be strictly ascending "
            f"({_fmt(wavelengths[bad + 1])} follows {_fmt(wavelengths[bad])})"
        )
    mask = np.ones(wavelengths.size, dtype=bool)
    sidecar = mask_sidecar_path(path)
    if sidecar.exists():
        mrows = _read_csv_rows(sidecar, _MASK_HEADER, 2)
        if len(mrows) != wavelengths.size:
            raise FileFormatError(
                f"{sidecar}: {len(mrows)} mask rows for {wavelengths.size} channels"
            )
        for (lineno, (w, flag)), w_spec in zip(mrows, wavelengths):
            if w != w_spec:
                raise FileFormatError(
                    f"{sidecar}:{lineno}: wavelength {_fmt(w)} does not match "
                    f"spectrum channel {_fmt(w_spec)}"
                )
            if flag not in (0.0, 1.0):
                raise FileFormatError(
                    f"{sidecar}:{lineno}: retained flag must be 0 or 1, got {flag:g}"
                )
        mask = np.array([bool(vals[1]) for _, vals in mrows])
    try:
        grid = WavelengthGrid(wavelengths=wavelengths, mask=mask)
    except ValueError as exc:
        raise FileFormatError(f"{path}: {exc}") from exc
    return grid, values


# ---------------------------------------------------------------------------
# state vectors and solver results


def save_state(path, state: StateVector) -> None:
    doc = {
        "refl": [float(v) for v in state.refl],
        "aod": float(state.aod),
        "h2o": float(state.h2o),
    }
    Path(path).write_text(canonical_json(doc) + "\n", encoding="utf-8")


def load_state(path) -> StateVector:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return StateVector(refl=np.array(doc["refl"], dtype=float),
                           aod=doc["aod"], h2o=doc["h2o"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FileFormatError(f"{path}: invalid state file ({exc})") from exc


def save_oe_result(path, result: OeResult) -> None:
    doc = {
        "state": {
            "refl": [float(v) for v in result.state.refl],
            "aod": float(result.state.aod),
            "h2o": float(result.state.h2o),
        },
        "cost": float(result.cost),
        "grad_norm": float(result.grad_norm),
        "n_iterations": int(result.n_iterations),
        "converged": bool(result.converged),
        "boundary_clamped": bool(result.boundary_clamped),
    }
    Path(path).write_text(canonical_json(doc) + "\n", encoding="utf-8")


def load_oe_result(path) -> OeResult:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        state = StateVector(
            refl=np.array(doc["state"]["refl"], dtype=float),
            aod=doc["state"]["aod"],
            h2o=doc["state"]["h2o"],
        )
        return OeResult(
            state=state,
            cost=float(doc["cost"]),
            grad_norm=float(doc["grad_norm"]),
            n_iterations=int(doc["n_iterations"]),
            converged=bool(doc["converged"]),
            boundary_clamped=bool(doc["boundary_clamped"]),
        )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FileFormatError(f"{path}: invalid solver result ({exc})") from exc


def save_covariance(path, values: np.ndarray, meta: dict | None = None) -> None:
    values = np.asarray(values, dtype=float)
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise ValueError(f"covariance must be square, got shape {values.shape}")
    write_container(path, "covariance", {"cov": values}, meta)


def load_covariance(path) -> np.ndarray:
    _, arrays, _ = read_container(path, expect_kind="covariance")
    if "cov" not in arrays:
        raise FileFormatError(f"{path}: covariance file has no 'cov' array")
    return arrays["cov"]


# ---------------------------------------------------------------------------
# chains


def _chain_sidecar(chain: Chain, lp_name: str) -> dict:
    return {
        "format": "specbayes-chain",
        "version": _CHAIN_VERSION,
        "dtype": "<f8",
        "order": "C",
        "shape": [int(chain.samples.shape[0]), int(chain.samples.shape[1])],
        "log_posterior_file": lp_name,
        "accept_counts": {k: int(v) for k, v in chain.accept_counts.items()},
        "config": dataclasses.asdict(chain.config),
        "init_projected": bool(chain.init_projected),
    }


def save_chain(path, chain: Chain) -> None:
    """Raw row-major float64 matrix plus ``.json`` sidecar and ``.lp`` trace."""
    path = Path(path)
    lp_path = path.with_name(path.name + ".lp")
    path.write_bytes(np.asarray(chain.samples, dtype="<f8").tobytes(order="C"))
    lp_path.write_bytes(
        np.asarray(chain.log_posterior_trace, dtype="<f8").tobytes(order="C")
    )
    sidecar = _chain_sidecar(chain, lp_path.name)
    path.with_name(path.name + ".json").write_text(
        canonical_json(sidecar) + "\n", encoding="utf-8"
    )


def _chain_from_parts(sidecar: dict, samples: np.ndarray, lp: np.ndarray, origin):
    try:
        config = McmcConfig(**sidecar["config"])
        counts = {k: int(v) for k, v in sidecar["accept_counts"].items()}
        return Chain(
            samples=samples,
            log_posterior_trace=lp,
            accept_counts=counts,
            config=config,
            init_projected=bool(sidecar["init_projected"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FileFormatError(f"{origin}: invalid chain metadata ({exc})") from exc


def load_chain(path) -> Chain:
    path = Path(path)
    sidecar_path = path.with_name(path.name + ".json")
    try:
        sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FileFormatError(f"{sidecar_path}: unreadable sidecar ({exc})") from exc
    if sidecar.get("format") != "specbayes-chain":
        raise FileFormatError(f"{sidecar_path}: not a chain sidecar")
    if sidecar.get("version") != _CHAIN_VERSION:
        raise FileFormatError(
            f"{sidecar_path}: unsupported version {sidecar.get('version')!r}"
        )
    if sidecar.get("dtype") != "<f8" or sidecar.get("order") != "C":
        raise FileFormatError(f"{sidecar_path}: unsupported sample encoding")
    shape = tuple(int(s) for s in sidecar["shape"])
    data = path.read_bytes()
    expected = 8 * shape[0] * shape[1]
    if len(data) != expected:
        raise FileFormatError(
            f"{path}: {len(data)} bytes for declared shape {shape} "
            f"({expected} expected)"
        )
    samples = np.frombuffer(data, dtype="<f8").reshape(shape).copy()
    lp_path = path.with_name(sidecar["log_posterior_file"])
    lp_data = lp_path.read_bytes()
    if len(lp_data) != 8 * shape[0]:
        raise FileFormatError(
            f"{lp_path}: {len(lp_data)} bytes for {shape[0]} kept samples"
        )
    lp = np.frombuffer(lp_data, dtype="<f8").copy()
    return _chain_from_parts(sidecar, samples, lp, sidecar_path)


def chain_to_csv(path, chain: Chain) -> None:
    """Self-contained CSV for small chains: metadata comment, header, rows."""
    meta = _chain_sidecar(chain, lp_name="")
    del meta["log_posterior_file"]
    n = chain.n_refl
    columns = [f"refl_{i:03d}" for i in range(n)] + ["aod", "h2o", "log_posterior"]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_CHAIN_CSV_PREFIX + canonical_json(meta) + "\n")
        fh.write(",".join(columns) + "\n")
        for row, lp in zip(chain.samples, chain.log_posterior_trace):
            fh.write(",".join(_fmt(v) for v in row) + f",{_fmt(lp)}\n")


def chain_from_csv(path) -> Chain:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise FileFormatError(f"{path}: {exc}") from exc
    if len(lines) < 3 or not lines[0].startswith(_CHAIN_CSV_PREFIX):
        raise FileFormatError(f"{path}: missing chain metadata comment line")
    try:
        sidecar = json.loads(lines[0][len(_CHAIN_CSV_PREFIX):])
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"{path}:1: bad metadata JSON ({exc})") from exc
    shape = tuple(int(s) for s in sidecar.get("shape", ()))
    n_cols = len(lines[1].split(","))
    if len(shape) != 2 or n_cols != shape[1] + 1:
        raise FileFormatError(
            f"{path}:2: {n_cols} columns do not match declared shape {shape}"
        )
    samples = np.empty(shape)
    lp = np.empty(shape[0])
    k = 0
    for lineno, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != n_cols:
            raise FileFormatError(
                f"{path}:{lineno}: expected {n_cols} columns, got {len(cells)}"
            )
        if k >= shape[0]:
            raise FileFormatError(f"{path}:{lineno}: more rows than declared shape")
        try:
            vals = [float(c) for c in cells]
        except ValueError as exc:
            raise FileFormatError(f"{path}:{lineno}: {exc}") from exc
        samples[k] = vals[:-1]
        lp[k] = vals[-1]
        k += 1
    if k != shape[0]:
        raise FileFormatError(f"{path}: {k} data rows for declared shape {shape}")
    return _chain_from_parts(sidecar, samples, lp, path)


# ---------------------------------------------------------------------------
# manifests and reports


def package_versions() -> dict:
    try:
        own = metadata.version("specbayes")
    except metadata.PackageNotFoundError:
        own = "unknown"
    return {
        "specbayes": own,
        "numpy": np.__version__,
        "scipy": __import__("scipy").__version__,
        "python": ".".join(str(v) for v in sys.version_info[:3]),
    }


def write_manifest(path, *, config: dict, seed: int) -> dict:
    """Record everything needed to reproduce a run bit-exactly.

    The manifest embeds the full resolved config alongside its hash, so a
    rerun needs nothing but this file and the referenced inputs.  Output is
    deterministic: no timestamps, sorted keys.
    """
    manifest = {
        "config": config,
        "config_hash": config_hash(config),
        "seed": int(seed),
        "versions": package_versions(),
    }
    Path(path).write_text(canonical_json(manifest) + "\n", encoding="utf-8")
    return manifest


def _report_schema() -> dict:
    ref = resources.files("specbayes") / "schemas" / "report.schema.json"
    return json.loads(ref.read_text(encoding="utf-8"))


def validate_report(report: dict) -> None:
    """Check a report against the published schema; raise on violation."""
    try:
        jsonschema.validate(report, _report_schema())
    except jsonschema.ValidationError as exc:
        raise FileFormatError(f"report failed schema validation: {exc.message}") from exc


def save_report(path, report: dict) -> None:
    validate_report(report)
    Path(path).write_text(canonical_json(report) + "\n", encoding="utf-8")


def load_report(path) -> dict:
    try:
        report = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FileFormatError(f"{path}: unreadable report ({exc})") from exc
    validate_report(report)
    return report
