"""CSV ingestion/export, versioned model files, density grids and run manifests."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .betamath import CLAMP_EPS, log_beta_fn
from .errors import ConfigError, ModelFormatError
from .model import FitConfig, FittedModel, MethylationMatrix, ModelSpec, ShapeParams

log = logging.getLogger(__name__)

MODEL_FORMAT = "betamix-model"
MODEL_VERSION = 1
FLOAT_FMT = "%.17g"
COLUMN_RE = re.compile(r"^patient(?P<patient>[^_]+)_sample(?P<sample>.+)$")
POSITION_COLUMNS = ("chromosome", "position")


def fmt(x: float) -> str:
    return FLOAT_FMT % x


# ---------------------------------------------------------------------------
# data CSV
# ---------------------------------------------------------------------------

def parse_header(header: list[str]):
    """Split a data header into value-column layout and optional position columns.

    Returns (patients, samples, value_index[(n, r)] -> column, position_index).
    """
    if not header or header[0].strip().lower() != "cpg_id":
        raise ConfigError("first header column must be 'cpg_id'")
    patients, samples, cells, extra = [], [], {}, {}
    for i, raw in enumerate(header[1:], start=1):
        name = raw.strip()
        if name.lower() in POSITION_COLUMNS:
            extra[name.lower()] = i
            continue
        m = COLUMN_RE.match(name)
        if not m:
            raise ConfigError(f"column {i + 1} {name!r} does not match 'patient<n>_sample<r>'")
        p, s = m.group("patient"), m.group("sample")
        if p not in patients:
            patients.append(p)
        if s not in samples:
            samples.append(s)
        if (p, s) in cells:
            raise ConfigError(f"column {i + 1} {name!r} duplicates patient {p} sample {s}")
        cells[(p, s)] = i
    if not cells:
        raise ConfigError("header has no patient<n>_sample<r> value columns")
    for p in patients:
        for s in samples:
            if (p, s) not in cells:
                raise ConfigError(f"missing column patient{p}_sample{s}; every patient needs every sample")
    if len(extra) == 1:
        raise ConfigError("'chromosome' and 'position' columns must appear together")
    order = [cells[(p, s)] for p in patients for s in samples]
    return patients, samples, order, extra


def load_csv(path, clamp_eps: float = CLAMP_EPS) -> MethylationMatrix:
    """Read a ``cpg_id,patient<n>_sample<r>,...`` beta-value table.

    Rows with a missing or non-numeric value are dropped and counted in
    ``matrix.n_dropped``.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError(f"{path}: empty file") from None
        patients, samples, order, extra = parse_header(header)
        width = len(header)
        ids, rows, chroms, positions = [], [], [], []
        dropped = 0
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise ConfigError(f"{path}:{lineno}: expected {width} fields, found {len(row)}")
            try:
                vals = [float(row[i]) for i in order]
            except ValueError:
                dropped += 1
                continue
            if any(math.isnan(v) for v in vals):
                dropped += 1
                continue
            ids.append(row[0])
            rows.append(vals)
            if extra:
                chroms.append(row[extra["chromosome"]])
                positions.append(int(row[extra["position"]]))
    if not rows:
        raise ConfigError(f"{path}: no usable rows ({dropped} dropped)")
    if dropped:
        log.warning("%s: dropped %d rows with missing or non-numeric values", path, dropped)
    values = np.asarray(rows, dtype=float).reshape(len(rows), len(patients), len(samples))
    matrix = MethylationMatrix(values, ids, patients, samples,
                               chroms if extra else None, positions if extra else None, clamp_eps)
    matrix.n_dropped = dropped
    return matrix


def write_csv(matrix: MethylationMatrix, path) -> None:
    header = ["cpg_id"]
    if matrix.chromosomes is not None:
        header += list(POSITION_COLUMNS)
    header += matrix.column_labels()
    flat = matrix.values.reshape(matrix.C, -1)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for c in range(matrix.C):
            pre = [matrix.cpg_ids[c]]
            if matrix.chromosomes is not None:
                pre += [matrix.chromosomes[c], int(matrix.positions[c])]
            w.writerow(pre + [fmt(v) for v in flat[c]])


def write_table(path, columns, rows) -> None:
    """Write rows to CSV, floats with 17 significant digits."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def read_table(path):
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, [row for row in reader if row]


# ---------------------------------------------------------------------------
# model files
# ---------------------------------------------------------------------------

def model_to_dict(fitted: FittedModel, include_responsibilities: bool = False) -> dict:
    z = fitted.responsibilities if include_responsibilities else None
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "tool_version": __version__,
        "spec": {"variant": fitted.spec.variant.value, "K": fitted.spec.K, "M": fitted.spec.M},
        "dims": {"N": fitted.N, "R": fitted.R, "n_sites": fitted.n_sites},
        "patient_labels": list(fitted.patient_labels),
        "sample_labels": list(fitted.sample_labels),
        "tau": [float(v) for v in fitted.tau],
        "alpha": fitted.shapes.alpha_free.tolist(),
        "delta": fitted.shapes.delta_free.tolist(),
        "loglik_trace": [float(v) for v in fitted.loglik_trace],
        "converged": bool(fitted.converged),
        "n_iterations": int(fitted.n_iterations),
        "degenerate_events": int(fitted.degenerate_events),
        "ascent_violations": int(fitted.ascent_violations),
        "config": asdict(fitted.config),
        "responsibilities": None if z is None else z.tolist(),
        "site_ids": None if z is None or fitted.site_ids is None else list(fitted.site_ids),
    }


def model_from_dict(doc: dict) -> FittedModel:
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise ModelFormatError("not a betamix model file")
    if doc.get("version") != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model file version {doc.get('version')!r}; "
                               f"this build reads version {MODEL_VERSION}")
    try:
        spec = ModelSpec(doc["spec"]["variant"], doc["spec"]["K"], doc["spec"]["M"])
        dims = doc["dims"]
        shapes = ShapeParams(spec.variant, doc["alpha"], doc["delta"], dims["N"], dims["R"])
        z = doc["responsibilities"]
        z = None if z is None else np.asarray(z, dtype=float)
        site_ids = doc.get("site_ids")
        return FittedModel(
            spec=spec,
            tau=np.asarray(doc["tau"], dtype=float),
            shapes=shapes,
            responsibilities=z,
            loglik_trace=tuple(float(v) for v in doc["loglik_trace"]),
            converged=bool(doc["converged"]),
            n_iterations=int(doc["n_iterations"]),
            n_sites=int(dims["n_sites"]),
            patient_labels=tuple(doc["patient_labels"]),
            sample_labels=tuple(doc["sample_labels"]),
            site_ids=None if site_ids is None else tuple(site_ids),
            degenerate_events=int(doc["degenerate_events"]),
            ascent_violations=int(doc["ascent_violations"]),
            config=FitConfig(**doc["config"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"malformed model file: {exc}") from exc


def save_model(fitted: FittedModel, path, include_responsibilities: bool = False) -> None:
    """Write a versioned JSON model file; responsibilities only on request."""
    doc = model_to_dict(fitted, include_responsibilities)
    with Path(path).open("w") as fh:
        json.dump(doc, fh, indent=1, allow_nan=False)
        fh.write("\n")


def load_model(path) -> FittedModel:
    try:
        with Path(path).open() as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: truncated or invalid model file ({exc.msg})") from exc
    return model_from_dict(doc)


# ---------------------------------------------------------------------------
# plot data
# ---------------------------------------------------------------------------

def export_density_grid(fitted: FittedModel, grid_size: int = 512):
    """Weighted component densities tau_k f(x | alpha_knr, delta_knr) on a grid.

    Returns (columns, data) where data[:, 0] is x and each further column is
    one (cluster, patient, sample) combination.
    """
    if grid_size < 2:
        raise ConfigError("grid_size must be >= 2")
    x = np.clip(np.linspace(0.0, 1.0, grid_size), CLAMP_EPS, 1.0 - CLAMP_EPS)
    lx, l1x = np.log(x), np.log1p(-x)
    a, d = fitted.shapes.alpha, fitted.shapes.delta
    patients = list(fitted.patient_labels) or [str(n + 1) for n in range(fitted.N)]
    samples = list(fitted.sample_labels) or [str(r + 1) for r in range(fitted.R)]
    columns = ["x"]
    data = [x]
    for k in range(fitted.K):
        for n in range(fitted.N):
            for r in range(fitted.R):
                logf = (a[k, n, r] - 1) * lx + (d[k, n, r] - 1) * l1x - log_beta_fn(a[k, n, r], d[k, n, r])
                columns.append(f"cluster{k + 1}_patient{patients[n]}_sample{samples[r]}")
                data.append(fitted.tau[k] * np.exp(logf))
    return columns, np.column_stack(data)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def file_digest(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    argv: list
    inputs: dict = field(default_factory=dict)  # path -> sha256
    outputs: dict = field(default_factory=dict)  # path -> sha256
    spec: dict | None = None
    config: dict | None = None
    output_dir: str = "."
    cwd: str | None = None
    tool_version: str = __version__
    seed: int | None = None
    backend: str | None = None
    timings: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        try:
            return cls(**json.loads(text))
        except (json.JSONDecodeError, TypeError) as exc:
            raise ModelFormatError(f"invalid run manifest: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls.from_json(Path(path).read_text())
