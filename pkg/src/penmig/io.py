"""Data ingestion and serialization of run results.

Results are written as plain files that diff cleanly between runs:

* ``summary.json`` -- inclusion probabilities, posterior means, credible
  intervals, diagnostics and an echo of the configuration (no timestamps);
* ``samples.csv`` plus ``samples.json`` -- one row per saved iteration and
  a sidecar describing the columns;
* ``plotdata/<name>.csv`` -- effect curves with pointwise credible bands
  or other plot-ready tables;
* ``log.txt`` -- one ``CODE: message`` line per event.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.stats import skew

from .model import ModelSpec

__all__ = [
    "DataError",
    "IngestReport",
    "effect_curves",
    "emit_results",
    "ingest_csv",
    "samples_frame",
    "to_jsonable",
    "write_json",
]

logger = logging.getLogger(__name__)

PREPROCESS_MODES = (None, "none", "uci")
FACTOR_MAX_LEVELS = 5  # fewer than six unique values -> factor
SKEW_LIMIT = 2.0
_MISSING = ("", "NA", "NaN", "nan", "N/A", "NULL", "null", "?", ".")


class DataError(ValueError):
    """Invalid input data; ``problems`` lists ``(line, column, value)`` triples."""

    def __init__(self, message: str, problems: Sequence = ()):
        self.problems = list(problems)
        if self.problems:
            shown = "; ".join(
                f"line {ln}, column {col!r}: cannot parse {val!r}"
                for ln, col, val in self.problems[:10]
            )
            more = len(self.problems) - 10
            message = f"{message}: {shown}" + (f" (and {more} more)" if more > 0 else "")
        super().__init__(message)


@dataclass
class IngestReport:
    """What :func:`ingest_csv` did to the table."""

    n_rows_read: int = 0
    n_rows_dropped: int = 0
    factors: list = field(default_factory=list)
    log_transformed: list = field(default_factory=list)
    standardized: dict = field(default_factory=dict)
    steps: list = field(default_factory=list)

    def log(self, message: str) -> None:
        self.steps.append(message)
        logger.info(message)


def _parse_numeric(raw: pd.Series):
    values = pd.to_numeric(raw, errors="coerce")
    bad = raw.notna() & values.isna()
    return values, bad


def ingest_csv(
    path,
    schema: Optional[Mapping[str, str]] = None,
    preprocess: Optional[str] = None,
    exclude: Sequence[str] = (),
):
    """Read a CSV file with a header row into a typed table.

    Parameters
    ----------
    path : str or path-like
    schema : mapping of column -> {"numeric", "factor"}, optional
        Declared column types. Undeclared columns are numeric when every
        non-missing cell parses as a number and factors when none does.
    preprocess : {None, "none", "uci"}
        ``"uci"`` applies the benchmark pipeline: drop incomplete rows,
        turn columns with fewer than six unique values into factors,
        log-transform numeric columns with absolute skewness above two and
        standardize numeric columns.
    exclude : sequence of str
        Columns left untouched by preprocessing (e.g. the response).

    Returns
    -------
    data : pandas.DataFrame
    report : IngestReport

    Raises
    ------
    DataError
        Unparseable cells (with their file line numbers), unknown schema
        columns, constant numeric columns, or an empty table.
    """
    if preprocess not in PREPROCESS_MODES:
        raise ValueError(f"unknown preprocessing {preprocess!r}; expected 'uci' or None")
    path = Path(path)
    try:
        raw = pd.read_csv(path, dtype=str, na_values=list(_MISSING), keep_default_na=False)
    except FileNotFoundError:
        raise DataError(f"data file not found: {path}") from None
    except (pd.errors.EmptyDataError, pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    raw.columns = [c.strip() for c in raw.columns]
    if raw.shape[0] == 0:
        raise DataError(f"{path} has no data rows")
    if len(set(raw.columns)) != raw.shape[1]:
        raise DataError(f"{path} has duplicate column names")
    schema = dict(schema or {})
    unknown = set(schema) - set(raw.columns)
    if unknown:
        raise DataError(f"schema refers to missing columns {sorted(unknown)}")

    report = IngestReport(n_rows_read=int(raw.shape[0]))
    data = pd.DataFrame(index=raw.index)
    problems = []
    for col in raw.columns:
        cells = raw[col].str.strip()
        declared = schema.get(col)
        if declared not in (None, "numeric", "factor"):
            raise DataError(f"unknown type {declared!r} for column {col!r}")
        if declared == "factor":
            data[col] = cells.astype("category")
            continue
        values, bad = _parse_numeric(cells)
        n_ok = int(values.notna().sum())
        if declared is None and n_ok == 0 and cells.notna().any():
            data[col] = cells.astype("category")
            continue
        if bad.any():
            problems.extend((int(i) + 2, col, cells[i]) for i in np.flatnonzero(bad))
        data[col] = values.astype(float)
    if problems:
        problems.sort()
        raise DataError(f"{len(problems)} unparseable cell(s) in {path}", problems)

    if preprocess == "uci":
        data = _preprocess_uci(data, report, exclude)
    _reject_constant(data, exclude)
    return data, report


def _reject_constant(data: pd.DataFrame, exclude: Sequence[str]) -> None:
    for col in data.columns:
        if col in exclude or not pd.api.types.is_float_dtype(data[col]):
            continue
        v = data[col].dropna().to_numpy()
        if v.size and np.ptp(v) == 0:
            raise DataError(f"column {col!r} is constant (zero variance)")


def _preprocess_uci(data: pd.DataFrame, report: IngestReport, exclude) -> pd.DataFrame:
    complete = data.notna().all(axis=1)
    report.n_rows_dropped = int((~complete).sum())
    data = data.loc[complete].reset_index(drop=True)
    report.log(f"dropped {report.n_rows_dropped} incomplete row(s); {len(data)} remain")
    if len(data) == 0:
        raise DataError("no complete rows left after dropping missing values")
    _reject_constant(data, exclude)
    for col in data.columns:
        if col in exclude:
            continue
        if isinstance(data[col].dtype, pd.CategoricalDtype):
            report.factors.append(col)
            continue
        x = data[col].to_numpy(dtype=float)
        n_unique = np.unique(x).size
        if n_unique <= FACTOR_MAX_LEVELS:
            data[col] = pd.Categorical(x)
            report.factors.append(col)
            report.log(f"{col}: {n_unique} unique values, treated as factor")
            continue
        s = float(skew(x))
        if abs(s) > SKEW_LIMIT:
            shift = 0.0 if x.min() > 0 else 1.0 - x.min()
            x = np.log(x + shift)
            report.log_transformed.append(col)
            report.log(f"{col}: skewness {s:.3f}, log-transformed (shift {shift:g})")
        mean, sd = float(x.mean()), float(x.std(ddof=1))
        data[col] = (x - mean) / sd
        report.standardized[col] = (mean, sd)
        report.log(f"{col}: standardized (mean {mean:.6g}, sd {sd:.6g})")
    return data


# ---------------------------------------------------------------------------
# serialization


def to_jsonable(obj):
    """Recursively convert numpy containers and scalars; non-finite floats become ``None``."""
    if isinstance(obj, Mapping):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def write_json(path, obj) -> Path:
    path = Path(path)
    text = json.dumps(to_jsonable(obj), indent=2, sort_keys=True, allow_nan=False)
    path.write_text(text + "\n")
    return path


def _write_csv(path, frame: pd.DataFrame) -> Path:
    path = Path(path)
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    return path


def samples_frame(spec: ModelSpec, chains) -> tuple[pd.DataFrame, dict]:
    """One row per saved iteration and chain, one column per scalar parameter.

    Returns the table and a sidecar dictionary with block labels and
    dimensions.
    """
    frames = []
    beta_names = [
        f"beta[{b.label}][{i}]" for b in spec.blocks for i in range(b.d)
    ]
    for c in chains:
        if c.n_saved == 0:
            continue
        s = c.samples
        cols = {"chain": np.full(c.n_saved, c.chain_id), "draw": np.arange(c.n_saved)}
        for k, lab in enumerate(spec.fixed_labels):
            cols[f"theta[{lab}]"] = s["theta"][:, k]
        for j, lab in enumerate(spec.labels):
            cols[f"alpha[{lab}]"] = s["alpha"][:, j]
            cols[f"tau2[{lab}]"] = s["tau2"][:, j]
            cols[f"gamma[{lab}]"] = s["gamma"][:, j]
            cols[f"pgamma[{lab}]"] = s["pgamma"][:, j]
        cols["w"] = s["w"]
        if spec.family.has_dispersion:
            cols["sigma2"] = s["sigma2"]
        for k, name in enumerate(beta_names):
            cols[name] = s["beta"][:, k]
        frames.append(pd.DataFrame(cols))
    table = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()
    sidecar = {
        "columns": list(table.columns),
        "blocks": [
            {"label": b.label, "dim": b.d, "kind": b.kind, "term": b.parent_term,
             "expanded": bool(b.expand)}
            for b in spec.blocks
        ],
        "fixed_labels": list(spec.fixed_labels),
        "family": spec.family.kind,
    }
    return table, sidecar


def _term_grid(term, data, n_grid: int) -> pd.DataFrame:
    cov = term.covariates
    if term.kind in ("linear", "pspline"):
        x = np.asarray(data[cov[0]], dtype=float)
        return pd.DataFrame({cov[0]: np.linspace(x.min(), x.max(), n_grid)})
    if term.kind in ("factor", "mrf", "random_intercept"):
        return pd.DataFrame({cov[0]: np.unique(np.asarray(data[cov[0]]))})
    if term.kind == "varying_coefficient":
        if term.base == "mrf":
            x = np.unique(np.asarray(data[cov[0]]))
        else:
            xs = np.asarray(data[cov[0]], dtype=float)
            x = np.linspace(xs.min(), xs.max(), n_grid)
        # the coefficient function f(x) in u * f(x)
        return pd.DataFrame({cov[0]: x, cov[1]: np.ones(len(x))})
    if term.kind == "tensor_spline":
        k = max(int(np.sqrt(n_grid)), 10)
        xa = np.asarray(data[cov[0]], dtype=float)
        xb = np.asarray(data[cov[1]], dtype=float)
        ga, gb = np.meshgrid(
            np.linspace(xa.min(), xa.max(), k), np.linspace(xb.min(), xb.max(), k)
        )
        return pd.DataFrame({cov[0]: ga.ravel(), cov[1]: gb.ravel()})
    raise ValueError(f"no plot grid for kind {term.kind!r}")  # pragma: no cover


def effect_curves(spec: ModelSpec, chains, data, level: float = 0.8, n_grid: int = 100) -> dict:
    """Posterior mean and pointwise credible band of each term's effect.

    Returns a mapping from term label to a table with the grid covariates
    and columns ``mean``, ``lower`` and ``upper``.
    """
    if spec.encoders is None:
        return {}
    ok = [c for c in chains if not c.failed and c.n_saved > 0]
    if not ok:
        return {}
    beta = np.concatenate([c.samples["beta"] for c in ok])
    index = {lab: j for j, lab in enumerate(spec.labels)}
    lo_q = (1 - level) / 2
    out = {}
    for enc in spec.encoders:
        grid = _term_grid(enc.term, data, n_grid)
        cols = enc.transform(grid)
        f = np.zeros((beta.shape[0], len(grid)))
        for block, Xg in zip(enc.blocks, cols):
            sl = spec.block_slice(index[block.label])
            f += beta[:, sl] @ Xg.T
        table = grid.copy()
        table["mean"] = f.mean(axis=0)
        table["lower"], table["upper"] = np.quantile(f, [lo_q, 1 - lo_q], axis=0)
        out[enc.term.label] = table
    return out


def _safe_name(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in name)


def emit_results(
    out_dir,
    summary: Mapping,
    samples: Optional[pd.DataFrame] = None,
    samples_meta: Optional[Mapping] = None,
    plotdata: Optional[Mapping[str, pd.DataFrame]] = None,
    log: Sequence = (),
) -> list:
    """Write a run's outputs into ``out_dir``.

    Parameters
    ----------
    out_dir : path-like
        Created if missing.
    summary : mapping
        Serialized to ``summary.json`` with sorted keys.
    samples, samples_meta
        ``samples.csv`` and its ``samples.json`` sidecar.
    plotdata : mapping of name -> DataFrame
        Each written to ``plotdata/<name>.csv``.
    log : sequence of (code, message)
        Lines of ``log.txt``.

    Returns
    -------
    list of Path
        Files written.

    Raises
    ------
    OSError
        With the offending path in the message.
    """
    out = Path(out_dir)
    written = []
    target = out
    try:
        out.mkdir(parents=True, exist_ok=True)
        target = out / "summary.json"
        written.append(write_json(target, summary))
        if samples is not None:
            target = out / "samples.csv"
            written.append(_write_csv(target, samples))
            target = out / "samples.json"
            written.append(write_json(target, samples_meta or {}))
        if plotdata:
            pdir = out / "plotdata"
            pdir.mkdir(exist_ok=True)
            for name, frame in plotdata.items():
                target = pdir / f"{_safe_name(name)}.csv"
                written.append(_write_csv(target, frame))
        target = out / "log.txt"
        lines = [f"{code}: {msg}" for code, msg in log]
        target.write_text("\n".join(lines) + ("\n" if lines else ""))
        written.append(target)
    except OSError as exc:
        raise OSError(f"cannot write {target}: {exc.strerror or exc}") from exc
    return written


def check_writable(out_dir) -> None:
    """Raise ``OSError`` naming ``out_dir`` if it cannot be created or written."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc.strerror or exc}") from exc
    if not os.access(out, os.W_OK):
        raise OSError(f"output directory {out} is not writable")
