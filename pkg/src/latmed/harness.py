"""Monte Carlo study runner: condition grids, metrics, CSV persistence.

Each replication generates a dataset, fits both methods on it, and
bootstraps both methods with the same resample indices, so the method
comparison within a replication is free of extra sampling noise.
Replication seeds derive from (master seed, replication index) only;
cells therefore share base randomness, and parallel execution yields
byte-identical outputs to serial runs.

Replications that fail numerically (measurement non-convergence,
singular moments) are dropped from the bias and rejection metrics and
counted.  Replications where the invertibility flag fires are kept in
the metrics but counted separately: in weakly identified cells the flag
fires on a sizable share of healthy replications, and dropping them
would distort the very power estimates the study is about.
"""

from __future__ import annotations

import csv
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, LatmedError
from .inference import bootstrap, wald_test
from .model import ModelSpec
from .pipeline import METHODS, fit_pipeline
from .simgen import (
    StudyCondition,
    bootstrap_seed,
    condition_for_replication,
    default_model_spec,
    generate,
)
from .structural import DEFAULT_RIDGE, DEFAULT_TAU, G_ESTIMATION

SELECTOR_KEYS = ("N", "delta_u", "delta_ur", "kappa", "theta_m", "gamma_xr")

SUMMARY_COLUMNS = (
    "condition", "N", "delta_u", "delta_ur", "kappa", "theta_m", "gamma_xr",
    "method", "n_reps", "n_failed", "rank_flags", "heywood_reps",
    "mean_bias", "sd_bias", "rejection_rate",
)
REPLICATION_COLUMNS = ("condition", "rep", "method", "estimate", "se", "z", "p", "flags")
BIN_COLUMNS = ("lower", "upper", "rel_freq")


@dataclass(frozen=True)
class RepRecord:
    """One (replication, method) outcome."""

    condition: str
    rep: int
    method: str
    estimate: float
    se: float
    z: float
    p: float
    flags: str

    @property
    def failed(self) -> bool:
        return "error" in self.flags


@dataclass(frozen=True)
class MCSummary:
    """Aggregated metrics for one condition and method."""

    condition: StudyCondition
    method: str
    n_reps: int
    n_failed: int
    rank_flags: int
    heywood_reps: int
    mean_bias: float
    sd_bias: float
    rejection_rate: float

    def row(self) -> dict:
        vals = self.condition.selector_values()
        return {
            "condition": self.condition.label(),
            "N": int(vals["N"]),
            "delta_u": vals["delta_u"],
            "delta_ur": vals["delta_ur"],
            "kappa": vals["kappa"],
            "theta_m": vals["theta_m"],
            "gamma_xr": vals["gamma_xr"],
            "method": self.method,
            "n_reps": self.n_reps,
            "n_failed": self.n_failed,
            "rank_flags": self.rank_flags,
            "heywood_reps": self.heywood_reps,
            "mean_bias": self.mean_bias,
            "sd_bias": self.sd_bias,
            "rejection_rate": self.rejection_rate,
        }


@dataclass(frozen=True)
class CellResult:
    condition: StudyCondition
    summaries: tuple[MCSummary, ...]
    records: tuple[RepRecord, ...]


def _run_replication(args) -> list[RepRecord]:
    condition, spec, rep, B, tau, v, master_seed, alpha = args
    label = condition.label()
    cond_r = condition_for_replication(condition, master_seed, rep)
    data = generate(cond_r).data_frame()
    try:
        baseline = fit_pipeline(data, spec, tau=tau, v=v, methods=METHODS)
        boots = bootstrap(
            data,
            spec,
            METHODS,
            B=B,
            seed=bootstrap_seed(master_seed, rep),
            tau=tau,
            v=v,
            baseline=baseline,
        )
    except LatmedError as exc:
        flags = f"error:{type(exc).__name__}"
        return [
            RepRecord(label, rep, m, math.nan, math.nan, math.nan, math.nan, flags)
            for m in METHODS
        ]

    records = []
    for m in METHODS:
        est = baseline.estimates[m].theta_m
        se = float(boots[m].se[1])
        flags = []
        if m == G_ESTIMATION and baseline.rank_flagged:
            flags.append("rank_flag")
        if baseline.heywood_count:
            flags.append("heywood")
        if boots[m].unreliable:
            flags.append("boot_unreliable")
        if not np.isfinite(se) or se <= 0:
            flags.append("error:InvalidStandardError")
            records.append(
                RepRecord(label, rep, m, est, math.nan, math.nan, math.nan, ";".join(flags))
            )
            continue
        test = wald_test(est, se, alpha)
        records.append(
            RepRecord(label, rep, m, est, se, test.z, test.p_value, ";".join(flags))
        )
    return records


def aggregate_records(
    condition: StudyCondition, records: list[RepRecord], alpha: float = 0.05
) -> tuple[MCSummary, ...]:
    """Reduce per-replication records to cell metrics; order independent."""
    records = sorted(records, key=lambda r: (r.rep, r.method))
    summaries = []
    for m in METHODS:
        rows = [r for r in records if r.method == m]
        ok = [r for r in rows if not r.failed]
        bias = np.array([r.estimate - condition.theta_m for r in ok])
        rejections = np.array([r.p < alpha for r in ok]) if ok else np.array([])
        summaries.append(
            MCSummary(
                condition=condition,
                method=m,
                n_reps=len(rows),
                n_failed=len(rows) - len(ok),
                rank_flags=sum("rank_flag" in r.flags for r in rows),
                heywood_reps=sum("heywood" in r.flags for r in rows),
                mean_bias=float(bias.mean()) if ok else math.nan,
                sd_bias=float(bias.std(ddof=1)) if len(ok) > 1 else math.nan,
                rejection_rate=float(rejections.mean()) if ok else math.nan,
            )
        )
    return tuple(summaries)


def run_cell(
    condition: StudyCondition,
    R: int = 100,
    B: int = 100,
    *,
    spec: ModelSpec | None = None,
    tau: float = DEFAULT_TAU,
    v: float = DEFAULT_RIDGE,
    master_seed: int = 0,
    alpha: float = 0.05,
    jobs: int = 1,
) -> CellResult:
    """Run R replications of one condition with B bootstrap resamples each."""
    if R < 1:
        raise ConfigError("need at least one replication")
    if B < 2:
        raise ConfigError("bootstrap needs B >= 2")
    spec = spec or default_model_spec()
    args = [(condition, spec, rep, B, tau, v, master_seed, alpha) for rep in range(R)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(_run_replication, args))
    else:
        chunks = [_run_replication(a) for a in args]
    records = [rec for chunk in chunks for rec in chunk]
    summaries = aggregate_records(condition, records, alpha)
    records = tuple(sorted(records, key=lambda r: (r.rep, r.method)))
    return CellResult(condition=condition, summaries=summaries, records=records)


def parse_selector(items: list[str]) -> dict[str, float]:
    """Parse key=value selector strings, validating keys."""
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or key not in SELECTOR_KEYS:
            raise ConfigError(
                f"invalid selector {item!r}; valid keys: {', '.join(SELECTOR_KEYS)}"
            )
        try:
            out[key] = float(value)
        except ValueError as exc:
            raise ConfigError(f"selector {item!r}: value must be numeric") from exc
    return out


def filter_conditions(
    grid: list[StudyCondition], select: dict[str, float] | None
) -> list[StudyCondition]:
    if not select:
        return list(grid)
    bad = [k for k in select if k not in SELECTOR_KEYS]
    if bad:
        raise ConfigError(f"invalid selector keys {bad}; valid keys: {', '.join(SELECTOR_KEYS)}")
    kept = []
    for cond in grid:
        vals = cond.selector_values()
        if all(math.isclose(vals[k], want, rel_tol=1e-9) for k, want in select.items()):
            kept.append(cond)
    return kept


def run_grid(
    grid: list[StudyCondition],
    R: int = 100,
    B: int = 100,
    *,
    spec: ModelSpec | None = None,
    tau: float = DEFAULT_TAU,
    v: float = DEFAULT_RIDGE,
    master_seed: int = 0,
    alpha: float = 0.05,
    select: dict[str, float] | None = None,
    jobs: int = 1,
    out_dir: str | Path | None = None,
    progress=None,
) -> tuple[list[CellResult], list[Path]]:
    """Map :func:`run_cell` over (optionally filtered) grid cells.

    With ``out_dir`` set, writes one summary CSV and one per-replication
    CSV; reruns with the same master seed reproduce them byte for byte.
    """
    cells = filter_conditions(grid, select)
    results = []
    for i, cond in enumerate(cells):
        result = run_cell(
            cond, R, B, spec=spec, tau=tau, v=v,
            master_seed=master_seed, alpha=alpha, jobs=jobs,
        )
        results.append(result)
        if progress is not None:
            progress(i + 1, len(cells), result)

    paths = []
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        summary_rows = [s.row() for r in results for s in r.summaries]
        paths.append(write_csv(out_dir / "summary.csv", SUMMARY_COLUMNS, summary_rows))
        rep_rows = [
            {
                "condition": rec.condition, "rep": rec.rep, "method": rec.method,
                "estimate": rec.estimate, "se": rec.se, "z": rec.z, "p": rec.p,
                "flags": rec.flags,
            }
            for r in results
            for rec in r.records
        ]
        paths.append(write_csv(out_dir / "replications.csv", REPLICATION_COLUMNS, rep_rows))
    return results, paths


def histogram_bins(values, bin_width: float) -> np.ndarray:
    """Relative-frequency bin table (lower, upper, rel_freq) for plotting.

    Degenerate input (all values equal) yields a single full-weight bin.
    """
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("no values to bin")
    if not np.all(np.isfinite(values)):
        raise ValueError("values must be finite")
    if bin_width <= 0:
        raise ValueError("bin width must be positive")
    lo, hi = float(values.min()), float(values.max())
    n_bins = max(1, int(math.ceil((hi - lo) / bin_width - 1e-12)))
    edges = lo + bin_width * np.arange(n_bins + 1)
    counts, _ = np.histogram(values, bins=edges)
    freq = counts / values.size
    return np.column_stack([edges[:-1], edges[1:], freq])


def write_csv(path: str | Path, columns: tuple[str, ...], rows: list[dict]) -> Path:
    """Atomic CSV write (write to a temp file, then rename into place)."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(columns))
            writer.writeheader()
            for row in rows:
                writer.writerow({k: _format_value(row.get(k)) for k in columns})
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_histogram_csv(path: str | Path, bins: np.ndarray) -> Path:
    rows = [dict(zip(BIN_COLUMNS, map(float, row))) for row in bins]
    return write_csv(path, BIN_COLUMNS, rows)


def _format_value(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return value
