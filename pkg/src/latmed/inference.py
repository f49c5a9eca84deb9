"""Bootstrap standard errors and Wald tests for the structural parameters.

Standard errors come from nonparametric resampling of whole subject
rows; every resample reruns the full pipeline (measurement fit, scores,
mediator model, structural solve), so the uncertainty of the first
stage propagates into the second.  The ridge term biases the analytic
asymptotic variance, which is why the bootstrap is the supported route.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import stats

from .errors import LatmedError, NumericalError
from .measurement import CanonicalData, canonicalize
from .model import ModelSpec
from .pipeline import METHODS, FitResult, fit_pipeline
from .structural import DEFAULT_RIDGE, DEFAULT_TAU

UNRELIABLE_FAILURE_SHARE = 0.2


@dataclass(frozen=True)
class BootstrapResult:
    """Replicate estimates and their spread for one method.

    ``se`` is the standard deviation of the replicate estimates over
    successful replicates.  Replicates that fail numerically are dropped
    and counted; if more than 20% fail the standard errors are flagged
    unreliable.
    """

    method: str
    names: tuple[str, ...]
    n_requested: int
    estimates: np.ndarray  # successes x n_params
    failures: int
    rank_flags: int

    def __post_init__(self):
        if self.estimates.shape[0] + self.failures != self.n_requested:
            raise ValueError("success and failure counts must add up to B")

    @property
    def n_success(self) -> int:
        return self.estimates.shape[0]

    @property
    def se(self) -> np.ndarray:
        if self.n_success < 2:
            return np.full(len(self.names), np.nan)
        return self.estimates.std(axis=0, ddof=1)

    @property
    def unreliable(self) -> bool:
        return self.failures > UNRELIABLE_FAILURE_SHARE * self.n_requested


@dataclass(frozen=True)
class WaldTest:
    z: float
    p_value: float
    reject: bool


def wald_test(estimate: float, se: float, alpha: float = 0.05) -> WaldTest:
    """Two-sided z-test against the standard normal reference."""
    if not se > 0:
        raise NumericalError(f"standard error must be positive, got {se}")
    z = estimate / se
    p = 2.0 * float(stats.norm.sf(abs(z)))
    return WaldTest(z=float(z), p_value=p, reject=bool(p < alpha))


def resample_indices(n_obs: int, B: int, seed) -> list[np.ndarray]:
    """Deterministic row-resample index sets, one independent stream per
    replicate so parallel and serial execution agree."""
    children = np.random.SeedSequence(seed).spawn(B)
    return [
        np.random.default_rng(child).integers(0, n_obs, size=n_obs) for child in children
    ]


def bootstrap(
    data: pd.DataFrame | CanonicalData,
    spec: ModelSpec,
    method: str | tuple[str, ...] = METHODS,
    B: int = 100,
    seed=0,
    *,
    tau: float = DEFAULT_TAU,
    v: float = DEFAULT_RIDGE,
    indices: list[np.ndarray] | None = None,
    baseline: FitResult | None = None,
) -> BootstrapResult | dict[str, BootstrapResult]:
    """Nonparametric bootstrap of the full estimation pipeline.

    Passing several methods runs them on identical resamples with a
    shared measurement fit per replicate.  ``indices`` overrides the
    random resamples (for degenerate-resample tests and external
    replication).  Deterministic given ``seed``.
    """
    single = isinstance(method, str)
    methods = (method,) if single else tuple(method)
    if B < 2:
        raise ValueError("bootstrap needs B >= 2 replicates")
    canon = data if isinstance(data, CanonicalData) else canonicalize(spec, data)
    n = canon.n_obs
    if indices is None:
        indices = resample_indices(n, B, seed)
    elif len(indices) != B:
        raise ValueError(f"need {B} index sets, got {len(indices)}")

    if baseline is None:
        baseline = fit_pipeline(canon, spec, tau=tau, v=v, methods=methods)
    start = baseline.measurement

    draws: dict[str, list[np.ndarray]] = {m: [] for m in methods}
    failures = {m: 0 for m in methods}
    rank_flags = {m: 0 for m in methods}
    names = {m: baseline.estimates[m].names for m in methods}
    for idx in indices:
        resample = CanonicalData(
            z=canon.z[idx],
            treatment=canon.treatment[idx],
            pattern=canon.pattern,
            subject_ids=canon.subject_ids[idx],
            permutation=canon.permutation,
        )
        try:
            fit = fit_pipeline(
                resample, spec, tau=tau, v=v, methods=methods, start=start
            )
        except LatmedError:
            for m in methods:
                failures[m] += 1
            continue
        for m in methods:
            draws[m].append(fit.estimates[m].theta)
        if fit.rank_flagged:
            for m in methods:
                rank_flags[m] += 1

    results = {}
    for m in methods:
        if not draws[m]:
            raise NumericalError("all bootstrap replicates failed")
        results[m] = BootstrapResult(
            method=m,
            names=names[m],
            n_requested=B,
            estimates=np.vstack(draws[m]),
            failures=failures[m],
            rank_flags=rank_flags[m],
        )
    return results[method] if single else results
