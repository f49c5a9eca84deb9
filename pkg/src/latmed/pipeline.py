"""End-to-end estimation: measurement fit, scores, structural stage."""

from __future__ import annotations

from dataclasses import dataclass

import pandas as pd

from .measurement import (
    CanonicalData,
    FactorScorePanel,
    MeasurementEstimate,
    factor_scores,
    fit_cfa,
)
from .model import ModelSpec
from .structural import (
    CORRECTED_REGRESSION,
    DEFAULT_RIDGE,
    DEFAULT_TAU,
    G_ESTIMATION,
    MediatorEstimate,
    StructuralEstimate,
    corrected_regression,
    g_estimation,
)

METHODS = (G_ESTIMATION, CORRECTED_REGRESSION)


@dataclass(frozen=True)
class FitResult:
    """Everything one estimation pass produces."""

    measurement: MeasurementEstimate
    panel: FactorScorePanel
    mediator: MediatorEstimate | None
    estimates: dict[str, StructuralEstimate]

    @property
    def rank_flagged(self) -> bool:
        est = self.estimates.get(G_ESTIMATION)
        return bool(est is not None and est.rank_check is not None and est.rank_check.flagged)

    @property
    def heywood_count(self) -> int:
        return sum(self.measurement.heywood)


def fit_pipeline(
    data: pd.DataFrame | CanonicalData,
    spec: ModelSpec,
    *,
    tau: float = DEFAULT_TAU,
    v: float = DEFAULT_RIDGE,
    methods: tuple[str, ...] = METHODS,
    start: MeasurementEstimate | None = None,
) -> FitResult:
    """Run measurement + structural estimation for the requested methods.

    Both methods share one measurement fit and one score panel, so the
    comparison between them isolates the structural stage.
    """
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ValueError(f"unknown methods {unknown}; choose from {METHODS}")
    measurement, canon = fit_cfa(spec, data, start=start)
    panel = factor_scores(measurement, canon)
    estimates: dict[str, StructuralEstimate] = {}
    mediator = None
    if G_ESTIMATION in methods:
        est, mediator = g_estimation(panel, measurement.sigma_ee, spec, tau=tau, v=v)
        estimates[G_ESTIMATION] = est
    if CORRECTED_REGRESSION in methods:
        estimates[CORRECTED_REGRESSION] = corrected_regression(
            panel, measurement.sigma_ee, spec, tau=tau, v=v
        )
    return FitResult(
        measurement=measurement, panel=panel, mediator=mediator, estimates=estimates
    )
