"""Synthetic data generator for the two simulation studies.

Latent structure, per subject:

    eta_m = 0.3 r + 0.3 eta_x1 + 0.3 eta_x2
            + gamma_xr r eta_x1 + gamma_xr r eta_x2 + delta_u u + zeta_m
    eta_y = 0.125 r + theta_m eta_m + 0.226 eta_x1 + 0.226 eta_x2
            + delta_u u + delta_ur u r + zeta_y

with r sampled from {-1, 1}, (eta_x1, eta_x2) standard bivariate normal
with correlation 0.2, u standard normal and independent of everything,
and residual variances solved so that eta_m and eta_y have unit
variance.  Each latent variable gets three indicators

    z = intercept + eta + eps,   Var(eps) = 1/kappa_j - 1,

with per-item reliabilities kappa_j ~ U(kappa - 0.1, kappa + 0.1) and
intercepts ~ U(-1, 1), both redrawn per dataset.  The confounder u has
no indicators.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd

from .errors import ConfigError
from .model import FactorSpec, ModelSpec

RHO = 0.2
THETA_R = 0.125
THETA_X = 0.226
GAMMA_R = 0.3
GAMMA_X = 0.3

FACTOR_BASES = ("m", "x1", "x2", "y")
INDICATOR_NAMES = (
    "m1", "m2", "m3",
    "x1_1", "x1_2", "x1_3",
    "x2_1", "x2_2", "x2_3",
    "y1", "y2", "y3",
)
TREATMENT_NAME = "r"
SCORE_NAMES = ("eta_m", "eta_x1", "eta_x2", "eta_y", "u")


@dataclass(frozen=True)
class StudyCondition:
    """One simulation cell."""

    n_obs: int
    delta_u: float
    delta_ur: float
    kappa: float
    theta_m: float
    gamma_xr: float
    rho: float = RHO
    theta_r: float = THETA_R
    theta_x1: float = THETA_X
    theta_x2: float = THETA_X
    gamma_r: float = GAMMA_R
    gamma_x1: float = GAMMA_X
    gamma_x2: float = GAMMA_X
    seed: int | None = None

    def __post_init__(self):
        if self.n_obs < 1:
            raise ConfigError("n_obs must be at least 1")
        if not 0.1 < self.kappa < 0.9:
            raise ConfigError(
                f"kappa must lie in (0.1, 0.9) so item reliabilities stay in (0, 1), got {self.kappa}"
            )

    def label(self) -> str:
        return (
            f"N{self.n_obs}_du{self.delta_u:g}_dur{self.delta_ur:g}"
            f"_k{self.kappa:g}_tm{self.theta_m:g}_g{self.gamma_xr:g}"
        )

    def selector_values(self) -> dict[str, float]:
        return {
            "N": float(self.n_obs),
            "delta_u": self.delta_u,
            "delta_ur": self.delta_ur,
            "kappa": self.kappa,
            "theta_m": self.theta_m,
            "gamma_xr": self.gamma_xr,
        }


@dataclass(frozen=True)
class GeneratedDataset:
    """Indicators plus the latent side channel used by oracle tests."""

    condition: StudyCondition
    indicators: np.ndarray  # N x 12, column order INDICATOR_NAMES
    treatment: np.ndarray
    latents: np.ndarray  # N x 5, column order SCORE_NAMES
    kappas: np.ndarray  # 12 item reliabilities actually drawn
    intercepts: np.ndarray  # 12 item intercepts actually drawn

    def data_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.indicators, columns=list(INDICATOR_NAMES))
        df[TREATMENT_NAME] = self.treatment
        return df

    def scores_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.latents, columns=list(SCORE_NAMES))


def default_model_spec(interactions: tuple[int, ...] = (0, 1)) -> ModelSpec:
    """Measurement/structural layout matching the generated columns."""
    return ModelSpec(
        factors=(
            FactorSpec("m", "mediator", ("m1", "m2", "m3"), "m1"),
            FactorSpec("x1", "covariate", ("x1_1", "x1_2", "x1_3"), "x1_1"),
            FactorSpec("x2", "covariate", ("x2_1", "x2_2", "x2_3"), "x2_1"),
            FactorSpec("y", "outcome", ("y1", "y2", "y3"), "y1"),
        ),
        treatment=TREATMENT_NAME,
        mediator_interactions=interactions,
    )


def solve_residual_variances(condition: StudyCondition) -> tuple[float, float]:
    """Residual variances that give both structural latents unit variance.

    Uses Var(r) = 1 and E[r^2] = 1 for the {-1, 1} coding, the covariate
    correlation rho, independence of r and u from the covariates, and
    E[r^2 eta_xi eta_xj] = Cov(eta_xi, eta_xj) for the interaction
    terms.  Raises when a condition implies negative residual variance.
    """
    c = condition
    var_m_struct = (
        c.gamma_r**2
        + c.gamma_x1**2 + c.gamma_x2**2 + 2.0 * c.rho * c.gamma_x1 * c.gamma_x2
        + c.gamma_xr**2 + c.gamma_xr**2 + 2.0 * c.rho * c.gamma_xr * c.gamma_xr
        + c.delta_u**2
    )
    var_zeta_m = 1.0 - var_m_struct
    if var_zeta_m < 0:
        raise ConfigError(
            f"condition implies negative mediator residual variance ({var_zeta_m:.4f})"
        )

    cov_m_r = c.gamma_r
    cov_m_x1 = c.gamma_x1 + c.rho * c.gamma_x2
    cov_m_x2 = c.gamma_x2 + c.rho * c.gamma_x1
    cov_m_u = c.delta_u
    var_y_struct = (
        c.theta_r**2
        + c.theta_m**2
        + c.theta_x1**2 + c.theta_x2**2 + 2.0 * c.rho * c.theta_x1 * c.theta_x2
        + c.delta_u**2
        + c.delta_ur**2
        + 2.0 * c.theta_m * (
            c.theta_r * cov_m_r
            + c.theta_x1 * cov_m_x1
            + c.theta_x2 * cov_m_x2
            + c.delta_u * cov_m_u
        )
    )
    var_zeta_y = 1.0 - var_y_struct
    if var_zeta_y < 0:
        raise ConfigError(
            f"condition implies negative outcome residual variance ({var_zeta_y:.4f})"
        )
    return var_zeta_m, var_zeta_y


def generate(condition: StudyCondition) -> GeneratedDataset:
    """Draw one dataset; bitwise reproducible given ``condition.seed``.

    The draw order is fixed so that conditions sharing a seed and sample
    size share their base randomness (treatment, covariates, confounder,
    residuals, item parameters) and differ only through the structural
    coefficients.
    """
    c = condition
    var_zeta_m, var_zeta_y = solve_residual_variances(c)
    rng = np.random.default_rng(c.seed)
    n = c.n_obs

    r = rng.choice(np.array([-1.0, 1.0]), size=n)
    x = rng.multivariate_normal(
        np.zeros(2), np.array([[1.0, c.rho], [c.rho, 1.0]]), size=n, method="cholesky"
    )
    u = rng.standard_normal(n)
    zeta_m = rng.standard_normal(n) * np.sqrt(var_zeta_m)
    zeta_y = rng.standard_normal(n) * np.sqrt(var_zeta_y)

    eta_x1, eta_x2 = x[:, 0], x[:, 1]
    eta_m = (
        c.gamma_r * r
        + c.gamma_x1 * eta_x1 + c.gamma_x2 * eta_x2
        + c.gamma_xr * r * eta_x1 + c.gamma_xr * r * eta_x2
        + c.delta_u * u
        + zeta_m
    )
    eta_y = (
        c.theta_r * r
        + c.theta_m * eta_m
        + c.theta_x1 * eta_x1 + c.theta_x2 * eta_x2
        + c.delta_u * u
        + c.delta_ur * u * r
        + zeta_y
    )

    kappas = rng.uniform(c.kappa - 0.1, c.kappa + 0.1, size=12)
    intercepts = rng.uniform(-1.0, 1.0, size=12)
    resid_sd = np.sqrt(1.0 / kappas - 1.0)
    latents_by_item = np.repeat(
        np.column_stack([eta_m, eta_x1, eta_x2, eta_y]), 3, axis=1
    )
    eps = rng.standard_normal((n, 12)) * resid_sd
    indicators = intercepts + latents_by_item + eps

    return GeneratedDataset(
        condition=c,
        indicators=indicators,
        treatment=r,
        latents=np.column_stack([eta_m, eta_x1, eta_x2, eta_y, u]),
        kappas=kappas,
        intercepts=intercepts,
    )


STUDY1_DELTA_U = (0.0, 0.2, 0.4, 0.6)
STUDY1_DELTA_UR = (0.0, 0.3, 0.6, 0.9)
STUDY1_N = (100, 250, 500, 750, 1000)
STUDY1_GAMMA_XR = 0.204
STUDY1_KAPPA = 0.75

STUDY2_THETA_M = (0.29, 0.41)
STUDY2_KAPPA = (0.4, 0.5, 0.667, 0.8)
STUDY2_GAMMA_XR = (0.102, 0.145, 0.176, 0.204)
STUDY2_N = (250, 500, 750, 1000)
STUDY2_DELTA_U = 0.4


def study1_grid() -> list[StudyCondition]:
    """All 80 cells of the robustness study (theta_m fixed at zero)."""
    return [
        StudyCondition(
            n_obs=n,
            delta_u=du,
            delta_ur=dur,
            kappa=STUDY1_KAPPA,
            theta_m=0.0,
            gamma_xr=STUDY1_GAMMA_XR,
        )
        for du, dur, n in itertools.product(STUDY1_DELTA_U, STUDY1_DELTA_UR, STUDY1_N)
    ]


def study2_grid() -> list[StudyCondition]:
    """All 128 cells of the power study (confounding fixed at 0.4)."""
    return [
        StudyCondition(
            n_obs=n,
            delta_u=STUDY2_DELTA_U,
            delta_ur=0.0,
            kappa=kappa,
            theta_m=tm,
            gamma_xr=g,
        )
        for tm, kappa, g, n in itertools.product(
            STUDY2_THETA_M, STUDY2_KAPPA, STUDY2_GAMMA_XR, STUDY2_N
        )
    ]


def replication_seed(master_seed: int, rep_index: int) -> int:
    """Data seed for one replication, independent of the condition.

    Cells share base randomness: replication j uses the same seed in
    every cell, so differences between cells come from the parameters
    rather than the draws.
    """
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=(0, rep_index))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def bootstrap_seed(master_seed: int, rep_index: int) -> int:
    """Resampling seed for one replication, independent of the condition."""
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=(1, rep_index))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def condition_for_replication(
    condition: StudyCondition, master_seed: int, rep_index: int
) -> StudyCondition:
    return replace(condition, seed=replication_seed(master_seed, rep_index))
