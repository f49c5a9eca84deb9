"""Structural-stage estimation on factor scores.

Two routes share the same machinery:

* g-estimation: the outcome parameters solve moment conditions built
  from weights (w_r, w_m, covariate scores), where w_r centers the
  randomized treatment and w_m is the estimated treatment effect on the
  mediator given the covariates times w_r.  The weights are orthogonal
  to any unmeasured mediator-outcome confounder, which is what buys
  robustness.
* corrected regression: the same moments with the weights replaced by
  the predictors themselves, i.e. errors-in-variables least squares.
  Sensitive to confounding; serves as the baseline comparator.

Because factor scores carry estimation error e with covariance
Sigma_ee, the raw per-subject moment blocks

    A0_i = w_i (xi_i', eta_y_i)

are biased for their true-score counterparts.  The first-order
correction A1_i collects the conditional-expectation bias terms (linear
combinations of Sigma_ee entries, times w_r_i where the mediator weight
is involved); subtracting its average removes the bias for models that
are linear in the latent scores.

A shrinkage step keeps the corrected moment matrix well behaved in
small samples: with R1 the bordered uncorrected moment matrix and R2
the bordered correction, the correction weight depends on the largest
eigenvalue of R1^{-1/2} R2 R1^{-1/2} and a tuning constant tau.  A
final ridge term v stabilizes the solve.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import DataError, NumericalError, RankDeficiencyError
from .measurement import FactorScorePanel
from .model import ModelSpec

DEFAULT_TAU = 5.0
DEFAULT_RIDGE = 1e-4
MAX_TAU = 6.0  # tau must lie in [0, J + 5] and only J = 1 is supported
COND_LIMIT = 1e12
MEDIATOR_COND_LIMIT = 1e10
ANGLE_TOL = 1e-6
WALD_FLAG_LEVEL = 0.999
# Finite-sample inflation of the sandwich Wald statistic relative to its
# chi-square reference, calibrated on the simulation design at N = 250.
WALD_FLAG_INFLATION = 1.3

G_ESTIMATION = "g-estimation"
CORRECTED_REGRESSION = "corrected-regression"


@dataclass(frozen=True)
class MediatorEstimate:
    """Coefficients of the mediator equation on factor scores.

    ``gamma`` is ordered (gamma_r, gamma_x1..gamma_xK, interactions in
    the order given by the model specification).  The coefficients come
    from moment equations in which cross-moments of latent scores are
    corrected by the matching Sigma_ee blocks, so they stay consistent
    under factor-score error.
    """

    gamma: np.ndarray
    names: tuple[str, ...]
    interactions: tuple[int, ...]
    cond_number: float
    wald_stat: float
    wald_df: int

    @property
    def gamma_r(self) -> float:
        return float(self.gamma[0])

    def interaction_coefs(self, n_covariates: int) -> np.ndarray:
        return self.gamma[1 + n_covariates :]


@dataclass(frozen=True)
class MomentPair:
    """Uncorrected and correction parts of the structural moments."""

    M1: np.ndarray
    m1: np.ndarray
    M2: np.ndarray
    m2: np.ndarray
    eta_y_sq_mean: float
    sigma_ee_yy: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.M1)) or not np.all(np.isfinite(self.m1)):
            raise NumericalError("non-finite uncorrected moments")


@dataclass(frozen=True)
class RankCheck:
    """Verdict on the invertibility requirement of the weight moments.

    The moment matrix loses rank when the mediator weight collapses to
    gamma_r times the treatment weight, i.e. when no treatment-covariate
    interaction moves the mediator.  ``wald_stat`` tests the interaction
    coefficients jointly; failing to clear ``wald_threshold`` raises the
    flag, as does near-exact collinearity of the weight rows.
    """

    flagged: bool
    reason: str
    wald_stat: float
    wald_df: int
    wald_threshold: float
    angle: float
    angle_tol: float


@dataclass(frozen=True)
class ModifiedMoments:
    M: np.ndarray
    m: np.ndarray
    lambda_hat: float
    shrink_factor: float
    shrink_factor_raw: float


@dataclass(frozen=True)
class StructuralEstimate:
    """Final structural parameters with estimation diagnostics."""

    method: str
    names: tuple[str, ...]
    theta: np.ndarray
    lambda_hat: float
    shrink_factor: float
    ridge: float
    cond_number: float
    rank_check: RankCheck | None

    def __post_init__(self):
        if not np.all(np.isfinite(self.theta)):
            raise NumericalError("non-finite structural estimate")

    @property
    def theta_r(self) -> float:
        return float(self.theta[0])

    @property
    def theta_m(self) -> float:
        return float(self.theta[1])

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, map(float, self.theta)))


def treatment_weight(treatment: np.ndarray) -> np.ndarray:
    """Center the treatment on its sample mean (exactly sum-zero)."""
    r = np.asarray(treatment, dtype=float)
    levels = np.unique(r)
    if levels.size < 2:
        raise DataError("constant treatment: no identification")
    if levels.size > 2:
        raise DataError(f"treatment must be two-level, found {levels.size} levels")
    return r - r.mean()


def mediator_weight(
    gamma: MediatorEstimate, panel: FactorScorePanel, w_r: np.ndarray
) -> np.ndarray:
    """Per-subject mediator weight (gamma_r + sum_j gamma_xjr eta_xj) * w_r."""
    n_cov = panel.scores.shape[1] - 2
    slope = np.full(panel.n_obs, gamma.gamma_r)
    for pos, j in enumerate(gamma.interactions):
        slope = slope + gamma.gamma[1 + n_cov + pos] * panel.covariates[:, j]
    return slope * w_r


def _mediator_design(panel: FactorScorePanel, interactions: tuple[int, ...]):
    """Design matrix (r, eta_x, r*eta_x[j in interactions]) and sigma indices.

    Second element maps each column to the factor index of its latent
    part in Sigma_ee order (m=0, x_j=j, y=K+1), or -1 for the observed
    treatment; third gives the power of r multiplying the column.
    """
    r = panel.treatment.astype(float)
    cols = [r]
    sig_idx = [-1]
    r_pow = [1]
    K = panel.scores.shape[1] - 2
    for j in range(K):
        cols.append(panel.covariates[:, j])
        sig_idx.append(1 + j)
        r_pow.append(0)
    for j in interactions:
        cols.append(r * panel.covariates[:, j])
        sig_idx.append(1 + j)
        r_pow.append(1)
    return np.column_stack(cols), np.array(sig_idx), np.array(r_pow)


def fit_mediator(
    panel: FactorScorePanel,
    sigma_ee: np.ndarray,
    spec: ModelSpec,
    *,
    cond_limit: float = MEDIATOR_COND_LIMIT,
) -> MediatorEstimate:
    """Solve the error-corrected normal equations for the mediator model.

    Cross-moments between latent scores subtract the matching Sigma_ee
    block, scaled by the sample moment of the treatment power carried by
    each column, so the solution targets the true-score coefficients.
    With sigma_ee = 0 this is ordinary least squares on the scores.
    """
    K = spec.n_covariates
    interactions = spec.mediator_interactions
    X, sig_idx, r_pow = _mediator_design(panel, interactions)
    n, d = X.shape
    q = 2 + K
    if n < max(d, q) + 2:
        raise DataError(f"too few rows ({n}) for {d} mediator parameters")

    r = panel.treatment.astype(float)
    r_mom = {0: 1.0, 1: float(r.mean()), 2: float((r**2).mean())}
    y = panel.mediator

    G = X.T @ X / n
    g = X.T @ y / n
    C = np.zeros_like(G)
    c = np.zeros_like(g)
    for a in range(d):
        if sig_idx[a] < 0:
            continue
        c[a] = r_mom[r_pow[a]] * sigma_ee[sig_idx[a], 0]
        for b in range(d):
            if sig_idx[b] < 0:
                continue
            C[a, b] = r_mom[r_pow[a] + r_pow[b]] * sigma_ee[sig_idx[a], sig_idx[b]]
    G_corr = G - C
    g_corr = g - c

    cond = float(np.linalg.cond(G_corr))
    if not np.isfinite(cond) or cond > cond_limit:
        raise NumericalError(
            f"singular corrected mediator design (condition number {cond:.2e})"
        )
    gamma = np.linalg.solve(G_corr, g_corr)

    names = ["gamma_r"]
    names += [f"gamma_{f.name}" for f in spec.covariates]
    names += [f"gamma_{spec.covariates[j].name}_r" for j in interactions]

    wald_stat, wald_df = _interaction_wald(X, y, gamma, G_corr, sig_idx, r_pow, sigma_ee, r, K)
    return MediatorEstimate(
        gamma=gamma,
        names=tuple(names),
        interactions=interactions,
        cond_number=cond,
        wald_stat=wald_stat,
        wald_df=wald_df,
    )


def _interaction_wald(X, y, gamma, G_corr, sig_idx, r_pow, sigma_ee, r, n_cov):
    """Joint Wald statistic for the treatment-covariate interaction block.

    Sandwich covariance of the corrected moment estimator, ignoring the
    (second-order) uncertainty in Sigma_ee itself.
    """
    n, d = X.shape
    n_int = d - 1 - n_cov
    if n_int == 0:
        return 0.0, 0
    u = y - X @ gamma
    phi = X * u[:, None]
    # per-subject correction contribution: (C_i gamma - c_i)
    for a in range(d):
        if sig_idx[a] < 0:
            continue
        row = np.zeros(n)
        for b in range(d):
            if sig_idx[b] < 0:
                continue
            row = row + gamma[b] * sigma_ee[sig_idx[a], sig_idx[b]] * r ** (r_pow[a] + r_pow[b])
        row = row - sigma_ee[sig_idx[a], 0] * r ** r_pow[a]
        phi[:, a] += row
    phi = phi - phi.mean(axis=0)
    meat = phi.T @ phi / n
    bread = np.linalg.inv(G_corr)
    V = bread @ meat @ bread.T / n
    sel = slice(1 + n_cov, d)
    Vss = V[sel, sel]
    try:
        stat = float(gamma[sel] @ np.linalg.solve(Vss, gamma[sel]))
    except np.linalg.LinAlgError:
        return 0.0, n_int
    return stat, n_int


def build_A0(panel: FactorScorePanel, w_r: np.ndarray, w_m: np.ndarray) -> np.ndarray:
    """Average uncorrected moment block W'(Xi_y, eta_y) / N, shape q x (q+1)."""
    r = panel.treatment.astype(float)
    W = np.column_stack([w_r, w_m, panel.covariates])
    Xi = np.column_stack([r, panel.mediator, panel.covariates, panel.outcome])
    return W.T @ Xi / panel.n_obs


def build_A1(
    gamma: MediatorEstimate,
    sigma_ee: np.ndarray,
    w_r: np.ndarray,
    n_covariates: int,
) -> np.ndarray:
    """Average first-order correction block, shape q x (q+1).

    Rows follow the weights (w_r, w_m, covariate scores); columns the
    predictors (r, mediator, covariates) plus the outcome.  The w_r row
    and the treatment column are exactly zero; mediator-weight cells
    carry the interaction-coefficient contraction of Sigma_ee times the
    average of w_r (zero up to rounding, since w_r is centered); the
    covariate rows carry plain Sigma_ee blocks.
    """
    K = n_covariates
    q = 2 + K
    k = K + 2
    if sigma_ee.shape != (k, k):
        raise DataError(
            f"sigma_ee must be {k}x{k} in factor order (mediator, covariates, outcome)"
        )
    latent_cols = [0] + [1 + j for j in range(K)] + [K + 1]  # m, x_j, y
    A1 = np.zeros((q, q + 1))
    wbar = float(w_r.mean())
    gints = gamma.interaction_coefs(K)
    for c, lat in enumerate(latent_cols, start=1):
        coef = 0.0
        for pos, j in enumerate(gamma.interactions):
            coef += gints[pos] * sigma_ee[1 + j, lat]
        A1[1, c] = coef * wbar
        for j in range(K):
            A1[2 + j, c] = sigma_ee[1 + j, lat]
    return A1


def _regression_A0(panel: FactorScorePanel) -> np.ndarray:
    r = panel.treatment.astype(float)
    Xi = np.column_stack([r, panel.mediator, panel.covariates])
    full = np.column_stack([Xi, panel.outcome])
    return Xi.T @ full / panel.n_obs


def _regression_A1(sigma_ee: np.ndarray, n_covariates: int) -> np.ndarray:
    K = n_covariates
    q = 2 + K
    latent_rows = [0] + [1 + j for j in range(K)]  # m then x_j
    latent_cols = latent_rows + [K + 1]
    A1 = np.zeros((q, q + 1))
    for i, lr in enumerate(latent_rows, start=1):
        for c, lc in enumerate(latent_cols, start=1):
            A1[i, c] = sigma_ee[lr, lc]
    return A1


def moment_pair(A0: np.ndarray, A1: np.ndarray, panel: FactorScorePanel, sigma_ee: np.ndarray) -> MomentPair:
    q = A0.shape[0]
    return MomentPair(
        M1=A0[:, :q],
        m1=A0[:, q],
        M2=-A1[:, :q],
        m2=-A1[:, q],
        eta_y_sq_mean=float(np.mean(panel.outcome**2)),
        sigma_ee_yy=float(sigma_ee[-1, -1]),
    )


def modified_moments(
    M1: np.ndarray,
    m1: np.ndarray,
    M2: np.ndarray,
    m2: np.ndarray,
    eta_y_sq_mean: float,
    sigma_ee_yy: float,
    tau: float,
    n_obs: int,
) -> ModifiedMoments:
    """Shrink the correction so the combined moment matrix stays sane.

    Builds the bordered matrices R1 (uncorrected) and R2 (negated
    correction plus the outcome-score error variance), takes the largest
    eigenvalue lambda_hat of R1^{-1/2} R2 R1^{-1/2}, and down-weights
    (M2, m2) by 1 - tau/N when 1/lambda_hat >= 1 + 1/N and by
    1/lambda_hat - 1/N - tau/N otherwise (floored at zero).  The two
    branches agree exactly on the boundary.
    """
    if not 0.0 <= tau <= MAX_TAU:
        raise ValueError(f"tau must lie in [0, {MAX_TAU}], got {tau}")
    q = M1.shape[0]
    R1 = np.zeros((q + 1, q + 1))
    R1[:q, :q] = M1
    R1[:q, q] = m1
    R1[q, :q] = m1
    R1[q, q] = eta_y_sq_mean
    R1 = 0.5 * (R1 + R1.T)

    R2 = np.zeros((q + 1, q + 1))
    R2[:q, :q] = -M2
    R2[:q, q] = -m2
    R2[q, :q] = -m2
    R2[q, q] = sigma_ee_yy
    R2 = 0.5 * (R2 + R2.T)

    evals, evecs = np.linalg.eigh(R1)
    top = float(evals.max())
    if top <= 0.0 or evals.min() <= -0.5 * top:
        raise NumericalError(
            f"bordered moment matrix not positive definite (min eigenvalue {evals.min():.2e})"
        )
    # The g-estimation cross moments are not a Gram matrix; their
    # symmetrization can dip slightly indefinite in small samples even
    # though it is positive definite in population.  Flooring the
    # offending eigenvalues keeps the inverse square root defined; the
    # resulting oversized lambda_hat then shrinks the correction away,
    # which is the conservative direction.
    evals = np.maximum(evals, 1e-8 * top)
    inv_sqrt = (evecs / np.sqrt(evals)) @ evecs.T
    lam_hat = float(np.linalg.eigvalsh(inv_sqrt @ R2 @ inv_sqrt).max())

    if lam_hat <= 0.0 or 1.0 / lam_hat >= 1.0 + 1.0 / n_obs:
        raw = 1.0 - tau / n_obs
    else:
        raw = 1.0 / lam_hat - 1.0 / n_obs - tau / n_obs
    factor = max(raw, 0.0)
    return ModifiedMoments(
        M=M1 + factor * M2,
        m=m1 + factor * m2,
        lambda_hat=lam_hat,
        shrink_factor=factor,
        shrink_factor_raw=raw,
    )


def g_estimate(
    M: np.ndarray,
    m: np.ndarray,
    v: float,
    *,
    method: str = G_ESTIMATION,
    names: tuple[str, ...] | None = None,
    lambda_hat: float = float("nan"),
    shrink_factor: float = float("nan"),
    rank_check: RankCheck | None = None,
) -> StructuralEstimate:
    """Solve (M + v I) theta = m and attach diagnostics."""
    if v < 0:
        raise ValueError("ridge term v must be nonnegative")
    q = M.shape[0]
    A = M + v * np.eye(q)
    cond = float(np.linalg.cond(A))
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise RankDeficiencyError(
            f"moment matrix singular or near-singular (condition number {cond:.2e}); "
            "the mediator model needs at least one treatment-covariate interaction"
        )
    theta = np.linalg.solve(A, m)
    if names is None:
        names = ("theta_r", "theta_m") + tuple(f"theta_x{j+1}" for j in range(q - 2))
    return StructuralEstimate(
        method=method,
        names=names,
        theta=theta,
        lambda_hat=lambda_hat,
        shrink_factor=shrink_factor,
        ridge=v,
        cond_number=cond,
        rank_check=rank_check,
    )


def _weight_collinearity(M1: np.ndarray, gamma_r: float) -> float:
    """Relative deviation of the mediator-weight row from gamma_r times
    the treatment-weight row of the moment matrix."""
    target = gamma_r * M1[0, :]
    scale = max(float(np.linalg.norm(M1[1, :])), 1e-300)
    return float(np.linalg.norm(M1[1, :] - target)) / scale


def rank_check(
    med: MediatorEstimate,
    M1: np.ndarray,
    *,
    angle_tol: float = ANGLE_TOL,
    wald_level: float = WALD_FLAG_LEVEL,
) -> RankCheck:
    """Assemble the invertibility verdict for the g-estimation moments."""
    angle = _weight_collinearity(M1, med.gamma_r)
    if med.wald_df == 0:
        return RankCheck(
            flagged=True,
            reason="no treatment-covariate interaction in the mediator model",
            wald_stat=0.0,
            wald_df=0,
            wald_threshold=float("nan"),
            angle=angle,
            angle_tol=angle_tol,
        )
    threshold = float(stats.chi2.ppf(wald_level, med.wald_df)) * WALD_FLAG_INFLATION
    flagged = False
    reason = ""
    if angle < angle_tol:
        flagged = True
        reason = "mediator weight numerically collinear with treatment weight"
    elif med.wald_stat < threshold:
        flagged = True
        reason = (
            "treatment-covariate interactions not identified "
            f"(wald {med.wald_stat:.2f} < {threshold:.2f})"
        )
    return RankCheck(
        flagged=flagged,
        reason=reason,
        wald_stat=med.wald_stat,
        wald_df=med.wald_df,
        wald_threshold=threshold,
        angle=angle,
        angle_tol=angle_tol,
    )


def structural_names(spec: ModelSpec) -> tuple[str, ...]:
    return ("theta_r", "theta_m") + tuple(f"theta_{f.name}" for f in spec.covariates)


def g_estimation(
    panel: FactorScorePanel,
    sigma_ee: np.ndarray,
    spec: ModelSpec,
    tau: float = DEFAULT_TAU,
    v: float = DEFAULT_RIDGE,
) -> tuple[StructuralEstimate, MediatorEstimate]:
    """Full g-estimation route: mediator fit, weights, corrected moments."""
    med = fit_mediator(panel, sigma_ee, spec)
    w_r = treatment_weight(panel.treatment)
    w_m = mediator_weight(med, panel, w_r)
    A0 = build_A0(panel, w_r, w_m)
    A1 = build_A1(med, sigma_ee, w_r, spec.n_covariates)
    pair = moment_pair(A0, A1, panel, sigma_ee)
    check = rank_check(med, pair.M1)
    mod = modified_moments(
        pair.M1, pair.m1, pair.M2, pair.m2, pair.eta_y_sq_mean, pair.sigma_ee_yy, tau, panel.n_obs
    )
    est = g_estimate(
        mod.M,
        mod.m,
        v,
        method=G_ESTIMATION,
        names=structural_names(spec),
        lambda_hat=mod.lambda_hat,
        shrink_factor=mod.shrink_factor,
        rank_check=check,
    )
    return est, med


def corrected_regression(
    panel: FactorScorePanel,
    sigma_ee: np.ndarray,
    spec: ModelSpec,
    tau: float = DEFAULT_TAU,
    v: float = DEFAULT_RIDGE,
) -> StructuralEstimate:
    """Errors-in-variables least squares with the same shrinkage and ridge.

    Identical pipeline with the weights replaced by the predictors;
    consistent only when there is no unmeasured mediator-outcome
    confounding, which is exactly what makes it the sensitivity
    baseline.
    """
    A0 = _regression_A0(panel)
    A1 = _regression_A1(sigma_ee, spec.n_covariates)
    pair = moment_pair(A0, A1, panel, sigma_ee)
    mod = modified_moments(
        pair.M1, pair.m1, pair.M2, pair.m2, pair.eta_y_sq_mean, pair.sigma_ee_yy, tau, panel.n_obs
    )
    return g_estimate(
        mod.M,
        mod.m,
        v,
        method=CORRECTED_REGRESSION,
        names=structural_names(spec),
        lambda_hat=mod.lambda_hat,
        shrink_factor=mod.shrink_factor,
        rank_check=None,
    )
