"""Confirmatory factor model fitting and factor score estimation.

The measurement model links the p observed indicators z to k latent
factors eta through

    z = tau + Lambda @ eta + eps,    Cov(eps) = Psi (diagonal),

with one reference indicator per factor whose loading is fixed to 1 and
intercept to 0.  In canonical column order the free indicators come
first and the k reference indicators last, so

    Lambda = [[Lambda_free], [I_k]],    tau = [tau_free, 0].

Fitting minimizes the maximum-likelihood discrepancy

    F = ln|Sigma| + tr(S Sigma^-1) - ln|S| - p
        + (zbar - mu)' Sigma^-1 (zbar - mu)

with Sigma = Lambda Phi Lambda' + Psi and mu = tau + Lambda alpha.  The
mean structure (tau_free, alpha) is saturated: for any covariance
parameters the minimizing mu equals zbar exactly, giving the closed
forms alpha = zbar_ref and tau_free = zbar_free - Lambda_free zbar_ref.
The quasi-Newton search therefore runs over the covariance parameters
only (free loadings, log residual variances, Cholesky factor of Phi)
while still solving the joint first-order conditions exactly.

Factor scores use the conditionally unbiased estimator

    eta_hat = [-H, I_k + H Lambda_free] @ (z - [tau_free, 0]),

whose error e = eta_hat - eta is the linear image of eps with the
smallest covariance in this family; that covariance Sigma_ee feeds the
second-stage moment corrections.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import scipy.linalg as sla
from scipy.optimize import minimize

from .errors import ConfigError, DataError, NumericalError
from .model import ModelSpec

PSI_FLOOR = 1e-8
GRAD_TOL = 1e-6
MAX_ITER = 500


@dataclass(frozen=True)
class MeasurementPattern:
    """Canonical layout of a simple-structure factor model.

    Indicators are ordered free-first, references-last; the j-th
    reference indicator (position p - k + j) belongs to factor j.
    ``factor_index`` gives the owning factor of every canonical column.
    """

    factor_names: tuple[str, ...]
    indicator_names: tuple[str, ...]
    factor_index: tuple[int, ...]

    def __post_init__(self):
        p, k = self.n_indicators, self.n_factors
        if p <= k:
            raise ConfigError("pattern needs more indicators than factors")
        for j in range(k):
            if self.factor_index[p - k + j] != j:
                raise ConfigError("reference indicators must occupy the trailing block in factor order")

    @property
    def n_factors(self) -> int:
        return len(self.factor_names)

    @property
    def n_indicators(self) -> int:
        return len(self.indicator_names)

    @property
    def n_free(self) -> int:
        return self.n_indicators - self.n_factors

    @property
    def free_factor_index(self) -> np.ndarray:
        return np.asarray(self.factor_index[: self.n_free], dtype=int)


def pattern_from_model_spec(spec: ModelSpec) -> MeasurementPattern:
    free_names, free_factor = [], []
    ref_names = []
    for j, f in enumerate(spec.factors):
        for name in f.indicators:
            if name == f.reference:
                continue
            free_names.append(name)
            free_factor.append(j)
        ref_names.append(f.reference)
    return MeasurementPattern(
        factor_names=tuple(f.name for f in spec.factors),
        indicator_names=tuple(free_names + ref_names),
        factor_index=tuple(free_factor + list(range(spec.n_factors))),
    )


@dataclass(frozen=True)
class CanonicalData:
    """Indicator matrix in canonical column order plus bookkeeping."""

    z: np.ndarray
    treatment: np.ndarray
    pattern: MeasurementPattern
    subject_ids: np.ndarray
    permutation: tuple[int, ...]  # declared indicator order -> canonical column

    @property
    def n_obs(self) -> int:
        return self.z.shape[0]


def canonicalize(spec: ModelSpec, data: pd.DataFrame) -> CanonicalData:
    """Reorder indicator columns so references form the trailing block.

    Raises :class:`DataError` on missing columns or missing values; the
    permutation from the declared indicator order to canonical columns
    is recorded for reporting.
    """
    pattern = pattern_from_model_spec(spec)
    missing = [c for c in (*pattern.indicator_names, spec.treatment) if c not in data.columns]
    if missing:
        raise DataError(f"missing columns: {missing}")

    z = data.loc[:, list(pattern.indicator_names)].to_numpy(dtype=float)
    r = data.loc[:, spec.treatment].to_numpy(dtype=float)
    if np.isnan(z).any() or np.isnan(r).any():
        raise DataError("missing values unsupported")

    canon_pos = {name: i for i, name in enumerate(pattern.indicator_names)}
    permutation = tuple(canon_pos[name] for name in spec.declared_indicator_order)
    ids = data.index.to_numpy()
    return CanonicalData(z=z, treatment=r, pattern=pattern, subject_ids=ids, permutation=permutation)


@dataclass(frozen=True)
class MeasurementEstimate:
    """Fitted measurement model in canonical order.

    ``lambda_free`` is the (p-k) x k loading matrix with zeros off the
    simple-structure pattern; the implied full loading matrix carries an
    exact identity block for the references and the full intercept
    vector an exact zero block.
    """

    pattern: MeasurementPattern
    tau_free: np.ndarray
    lambda_free: np.ndarray
    psi: np.ndarray
    phi: np.ndarray
    factor_means: np.ndarray
    H: np.ndarray
    sigma_ee: np.ndarray
    indicator_permutation: tuple[int, ...]
    discrepancy: float
    start_discrepancy: float
    grad_norm: float
    n_iter: int
    converged: bool
    heywood: tuple[bool, ...] = field(default=())

    @property
    def n_factors(self) -> int:
        return self.pattern.n_factors

    def full_lambda(self) -> np.ndarray:
        return np.vstack([self.lambda_free, np.eye(self.n_factors)])

    def full_tau(self) -> np.ndarray:
        return np.concatenate([self.tau_free, np.zeros(self.n_factors)])


@dataclass(frozen=True)
class FactorScorePanel:
    """Per-subject factor scores aligned with the treatment indicator."""

    scores: np.ndarray
    treatment: np.ndarray
    subject_ids: np.ndarray
    factor_names: tuple[str, ...]

    def __post_init__(self):
        if self.scores.shape[0] != self.treatment.shape[0]:
            raise DataError("scores and treatment must have matching row counts")

    @property
    def n_obs(self) -> int:
        return self.scores.shape[0]

    @property
    def mediator(self) -> np.ndarray:
        return self.scores[:, 0]

    @property
    def covariates(self) -> np.ndarray:
        return self.scores[:, 1:-1]

    @property
    def outcome(self) -> np.ndarray:
        return self.scores[:, -1]


def compute_H(lambda_free: np.ndarray, psi: np.ndarray) -> np.ndarray:
    """Regression matrix of reference-indicator errors on error contrasts.

    With U = [I_{p-k}, -Lambda_free] and A selecting the reference rows,
    H = (A Psi U') (U Psi U')^{-1}.  Deterministic given its inputs.
    """
    lambda_free = np.asarray(lambda_free, dtype=float)
    psi = np.asarray(psi, dtype=float)
    n_free, k = lambda_free.shape
    p = n_free + k
    if psi.shape != (p, p):
        raise DataError(f"psi must be {p}x{p}, got {psi.shape}")
    U = np.hstack([np.eye(n_free), -lambda_free])
    A = np.hstack([np.zeros((k, n_free)), np.eye(k)])
    inner = U @ psi @ U.T
    cross = A @ psi @ U.T
    try:
        cho = sla.cho_factor(inner)
    except sla.LinAlgError as exc:
        raise NumericalError(
            "singular inner matrix (I, -Lambda_free) Psi (I, -Lambda_free)' in score weights"
        ) from exc
    return sla.cho_solve(cho, cross.T).T


def score_weight_matrix(lambda_free: np.ndarray, H: np.ndarray) -> np.ndarray:
    """The k x p matrix [-H, I_k + H Lambda_free] applied to centered indicators."""
    k = lambda_free.shape[1]
    return np.hstack([-H, np.eye(k) + H @ lambda_free])


def factor_score_error_cov(H: np.ndarray, lambda_free: np.ndarray, psi: np.ndarray) -> np.ndarray:
    """Covariance of the factor score error, [-H, I + H Lf] Psi [0, I]'.

    Stored as computed; it is a cross-covariance construction and is not
    forced symmetric.
    """
    k = lambda_free.shape[1]
    B = score_weight_matrix(lambda_free, H)
    return B @ psi[:, psi.shape[1] - k :]


def factor_scores(estimate: MeasurementEstimate, data: CanonicalData) -> FactorScorePanel:
    """Score every subject with the fitted measurement parameters.

    Scores are reported in deviation form: the raw weighted combination
    [-H, I + H Lambda_free] (z - [tau_free, 0]) minus the estimated
    factor means.  The reference intercepts are fixed to zero, so any
    nonzero item intercept on a reference indicator is absorbed into the
    factor mean; removing it keeps the intercept-free structural
    equations coherent and makes the scores conditionally unbiased for
    mean-centered latents.
    """
    if data.z.shape[1] != estimate.pattern.n_indicators:
        raise DataError(
            f"data has {data.z.shape[1]} indicator columns, estimate expects "
            f"{estimate.pattern.n_indicators}"
        )
    B = score_weight_matrix(estimate.lambda_free, estimate.H)
    centered = data.z - estimate.full_tau()
    scores = centered @ B.T - estimate.factor_means
    return FactorScorePanel(
        scores=scores,
        treatment=data.treatment,
        subject_ids=data.subject_ids,
        factor_names=estimate.pattern.factor_names,
    )


class _CfaProblem:
    """Discrepancy and gradient over the unconstrained covariance parameters.

    Parameter vector: free loadings, log residual variances, then the
    Cholesky factor of Phi (log-diagonal, free off-diagonal, row-major).
    """

    def __init__(self, pattern: MeasurementPattern, S: np.ndarray, logdet_S: float):
        self.pattern = pattern
        self.S = S
        self.logdet_S = logdet_S
        p, k = pattern.n_indicators, pattern.n_factors
        self.p, self.k = p, k
        self.n_free = pattern.n_free
        self.free_rows = np.arange(self.n_free)
        self.free_cols = pattern.free_factor_index
        self.tril_off = np.tril_indices(k, -1)
        self.n_off = len(self.tril_off[0])
        self.n_params = self.n_free + p + k + self.n_off
        self._slices = np.cumsum([self.n_free, p, k, self.n_off])

    def split(self, theta):
        a, b, c, _ = self._slices
        return theta[:a], theta[a:b], theta[b:c], theta[c:]

    def matrices(self, theta):
        lam, log_psi, l_diag, l_off = self.split(theta)
        Lam = np.zeros((self.p, self.k))
        Lam[self.free_rows, self.free_cols] = lam
        Lam[self.p - self.k :, :] = np.eye(self.k)
        psi = np.exp(log_psi)
        L = np.zeros((self.k, self.k))
        L[np.diag_indices(self.k)] = np.exp(l_diag)
        L[self.tril_off] = l_off
        return Lam, psi, L

    def value_and_grad(self, theta):
        Lam, psi, L = self.matrices(theta)
        LamL = Lam @ L
        Sigma = LamL @ LamL.T
        Sigma[np.diag_indices(self.p)] += psi
        try:
            cho = sla.cho_factor(Sigma, lower=True)
        except sla.LinAlgError:
            return np.inf, np.zeros(self.n_params)
        logdet = 2.0 * np.log(np.diag(cho[0])).sum()
        Sigma_inv = sla.cho_solve(cho, np.eye(self.p))
        A = Sigma_inv @ self.S
        F = logdet + np.trace(A) - self.logdet_S - self.p
        G = Sigma_inv - A @ Sigma_inv
        G = 0.5 * (G + G.T)

        Phi = L @ L.T
        dLam = 2.0 * G @ Lam @ Phi
        grad_lam = dLam[self.free_rows, self.free_cols]
        grad_logpsi = np.diag(G) * psi
        P = Lam.T @ G @ Lam
        dL = 2.0 * P @ L
        grad_ldiag = np.diag(dL) * np.diag(L)
        grad_loff = dL[self.tril_off]
        grad = np.concatenate([grad_lam, grad_logpsi, grad_ldiag, grad_loff])
        return F, grad

    def start(self, S):
        lam0 = np.ones(self.n_free)
        psi0 = np.clip(0.5 * np.diag(S), 10.0 * PSI_FLOOR, None)
        ref = slice(self.p - self.k, self.p)
        Phi0 = 0.5 * (S[ref, ref] + S[ref, ref].T)
        jitter = 0.0
        for _ in range(8):
            try:
                L0 = np.linalg.cholesky(Phi0 + jitter * np.eye(self.k))
                break
            except np.linalg.LinAlgError:
                jitter = max(2.0 * jitter, 1e-6)
        else:
            raise NumericalError("cannot build a positive definite start for Phi")
        return np.concatenate(
            [lam0, np.log(psi0), np.log(np.diag(L0)), L0[self.tril_off]]
        )

    def pack(self, lambda_free, psi_diag, phi):
        L = np.linalg.cholesky(phi)
        return np.concatenate(
            [
                lambda_free[self.free_rows, self.free_cols],
                np.log(np.clip(psi_diag, PSI_FLOOR, None)),
                np.log(np.diag(L)),
                L[self.tril_off],
            ]
        )


def fit_cfa_moments(
    pattern: MeasurementPattern,
    S: np.ndarray,
    zbar: np.ndarray,
    n_obs: int,
    *,
    start: MeasurementEstimate | None = None,
    max_iter: int = MAX_ITER,
    grad_tol: float = GRAD_TOL,
) -> MeasurementEstimate:
    """Fit the factor model to first and second sample moments.

    ``S`` must be the maximum-likelihood (divisor N) covariance of the
    canonical indicator matrix and ``zbar`` its column means.
    """
    p, k = pattern.n_indicators, pattern.n_factors
    S = np.asarray(S, dtype=float)
    zbar = np.asarray(zbar, dtype=float)
    if S.shape != (p, p) or zbar.shape != (p,):
        raise DataError("moment dimensions do not match the measurement pattern")
    if n_obs <= p:
        raise DataError(f"need more observations than indicators (N={n_obs}, p={p})")
    eigmin = float(np.linalg.eigvalsh(0.5 * (S + S.T)).min())
    if eigmin <= 0.0:
        raise DataError("sample covariance matrix is singular")
    _, logdet_S = np.linalg.slogdet(S)

    prob = _CfaProblem(pattern, S, logdet_S)
    if start is not None:
        theta0 = prob.pack(start.lambda_free, np.diag(start.psi), start.phi)
    else:
        theta0 = prob.start(S)
    F0, _ = prob.value_and_grad(theta0)

    bounds = [(None, None)] * prob.n_free
    bounds += [(np.log(PSI_FLOOR), None)] * p
    bounds += [(None, None)] * (k + prob.n_off)

    res = minimize(
        prob.value_and_grad,
        theta0,
        jac=True,
        method="L-BFGS-B",
        bounds=bounds,
        options={
            "maxiter": max_iter,
            "maxfun": 20 * max_iter,
            "maxls": 60,
            "ftol": 1e-14,
            "gtol": grad_tol,
        },
    )

    theta = res.x
    F, grad = prob.value_and_grad(theta)
    at_floor = theta[prob.n_free : prob.n_free + p] <= np.log(PSI_FLOOR) + 0.1
    pgrad = grad.copy()
    lower = np.full(prob.n_params, -np.inf)
    lower[prob.n_free : prob.n_free + p] = np.log(PSI_FLOOR)
    on_bound = theta <= lower + 1e-12
    pgrad[on_bound] = np.minimum(pgrad[on_bound], 0.0)
    grad_norm = float(np.abs(pgrad).max())
    converged = grad_norm <= grad_tol
    if not converged:
        raise NumericalError(
            f"factor model fit did not converge: grad norm {grad_norm:.2e} after "
            f"{res.nit} iterations ({res.message})"
        )

    Lam, psi_diag, L = prob.matrices(theta)
    lambda_free = Lam[: prob.n_free, :]
    psi = np.diag(psi_diag)
    phi = L @ L.T
    alpha = zbar[p - k :]
    tau_free = zbar[: p - k] - lambda_free @ alpha
    H = compute_H(lambda_free, psi)
    sigma_ee = factor_score_error_cov(H, lambda_free, psi)

    return MeasurementEstimate(
        pattern=pattern,
        tau_free=tau_free,
        lambda_free=lambda_free,
        psi=psi,
        phi=phi,
        factor_means=alpha,
        H=H,
        sigma_ee=sigma_ee,
        indicator_permutation=(),
        discrepancy=float(F),
        start_discrepancy=float(F0),
        grad_norm=grad_norm,
        n_iter=int(res.nit),
        converged=bool(converged),
        heywood=tuple(bool(b) for b in at_floor),
    )


def fit_cfa(
    spec: ModelSpec,
    data: pd.DataFrame | CanonicalData,
    *,
    start: MeasurementEstimate | None = None,
    max_iter: int = MAX_ITER,
    grad_tol: float = GRAD_TOL,
) -> tuple[MeasurementEstimate, CanonicalData]:
    """Fit the measurement model to raw indicator data.

    Returns the estimate together with the canonicalized data so callers
    can score the same rows without re-validating.
    """
    canon = data if isinstance(data, CanonicalData) else canonicalize(spec, data)
    z = canon.z
    n = z.shape[0]
    zbar = z.mean(axis=0)
    centered = z - zbar
    S = centered.T @ centered / n
    est = fit_cfa_moments(
        canon.pattern, S, zbar, n, start=start, max_iter=max_iter, grad_tol=grad_tol
    )
    est = dataclasses.replace(est, indicator_permutation=canon.permutation)
    return est, canon
