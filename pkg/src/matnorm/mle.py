"""Complete data maximum likelihood for the matrix normal distribution.

The mean estimate is the elementwise sample mean.  The covariance factors
have no closed form jointly: each is the closed form maximizer given the
other, so the fit alternates the two updates, renormalizes the top-left
entries to 1, and re-derives the variance scale, until the log likelihood
stops moving.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .linalg import spd_cholesky, spd_inverse
from .model import (
    DataError,
    MatrixNormalParams,
    ObservationSet,
    _first_missing,
    full_log_likelihood,
)

logger = logging.getLogger(__name__)

_SCALE_FLOOR = 1e-300


class EstimationError(RuntimeError):
    """Raised when an estimator cannot produce a usable parameter set."""


class SingularUpdateError(EstimationError):
    """Raised when a covariance update stays singular after jitter."""


@dataclass
class FitConfig:
    """Knobs shared by every fitting routine.

    ``tol`` stops on relative log likelihood change, ``inner_tol`` on the
    relative change of the parameter blocks themselves (whichever triggers
    first), and ``jitter`` is the one-shot diagonal boost applied to a
    covariance update that fails to factor.
    """

    max_iters: int = 500
    tol: float = 1e-8
    inner_tol: float = 1e-10
    jitter: float = 1e-8

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if not self.tol > 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if not self.inner_tol > 0:
            raise ValueError(f"inner_tol must be positive, got {self.inner_tol}")
        if self.jitter < 0:
            raise ValueError(f"jitter must be nonnegative, got {self.jitter}")


@dataclass(eq=False)
class FitResult:
    """Outcome of a fit: parameters plus the convergence record.

    ``loglik_trace[0]`` is the objective at the initial parameters and each
    later entry follows one update pass, so ``iterations == len(trace) - 1``
    passes were applied.  ``params`` is None only for fits whose natural
    output is not a matrix normal parameter set.
    """

    params: "MatrixNormalParams | None"
    loglik_trace: np.ndarray
    iterations: int
    wall_time: float
    converged: bool


def _rel_change(new: np.ndarray, old: np.ndarray) -> float:
    new = np.atleast_1d(np.asarray(new, dtype=float))
    old = np.atleast_1d(np.asarray(old, dtype=float))
    denom = max(1.0, float(np.max(np.abs(old))))
    return float(np.max(np.abs(new - old))) / denom


def _param_change(new: MatrixNormalParams, old: MatrixNormalParams) -> float:
    return max(
        _rel_change(new.mean, old.mean),
        _rel_change(new.row_cov, old.row_cov),
        _rel_change(new.col_cov, old.col_cov),
        _rel_change(new.scale, old.scale),
    )


def _normalized_spd_update(
    raw: np.ndarray, jitter: float, name: str
) -> tuple[np.ndarray, bool]:
    """Scale a raw scatter style update to unit top-left entry, jitter once.

    Returns the normalized matrix and whether jitter was needed; the caller
    must recompute anything derived from the raw matrix when it was.
    """
    jittered = False
    if not raw[0, 0] > _SCALE_FLOOR:
        raw = raw + jitter * np.eye(raw.shape[0])
        jittered = True
        logger.warning("added jitter %g to a degenerate %s update", jitter, name)
        if not raw[0, 0] > _SCALE_FLOOR:
            raise SingularUpdateError(f"{name} update is singular even after jitter")
    mat = raw / raw[0, 0]
    try:
        spd_cholesky(mat)
    except np.linalg.LinAlgError:
        if jittered:
            raise SingularUpdateError(f"{name} update is singular even after jitter")
        raw = raw + jitter * np.eye(raw.shape[0])
        jittered = True
        logger.warning("added jitter %g to a degenerate %s update", jitter, name)
        mat = raw / raw[0, 0]
        try:
            spd_cholesky(mat)
        except np.linalg.LinAlgError:
            raise SingularUpdateError(f"{name} update is singular even after jitter")
    return mat, jittered


def _complete_data_pass(
    resid: np.ndarray, row_cov: np.ndarray, jitter: float
) -> tuple[np.ndarray, np.ndarray, float]:
    """One alternating covariance pass over complete residuals.

    Updates the column factor from the current row factor, then the row
    factor from the fresh column factor, normalizing each; the variance
    scale falls out of the unnormalized row update, whose top-left entry is
    exactly the scale that re-maximizes the likelihood at the normalized
    factors.  Returns (row_cov, col_cov, scale).
    """
    n, p, q = resid.shape
    row_prec, _ = spd_inverse(row_cov)
    col_raw = np.einsum("nij,ik,nkl->jl", resid, row_prec, resid) / (p * n)
    col_raw = (col_raw + col_raw.T) / 2.0
    col_new, _ = _normalized_spd_update(col_raw, jitter, "column covariance")

    col_prec, _ = spd_inverse(col_new)
    row_raw = np.einsum("nij,jk,nlk->il", resid, col_prec, resid) / (q * n)
    row_raw = (row_raw + row_raw.T) / 2.0
    row_new, jittered = _normalized_spd_update(row_raw, jitter, "row covariance")
    if jittered:
        row_prec_new, _ = spd_inverse(row_new)
        scale = float(np.sum(row_prec_new * row_raw)) / p
    else:
        scale = float(row_raw[0, 0])
    if not scale > _SCALE_FLOOR:
        raise SingularUpdateError("variance scale collapsed to zero")
    return row_new, col_new, scale


def _observed_cell_means(values: np.ndarray) -> np.ndarray:
    """Per-cell mean of the observed entries; cells never observed warn and get 0."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", category=RuntimeWarning)
        mean = np.nanmean(values, axis=0)
    blank = np.isnan(mean)
    if blank.any():
        r, c = (int(v) for v in np.argwhere(blank)[0])
        warnings.warn(
            f"cell (row {r}, column {c}) is missing in every observation; "
            "its mean starts at 0",
            stacklevel=3,
        )
        mean = np.where(blank, 0.0, mean)
    return mean


def _initial_params(values: np.ndarray) -> MatrixNormalParams:
    """Identity shapes around the cell means, scale from pooled spread."""
    n, p, q = values.shape
    mean = _observed_cell_means(values)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", category=RuntimeWarning)
        sq_dev = np.nanmean((values - mean) ** 2)
    scale = float(sq_dev) if sq_dev > 0 else 1.0
    return MatrixNormalParams(mean, np.eye(p), np.eye(q), scale)


def fit_mle(data: ObservationSet, config: "FitConfig | None" = None) -> FitResult:
    """Maximum likelihood fit on fully observed data.

    Raises :class:`~matnorm.model.DataError` when missing entries are
    present.  With fewer observations than max(p, q) the alternating
    updates may not have a unique optimum; the fit proceeds but warns.
    """
    cfg = config or FitConfig()
    values = data.values
    if np.isnan(values).any():
        i, r, c = _first_missing(values)
        raise DataError(
            f"fit_mle requires complete data; first missing entry at "
            f"observation {i}, row {r}, column {c}"
        )
    n, p, q = values.shape
    if n < 2:
        raise EstimationError(f"at least 2 observations required, got {n}")
    if n <= max(p, q):
        warnings.warn(
            f"only {n} observations for a {p} x {q} model; the covariance "
            "estimate may not be unique without more than max(p, q) observations",
            stacklevel=2,
        )

    start = time.perf_counter()
    params = _initial_params(values)
    resid = values - params.mean
    trace = [full_log_likelihood(data, params)]
    converged = False
    iterations = 0
    for iterations in range(1, cfg.max_iters + 1):
        row_new, col_new, scale = _complete_data_pass(resid, params.row_cov, cfg.jitter)
        new_params = MatrixNormalParams(params.mean, row_new, col_new, scale)
        loglik = full_log_likelihood(data, new_params)
        delta = abs(loglik - trace[-1]) / max(1.0, abs(trace[-1]))
        step = _param_change(new_params, params)
        trace.append(loglik)
        params = new_params
        logger.debug("pass %d: loglik %.10g", iterations, loglik)
        if delta < cfg.tol or step < cfg.inner_tol:
            converged = True
            break
    return FitResult(
        params=params,
        loglik_trace=np.asarray(trace),
        iterations=iterations,
        wall_time=time.perf_counter() - start,
        converged=converged,
    )


def stationarity_residual(data: ObservationSet, params: MatrixNormalParams) -> float:
    """How far a parameter set is from solving its own estimating equations.

    Recomputes each block (mean, both covariance factors, scale) from the
    data with the other blocks held at ``params`` and returns the largest
    relative Frobenius distance.  Zero exactly at a fixed point of the fit,
    so this certifies a claimed optimum without rerunning it.
    """
    values = data.values
    if np.isnan(values).any():
        raise DataError("stationarity_residual requires complete data")
    n, p, q = values.shape
    mean_hat = values.mean(axis=0)
    resid = values - mean_hat
    row_prec, _ = spd_inverse(params.row_cov)
    col_prec, _ = spd_inverse(params.col_cov)

    col_raw = np.einsum("nij,ik,nkl->jl", resid, row_prec, resid) / (p * n)
    col_hat = col_raw / col_raw[0, 0]
    row_raw = np.einsum("nij,jk,nlk->il", resid, col_prec, resid) / (q * n)
    row_hat = row_raw / row_raw[0, 0]
    weighted = np.einsum("ij,njk,kl->nil", row_prec, resid, col_prec)
    scale_hat = float(np.einsum("nij,nij->", resid, weighted)) / (p * q * n)

    def rel(est: np.ndarray, ref: np.ndarray) -> float:
        est = np.atleast_2d(np.asarray(est, dtype=float))
        ref = np.atleast_2d(np.asarray(ref, dtype=float))
        return float(
            np.linalg.norm(est - ref) / max(1e-12, np.linalg.norm(ref))
        )

    return max(
        rel(mean_hat, params.mean),
        rel(col_hat, params.col_cov),
        rel(row_hat, params.row_cov),
        rel(np.array([[scale_hat]]), np.array([[params.scale]])),
    )
