"""Estimation with missing entries.

Three fitters cover the usual quality/cost trade:

* :func:`fit_mm` fills each missing cell with that cell's observed mean and
  runs the complete data fit on the filled set.  Cheap, and biased: imputed
  cells sit exactly at the mean, so spread is understated.
* :func:`fit_em` is expectation-maximization under the Kronecker structure.
  The E-step conditions each observation's missing block on its observed
  block by sweeping the pivots of the scale free precision
  ``kron(inv(col_cov), inv(row_cov))``, which yields the conditional mean,
  the conditional covariance, and the observed likelihood term in one pass.
  The M-step reuses the complete data closed forms on the completions plus
  a conditional covariance correction scattered through the index masks.
* :func:`fit_gem` is the classical EM for an unstructured multivariate
  normal on the stacked vectors: pq(pq+1)/2 free covariance entries, no
  Kronecker assumption.  The flexible but slow baseline.

Observations are processed in batches that share a missing entry count, so
the per observation conditioning runs as stacked array operations rather
than a Python loop over the data set.
"""

from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .linalg import (
    SingularPivotError,
    _swept_panel,
    ensure_spd,
    indicator_matrix,
    kron,
    spd_cholesky,
    spd_inverse,
    unvec,
    vec,
)
from .mle import (
    EstimationError,
    FitConfig,
    FitResult,
    SingularUpdateError,
    _initial_params,
    _normalized_spd_update,
    _observed_cell_means,
    _param_change,
    _rel_change,
    fit_mle,
)
from .model import DataError, MatrixNormalParams, ObservationSet

logger = logging.getLogger(__name__)

_PIVOT_TOL = 1e-12
_SCALE_FLOOR = 1e-300


@dataclass(eq=False)
class _PatternGroup:
    """Observations sharing one missing entry count, stacked for batch work."""

    m: int
    obs_ids: np.ndarray  # (B,)
    miss: np.ndarray  # (B, m) positions into the stacked vector, ascending
    rows: np.ndarray  # (B, m)
    cols: np.ndarray  # (B, m)
    observed: np.ndarray  # (B, pq - m)


@dataclass(eq=False)
class MissingPattern:
    """Index bookkeeping for the missing entries of an observation set.

    For observation i, ``miss[i]`` holds the ascending positions of the
    missing entries within the column-stacked vector; ``rows[i]`` and
    ``cols[i]`` are the matching row and column coordinates (position =
    col * p + row).  ``row_masks[i]`` and ``col_masks[i]`` are the 0/1
    selector matrices built from those coordinates, used to scatter
    conditional covariance mass back onto the covariance factor grids.
    """

    p: int
    q: int
    miss: list
    rows: list
    cols: list
    observed: list
    row_masks: list = field(default=None)
    col_masks: list = field(default=None)
    _complete_ids: np.ndarray = field(default=None, repr=False)
    _groups: list = field(default=None, repr=False)

    def __post_init__(self):
        if self.row_masks is None:
            self.row_masks = [indicator_matrix(r, self.p) for r in self.rows]
        if self.col_masks is None:
            self.col_masks = [indicator_matrix(c, self.q) for c in self.cols]
        sizes = np.array([m.size for m in self.miss])
        if self._complete_ids is None:
            self._complete_ids = np.flatnonzero(sizes == 0)
        if self._groups is None:
            self._groups = []
            pq = self.p * self.q
            for m in sorted(set(sizes[sizes > 0].tolist())):
                ids = np.flatnonzero(sizes == m)
                miss = np.stack([self.miss[i] for i in ids])
                grid = np.arange(pq)
                observed = np.stack(
                    [np.setdiff1d(grid, self.miss[i], assume_unique=True) for i in ids]
                )
                self._groups.append(
                    _PatternGroup(
                        m=int(m),
                        obs_ids=ids,
                        miss=miss,
                        rows=miss % self.p,
                        cols=miss // self.p,
                        observed=observed,
                    )
                )

    @property
    def n_obs(self) -> int:
        return len(self.miss)

    @property
    def any_missing(self) -> bool:
        return any(m.size for m in self.miss)


@dataclass(eq=False)
class ConditionalMoments:
    """Conditional completion of one observation.

    ``mean_completion`` keeps the observed entries untouched and replaces
    missing ones by their conditional means; ``cond_cov`` is the
    conditional covariance of the missing entries (scale included), ordered
    like the ascending missing positions.
    """

    mean_completion: np.ndarray
    cond_cov: np.ndarray


def detect_pattern(data: "ObservationSet | np.ndarray") -> MissingPattern:
    """Index the missing entries of every observation."""
    values = data.values if isinstance(data, ObservationSet) else np.asarray(data, float)
    if values.ndim != 3:
        raise ValueError(f"expected (n, p, q) values, got shape {values.shape}")
    n, p, q = values.shape
    miss, rows, cols, observed = [], [], [], []
    grid = np.arange(p * q)
    for i in range(n):
        nan_vec = np.isnan(values[i].ravel(order="F"))
        m = np.flatnonzero(nan_vec)
        if m.size == p * q:
            raise DataError(f"observation {i} has no observed entries")
        miss.append(m)
        rows.append(m % p)
        cols.append(m // p)
        observed.append(np.setdiff1d(grid, m, assume_unique=True))
    return MissingPattern(p=p, q=q, miss=miss, rows=rows, cols=cols, observed=observed)


def conditional_moments(
    x: np.ndarray,
    params: MatrixNormalParams,
    miss: "np.ndarray | None" = None,
) -> ConditionalMoments:
    """Condition one observation's missing entries on its observed ones.

    ``miss`` lists positions into the column-stacked vector; by default it
    is read off the NaN entries of ``x``.  Sweeping those pivots out of the
    scale free precision ``kron(inv(col_cov), inv(row_cov))`` leaves the
    inverse of its missing block (the scale free conditional covariance)
    and the regression coefficients of missing on observed, which is the
    textbook normal conditioning without ever forming the pq x pq
    covariance inverse.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (params.p, params.q):
        raise ValueError(
            f"observation shape {x.shape} does not match parameters "
            f"({params.p}, {params.q})"
        )
    x_vec = x.ravel(order="F")
    if miss is None:
        miss = np.flatnonzero(np.isnan(x_vec))
    else:
        miss = np.sort(np.asarray(miss, dtype=int))
    pq = x_vec.size
    if miss.size == pq:
        raise DataError("observation has no observed entries")
    if miss.size == 0:
        return ConditionalMoments(x.copy(), np.zeros((0, 0)))
    obs = np.setdiff1d(np.arange(pq), miss, assume_unique=True)
    if np.isnan(x_vec[obs]).any():
        raise DataError("entries outside the missing set must be observed")

    row_prec, _ = spd_inverse(params.row_cov)
    col_prec, _ = spd_inverse(params.col_cov)
    omega = kron(col_prec, row_prec)
    panel, _ = _swept_panel(omega, miss)
    free = -panel[miss, :]
    free = (free + free.T) / 2.0
    mean_vec = vec(params.mean)
    fill = mean_vec[miss] - panel[obs, :].T @ (x_vec[obs] - mean_vec[obs])
    comp_vec = x_vec.copy()
    comp_vec[miss] = fill
    return ConditionalMoments(
        unvec(comp_vec, params.p, params.q), params.scale * free
    )


def _e_step(
    values: np.ndarray, pattern: MissingPattern, params: MatrixNormalParams
) -> tuple[np.ndarray, list, float]:
    """Completions, per-group conditional covariances, observed log likelihood.

    The likelihood of each observation's observed block falls out of the
    sweep byproducts: the swept pivot values multiply to the determinant
    correction between the full and marginal covariances, and the quadratic
    form of the conditionally completed residual equals the marginal
    quadratic form of the observed block.
    """
    n, p, q = values.shape
    pq = p * q
    scale = params.scale
    mean = params.mean
    mean_vec = vec(mean)
    row_prec, row_logdet = spd_inverse(params.row_cov)
    col_prec, col_logdet = spd_inverse(params.col_cov)
    base_logdet = p * col_logdet + q * row_logdet
    log_tau = math.log(2.0 * math.pi * scale)

    completions = values.copy()
    free_by_group = []
    loglik = 0.0

    ids0 = pattern._complete_ids
    if ids0.size:
        resid = values[ids0] - mean
        weighted = np.einsum("ij,njk,kl->nil", row_prec, resid, col_prec)
        dist = np.einsum("nij,nij->n", resid, weighted)
        loglik += float(
            -0.5 * ids0.size * (pq * log_tau + base_logdet)
            - 0.5 * dist.sum() / scale
        )

    omega = np.kron(col_prec, row_prec)
    for g in pattern._groups:
        b = g.obs_ids.size
        vmat = values[g.obs_ids]
        vvec = vmat.transpose(0, 2, 1).reshape(b, pq)
        panel, logdet_block = _swept_panel_batch(omega, g.miss)
        free = -np.take_along_axis(panel, g.miss[:, :, None], axis=1)
        free = (free + free.transpose(0, 2, 1)) / 2.0
        free_by_group.append(free)
        panel_obs = np.take_along_axis(panel, g.observed[:, :, None], axis=1)
        resid_obs = np.take_along_axis(vvec, g.observed, axis=1) - mean_vec[g.observed]
        fill = mean_vec[g.miss] - np.einsum("bkm,bk->bm", panel_obs, resid_obs)
        comp_vec = vvec.copy()
        np.put_along_axis(comp_vec, g.miss, fill, axis=1)
        comp = comp_vec.reshape(b, q, p).transpose(0, 2, 1)
        completions[g.obs_ids] = comp
        resid = comp - mean
        weighted = np.einsum("ij,bjk,kl->bil", row_prec, resid, col_prec)
        dist = np.einsum("bij,bij->b", resid, weighted)
        n_seen = pq - g.m
        loglik += float(
            -0.5 * b * (n_seen * log_tau + base_logdet)
            - 0.5 * logdet_block.sum()
            - 0.5 * dist.sum() / scale
        )
    return completions, free_by_group, loglik


def _swept_panel_batch(
    omega: np.ndarray, pivots: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Batched form of the panel sweep: one pivot set per batch member.

    ``pivots`` has shape (B, m); returns the (B, d, m) panels and the
    per-member log determinants of the pivoted blocks.
    """
    b, m = pivots.shape
    arange_b = np.arange(b)
    panel = omega[:, pivots].transpose(1, 0, 2).copy()
    logdet = np.zeros(b)
    for t in range(m):
        k = pivots[:, t]
        d = panel[arange_b, k, t]
        if np.any(d < _PIVOT_TOL):
            bad = int(np.argmin(d))
            raise SingularPivotError(int(k[bad]))
        logdet += np.log(d)
        col = panel[:, :, t].copy()
        row = panel[arange_b, k, :].copy()
        panel -= col[:, :, None] * row[:, None, :] / d[:, None, None]
        panel[:, :, t] = col / d[:, None]
        panel[arange_b, k, :] = row / d[:, None]
        panel[arange_b, k, t] = -1.0 / d
    return panel, logdet


def _col_accumulator(
    pattern: MissingPattern,
    resid: np.ndarray,
    row_prec: np.ndarray,
    free_by_group: list,
    scale_old: float,
) -> np.ndarray:
    """Expected column-side scatter: completed products plus conditional mass.

    The conditional covariance of each missing block, paired entrywise with
    the row precision values at the missing rows, scatters onto the column
    grid at the missing column coordinates.  Repeated column indices must
    accumulate, hence the unbuffered scatter-add.
    """
    acc = np.einsum("nij,ik,nkl->jl", resid, row_prec, resid)
    for g, free in zip(pattern._groups, free_by_group):
        sub = row_prec[g.rows[:, :, None], g.rows[:, None, :]]
        contrib = (scale_old * free) * sub
        np.add.at(acc, (g.cols[:, :, None], g.cols[:, None, :]), contrib)
    return (acc + acc.T) / 2.0


def _row_accumulator(
    pattern: MissingPattern,
    resid: np.ndarray,
    col_prec: np.ndarray,
    free_by_group: list,
    scale_old: float,
) -> np.ndarray:
    """Row-side counterpart of :func:`_col_accumulator`."""
    acc = np.einsum("nij,jk,nlk->il", resid, col_prec, resid)
    for g, free in zip(pattern._groups, free_by_group):
        sub = col_prec[g.cols[:, :, None], g.cols[:, None, :]]
        contrib = (scale_old * free) * sub
        np.add.at(acc, (g.rows[:, :, None], g.rows[:, None, :]), contrib)
    return (acc + acc.T) / 2.0


def _m_step(
    pattern: MissingPattern,
    completions: np.ndarray,
    free_by_group: list,
    old: MatrixNormalParams,
    jitter: float,
) -> MatrixNormalParams:
    """Closed form parameter update from the E-step moments.

    Each covariance factor update pairs the conditional covariance of the
    missing entries with the other factor's precision values at the paired
    coordinates, scattered onto this factor's grid through the index masks;
    the completed residual scatter supplies the rest.  Updating the column
    factor first and reusing it fresh in the row factor update makes every
    sub-step a coordinate maximizer of the expected complete log
    likelihood, so the observed likelihood cannot decrease.  The scale
    estimate is the unnormalized row update's top-left entry, which is the
    maximizing scale at the freshly normalized factors.
    """
    n, p, q = completions.shape
    mean_new = completions.mean(axis=0)
    resid = completions - mean_new
    row_prec_old, _ = spd_inverse(old.row_cov)

    col_raw = _col_accumulator(pattern, resid, row_prec_old, free_by_group, old.scale)
    col_raw = col_raw / (p * n)
    col_new, _ = _normalized_spd_update(col_raw, jitter, "column covariance")

    col_prec_new, _ = spd_inverse(col_new)
    row_raw = _row_accumulator(pattern, resid, col_prec_new, free_by_group, old.scale)
    row_raw = row_raw / (q * n)
    row_new, jittered = _normalized_spd_update(row_raw, jitter, "row covariance")
    if jittered:
        row_prec_new, _ = spd_inverse(row_new)
        scale = float(np.sum(row_prec_new * row_raw)) / p
    else:
        scale = float(row_raw[0, 0])
    if not scale > _SCALE_FLOOR:
        raise SingularUpdateError("variance scale collapsed to zero")
    return MatrixNormalParams(mean_new, row_new, col_new, scale)


def fit_em(data: ObservationSet, config: "FitConfig | None" = None) -> FitResult:
    """Kronecker structured EM fit tolerating missing entries.

    Reduces exactly to :func:`~matnorm.mle.fit_mle` when nothing is
    missing.  The trace records the observed log likelihood at the initial
    parameters and after each update; it is non-decreasing up to roundoff.
    """
    cfg = config or FitConfig()
    values = data.values
    pattern = detect_pattern(data)
    if not pattern.any_missing:
        return fit_mle(data, cfg)
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
    completions, free_by_group, loglik = _e_step(values, pattern, params)
    trace = [loglik]
    converged = False
    iterations = 0
    for iterations in range(1, cfg.max_iters + 1):
        new_params = _m_step(pattern, completions, free_by_group, params, cfg.jitter)
        completions, free_by_group, loglik = _e_step(values, pattern, new_params)
        delta = abs(loglik - trace[-1]) / max(1.0, abs(trace[-1]))
        step = _param_change(new_params, params)
        trace.append(loglik)
        params = new_params
        logger.debug("em iteration %d: observed loglik %.10g", iterations, loglik)
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


def fit_mm(data: ObservationSet, config: "FitConfig | None" = None) -> FitResult:
    """Mean imputation followed by the complete data fit.

    The observed per-cell means are a fixed point of re-imputation: filling
    a cell with its observed mean leaves the completed data's cell mean at
    that same value, so the fill never changes across passes and a single
    fill followed by the complete data fit realizes the whole iteration.
    The trace is the complete data log likelihood of the filled set.
    """
    cfg = config or FitConfig()
    values = data.values
    if not np.isnan(values).any():
        return fit_mle(data, cfg)
    cell_means = _observed_cell_means(values)
    filled = np.where(np.isnan(values), cell_means, values)
    return fit_mle(ObservationSet(filled), cfg)


@dataclass(eq=False)
class UnstructuredParams:
    """Mean vector and free pq x pq covariance of the stacked observations."""

    p: int
    q: int
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        d = self.p * self.q
        if self.mean.shape != (d,):
            raise ValueError(f"mean must have shape ({d},), got {self.mean.shape}")
        self.cov = ensure_spd(self.cov, "covariance")
        if self.cov.shape != (d, d):
            raise ValueError(f"covariance must be {d} x {d}, got {self.cov.shape}")

    def mean_matrix(self) -> np.ndarray:
        """The mean restored to its p x q matrix layout."""
        return unvec(self.mean, self.p, self.q)


def _gem_conditional(
    x_vec: np.ndarray, mean: np.ndarray, cov: np.ndarray, miss: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Plain covariance-side conditioning of missing on observed entries."""
    obs = np.setdiff1d(np.arange(mean.size), miss, assume_unique=True)
    chol = spd_cholesky(cov[np.ix_(obs, obs)])
    cross = cov[np.ix_(miss, obs)]
    resid = x_vec[obs] - mean[obs]
    sol = scipy.linalg.cho_solve((chol, True), resid)
    cond_mean = mean[miss] + cross @ sol
    half = scipy.linalg.solve_triangular(chol, cross.T, lower=True)
    cond_cov = cov[np.ix_(miss, miss)] - half.T @ half
    return cond_mean, (cond_cov + cond_cov.T) / 2.0


def _gem_e_step(
    vdata: np.ndarray, pattern: MissingPattern, mean: np.ndarray, cov: np.ndarray
) -> tuple[np.ndarray, np.ndarray, float]:
    """Completions, accumulated conditional covariance, observed loglik."""
    n, d = vdata.shape
    completions = vdata.copy()
    extra = np.zeros((d, d))
    loglik = 0.0
    log_two_pi = math.log(2.0 * math.pi)

    ids0 = pattern._complete_ids
    if ids0.size:
        chol = spd_cholesky(cov)
        logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
        white = scipy.linalg.solve_triangular(
            chol, (vdata[ids0] - mean).T, lower=True
        )
        loglik += float(
            -0.5 * ids0.size * (d * log_two_pi + logdet)
            - 0.5 * np.sum(white * white)
        )

    for g in pattern._groups:
        k = d - g.m
        vobs = np.take_along_axis(vdata[g.obs_ids], g.observed, axis=1)
        resid = vobs - mean[g.observed]
        c_oo = cov[g.observed[:, :, None], g.observed[:, None, :]]
        c_mo = cov[g.miss[:, :, None], g.observed[:, None, :]]
        c_mm = cov[g.miss[:, :, None], g.miss[:, None, :]]
        chol = np.linalg.cholesky(c_oo)
        sol = np.linalg.solve(c_oo, resid[:, :, None])[:, :, 0]
        cond_mean = mean[g.miss] + np.einsum("bmk,bk->bm", c_mo, sol)
        gain = np.linalg.solve(c_oo, c_mo.transpose(0, 2, 1))
        cond_cov = c_mm - np.matmul(c_mo, gain)
        cond_cov = (cond_cov + cond_cov.transpose(0, 2, 1)) / 2.0
        filled = vdata[g.obs_ids].copy()
        np.put_along_axis(filled, g.miss, cond_mean, axis=1)
        completions[g.obs_ids] = filled
        np.add.at(extra, (g.miss[:, :, None], g.miss[:, None, :]), cond_cov)
        logdet = 2.0 * np.sum(
            np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1
        )
        quad = np.einsum("bk,bk->b", resid, sol)
        loglik += float(
            -0.5 * g.obs_ids.size * k * log_two_pi
            - 0.5 * logdet.sum()
            - 0.5 * quad.sum()
        )
    return completions, extra, loglik


def fit_gem(
    data: ObservationSet, config: "FitConfig | None" = None
) -> tuple[UnstructuredParams, FitResult]:
    """Unstructured multivariate normal EM on the stacked observations.

    Ignores the Kronecker structure entirely, which makes it the slowest of
    the three fitters and the hungriest for data (the covariance has
    pq(pq+1)/2 free entries); with more observations than pq it can resolve
    structure the factored model cannot.  Returns the parameter estimate
    together with fit metadata whose ``params`` field is None, since the
    output is not a matrix normal parameter set.
    """
    cfg = config or FitConfig()
    values = data.values
    pattern = detect_pattern(data)
    n, p, q = values.shape
    d = p * q
    if n < 2:
        raise EstimationError(f"at least 2 observations required, got {n}")
    if n <= d:
        warnings.warn(
            f"only {n} observations for a free {d} x {d} covariance; the "
            "estimate may be singular without more than p*q observations",
            stacklevel=2,
        )
    start = time.perf_counter()
    vdata = values.transpose(0, 2, 1).reshape(n, d)
    mean = vec(_observed_cell_means(values))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", category=RuntimeWarning)
        sq_dev = float(np.nanmean((vdata - mean) ** 2))
    cov = (sq_dev if sq_dev > 0 else 1.0) * np.eye(d)

    completions, extra, loglik = _gem_e_step(vdata, pattern, mean, cov)
    trace = [loglik]
    converged = False
    iterations = 0
    for iterations in range(1, cfg.max_iters + 1):
        mean_new = completions.mean(axis=0)
        resid = completions - mean_new
        cov_new = (resid.T @ resid + extra) / n
        cov_new = (cov_new + cov_new.T) / 2.0
        try:
            spd_cholesky(cov_new)
        except np.linalg.LinAlgError:
            logger.warning("added jitter %g to a degenerate covariance update", cfg.jitter)
            cov_new = cov_new + cfg.jitter * np.eye(d)
            try:
                spd_cholesky(cov_new)
            except np.linalg.LinAlgError:
                raise SingularUpdateError(
                    "covariance update is singular even after jitter"
                )
        step = max(_rel_change(mean_new, mean), _rel_change(cov_new, cov))
        mean, cov = mean_new, cov_new
        completions, extra, loglik = _gem_e_step(vdata, pattern, mean, cov)
        delta = abs(loglik - trace[-1]) / max(1.0, abs(trace[-1]))
        trace.append(loglik)
        logger.debug("gem iteration %d: observed loglik %.10g", iterations, loglik)
        if delta < cfg.tol or step < cfg.inner_tol:
            converged = True
            break
    result = FitResult(
        params=None,
        loglik_trace=np.asarray(trace),
        iterations=iterations,
        wall_time=time.perf_counter() - start,
        converged=converged,
    )
    return UnstructuredParams(p=p, q=q, mean=mean, cov=cov), result
