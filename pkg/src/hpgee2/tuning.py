"""Tuning-parameter selection and post-selection inference.

Three modified information criteria, one per analysis mode, each of the form

    score quadratic + log(n) * (number of nonzero coefficients)

where the score quadratic is g' M^{-1} g with g the summed per-cluster score
and M the sum of per-cluster score outer products, evaluated at the point the
criterion targets:

* mean criterion: U_beta at (beta_hat, alpha_unpenalized)
* association criterion: U_alpha at (beta_unpenalized, alpha_hat)
* joint criterion: both quadratics (mean at (beta_hat, alpha_unpenalized),
  association at (beta_hat, alpha_hat)) plus log(n) times the total count.

Grid search fits the two-stage solver once per lambda (a single lambda shared
by both stages in joint mode), reusing one unpenalized initializer, and keeps
the fit minimizing the criterion; exact ties go to the larger lambda.

The sandwich covariance follows the penalized estimating-equation expansion:
restricted to the selected coordinates,

    cov(theta_hat) = Bread V Bread',  Bread = [[H_bb + P1, 0], [H_ab, H_aa + P2]]^{-1}

with V the summed outer products of the stacked per-cluster scores and P1/P2
the local-quadratic penalty curvatures n * p'_lambda(|theta|)/|theta| on the
penalized active coordinates. H_aa uses the full finite-difference Jacobian of
zeta in alpha (see scores.hessian_blocks) so the association block reflects
the true curvature of its estimating function.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .alr import ALRResult, fit_alr
from .data import Dataset, Params
from .errors import ConvergenceError, Hpgee2Error, LinearAlgebraError
from .penalty import PenaltyConfig, lqa_weight
from .solver import AnalysisMode, FitResult, fit_hpgee2
from .scores import dataset_moments, hessian_blocks, score_pair

logger = logging.getLogger(__name__)

_PINV_RTOL = 1e-10


def _score_quadratic(per_cluster: np.ndarray) -> float:
    """g' M^{-1} g with g = column sums and M = sum of row outer products.

    Falls back to a pseudo-inverse (relative tolerance 1e-10) when M is
    singular; a degenerate all-zero score yields 0 with a warning.
    """
    g = per_cluster.sum(axis=0)
    if not np.any(per_cluster):
        logger.warning("tuning: all per-cluster scores are zero; score quadratic set to 0")
        return 0.0
    m = per_cluster.T @ per_cluster
    try:
        sol = np.linalg.solve(m, g)
        if not np.all(np.isfinite(sol)):
            raise np.linalg.LinAlgError("non-finite solve")
    except np.linalg.LinAlgError:
        logger.warning("tuning: singular score outer-product matrix; using pseudo-inverse")
        sol = np.linalg.pinv(m, rcond=_PINV_RTOL) @ g
    return float(g @ sol)


def bic_mean(dataset: Dataset, fit: FitResult) -> float:
    """Mean-model criterion: U_beta quadratic at (beta_hat, alpha_init)."""
    sp = score_pair(dataset, Params(fit.beta, fit.alpha_init))
    n = dataset.n_clusters
    return _score_quadratic(sp.per_cluster_beta) + np.log(n) * int(
        np.count_nonzero(fit.beta)
    )


def bic_assoc(dataset: Dataset, fit: FitResult) -> float:
    """Association criterion: U_alpha quadratic at (beta_init, alpha_hat)."""
    sp = score_pair(dataset, Params(fit.beta_init, fit.alpha))
    n = dataset.n_clusters
    return _score_quadratic(sp.per_cluster_alpha) + np.log(n) * int(
        np.count_nonzero(fit.alpha)
    )


def bic_joint(dataset: Dataset, fit: FitResult) -> float:
    """Joint criterion: mean quadratic at (beta_hat, alpha_init) plus
    association quadratic at (beta_hat, alpha_hat) plus log(n) times the
    total nonzero count."""
    sp_mean = score_pair(dataset, Params(fit.beta, fit.alpha_init))
    sp_assoc = score_pair(dataset, Params(fit.beta, fit.alpha))
    n = dataset.n_clusters
    complexity = int(np.count_nonzero(fit.beta)) + int(np.count_nonzero(fit.alpha))
    return (
        _score_quadratic(sp_mean.per_cluster_beta)
        + _score_quadratic(sp_assoc.per_cluster_alpha)
        + np.log(n) * complexity
    )


def bic_for_mode(dataset: Dataset, fit: FitResult) -> float:
    if fit.mode == AnalysisMode.MEAN_ONLY:
        return bic_mean(dataset, fit)
    if fit.mode == AnalysisMode.ASSOC_ONLY:
        return bic_assoc(dataset, fit)
    return bic_joint(dataset, fit)


def log_grid(lo: float = 1e-3, hi: float = 1.0, num: int = 30) -> np.ndarray:
    """Log-spaced tuning grid (defaults cover the selection-relevant range)."""
    if not (0 < lo < hi) or num < 1:
        raise Hpgee2Error(f"tuning.log_grid: invalid grid ({lo}, {hi}, {num})")
    return np.geomspace(lo, hi, num)


@dataclass
class GridPoint:
    lam: float
    bic: float = np.nan
    active_beta: np.ndarray | None = None
    active_alpha: np.ndarray | None = None
    error: str | None = None


@dataclass
class TuningReport:
    grid: np.ndarray
    bic_values: np.ndarray
    chosen_lambda: float
    chosen_fit: FitResult
    path: list = field(default_factory=list)
    n_failures: int = 0


def _configs_for(
    mode: AnalysisMode, kind: str, lam: float, a: float, exclude_mean, exclude_assoc
) -> tuple:
    cfg_mean = PenaltyConfig(
        kind if mode != AnalysisMode.ASSOC_ONLY else "none",
        lam if mode != AnalysisMode.ASSOC_ONLY else 0.0,
        a,
        exclude_mean,
    )
    cfg_assoc = PenaltyConfig(
        kind if mode != AnalysisMode.MEAN_ONLY else "none",
        lam if mode != AnalysisMode.MEAN_ONLY else 0.0,
        a,
        exclude_assoc,
    )
    return cfg_mean, cfg_assoc


def grid_search(
    dataset: Dataset,
    mode: AnalysisMode = AnalysisMode.JOINT,
    kind: str = "scad",
    grid=None,
    a: float = 3.7,
    exclude_mean=frozenset({0}),
    exclude_assoc=frozenset({0}),
    constraint_map: dict | None = None,
    tol: float = 1e-6,
    max_outer: int = 100,
    init: ALRResult | None = None,
    stage_max_outer: int | None = None,
) -> TuningReport:
    """Fit the two-stage solver along a lambda grid and keep the best criterion.

    The unpenalized initializer is computed once (or taken from ``init``) and
    shared by every grid point. Per-point failures are recorded and skipped;
    at least one point must succeed. Exact criterion ties resolve to the
    larger lambda. ``exclude_mean``/``exclude_assoc`` list the coordinates
    each stage's penalty skips (both default to the intercept slot).

    ``stage_max_outer`` caps the relinearization sweeps inside each penalized
    stage; ``1`` gives the single-step estimator built on the unpenalized
    initializer, ``None`` inherits ``max_outer`` (iterate to convergence).
    """
    mode = AnalysisMode(mode)
    grid = log_grid() if grid is None else np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0 or (grid <= 0).any():
        raise Hpgee2Error("tuning.grid_search: grid must be a nonempty positive vector")
    base = init if init is not None else fit_alr(dataset, tol=tol, max_outer=max_outer)

    path: list = []
    fits: dict[int, FitResult] = {}
    last_error: Exception | None = None
    for i, lam in enumerate(grid):
        point = GridPoint(lam=float(lam))
        try:
            cfg_mean, cfg_assoc = _configs_for(
                mode, kind, float(lam), a, exclude_mean, exclude_assoc
            )
            fit = fit_hpgee2(
                dataset,
                mode=mode,
                cfg_mean=cfg_mean,
                cfg_assoc=cfg_assoc,
                constraint_map=constraint_map,
                tol=tol,
                max_outer=max_outer if stage_max_outer is None else stage_max_outer,
                init=base,
            )
            point.bic = bic_for_mode(dataset, fit)
            point.active_beta = fit.active_beta
            point.active_alpha = fit.active_alpha
            fit.bic = point.bic
            fits[i] = fit
        except Hpgee2Error as exc:
            point.error = str(exc)
            last_error = exc
            logger.warning("tuning: grid point lambda=%.4g failed: %s", lam, exc)
        path.append(point)

    bic_values = np.array([pt.bic for pt in path])
    ok = np.isfinite(bic_values)
    if not ok.any():
        raise ConvergenceError(
            "tuning.grid_search: every grid point failed"
            + (f"; last error: {last_error}" if last_error else "")
        )
    best = np.min(bic_values[ok])
    # exact ties resolve to the larger lambda
    candidates = np.flatnonzero(ok & (bic_values == best))
    chosen_idx = int(candidates[np.argmax(grid[candidates])])
    return TuningReport(
        grid=grid,
        bic_values=bic_values,
        chosen_lambda=float(grid[chosen_idx]),
        chosen_fit=fits[chosen_idx],
        path=path,
        n_failures=int(np.count_nonzero(~ok)),
    )


@dataclass
class SandwichCovariance:
    """Covariance over the selected coordinates, with full-length SE vectors.

    ``matrix`` is ordered [active mean coords..., active association
    coords...]; ``se_beta``/``se_alpha`` align with the coefficient vectors
    and hold NaN at inactive positions.
    """

    matrix: np.ndarray
    mean_active: np.ndarray
    assoc_active: np.ndarray
    se_beta: np.ndarray
    se_alpha: np.ndarray


def _penalty_curvature(theta, active, cfg: PenaltyConfig, n: int):
    """Diagonal n * p'(|theta_l|)/|theta_l| on penalized active coordinates."""
    curv = np.zeros(active.size)
    if cfg.kind == "none":
        return curv
    for j, l in enumerate(active):
        if l in cfg.exclude:
            continue
        curv[j] = n * float(lqa_weight(theta[l], cfg))
    return curv


def sandwich_covariance(
    dataset: Dataset,
    fit: FitResult,
    assoc_jacobian: str = "full",
) -> SandwichCovariance:
    """Penalized-sandwich covariance of the selected coefficients."""
    params = Params(fit.beta, fit.alpha)
    moments = dataset_moments(dataset, params)
    blocks = hessian_blocks(dataset, params, moments=moments, assoc_jacobian=assoc_jacobian)
    sp = score_pair(dataset, params, moments=moments)

    s_idx = fit.active_beta
    v_idx = fit.active_alpha
    n = dataset.n_clusters
    ns, nv = s_idx.size, v_idx.size
    dim = ns + nv

    bread_inv = np.zeros((dim, dim))
    bread_inv[:ns, :ns] = blocks.h_bb[np.ix_(s_idx, s_idx)]
    bread_inv[:ns, :ns] += np.diag(_penalty_curvature(fit.beta, s_idx, fit.cfg_mean, n))
    bread_inv[ns:, :ns] = blocks.h_ab[np.ix_(v_idx, s_idx)]
    bread_inv[ns:, ns:] = blocks.h_aa[np.ix_(v_idx, v_idx)]
    bread_inv[ns:, ns:] += np.diag(_penalty_curvature(fit.alpha, v_idx, fit.cfg_assoc, n))

    stacked = np.concatenate(
        [sp.per_cluster_beta[:, s_idx], sp.per_cluster_alpha[:, v_idx]], axis=1
    )
    meat = stacked.T @ stacked

    try:
        bread = np.linalg.inv(bread_inv)
    except np.linalg.LinAlgError as exc:
        raise LinearAlgebraError(
            "tuning.sandwich_covariance: singular bread matrix on the active set"
        ) from exc
    cov = bread @ meat @ bread.T
    var = np.clip(np.diag(cov), 0.0, None)

    se_beta = np.full(dataset.p, np.nan)
    se_alpha = np.full(dataset.q, np.nan)
    se_beta[s_idx] = np.sqrt(var[:ns])
    se_alpha[v_idx] = np.sqrt(var[ns:])
    return SandwichCovariance(
        matrix=cov,
        mean_active=s_idx,
        assoc_active=v_idx,
        se_beta=se_beta,
        se_alpha=se_alpha,
    )
