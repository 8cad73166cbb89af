"""Two-stage penalized solver with hierarchy constraints.

Stage 1 selects and estimates the mean coefficients: with the association
parameters frozen at their unpenalized values, each outer iteration linearizes
the mean estimating equation into a working WLS problem (working vector
Z = C beta_t + A, design C, weights B^{-1}) and solves its penalized version
by cyclic coordinate descent with one-step thresholds

    lambda_eff[l] = n * p'_lambda(|beta_l^(t)|)

frozen at the outer iterate. Stage 2 does the same for the association
coefficients with the fitted mean held fixed; its conditional-mean offsets are
recomputed at every outer iteration so the working problem tracks alpha.

A hierarchy ``constraint_map`` ties association coordinates to mean
coordinates: any association coordinate linked to a mean coordinate estimated
as zero in stage 1 is frozen at exactly 0 before stage 2 solves.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .alr import ALRResult, FitDiagnostics, PARAM_CAP, fit_alr
from .data import Dataset, Params
from .errors import ConfigError, LinearAlgebraError, StructuralError
from .penalty import PenaltyConfig, effective_thresholds, penalty_value, soft_threshold
from .scores import DatasetMoments, assoc_quadratic, dataset_moments, mean_quadratic

logger = logging.getLogger(__name__)


class AnalysisMode(Enum):
    """Which parameter blocks are selected (the other is kept at its
    unpenalized value)."""

    MEAN_ONLY = "mean_only"
    ASSOC_ONLY = "assoc_only"
    JOINT = "joint"


@dataclass
class WorkingResponse:
    """One linearization of an estimating equation as a WLS problem.

    ``z`` stacks the working vector over clusters (dataset order), ``design``
    the corresponding rows of the design, and ``weight_blocks`` holds one
    inverse working-covariance block per cluster. ``u`` and ``info`` are the
    score and information assembled from the same pass; the coordinate-descent
    solver consumes only those two.
    """

    z: np.ndarray
    design: np.ndarray
    weight_blocks: list
    u: np.ndarray
    info: np.ndarray
    expansion: np.ndarray


def working_response(
    dataset: Dataset,
    beta_t: np.ndarray,
    alpha: np.ndarray,
    moments: DatasetMoments | None = None,
    materialize: bool = True,
) -> WorkingResponse:
    """Mean-stage working WLS problem at expansion point beta_t."""
    beta_t = np.asarray(beta_t, dtype=float)
    params = Params(beta_t, alpha)
    moments = moments or dataset_moments(dataset, params)
    u, info, _ = mean_quadratic(moments)
    z = design = None
    blocks: list = []
    if materialize:
        z_parts, c_parts, inv_parts = [], [], []
        for gm in moments.per_group:
            z_parts.append(gm.c @ beta_t + gm.resid)
            c_parts.append(gm.c)
            inv_parts.append(np.linalg.inv(gm.b))
        order = np.argsort(np.concatenate([g.group.indices for g in moments.per_group]))
        flat_z = [z_parts[gi][row] for gi in range(len(z_parts)) for row in range(len(z_parts[gi]))]
        flat_c = [c_parts[gi][row] for gi in range(len(c_parts)) for row in range(len(c_parts[gi]))]
        flat_inv = [inv_parts[gi][row] for gi in range(len(inv_parts)) for row in range(len(inv_parts[gi]))]
        z = np.concatenate([flat_z[i] for i in order])
        design = np.vstack([flat_c[i] for i in order])
        blocks = [flat_inv[i] for i in order]
    return WorkingResponse(z=z, design=design, weight_blocks=blocks, u=u, info=info, expansion=beta_t)


def cd_penalized_wls(
    u: np.ndarray,
    d: np.ndarray,
    start: np.ndarray,
    lambda_eff: np.ndarray,
    tol: float = 1e-8,
    max_sweeps: int = 1000,
    frozen: np.ndarray | None = None,
):
    """Cyclic coordinate descent for the penalized working WLS problem.

    Minimizes (1/2) theta' d theta - theta' (u + d theta_t) + sum_l
    lambda_eff[l] |theta_l| by the closed-form coordinate update

        theta_l <- S( u_l + (d theta_t)_l - sum_{l' != l} d_{l l'} theta_{l'},
                      lambda_eff[l] ) / d_{l l},

    where theta_t = ``start`` is the outer-iterate expansion point (also the
    initial value). Coordinates marked ``frozen`` are pinned at exactly 0.
    Returns (theta, sweeps). Soft-threshold ties produce exact +0.0 and a
    zeroed coordinate may re-enter on a later sweep.
    """
    u = np.asarray(u, dtype=float)
    d = np.asarray(d, dtype=float)
    dim = u.size
    diag = np.diag(d).copy()
    active = np.ones(dim, dtype=bool) if frozen is None else ~np.asarray(frozen, dtype=bool)
    if (diag[active] <= 0).any():
        l = int(np.flatnonzero(active & (diag <= 0))[0])
        raise LinearAlgebraError(
            f"solver.cd_penalized_wls: nonpositive curvature d[{l},{l}] = {diag[l]:.3e}"
        )
    theta = np.asarray(start, dtype=float).copy()
    theta[~active] = 0.0
    c = u + d @ np.where(active, np.asarray(start, dtype=float), 0.0)
    grad = d @ theta
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        delta_max = 0.0
        for l in range(dim):
            if not active[l]:
                continue
            r = c[l] - grad[l] + diag[l] * theta[l]
            # soft_threshold maps ties and sub-threshold values to exact +0.0
            new = float(soft_threshold(r, lambda_eff[l])) / diag[l]
            step = new - theta[l]
            if step != 0.0:
                grad += d[:, l] * step
                theta[l] = new
                delta_max = max(delta_max, abs(step))
        if delta_max <= tol:
            break
    return theta, sweeps


@dataclass
class StageResult:
    """Outcome of one penalized stage."""

    estimate: np.ndarray
    active_set: np.ndarray
    outer_iterations: int
    inner_sweeps: int
    objective_trace: list
    converged: bool
    final_update_norm: float
    clamp_events: int
    condition_warnings: int


def _stage_objective(theta_new, theta_t, u, d, quad0, cfg, n_clusters):
    """Penalized working objective at theta_new around expansion point theta_t."""
    diff = theta_new - theta_t
    quad = 0.5 * (quad0 - 2.0 * diff @ u + diff @ d @ diff)
    pen_idx = np.ones(theta_new.size, dtype=bool)
    for i in cfg.exclude:
        if i < theta_new.size:
            pen_idx[i] = False
    pen = n_clusters * float(np.sum(penalty_value(theta_new[pen_idx], cfg)))
    return quad + pen


def penalized_mean_stage(
    dataset: Dataset,
    init: Params,
    cfg: PenaltyConfig,
    tol: float = 1e-6,
    max_outer: int = 100,
    inner_tol: float = 1e-8,
    max_sweeps: int = 1000,
) -> StageResult:
    """Penalized estimation of beta with alpha frozen at ``init.alpha``."""
    n = dataset.n_clusters
    beta = init.beta.copy()
    alpha = init.alpha
    trace: list = []
    total_sweeps = 0
    clamps = 0
    cond_warn = 0
    converged = False
    delta = np.inf
    outer = 0
    for outer in range(1, max_outer + 1):
        moments = dataset_moments(dataset, Params(beta, alpha))
        clamps += moments.clamp_events
        cond_warn += moments.cond_warnings
        u, d, quad0 = mean_quadratic(moments)
        lam_eff = effective_thresholds(beta, cfg, n)
        beta_new, sweeps = cd_penalized_wls(u, d, beta, lam_eff, inner_tol, max_sweeps)
        total_sweeps += sweeps
        trace.append(_stage_objective(beta_new, beta, u, d, quad0, cfg, n))
        delta = float(np.max(np.abs(beta_new - beta), initial=0.0))
        beta = beta_new
        if delta <= tol:
            converged = True
            break
        if float(np.max(np.abs(beta), initial=0.0)) > PARAM_CAP:
            # A flat penalty tail cannot rein in a divergent relinearization
            # sequence, so stop it the same way the unpenalized fit does.
            logger.warning(
                "solver: mean stage exceeded the coefficient cap %.0f at "
                "outer iteration %d; flagging non-convergence", PARAM_CAP, outer
            )
            break
    return StageResult(
        estimate=beta,
        active_set=np.flatnonzero(beta != 0.0),
        outer_iterations=outer,
        inner_sweeps=total_sweeps,
        objective_trace=trace,
        converged=converged,
        final_update_norm=delta,
        clamp_events=clamps,
        condition_warnings=cond_warn,
    )


def _frozen_mask(constraint_map, beta, p, q):
    """Translate the hierarchy map into a frozen-coordinate mask for alpha."""
    frozen = np.zeros(q, dtype=bool)
    log = []
    if not constraint_map:
        return frozen, log
    for mean_idx, assoc_idxs in constraint_map.items():
        if not 0 <= mean_idx < p:
            raise StructuralError(
                f"solver: constraint_map mean index {mean_idx} out of range for p={p}"
            )
        idxs = [assoc_idxs] if np.isscalar(assoc_idxs) else list(assoc_idxs)
        for a_idx in idxs:
            if not 0 <= a_idx < q:
                raise StructuralError(
                    f"solver: constraint_map association index {a_idx} out of range for q={q}"
                )
            if beta[mean_idx] == 0.0:
                frozen[a_idx] = True
                log.append((int(mean_idx), int(a_idx)))
    return frozen, log


def penalized_assoc_stage(
    dataset: Dataset,
    init: Params,
    cfg: PenaltyConfig,
    constraint_map: dict | None = None,
    tol: float = 1e-6,
    max_outer: int = 100,
    inner_tol: float = 1e-8,
    max_sweeps: int = 1000,
):
    """Penalized estimation of alpha with beta fixed at ``init.beta``.

    Conditional-mean offsets (hence the whole working problem) are recomputed
    at every outer iteration. Returns (StageResult, constraint_log).
    """
    if dataset.total_pairs == 0:
        raise StructuralError(
            "solver.penalized_assoc_stage: dataset has no within-cluster pairs"
        )
    n = dataset.n_clusters
    beta = init.beta
    frozen, constraint_log = _frozen_mask(constraint_map, beta, dataset.p, dataset.q)
    alpha = init.alpha.copy()
    alpha[frozen] = 0.0
    trace: list = []
    total_sweeps = 0
    clamps = 0
    cond_warn = 0
    converged = False
    delta = np.inf
    outer = 0
    for outer in range(1, max_outer + 1):
        moments = dataset_moments(dataset, Params(beta, alpha))
        clamps += moments.clamp_events
        cond_warn += moments.cond_warnings
        u, d, quad0 = assoc_quadratic(moments)
        lam_eff = effective_thresholds(alpha, cfg, n)
        alpha_new, sweeps = cd_penalized_wls(
            u, d, alpha, lam_eff, inner_tol, max_sweeps, frozen=frozen
        )
        total_sweeps += sweeps
        trace.append(_stage_objective(alpha_new, alpha, u, d, quad0, cfg, n))
        delta = float(np.max(np.abs(alpha_new - alpha), initial=0.0))
        alpha = alpha_new
        if delta <= tol:
            converged = True
            break
        if float(np.max(np.abs(alpha), initial=0.0)) > PARAM_CAP:
            logger.warning(
                "solver: association stage exceeded the coefficient cap %.0f "
                "at outer iteration %d; flagging non-convergence", PARAM_CAP, outer
            )
            break
    result = StageResult(
        estimate=alpha,
        active_set=np.flatnonzero(alpha != 0.0),
        outer_iterations=outer,
        inner_sweeps=total_sweeps,
        objective_trace=trace,
        converged=converged,
        final_update_norm=delta,
        clamp_events=clamps,
        condition_warnings=cond_warn,
    )
    return result, constraint_log


@dataclass
class FitResult:
    """Full output of the two-stage fit.

    ``beta_init``/``alpha_init`` are the unpenalized alternating-fit values the
    stages start from (and freeze where a block is not selected). Standard
    errors and the information criterion are attached by the tuning/inference
    layer when requested.
    """

    mode: AnalysisMode
    beta: np.ndarray
    alpha: np.ndarray
    beta_init: np.ndarray
    alpha_init: np.ndarray
    active_beta: np.ndarray
    active_alpha: np.ndarray
    cfg_mean: PenaltyConfig
    cfg_assoc: PenaltyConfig
    n_clusters: int
    alr_diagnostics: FitDiagnostics
    stage_mean: StageResult | None = None
    stage_assoc: StageResult | None = None
    constraint_log: list = field(default_factory=list)
    se_beta: np.ndarray | None = None
    se_alpha: np.ndarray | None = None
    bic: float | None = None


def _validate_mode(mode, cfg_mean, cfg_assoc, constraint_map):
    if mode == AnalysisMode.MEAN_ONLY:
        if cfg_assoc.kind != "none":
            raise ConfigError(
                "fit_hpgee2: mean_only mode requires an unpenalized association "
                f"config, got kind={cfg_assoc.kind!r}"
            )
        if constraint_map:
            raise ConfigError(
                "fit_hpgee2: constraint_map has no effect in mean_only mode; "
                "pass it with joint (or assoc_only) mode"
            )
    if mode == AnalysisMode.ASSOC_ONLY and cfg_mean.kind != "none":
        raise ConfigError(
            "fit_hpgee2: assoc_only mode requires an unpenalized mean config, "
            f"got kind={cfg_mean.kind!r}"
        )


def fit_hpgee2(
    dataset: Dataset,
    mode: AnalysisMode = AnalysisMode.JOINT,
    cfg_mean: PenaltyConfig | None = None,
    cfg_assoc: PenaltyConfig | None = None,
    constraint_map: dict | None = None,
    tol: float = 1e-6,
    max_outer: int = 100,
    inner_tol: float = 1e-8,
    max_sweeps: int = 1000,
    init: ALRResult | None = None,
    alr_tol: float = 1e-6,
    alr_max_outer: int = 100,
) -> FitResult:
    """Unpenalized alternating fit, then the penalized stage(s) for ``mode``.

    ``init`` accepts a precomputed :func:`hpgee2.alr.fit_alr` result so a
    tuning grid can reuse one initializer across every penalty value.
    """
    mode = AnalysisMode(mode)
    cfg_mean = cfg_mean if cfg_mean is not None else PenaltyConfig()
    cfg_assoc = cfg_assoc if cfg_assoc is not None else PenaltyConfig()
    _validate_mode(mode, cfg_mean, cfg_assoc, constraint_map)

    base = init if init is not None else fit_alr(dataset, tol=alr_tol, max_outer=alr_max_outer)
    beta_init = base.beta.copy()
    alpha_init = base.alpha.copy()

    stage_mean = None
    stage_assoc = None
    constraint_log: list = []

    if mode == AnalysisMode.ASSOC_ONLY:
        beta = beta_init.copy()
    else:
        stage_mean = penalized_mean_stage(
            dataset,
            Params(beta_init, alpha_init),
            cfg_mean,
            tol=tol,
            max_outer=max_outer,
            inner_tol=inner_tol,
            max_sweeps=max_sweeps,
        )
        beta = stage_mean.estimate

    if mode == AnalysisMode.MEAN_ONLY:
        alpha = alpha_init.copy()
    else:
        stage_assoc, constraint_log = penalized_assoc_stage(
            dataset,
            Params(beta, alpha_init),
            cfg_assoc,
            constraint_map=constraint_map,
            tol=tol,
            max_outer=max_outer,
            inner_tol=inner_tol,
            max_sweeps=max_sweeps,
        )
        alpha = stage_assoc.estimate

    return FitResult(
        mode=mode,
        beta=beta,
        alpha=alpha,
        beta_init=beta_init,
        alpha_init=alpha_init,
        active_beta=np.flatnonzero(beta != 0.0),
        active_alpha=np.flatnonzero(alpha != 0.0),
        cfg_mean=cfg_mean,
        cfg_assoc=cfg_assoc,
        n_clusters=dataset.n_clusters,
        alr_diagnostics=base.diagnostics,
        stage_mean=stage_mean,
        stage_assoc=stage_assoc,
        constraint_log=constraint_log,
    )
