"""Unpenalized second-order fit by alternating estimating equations.

Alternates two inner loops until the joint parameter update is small:

* mean update: Fisher scoring steps beta <- beta + (sum C'B^{-1}C)^{-1} U_beta
  with alpha held fixed;
* association update: offset logistic-regression steps
  alpha <- alpha + (sum T'S^{-1}T)^{-1} U_alpha with beta held fixed, the
  conditional-mean offsets recomputed at every step.

The fitted point solves both score equations simultaneously and serves as the
initializer and reference point for the penalized two-stage solver.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import Dataset, Params
from .errors import LinearAlgebraError, NumericalDomainError, StructuralError
from .scores import assoc_quadratic, dataset_moments, mean_quadratic

logger = logging.getLogger(__name__)

# A Fisher step is rejected and halved when it blows the score norm up by
# more than this factor; plain steps are otherwise accepted even if the norm
# rises slightly (scoring is not a descent method for ||U||).
_STEP_BLOWUP = 10.0
_MAX_HALVINGS = 10
# An inner loop whose score norm has drifted this far above the best iterate
# seen is declared runaway and abandoned at the best iterate.
_RUNAWAY = 1e3
# Coefficient magnitude beyond which the estimating equations are treated as
# separated (score drifting to zero as the parameter runs to infinity); the
# iteration stops there rather than chase a root at infinity.  Converged
# fits on realistic clustered-binary data sit an order of magnitude lower.
PARAM_CAP = 15.0
# An inner loop that has not improved its best score norm by this relative
# amount over _STALL_WINDOW consecutive iterations is stalled and gives up.
_STALL_RTOL = 1e-3
_STALL_WINDOW = 15


@dataclass
class FitDiagnostics:
    """Convergence bookkeeping for an alternating fit."""

    outer_iterations: int = 0
    converged: bool = False
    final_update_norm: float = np.inf
    clamp_events: int = 0
    condition_warnings: int = 0
    step_halvings: int = 0
    covariance_repairs: int = 0
    separated: bool = False


@dataclass
class ALRResult:
    beta: np.ndarray
    alpha: np.ndarray
    diagnostics: FitDiagnostics

    @property
    def params(self) -> Params:
        return Params(self.beta, self.alpha)


def _solve_step(d, u, what):
    try:
        return np.linalg.solve(d, u)
    except np.linalg.LinAlgError as exc:
        raise LinearAlgebraError(f"alr: singular {what} information matrix") from exc


def mean_fisher_step(dataset: Dataset, params: Params, moments=None):
    """One Fisher scoring step for beta at fixed alpha. Returns the new beta."""
    moments = moments or dataset_moments(dataset, params)
    u, d, _ = mean_quadratic(moments)
    return params.beta + _solve_step(d, u, "mean")


def assoc_offset_step(dataset: Dataset, params: Params, moments=None):
    """One offset-logistic scoring step for alpha at fixed beta. Returns the new alpha."""
    if dataset.total_pairs == 0:
        raise StructuralError(
            "alr.assoc_offset_step: dataset has no within-cluster pairs; "
            "the association model is not estimable"
        )
    moments = moments or dataset_moments(dataset, params)
    u, d, _ = assoc_quadratic(moments)
    return params.alpha + _solve_step(d, u, "association")


def _inner_loop(dataset, params, which, inner_tol, max_inner, diag: FitDiagnostics):
    """Drive one parameter block to convergence with the other held fixed.

    Each scoring step is evaluated before it is committed: a trial point whose
    score norm exceeds _STEP_BLOWUP times the current norm, or whose moments
    cannot be evaluated at all, is halved (up to _MAX_HALVINGS times) before
    acceptance.  The accepted trial's evaluation is reused as the next step's
    scoring ingredient, so the common path still costs one moments pass per
    iteration.  If the loop ends without converging, the iterate with the
    smallest score norm seen is restored, so a stalled block never hands a
    runaway point to the other block.
    """
    quad = mean_quadratic if which == "beta" else assoc_quadratic
    label = "mean" if which == "beta" else "association"

    def evaluate(theta):
        _assign(params, which, theta)
        moments = dataset_moments(dataset, params)
        diag.clamp_events += moments.clamp_events
        diag.condition_warnings += moments.cond_warnings
        diag.covariance_repairs += moments.b_repairs
        u, d, _ = quad(moments)
        norm = float(np.max(np.abs(u))) if u.size else 0.0
        return u, d, norm

    theta = (params.beta if which == "beta" else params.alpha).copy()
    u, d, norm = evaluate(theta)
    best_theta, best_norm = theta, norm
    converged = u.size == 0
    since_improvement = 0
    for _ in range(max_inner):
        if converged:
            break
        step = _solve_step(d, u, label)
        if np.max(np.abs(step), initial=0.0) <= inner_tol:
            theta = theta + step
            converged = True
            break
        trial = theta + step
        accepted = None
        fallback = None  # best evaluable trial even if its norm rose
        for halving in range(_MAX_HALVINGS + 1):
            try:
                u_t, d_t, norm_t = evaluate(trial)
            except (LinearAlgebraError, NumericalDomainError):
                u_t, norm_t = None, np.inf
            if u_t is not None and (fallback is None or norm_t < fallback[3]):
                fallback = (trial, u_t, d_t, norm_t)
            if u_t is not None and norm_t <= norm:
                accepted = (trial, u_t, d_t, norm_t)
                break
            if halving == _MAX_HALVINGS:
                break
            step = 0.5 * step
            trial = theta + step
            diag.step_halvings += 1
            logger.debug("alr: halved %s step (score norm %.3e)", which, norm_t)
        if accepted is None:
            if fallback is None:
                # No scale of this step is even evaluable (a cluster's
                # working covariance degenerates in every trial): stall
                # here; the best iterate is restored below and the outer
                # alternation decides what happens next.
                break
            # No scale reduced the norm: take the least-bad trial and let
            # the runaway guard decide whether to abandon the loop.
            accepted = fallback
        theta, u, d, norm = accepted
        if norm < (1.0 - _STALL_RTOL) * best_norm:
            since_improvement = 0
        else:
            since_improvement += 1
            if since_improvement >= _STALL_WINDOW:
                logger.debug(
                    "alr: %s loop stalled (best score norm %.3e)", label, best_norm
                )
                break
        if norm < best_norm:
            best_theta, best_norm = theta.copy(), norm
        if not np.isfinite(norm) or norm > _RUNAWAY * max(best_norm, 1e-300):
            logger.debug(
                "alr: abandoning runaway %s loop (score norm %.3e, best %.3e)",
                label,
                norm,
                best_norm,
            )
            break
        if np.max(np.abs(theta)) > PARAM_CAP:
            diag.separated = True
            logger.warning(
                "alr: %s coefficients exceeded %.0f in magnitude with a "
                "shrinking score; treating the equations as separated",
                label,
                PARAM_CAP,
            )
            break
    if not converged and best_norm < norm:
        theta = best_theta
    _assign(params, which, theta)
    return theta


def _assign(params, which, value):
    if which == "beta":
        params.beta = value
    else:
        params.alpha = value


def _joint_polish(dataset, params, diag: FitDiagnostics, tol, max_newton=10):
    """Damped Newton on the stacked score, used to accelerate the alternation.

    The alternation's fixed point solves both score equations jointly, and the
    two scoring loops each converge only linearly, so once a sweep has placed
    the iterate in the right neighbourhood a few Newton steps on the stacked
    system (finite-difference Jacobian, line search on the score max-norm)
    reach it far faster than further sweeps would.  Best-effort: any failure
    (singular Jacobian, un-evaluable trial, no decrease) leaves the iterate
    where the alternation put it.  Convergence is still declared by the
    alternation's own parameter-change criterion afterwards.
    """
    p, q = dataset.p, dataset.q

    def u_at(vec):
        moments = dataset_moments(dataset, Params(vec[:p], vec[p:]))
        diag.clamp_events += moments.clamp_events
        diag.condition_warnings += moments.cond_warnings
        diag.covariance_repairs += moments.b_repairs
        ub, _, _ = mean_quadratic(moments)
        ua, _, _ = assoc_quadratic(moments)
        return np.concatenate([ub, ua])

    th = np.concatenate([params.beta, params.alpha])
    dim = th.size
    try:
        u = u_at(th)
    except (LinearAlgebraError, NumericalDomainError):
        return
    norm = float(np.max(np.abs(u)))
    for _ in range(max_newton):
        jac = np.empty((dim, dim))
        try:
            for l in range(dim):
                h = 1e-6 * max(1.0, abs(th[l]))
                e = np.zeros(dim)
                e[l] = h
                jac[:, l] = (u_at(th + e) - u_at(th - e)) / (2.0 * h)
        except (LinearAlgebraError, NumericalDomainError):
            return
        if not np.isfinite(jac).all():
            return
        try:
            step = np.linalg.solve(-jac, u)
        except np.linalg.LinAlgError:
            return
        gamma, accepted = 1.0, None
        for _ in range(9):
            try:
                u_t = u_at(th + gamma * step)
                norm_t = float(np.max(np.abs(u_t)))
                if norm_t < norm:
                    accepted = (u_t, norm_t)
                    break
            except (LinearAlgebraError, NumericalDomainError):
                pass
            gamma *= 0.5
        if accepted is None:
            return
        th = th + gamma * step
        u, norm = accepted
        params.beta, params.alpha = th[:p].copy(), th[p:].copy()
        if gamma * float(np.max(np.abs(step))) <= tol / 10.0:
            return


def fit_alr(
    dataset: Dataset,
    init: Params | None = None,
    tol: float = 1e-6,
    max_outer: int = 100,
    max_inner: int = 500,
) -> ALRResult:
    """Alternate the two inner loops from (0, 0) until the joint update settles.

    Inner loops converge at tol/10. Convergence is declared when the combined
    max-norm change of (beta, alpha) across one outer sweep is <= tol; the
    result carries a converged flag rather than raising on exhaustion.

    The association scoring map holds the conditional-mean offsets fixed
    within a step, which makes it a linearly convergent fixed-point iteration;
    its contraction rate degrades when marginal means sit near 0 or 1, so the
    inner iteration budget is deliberately generous.
    """
    params = init.copy() if init is not None else Params.zeros(dataset.p, dataset.q)
    diag = FitDiagnostics()
    inner_tol = tol / 10.0
    delta = np.inf
    fit_assoc = dataset.q > 0
    if fit_assoc and dataset.total_pairs == 0:
        raise StructuralError(
            "alr.fit_alr: dataset has no within-cluster pairs; "
            "the association model is not estimable"
        )
    best_delta, sweeps_without_progress = np.inf, 0
    for outer in range(1, max_outer + 1):
        beta_old = params.beta.copy()
        alpha_old = params.alpha.copy()
        _inner_loop(dataset, params, "beta", inner_tol, max_inner, diag)
        if fit_assoc:
            _inner_loop(dataset, params, "alpha", inner_tol, max_inner, diag)
        delta = max(
            float(np.max(np.abs(params.beta - beta_old), initial=0.0)),
            float(np.max(np.abs(params.alpha - alpha_old), initial=0.0)),
        )
        diag.outer_iterations = outer
        if delta <= tol:
            diag.converged = True
            break
        if diag.separated:
            # A block ran past PARAM_CAP with a shrinking score: no finite
            # root to alternate towards, so stop where the cap caught it.
            break
        if delta < 0.5 * best_delta:
            best_delta, sweeps_without_progress = delta, 0
        else:
            sweeps_without_progress += 1
            if sweeps_without_progress >= 5:
                # Sweeps stopped shrinking the update: the alternation is
                # cycling rather than contracting, and more sweeps only
                # burn time.  Report non-convergence where it stands.
                break
        if outer >= 2:
            _joint_polish(dataset, params, diag, tol)
    diag.final_update_norm = delta
    if not diag.converged:
        logger.warning(
            "alr: not converged after %d outer iterations (last update %.3e%s)",
            diag.outer_iterations,
            delta,
            ", separated" if diag.separated else "",
        )
    return ALRResult(beta=params.beta, alpha=params.alpha, diagnostics=diag)
