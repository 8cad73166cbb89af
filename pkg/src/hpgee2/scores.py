"""Estimating functions and their derivative blocks.

The mean score stacks, over clusters i,

    U_beta = sum_i C_i' B_i^{-1} A_i,

with C_i = d mu_i / d beta', B_i the working covariance built from the pairwise
joint probabilities, and A_i = y_i - mu_i. The association score is

    U_alpha = sum_i T_i' S_i^{-1} R_i,

with T_i = d zeta_i / d alpha' computed with the conditional-mean offset held
fixed (so T_i rows are zeta(1-zeta) y_k z'), S_i = diag(zeta (1 - zeta)), and
R_i = y_j - zeta_i.

Derivative blocks for the sandwich variance:

    H_bb = sum C' B^{-1} C          (exact: A's beta-derivative is -C)
    H_ab = sum T' S^{-1} F,  F = d zeta / d beta'   (finite differences)
    H_aa = sum T' S^{-1} T          (offset-fixed plug-in), or
           sum T' S^{-1} G,  G = d zeta / d alpha'  (finite differences)

F and G are central finite differences with the full parameter flow (mu, phi,
and nu all recomputed inside each perturbation); no analytic form of d nu /
d beta is used anywhere. The plug-in H_aa treats the offset as constant in
alpha, which understates the curvature of the association estimating function;
``assoc_jacobian="full"`` supplies the exact expected-Jacobian estimate and is
what the variance estimator uses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, Params
from .errors import LinearAlgebraError
from .model import GroupMoments, group_moments, zeta_from_params


@dataclass
class DatasetMoments:
    """Batched moments for every size group, plus pooled diagnostics."""

    per_group: list
    clamp_events: int
    cond_warnings: int
    b_repairs: int = 0


def dataset_moments(dataset: Dataset, params: Params, check_condition: bool = True) -> DatasetMoments:
    per_group = [group_moments(g, params, check_condition) for g in dataset.groups]
    return DatasetMoments(
        per_group=per_group,
        clamp_events=sum(m.clamp_events for m in per_group),
        cond_warnings=sum(m.cond_warnings for m in per_group),
        b_repairs=sum(m.b_repairs for m in per_group),
    )


def _solve_working(gm: GroupMoments, rhs):
    """Batched solve against the working covariances of one size group."""
    try:
        return np.linalg.solve(gm.b, rhs)
    except np.linalg.LinAlgError as exc:
        raise LinearAlgebraError(
            "scores: singular working covariance among clusters "
            f"{gm.group.ids[:3]!r}..."
        ) from exc


def mean_score(dataset: Dataset, params: Params, moments: DatasetMoments | None = None):
    """Mean score U_beta and its per-cluster contributions (dataset order)."""
    moments = moments or dataset_moments(dataset, params)
    pieces = []
    for gm in moments.per_group:
        binv_a = _solve_working(gm, gm.resid[:, :, None])[:, :, 0]
        pieces.append(np.einsum("gsp,gs->gp", gm.c, binv_a))
    per_cluster = dataset.scatter(pieces)
    return per_cluster.sum(axis=0), per_cluster


def assoc_score(dataset: Dataset, params: Params, moments: DatasetMoments | None = None):
    """Association score U_alpha and its per-cluster contributions."""
    moments = moments or dataset_moments(dataset, params)
    pieces = []
    for gm in moments.per_group:
        w = gm.r_resid / gm.s_var if gm.s_var.size else gm.s_var
        pieces.append(np.einsum("gmq,gm->gq", gm.t, w))
    per_cluster = dataset.scatter(pieces)
    return per_cluster.sum(axis=0), per_cluster


@dataclass
class ScorePair:
    """Both scores with per-cluster contributions, evaluated at one parameter point."""

    u_beta: np.ndarray
    u_alpha: np.ndarray
    per_cluster_beta: np.ndarray   # (n, p)
    per_cluster_alpha: np.ndarray  # (n, q)


def score_pair(dataset: Dataset, params: Params, moments: DatasetMoments | None = None) -> ScorePair:
    moments = moments or dataset_moments(dataset, params)
    u_b, pc_b = mean_score(dataset, params, moments)
    u_a, pc_a = assoc_score(dataset, params, moments)
    return ScorePair(u_beta=u_b, u_alpha=u_a, per_cluster_beta=pc_b, per_cluster_alpha=pc_a)


def mean_quadratic(moments: DatasetMoments):
    """Summed ingredients of the mean working WLS problem.

    Returns (u, d, quad0) with u = sum C'B^{-1}A, d = sum C'B^{-1}C, and
    quad0 = sum A'B^{-1}A (the residual quadratic used by objective traces).
    """
    p = moments.per_group[0].c.shape[2]
    u = np.zeros(p)
    d = np.zeros((p, p))
    quad0 = 0.0
    for gm in moments.per_group:
        rhs = np.concatenate([gm.resid[:, :, None], gm.c], axis=2)
        sol = _solve_working(gm, rhs)
        binv_a, binv_c = sol[:, :, 0], sol[:, :, 1:]
        u += np.einsum("gsp,gs->p", gm.c, binv_a)
        d += np.einsum("gsp,gsr->pr", gm.c, binv_c)
        quad0 += float(np.einsum("gs,gs->", gm.resid, binv_a))
    return u, d, quad0


def assoc_quadratic(moments: DatasetMoments):
    """Summed ingredients of the association working WLS problem.

    Returns (u, d, quad0) with u = sum T'S^{-1}R, d = sum T'S^{-1}T, and
    quad0 = sum R'S^{-1}R.
    """
    q = moments.per_group[0].t.shape[2]
    u = np.zeros(q)
    d = np.zeros((q, q))
    quad0 = 0.0
    for gm in moments.per_group:
        if not gm.s_var.size:
            continue
        t_w = gm.t / gm.s_var[:, :, None]
        u += np.einsum("gmq,gm->q", t_w, gm.r_resid)
        d += np.einsum("gmq,gmr->qr", t_w, gm.t)
        quad0 += float(np.einsum("gm,gm->", gm.r_resid**2, 1.0 / gm.s_var))
    return u, d, quad0


def zeta_jacobians(dataset: Dataset, params: Params, wrt: str = "beta", step_scale: float = 1e-6):
    """Central finite-difference Jacobians of zeta, one array per size group.

    Element i has shape (g_i, m_i, dim) where dim is p for ``wrt="beta"`` and q
    for ``wrt="alpha"``. Steps are h_l = max(step_scale, step_scale * |theta_l|)
    and the perturbed evaluations recompute mu, phi, and nu, so the derivative
    flows through the joint probability.
    """
    if wrt not in ("beta", "alpha"):
        raise ValueError(f"zeta_jacobians: wrt must be 'beta' or 'alpha', got {wrt!r}")
    theta = params.beta if wrt == "beta" else params.alpha
    dim = theta.size
    out = [
        np.zeros((g.count, g.pairs.shape[0], dim)) for g in dataset.groups
    ]
    for l in range(dim):
        h = max(step_scale, step_scale * abs(theta[l]))
        plus, minus = theta.copy(), theta.copy()
        plus[l] += h
        minus[l] -= h
        if wrt == "beta":
            args_p, args_m = (plus, params.alpha), (minus, params.alpha)
        else:
            args_p, args_m = (params.beta, plus), (params.beta, minus)
        for gi, g in enumerate(dataset.groups):
            if not g.pairs.shape[0]:
                continue
            zp = zeta_from_params(g, *args_p)
            zm = zeta_from_params(g, *args_m)
            out[gi][:, :, l] = (zp - zm) / (2.0 * h)
    return out


@dataclass
class HessianBlocks:
    """Derivative blocks of the stacked estimating function.

    ``h_bb`` is p x p, ``h_ab`` is q x p (the derivative of U_alpha in beta),
    ``h_aa`` is q x q. ``assoc_jacobian`` records whether h_aa used the
    offset-fixed plug-in ("plugin") or the finite-difference flow ("full").
    """

    h_bb: np.ndarray
    h_ab: np.ndarray
    h_aa: np.ndarray
    assoc_jacobian: str


def hessian_blocks(
    dataset: Dataset,
    params: Params,
    moments: DatasetMoments | None = None,
    assoc_jacobian: str = "plugin",
) -> HessianBlocks:
    if assoc_jacobian not in ("plugin", "full"):
        raise ValueError(
            f"hessian_blocks: assoc_jacobian must be 'plugin' or 'full', got {assoc_jacobian!r}"
        )
    moments = moments or dataset_moments(dataset, params)
    p, q = dataset.p, dataset.q
    h_bb = np.zeros((p, p))
    h_ab = np.zeros((q, p))
    h_aa = np.zeros((q, q))

    f_blocks = zeta_jacobians(dataset, params, wrt="beta")
    g_blocks = (
        zeta_jacobians(dataset, params, wrt="alpha") if assoc_jacobian == "full" else None
    )
    for gi, gm in enumerate(moments.per_group):
        binv_c = _solve_working(gm, gm.c)
        h_bb += np.einsum("gsp,gsr->pr", gm.c, binv_c)
        if not gm.s_var.size:
            continue
        t_w = gm.t / gm.s_var[:, :, None]
        h_ab += np.einsum("gmq,gmp->qp", t_w, f_blocks[gi])
        right = g_blocks[gi] if g_blocks is not None else gm.t
        h_aa += np.einsum("gmq,gmr->qr", t_w, right)
    return HessianBlocks(h_bb=h_bb, h_ab=h_ab, h_aa=h_aa, assoc_jacobian=assoc_jacobian)
