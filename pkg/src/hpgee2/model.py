"""Marginal mean, pairwise odds-ratio, and second-moment computations.

The model for clustered binary outcomes Y_ij has two linked components:

* marginal means on the logit scale, ``logit mu_ij = x_ij' beta``;
* pairwise associations on the log odds-ratio scale,
  ``log phi_ijk = z_ijk' alpha``, where phi_ijk is the marginal odds ratio of
  the pair (Y_ij, Y_ik).

Given the two margins and the odds ratio, the joint success probability
``nu_ijk = P(Y_ij = 1, Y_ik = 1)`` solves the quadratic

    (phi - 1) nu^2 - a nu + phi mu_j mu_k = 0,
    a = 1 + (phi - 1)(mu_j + mu_k),

whose feasible root lies strictly inside the Frechet bracket
``(max(0, mu_j + mu_k - 1), min(mu_j, mu_k))``. The conditional expectation of
one pair member given the other,

    zeta_jk = E[Y_ij | Y_ik = y_ik]
            = expit( y_ik z' alpha + log(mu_j - nu) - log(1 - mu_j - mu_k + nu) ),

drives the association estimating equation: regressing y_ij on y_ik with the
log term as a fixed offset.

All heavy computation happens in :func:`group_moments`, which evaluates every
moment for a stack of equal-size clusters in one batch of array operations.
The per-cluster :func:`compute_moments` is a one-row slice of the same kernel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .data import ClusterData, Params, SizeGroup, pair_indices
from .errors import LinearAlgebraError, NumericalDomainError

PROB_FLOOR = 1e-12
LINPRED_MAX = 700.0
COND_ERROR = 1e12
COND_WARN = 1e8
# Eigenvalues of the working *correlation* matrix below this floor are lifted
# to it (PSD repair; see _repair_and_check).
R_EIG_FLOOR = 0.1
_OR_INDEPENDENT_TOL = 1e-10
_OR_VERIFY_TOL = 1e-8


def _clamp_prob(p):
    """Clamp probabilities into [PROB_FLOOR, 1 - PROB_FLOOR]; return count of changes."""
    lo = p < PROB_FLOOR
    hi = p > 1.0 - PROB_FLOOR
    n = int(np.count_nonzero(lo)) + int(np.count_nonzero(hi))
    if n:
        p = np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)
    return p, n


def marginal_mean(x, beta):
    """mu = expit(x @ beta) for a design matrix or stack of design matrices."""
    return expit(np.asarray(x) @ np.asarray(beta, dtype=float))


def pairwise_odds_ratio(z, alpha):
    """phi = exp(z @ alpha), with the linear predictor capped at +-700."""
    lp = np.clip(np.asarray(z) @ np.asarray(alpha, dtype=float), -LINPRED_MAX, LINPRED_MAX)
    return np.exp(lp)


def _pair_prob_bisect(mu_j, mu_k, phi):
    """Bisection for nu on its Frechet bracket. Vectorized over flat arrays.

    The defining function g(nu) = nu (1 - mu_j - mu_k + nu) - phi (mu_j - nu)(mu_k - nu)
    is strictly increasing on the open bracket with g < 0 at the lower end and
    g > 0 at the upper end, so plain bisection cannot fail.
    """
    lo = np.maximum(0.0, mu_j + mu_k - 1.0)
    hi = np.minimum(mu_j, mu_k)
    # Stop once the bracket is a few ulps wide; a threshold below one ulp of
    # the endpoints would never be met and the loop would spin to exhaustion.
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        g = mid * (1.0 - mu_j - mu_k + mid) - phi * (mu_j - mid) * (mu_k - mid)
        neg = g < 0
        lo = np.where(neg, mid, lo)
        hi = np.where(neg, hi, mid)
        if np.all(hi - lo <= 1e-15 * np.maximum(hi, 1e-3)):
            break
    return 0.5 * (lo + hi)


def solve_pair_prob(mu_j, mu_k, phi):
    """Joint success probability nu from margins (mu_j, mu_k) and odds ratio phi.

    Accepts scalars or broadcastable arrays. Uses the conjugate form of the
    quadratic root, nu = 2 phi mu_j mu_k / (a + sqrt(a^2 - 4 phi (phi-1) mu_j mu_k)),
    which is stable as phi -> 1 and selects the feasible root for every phi > 0.
    The root is verified against the Frechet bracket and by reconstructing the
    odds ratio; any entry failing verification by more than 1e-8 is recomputed
    with safeguarded bisection.
    """
    mu_j, mu_k, phi = np.broadcast_arrays(
        np.asarray(mu_j, dtype=float), np.asarray(mu_k, dtype=float), np.asarray(phi, dtype=float)
    )
    scalar = mu_j.ndim == 0
    mu_j = np.atleast_1d(mu_j).astype(float)
    mu_k = np.atleast_1d(mu_k).astype(float)
    phi = np.atleast_1d(phi).astype(float)

    bad = (
        ~np.isfinite(mu_j) | ~np.isfinite(mu_k) | ~np.isfinite(phi)
        | (mu_j <= 0) | (mu_j >= 1) | (mu_k <= 0) | (mu_k >= 1) | (phi <= 0)
    )
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise NumericalDomainError(
            "model.solve_pair_prob: inputs outside domain "
            f"(mu_j={mu_j.flat[i]!r}, mu_k={mu_k.flat[i]!r}, phi={phi.flat[i]!r}); "
            "need 0 < mu < 1 and phi > 0"
        )

    prod = mu_j * mu_k
    independent = np.abs(phi - 1.0) <= _OR_INDEPENDENT_TOL
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        a = 1.0 + (phi - 1.0) * (mu_j + mu_k)
        disc = a * a - 4.0 * phi * (phi - 1.0) * prod
        sq = np.sqrt(np.clip(disc, 0.0, None))
        # The conjugate form is stable when a >= 0; for a < 0 (possible only
        # when phi < 1) its denominator a + sq cancels catastrophically, and
        # the direct root (a - sq) / (2 (phi - 1)) is the stable arrangement.
        conj_den = np.where(a + sq != 0.0, a + sq, 1.0)
        direct_den = np.where(independent, 1.0, 2.0 * (phi - 1.0))
        root = np.where(a >= 0.0, 2.0 * phi * prod / conj_den, (a - sq) / direct_den)
    nu = np.where(independent, prod, root)

    lo = np.maximum(0.0, mu_j + mu_k - 1.0)
    hi = np.minimum(mu_j, mu_k)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        phi_rec = nu * (1.0 - mu_j - mu_k + nu) / ((mu_j - nu) * (mu_k - nu))
    ok = (
        np.isfinite(nu)
        & (nu > lo)
        & (nu < hi)
        & (np.abs(phi_rec - phi) <= _OR_VERIFY_TOL * np.maximum(1.0, phi))
    )
    ok |= independent
    if not ok.all():
        sel = ~ok
        nu[sel] = _pair_prob_bisect(mu_j[sel], mu_k[sel], phi[sel])
        still = (nu[sel] < lo[sel]) | (nu[sel] > hi[sel]) | ~np.isfinite(nu[sel])
        if still.any():
            i = int(np.flatnonzero(sel)[np.flatnonzero(still)[0]])
            raise NumericalDomainError(
                "model.solve_pair_prob: no feasible joint probability for "
                f"(mu_j={mu_j.flat[i]}, mu_k={mu_k.flat[i]}, phi={phi.flat[i]})"
            )
    return float(nu[0]) if scalar else nu.reshape(np.broadcast_shapes(mu_j.shape))


def conditional_mean_zeta(mu_j, mu_k, nu, lin_pred, y_k):
    """zeta = E[Y_j | Y_k = y_k] = expit(y_k * lin_pred + offset) with
    offset = log(mu_j - nu) - log(1 - mu_j - mu_k + nu).

    ``lin_pred`` is the association linear predictor z' alpha. Identities used
    by the tests: zeta(y_k=1) = nu / mu_k and zeta(y_k=0) = (mu_j - nu) / (1 - mu_k).
    """
    mu_j = np.asarray(mu_j, dtype=float)
    mu_k = np.asarray(mu_k, dtype=float)
    nu = np.asarray(nu, dtype=float)
    with np.errstate(divide="ignore"):
        offset = np.log(np.maximum(mu_j - nu, 1e-300)) - np.log(
            np.maximum(1.0 - mu_j - mu_k + nu, 1e-300)
        )
    return expit(np.asarray(y_k, dtype=float) * np.asarray(lin_pred, dtype=float) + offset)


@dataclass
class MomentBundle:
    """First and second moments for one cluster at given parameters.

    Shapes: mu, var, resid (n_i,); b (n_i, n_i); c (n_i, p); phi, nu, zeta,
    s_var, r_resid (m_i,); t (m_i, q).
    """

    mu: np.ndarray
    var: np.ndarray
    resid: np.ndarray       # A_i = y - mu
    b: np.ndarray           # working covariance of Y_i
    c: np.ndarray           # d mu / d beta'
    phi: np.ndarray
    nu: np.ndarray
    zeta: np.ndarray
    s_var: np.ndarray       # diag of S_i = zeta (1 - zeta)
    r_resid: np.ndarray     # R_i = y_j - zeta
    t: np.ndarray           # d zeta / d alpha' with the offset held fixed
    clamp_events: int
    b_repairs: int = 0


@dataclass
class GroupMoments:
    """Batched :class:`MomentBundle` for one size group (leading axis = cluster)."""

    group: SizeGroup
    mu: np.ndarray          # (g, s)
    var: np.ndarray         # (g, s)
    resid: np.ndarray       # (g, s)
    b: np.ndarray           # (g, s, s)
    c: np.ndarray           # (g, s, p)
    phi: np.ndarray         # (g, m)
    nu: np.ndarray          # (g, m)
    zeta: np.ndarray        # (g, m)
    s_var: np.ndarray       # (g, m)
    r_resid: np.ndarray     # (g, m)
    t: np.ndarray           # (g, m, q)
    clamp_events: int
    cond_warnings: int
    b_repairs: int = 0


def _mean_parts(group: SizeGroup, beta):
    """Clamped means and the per-unit variance for one size group."""
    mu = expit(group.x @ beta)
    mu, n_clamp = _clamp_prob(mu)
    var = mu * (1.0 - mu)
    return mu, var, n_clamp


def _pair_parts(group: SizeGroup, mu, alpha):
    """Pairwise odds ratios, joint probabilities, and conditional means.

    Returns (mu1, mu2, phi, nu, zeta, n_clamp) where mu1/mu2 are the margins of
    the lexicographic pairs and zeta conditions each pair's first member on the
    observed value of its second member.
    """
    pairs = group.pairs
    mu1 = mu[:, pairs[:, 0]]
    mu2 = mu[:, pairs[:, 1]]
    lp = np.clip(group.z @ alpha, -LINPRED_MAX, LINPRED_MAX)
    phi = np.exp(lp)
    if phi.size:
        nu = solve_pair_prob(mu1, mu2, phi)
    else:
        nu = np.zeros_like(phi)
    y_k = group.y[:, pairs[:, 1]]
    zeta = conditional_mean_zeta(mu1, mu2, nu, lp, y_k)
    zeta, n_clamp = _clamp_prob(zeta)
    return mu1, mu2, phi, nu, zeta, n_clamp


def zeta_from_params(group: SizeGroup, beta, alpha):
    """Conditional means zeta for a size group with full parameter flow.

    Recomputes mu, phi, and nu from (beta, alpha); used by the finite-difference
    Jacobians, which must see zeta's dependence on the parameters through nu.
    """
    mu, _, _ = _mean_parts(group, beta)
    _, _, _, _, zeta, _ = _pair_parts(group, mu, alpha)
    return zeta


def _repair_and_check(b, group: SizeGroup):
    """Project indefinite working covariances onto the PSD cone, then screen.

    The per-pair joint probabilities are each Frechet-feasible, but nothing
    forces them to be *jointly* realizable, so away from a fitted point the
    assembled matrix nu - mu mu' can be indefinite or near-singular on the
    correlation scale, and a single such cluster makes the mean scoring
    iteration violently divergent.  Eigenvalues of the working correlation
    R = D^{-1/2} B D^{-1/2} below R_EIG_FLOOR are lifted to that floor and B
    is rebuilt, which bounds ||R^{-1}|| while preserving the (legitimate)
    variance heterogeneity on the diagonal.  The working matrix acts purely
    as a weight, so the estimating functions remain unbiased; at any valid
    parameter point R is the correlation of an actual binary vector with
    smallest eigenvalue well above the floor, making the repair inert there.
    Returns (b, condition_warnings, n_repaired); matrices are screened after
    repair and raise above COND_ERROR.
    """
    if group.size == 1:
        bad = b[:, 0, 0] <= 0
        if bad.any():
            raise LinearAlgebraError(
                "model.group_moments: nonpositive working variance for cluster "
                f"{group.ids[int(np.flatnonzero(bad)[0])]!r}"
            )
        return b, 0, 0
    var = np.einsum("gii->gi", b)
    scale = np.sqrt(var)
    r = b / (scale[:, :, None] * scale[:, None, :])
    vals = np.linalg.eigvalsh(r)
    need = vals[:, 0] < R_EIG_FLOOR
    n_repair = int(np.count_nonzero(need))
    if n_repair:
        vals_n, vecs_n = np.linalg.eigh(r[need])
        clipped = np.maximum(vals_n, R_EIG_FLOOR)
        r_fixed = (vecs_n * clipped[:, None, :]) @ np.swapaxes(vecs_n, 1, 2)
        b = b.copy()
        b[need] = r_fixed * (scale[need, :, None] * scale[need, None, :])
        vals = vals.copy()
        vals[need] = clipped
    # Condition screened through cond(B) <= cond(diag var) * cond(R); exact
    # eigenvalues are recomputed only if the cheap bound crosses the error
    # threshold, which the R floor makes essentially unreachable.
    cond_bound = (var.max(axis=1) / var.min(axis=1)) * (vals[:, -1] / vals[:, 0])
    bad = cond_bound > COND_ERROR
    if bad.any():
        eig = np.abs(np.linalg.eigvalsh(b[bad]))
        cond = eig.max(axis=1) / np.maximum(eig.min(axis=1), 1e-300)
        worst = int(np.argmax(cond))
        if cond[worst] > COND_ERROR:
            i = int(np.flatnonzero(bad)[worst])
            raise LinearAlgebraError(
                "model.group_moments: working covariance of cluster "
                f"{group.ids[i]!r} is singular or ill-conditioned "
                f"(condition number {cond[worst]:.3e})"
            )
    return b, int(np.count_nonzero(cond_bound > COND_WARN)), n_repair


def group_moments(group: SizeGroup, params: Params, check_condition: bool = True) -> GroupMoments:
    """Evaluate all model moments for one size group in a single batch."""
    beta, alpha = params.beta, params.alpha
    mu, var, clamp_mu = _mean_parts(group, beta)
    resid = group.y - mu
    c = var[:, :, None] * group.x

    g, s = mu.shape
    b = np.zeros((g, s, s))
    diag = np.arange(s)
    b[:, diag, diag] = var
    pairs = group.pairs
    mu1, mu2, phi, nu, zeta, clamp_zeta = _pair_parts(group, mu, alpha)
    if pairs.shape[0]:
        cov = nu - mu1 * mu2
        b[:, pairs[:, 0], pairs[:, 1]] = cov
        b[:, pairs[:, 1], pairs[:, 0]] = cov

    if check_condition:
        b, cond_warnings, b_repairs = _repair_and_check(b, group)
    else:
        cond_warnings = b_repairs = 0

    s_var = zeta * (1.0 - zeta)
    y_k = group.y[:, pairs[:, 1]] if pairs.shape[0] else np.zeros((g, 0))
    y_j = group.y[:, pairs[:, 0]] if pairs.shape[0] else np.zeros((g, 0))
    # T holds the conditional-mean offset fixed: the derivative flows only
    # through the explicit (z'alpha) y_k term, so pairs whose conditioning
    # value y_k is zero contribute nothing to the association score.  The
    # variant that also differentiates through nu yields a tighter estimator
    # but a different one; the rest of the pipeline (weights, criterion
    # landscapes, reference study behaviour) is calibrated against this form.
    t = (s_var * y_k)[:, :, None] * group.z
    r_resid = y_j - zeta

    return GroupMoments(
        group=group,
        mu=mu,
        var=var,
        resid=resid,
        b=b,
        c=c,
        phi=phi,
        nu=nu,
        zeta=zeta,
        s_var=s_var,
        r_resid=r_resid,
        t=t,
        clamp_events=clamp_mu + clamp_zeta,
        cond_warnings=cond_warnings,
        b_repairs=b_repairs,
    )


def compute_moments(cluster: ClusterData, params: Params) -> MomentBundle:
    """Per-cluster moments (a one-row slice of the batched kernel)."""
    group = SizeGroup(
        size=cluster.size,
        indices=np.array([0], dtype=np.intp),
        ids=(cluster.cluster_id,),
        y=cluster.y[None, :],
        x=cluster.x[None, :, :],
        z=cluster.z[None, :, :],
        pairs=pair_indices(cluster.size),
    )
    gm = group_moments(group, params)
    return MomentBundle(
        mu=gm.mu[0],
        var=gm.var[0],
        resid=gm.resid[0],
        b=gm.b[0],
        c=gm.c[0],
        phi=gm.phi[0],
        nu=gm.nu[0],
        zeta=gm.zeta[0],
        s_var=gm.s_var[0],
        r_resid=gm.r_resid[0],
        t=gm.t[0],
        clamp_events=gm.clamp_events,
        b_repairs=gm.b_repairs,
    )
