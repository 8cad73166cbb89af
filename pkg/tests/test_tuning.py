"""Criterion computation, grid search, sandwich covariance."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import make_dataset
from hpgee2.alr import fit_alr
from hpgee2.data import Params
from hpgee2.errors import Hpgee2Error
from hpgee2.penalty import PenaltyConfig, lqa_weight
from hpgee2.scores import hessian_blocks, score_pair
from hpgee2.solver import AnalysisMode, fit_hpgee2
from hpgee2.tuning import (
    bic_assoc,
    bic_for_mode,
    bic_joint,
    bic_mean,
    grid_search,
    log_grid,
    sandwich_covariance,
)


@pytest.fixture(scope="module")
def ds():
    return make_dataset(seed=13, n=70, size=4)


@pytest.fixture(scope="module")
def base(ds):
    return fit_alr(ds)


def quadratic_oracle(per_cluster):
    g = per_cluster.sum(axis=0)
    m = per_cluster.T @ per_cluster
    return float(g @ np.linalg.solve(m, g))


class TestCriteria:
    def test_mean_criterion_recomputed(self, ds, base):
        fit = fit_hpgee2(ds, mode=AnalysisMode.MEAN_ONLY,
                         cfg_mean=PenaltyConfig("scad", 0.1), init=base)
        # the mean criterion scores U_beta at (beta_hat, alpha_unpenalized)
        sp = score_pair(ds, Params(fit.beta, fit.alpha_init))
        want = quadratic_oracle(sp.per_cluster_beta) + np.log(ds.n_clusters) * np.count_nonzero(fit.beta)
        assert_allclose(bic_mean(ds, fit), want, rtol=1e-10)
        assert bic_for_mode(ds, fit) == bic_mean(ds, fit)

    def test_assoc_criterion_recomputed(self, ds, base):
        fit = fit_hpgee2(ds, mode=AnalysisMode.ASSOC_ONLY,
                         cfg_assoc=PenaltyConfig("scad", 0.1), init=base)
        sp = score_pair(ds, Params(fit.beta_init, fit.alpha))
        want = quadratic_oracle(sp.per_cluster_alpha) + np.log(ds.n_clusters) * np.count_nonzero(fit.alpha)
        assert_allclose(bic_assoc(ds, fit), want, rtol=1e-10)

    def test_joint_criterion_is_sum_of_blocks(self, ds, base):
        fit = fit_hpgee2(ds, mode=AnalysisMode.JOINT,
                         cfg_mean=PenaltyConfig("scad", 0.1),
                         cfg_assoc=PenaltyConfig("scad", 0.1), init=base)
        sp_m = score_pair(ds, Params(fit.beta, fit.alpha_init))
        sp_a = score_pair(ds, Params(fit.beta, fit.alpha))
        want = (
            quadratic_oracle(sp_m.per_cluster_beta)
            + quadratic_oracle(sp_a.per_cluster_alpha)
            + np.log(ds.n_clusters)
            * (np.count_nonzero(fit.beta) + np.count_nonzero(fit.alpha))
        )
        assert_allclose(bic_joint(ds, fit), want, rtol=1e-10)


def test_log_grid_validation():
    g = log_grid(1e-3, 1.0, 30)
    assert g.size == 30
    assert g[0] == pytest.approx(1e-3) and g[-1] == pytest.approx(1.0)
    for bad in [(0.0, 1.0, 10), (0.5, 0.1, 10), (0.1, 1.0, 0)]:
        with pytest.raises(Hpgee2Error, match="grid"):
            log_grid(*bad)


class TestGridSearch:
    def test_path_and_choice(self, ds, base):
        grid = np.geomspace(0.01, 0.5, 6)
        report = grid_search(ds, mode=AnalysisMode.MEAN_ONLY, kind="scad",
                             grid=grid, init=base)
        assert report.bic_values.shape == (6,)
        assert len(report.path) == 6
        assert report.n_failures == 0
        chosen = np.flatnonzero(report.grid == report.chosen_lambda)[0]
        assert report.bic_values[chosen] == np.nanmin(report.bic_values)
        assert report.chosen_fit.bic == report.bic_values[chosen]

    def test_ties_resolve_to_larger_lambda(self, ds, base):
        """Two lambdas large enough to zero every penalized coordinate yield
        the same fit, the same criterion, and the tie must go up."""
        grid = np.array([3.0, 5.0])
        report = grid_search(ds, mode=AnalysisMode.MEAN_ONLY, kind="lasso",
                             grid=grid, init=base)
        assert report.bic_values[0] == report.bic_values[1]
        assert report.chosen_lambda == 5.0

    def test_bad_grid(self, ds):
        with pytest.raises(Hpgee2Error, match="grid"):
            grid_search(ds, grid=np.array([0.1, -0.2]))
        with pytest.raises(Hpgee2Error, match="grid"):
            grid_search(ds, grid=np.empty(0))

    def test_stage_cap_passthrough(self, ds, base):
        report = grid_search(ds, mode=AnalysisMode.MEAN_ONLY, kind="scad",
                             grid=np.array([0.1]), init=base, stage_max_outer=1)
        assert report.chosen_fit.stage_mean.outer_iterations == 1


class TestSandwich:
    def test_unpenalized_matches_hand_assembly(self, ds, base):
        """For an unpenalized joint fit the covariance must equal the plain
        bread-meat-bread product built from the derivative blocks."""
        fit = fit_hpgee2(ds, init=base)
        sc = sandwich_covariance(ds, fit)
        blocks = hessian_blocks(ds, Params(fit.beta, fit.alpha), assoc_jacobian="full")
        sp = score_pair(ds, Params(fit.beta, fit.alpha))
        p, q = ds.p, ds.q
        bread_inv = np.zeros((p + q, p + q))
        bread_inv[:p, :p] = blocks.h_bb
        bread_inv[p:, :p] = blocks.h_ab
        bread_inv[p:, p:] = blocks.h_aa
        stacked = np.hstack([sp.per_cluster_beta, sp.per_cluster_alpha])
        bread = np.linalg.inv(bread_inv)
        want = bread @ (stacked.T @ stacked) @ bread.T
        assert_allclose(sc.matrix, want, rtol=1e-8)
        assert_allclose(sc.se_beta, np.sqrt(np.diag(want)[:p]), rtol=1e-8)

    def test_se_nan_off_active_set(self, ds, base):
        fit = fit_hpgee2(
            ds,
            mode=AnalysisMode.JOINT,
            cfg_mean=PenaltyConfig("lasso", 5.0),
            cfg_assoc=PenaltyConfig("lasso", 5.0),
            init=base,
        )
        sc = sandwich_covariance(ds, fit)
        active_b = fit.beta != 0
        assert np.isnan(sc.se_beta[~active_b]).all()
        assert np.isfinite(sc.se_beta[active_b]).all()
        assert sc.matrix.shape[0] == fit.active_beta.size + fit.active_alpha.size

    def test_penalized_matches_hand_assembly(self, ds, base):
        """For a penalized fit the bread must carry n * p'(|theta|)/|theta| on
        the penalized active diagonal; everything else matches the plain
        assembly at the fitted point."""
        fit = fit_hpgee2(
            ds,
            mode=AnalysisMode.MEAN_ONLY,
            cfg_mean=PenaltyConfig("lasso", 0.05, exclude=frozenset()),
            init=base,
        )
        s_idx, v_idx = fit.active_beta, fit.active_alpha
        assert s_idx.size > 0
        blocks = hessian_blocks(ds, Params(fit.beta, fit.alpha), assoc_jacobian="full")
        sp = score_pair(ds, Params(fit.beta, fit.alpha))
        ns = s_idx.size
        dim = ns + v_idx.size
        n = ds.n_clusters
        bread_inv = np.zeros((dim, dim))
        bread_inv[:ns, :ns] = blocks.h_bb[np.ix_(s_idx, s_idx)] + np.diag(
            [n * lqa_weight(fit.beta[l], fit.cfg_mean) for l in s_idx]
        )
        bread_inv[ns:, :ns] = blocks.h_ab[np.ix_(v_idx, s_idx)]
        bread_inv[ns:, ns:] = blocks.h_aa[np.ix_(v_idx, v_idx)]
        stacked = np.hstack(
            [sp.per_cluster_beta[:, s_idx], sp.per_cluster_alpha[:, v_idx]]
        )
        bread = np.linalg.inv(bread_inv)
        want = bread @ (stacked.T @ stacked) @ bread.T
        sc = sandwich_covariance(ds, fit)
        assert_allclose(sc.matrix, want, rtol=1e-8)
