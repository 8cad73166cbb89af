"""Unpenalized alternating fit: root finding, determinism, failure modes."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import make_dataset
from hpgee2.alr import fit_alr, mean_fisher_step, assoc_offset_step
from hpgee2.data import ClusterData, Dataset, Params
from hpgee2.errors import StructuralError
from hpgee2.scores import score_pair


@pytest.fixture(scope="module")
def fitted():
    ds = make_dataset(seed=17, n=120, size=4)
    return ds, fit_alr(ds, tol=1e-8)


def test_converges_to_a_joint_root(fitted):
    """At the solution both estimating functions vanish (relative to the
    Fisher-step scale, which is what the stopping rule controls)."""
    ds, res = fitted
    assert res.diagnostics.converged
    assert res.diagnostics.final_update_norm <= 1e-8
    step_b = mean_fisher_step(ds, res.params) - res.beta
    step_a = assoc_offset_step(ds, res.params) - res.alpha
    assert np.max(np.abs(step_b)) < 1e-6
    assert np.max(np.abs(step_a)) < 1e-6
    sp = score_pair(ds, res.params)
    # raw scores are O(n) objects; the solved steps above are the scale-free check
    assert np.max(np.abs(sp.u_beta)) < 1e-3
    assert np.max(np.abs(sp.u_alpha)) < 1e-3


def test_deterministic(fitted):
    ds, res = fitted
    again = fit_alr(ds, tol=1e-8)
    assert_allclose(res.beta, again.beta, rtol=0, atol=0)
    assert_allclose(res.alpha, again.alpha, rtol=0, atol=0)


def test_warm_start_converges_immediately(fitted):
    ds, res = fitted
    warm = fit_alr(ds, init=Params(res.beta, res.alpha), tol=1e-6)
    assert warm.diagnostics.converged
    assert warm.diagnostics.outer_iterations <= 2
    assert_allclose(warm.beta, res.beta, atol=1e-6)


def test_estimates_are_sane(fitted):
    """Loose recovery check on a moderate sample: estimates land within half a
    unit of the generating values for the strong coordinates."""
    ds, res = fitted
    assert abs(res.beta[1] - 0.8) < 0.5
    assert abs(res.beta[3] + 0.6) < 0.5
    assert abs(res.alpha[0] - 0.5) < 0.8


def test_no_pairs_raises():
    clusters = [
        ClusterData(str(i), np.array([float(i % 2)]), np.ones((1, 2)), np.empty((0, 2)))
        for i in range(10)
    ]
    with pytest.raises(StructuralError, match="no within-cluster pairs"):
        fit_alr(Dataset(clusters))


def test_mean_only_when_q_zero():
    """Zero association columns: the fit reduces to a mean-model GEE without
    touching the association loop."""
    base = make_dataset(seed=4, n=40, size=3)
    clusters = [
        ClusterData(c.cluster_id, c.y, c.x, np.empty((c.z.shape[0], 0)))
        for c in base.clusters
    ]
    ds = Dataset(clusters)
    res = fit_alr(ds)
    assert res.diagnostics.converged
    assert res.alpha.shape == (0,)
    assert np.isfinite(res.beta).all()


def test_separated_data_is_flagged():
    """y perfectly determined by a covariate: no finite root exists. The fit
    must stop at the coefficient cap and say so rather than spin or raise."""
    rng = np.random.default_rng(0)
    clusters = []
    for i in range(40):
        x1 = rng.standard_normal()
        y = float(x1 > 0.0)
        clusters.append(
            ClusterData(
                str(i),
                np.array([y, y]),
                np.array([[1.0, x1], [1.0, x1]]),
                np.ones((1, 1)),
            )
        )
    res = fit_alr(Dataset(clusters), max_outer=60)
    assert not res.diagnostics.converged
    assert res.diagnostics.separated
