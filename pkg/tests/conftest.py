"""Shared helpers: small simulated datasets sized for fast unit tests."""

import numpy as np

from hpgee2.simulate import CovariateLaw, StudyConfig, simulate_dataset


def make_config(n=30, size=4, scale=1.0, seed_blocks=(2, 2, 2, 2), **kw):
    """A small study design: p = q = 5 by default, moderate coefficients.

    ``scale`` multiplies both coefficient vectors, so tests can dial the
    signal strength down for configurations that would otherwise separate.
    """
    bx, bz, bw, bv = seed_blocks
    beta = np.zeros(1 + bx + bz)
    beta[0], beta[1], beta[1 + bx] = -0.3, 0.8, -0.6
    alpha = np.zeros(1 + bw + bv)
    alpha[0], alpha[1] = 0.5, 0.4
    return StudyConfig(
        n_clusters=n,
        cluster_size=size,
        beta_true=scale * beta,
        alpha_true=scale * alpha,
        x_law=CovariateLaw(bx),
        z_law=CovariateLaw(bz),
        w_law=CovariateLaw(bw),
        v_law=CovariateLaw(bv),
        **kw,
    )


def make_dataset(seed=0, **kw):
    dataset, _, _ = simulate_dataset(make_config(**kw), seed)
    return dataset
