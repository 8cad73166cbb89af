"""Penalty functions for the two-stage selection solver.

Supports the SCAD penalty and the LASSO, plus a ``none`` kind so unpenalized
fits flow through the same code path. The solver only ever needs three
ingredients per coordinate:

* the penalty derivative ``p'_lambda(theta)`` at the current iterate (used to
  freeze one-step thresholds),
* the scalar soft-threshold operator, and
* the local-quadratic-approximation weight ``p'_lambda(|theta|)/|theta|`` used
  by the sandwich variance.

The SCAD derivative, for ``theta >= 0`` and ``a > 2``:

    p'_lambda(theta) = lambda                          if theta <= lambda
                     = (a*lambda - theta)_+ / (a - 1)  if theta >  lambda

which is continuous, decays linearly on ``(lambda, a*lambda]``, and vanishes
beyond ``a*lambda`` so large coefficients are left unshrunk.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

VALID_KINDS = ("none", "lasso", "scad")


@dataclass(frozen=True)
class PenaltyConfig:
    """Penalty specification for one stage of the solver.

    Parameters
    ----------
    kind : {"none", "lasso", "scad"}
    lam : float
        Tuning parameter lambda, >= 0. Ignored for kind "none".
    a : float
        SCAD shape parameter, > 2. Defaults to 3.7.
    exclude : frozenset[int]
        Coordinate indices never penalized. Defaults to {0}, the intercept
        slot of the design matrices this package builds.
    """

    kind: str = "none"
    lam: float = 0.0
    a: float = 3.7
    exclude: frozenset = field(default_factory=lambda: frozenset({0}))

    def __post_init__(self):
        if self.kind not in VALID_KINDS:
            raise ConfigError(
                f"penalty: unknown kind {self.kind!r}; expected one of {VALID_KINDS}"
            )
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ConfigError(f"penalty: lambda must be finite and >= 0, got {self.lam}")
        if self.kind == "scad" and self.a <= 2:
            raise ConfigError(f"penalty: SCAD parameter a must be > 2, got {self.a}")
        object.__setattr__(self, "exclude", frozenset(self.exclude))


def penalty_derivative(theta, cfg: PenaltyConfig):
    """Evaluate p'_lambda(|theta|) elementwise.

    Returns an array of the same shape as ``theta``. The derivative is taken
    at the magnitude, so the result is always >= 0; at theta = 0 it returns
    the right limit p'_lambda(0+) = lambda (for lasso and scad), which keeps
    zeroed coordinates eligible to re-enter.
    """
    t = np.abs(np.asarray(theta, dtype=float))
    if cfg.kind == "none":
        return np.zeros_like(t)
    if cfg.kind == "lasso":
        return np.full_like(t, cfg.lam)
    lam, a = cfg.lam, cfg.a
    inner = t <= lam
    tail = np.clip(a * lam - t, 0.0, None) / (a - 1.0)
    return np.where(inner, lam, tail)


def penalty_value(theta, cfg: PenaltyConfig):
    """Evaluate p_lambda(|theta|) elementwise (used for objective traces).

    SCAD value, theta >= 0:
        lambda*theta                                      theta <= lambda
        (2*a*lambda*theta - theta^2 - lambda^2)/(2(a-1))  lambda < theta <= a*lambda
        lambda^2 (a+1)/2                                  theta > a*lambda
    """
    t = np.abs(np.asarray(theta, dtype=float))
    if cfg.kind == "none":
        return np.zeros_like(t)
    if cfg.kind == "lasso":
        return cfg.lam * t
    lam, a = cfg.lam, cfg.a
    mid = (2 * a * lam * t - t**2 - lam**2) / (2 * (a - 1.0))
    out = np.where(t <= lam, lam * t, np.where(t <= a * lam, mid, lam**2 * (a + 1) / 2))
    return out


def soft_threshold(z, t):
    """Scalar/elementwise soft threshold S(z, t) = sign(z) (|z| - t)_+.

    Ties (|z| == t) and sub-threshold values map to an exact +0.0.
    """
    z = np.asarray(z, dtype=float)
    t = np.asarray(t, dtype=float)
    mag = np.abs(z) - t
    return np.where(mag > 0, np.sign(z) * mag, 0.0)


def lqa_weight(theta, cfg: PenaltyConfig, eps: float = 1e-8):
    """Local quadratic approximation weight p'_lambda(|theta|) / |theta|.

    Only meaningful on active (nonzero) coordinates; ``eps`` floors the
    magnitude to keep the ratio finite if a caller passes a value that is
    numerically zero but formally active.
    """
    t = np.abs(np.asarray(theta, dtype=float))
    return penalty_derivative(t, cfg) / np.maximum(t, eps)


def effective_thresholds(theta, cfg: PenaltyConfig, n_clusters: int):
    """Per-coordinate CD thresholds n * p'_lambda(|theta_l|), 0 on excluded slots."""
    lam_eff = n_clusters * penalty_derivative(theta, cfg)
    if cfg.exclude:
        idx = [i for i in cfg.exclude if i < lam_eff.shape[0]]
        lam_eff[idx] = 0.0
    return lam_eff
