"""Gamma moment matching and closed-form approximate SINR distributions.

Every SINR of interest is a ratio of (weighted sums of) Gamma variables.
Sums are collapsed into single Gamma variables by matching the first two
moments; each ratio then admits the closed CDF

    F(x) = 1 - exp(-x / s) * (1 + w x)^(-D)

for an exponential-equivalent numerator of mean s and a shape-D denominator.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .model import LinkBudget, PowerAllocation, SystemConfig


@dataclass(frozen=True)
class GammaParams:
    """Shape/scale pair; both strictly positive and finite."""

    shape: float
    scale: float

    def __post_init__(self):
        if not (self.shape > 0 and math.isfinite(self.shape)):
            raise ValueError(f"shape must be positive and finite, got {self.shape}")
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")

    @property
    def mean(self) -> float:
        return self.shape * self.scale

    @property
    def variance(self) -> float:
        return self.shape * self.scale ** 2


def moment_match_sum(components: Sequence[Tuple[float, GammaParams]]) -> GammaParams:
    """Single Gamma with the first two moments of sum_i w_i X_i, X_i ~ Gamma.

    Weights fold into the scales; the output mean and variance equal those
    of the weighted sum exactly.
    """
    if len(components) == 0:
        raise ValueError("need at least one (weight, GammaParams) component")
    m1 = 0.0  # sum D theta
    m2 = 0.0  # sum D theta^2
    for weight, params in components:
        if weight <= 0:
            raise ValueError(f"weights must be positive, got {weight}")
        scale = weight * params.scale
        m1 += params.shape * scale
        m2 += params.shape * scale * scale
    return GammaParams(shape=m1 * m1 / m2, scale=m2 / m1)


# ---------------------------------------------------------------------------
# derived statistics for the rate-splitting SINRs
# ---------------------------------------------------------------------------

@dataclass
class DerivedStats:
    """Moment-matched Gamma parameters for the three SINR building blocks.

    d1/t1:   own-beam gain |h_k^H p_k|^2 (identical for every user)
    d2/t2:   per-user total private-power interference seen by the common stream
    d3/t3:   per-user residual cross interference seen by the private stream
             (None when K == 1: a single user has no interferers)
    private_degenerate marks users whose private stream carries zero power;
    their d3/t3 entries are NaN sentinels and the private BLER downstream is 1.
    """

    d1: float
    t1: float
    d2: np.ndarray
    t2: np.ndarray
    d3: Optional[np.ndarray]
    t3: Optional[np.ndarray]
    private_degenerate: np.ndarray

    @property
    def own_gain_mean(self) -> float:
        """Mean of the own-beam gain, (Nt-K+1) rho^2 + 1 - rho^2."""
        return self.d1 * self.t1


def gamma_approx_params(cfg: SystemConfig, budget: LinkBudget,
                        alloc: PowerAllocation) -> DerivedStats:
    """Closed-form moment-matched parameters for a given power allocation."""
    alloc.validate()
    nt, k = cfg.n_antennas, cfg.n_users
    if nt < k:
        raise ValueError(f"need Nt >= K, got Nt={nt}, K={k}")
    rho = budget.rho
    r2 = rho * rho
    r4 = r2 * r2
    dof = nt - k + 1
    alpha = np.asarray(alloc.alpha, dtype=float)
    alpha_c = float(alloc.alpha_c)

    num1 = dof * r2 + 1.0 - r2
    den1 = dof * r4 + (1.0 - r2) ** 2
    d1 = num1 * num1 / den1
    t1 = den1 / num1

    sum_sq = float(np.sum(alpha ** 2))
    num2 = dof * r2 * alpha + (1.0 - r2) * (1.0 - alpha_c)
    den2 = dof * r4 * alpha ** 2 + (1.0 - r2) ** 2 * sum_sq
    # total private power zero (all-common allocation): the common stream sees
    # no interference and the factor (1 + t2 x / alpha_c)^d2 must reduce to 1
    d2 = np.where(num2 > 0, np.divide(num2 ** 2, den2,
                                      out=np.ones_like(num2), where=den2 > 0), 1.0)
    t2 = np.where(num2 > 0, np.divide(den2, num2,
                                      out=np.zeros_like(num2), where=num2 > 0), 0.0)

    degenerate = alpha <= 0.0
    if k == 1:
        d3 = t3 = None
    else:
        others = 1.0 - alpha_c - alpha          # sum of the other users' power
        others_sq = sum_sq - alpha ** 2
        with np.errstate(divide="ignore", invalid="ignore"):
            d3 = np.where(others_sq > 0, others ** 2 / others_sq, 0.0)
            t3 = np.where(others > 0, (1.0 - r2) * others_sq / others, 0.0)
        d3 = np.where(degenerate, np.nan, d3)
        t3 = np.where(degenerate, np.nan, t3)
    return DerivedStats(d1=d1, t1=t1, d2=d2, t2=t2, d3=d3, t3=t3,
                        private_degenerate=degenerate)


def exp_over_gamma_cdf(x, exp_mean, denom_weight, denom_shape):
    """CDF of X/(W Z + 1) scaled: 1 - exp(-x/exp_mean) (1 + denom_weight x)^-D.

    The shared closed form behind every average-BLER expression in the
    package; vectorized over x.
    """
    x = np.asarray(x, dtype=float)
    out = -x / exp_mean
    if np.any(denom_shape):
        out = out - denom_shape * np.log1p(denom_weight * x)
    return 1.0 - np.exp(out)


def sinr_cdf(stream: str, user: int, stats: DerivedStats,
             alloc: PowerAllocation, budget: LinkBudget, x):
    """Approximate CDF of the common or private SINR of one user at x >= 0."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("SINR CDF argument must be nonnegative")
    p_xi = budget.p_n * budget.xi[user]
    if stream == "common":
        alpha_c = float(alloc.alpha_c)
        if alpha_c <= 0.0:
            # zero common power: the SINR is identically zero
            return np.ones_like(x) if x.ndim else 1.0
        val = exp_over_gamma_cdf(x, p_xi * alpha_c,
                                 stats.t2[user] / alpha_c, stats.d2[user])
    elif stream == "private":
        if stats.private_degenerate[user]:
            return np.ones_like(x) if x.ndim else 1.0
        alpha_k = float(alloc.alpha[user])
        scale = stats.own_gain_mean * alpha_k
        if stats.d3 is None:  # single user: pure exponential tail
            val = exp_over_gamma_cdf(x, p_xi * scale, 0.0, 0.0)
        else:
            val = exp_over_gamma_cdf(x, p_xi * scale,
                                     stats.t3[user] / scale, stats.d3[user])
    else:
        raise ValueError(f"unknown stream {stream!r}")
    return val if val.ndim else float(val)
