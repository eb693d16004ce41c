"""Closed-form average age of information.

With one update per slot and a constant failure probability eps, renewal
theory gives the long-run time average T/2 + T/(1 - eps). The analytic
per-user values plug the closed-form average BLERs into that formula.

A stream whose failure probability reaches 1 has unbounded age; this is
reported as the distinguished float('inf') sentinel (deliberate, not an
overflow) and propagates through means so the optimizer sees such points
as infeasible rather than NaN.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .bler import CodeParams, average_bler_set, code_params_from_split
from .model import LinkBudget, PowerAllocation, RateSplit, SystemConfig
from .stats import DerivedStats, gamma_approx_params

UNBOUNDED_AGE = math.inf


def aaoi_from_error_prob(eps: float, slot_duration_s: float) -> float:
    """Renewal-reward average age for a constant per-slot failure probability."""
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"failure probability must lie in [0, 1), got {eps} "
                         "(age diverges at 1)")
    return slot_duration_s * (0.5 + 1.0 / (1.0 - eps))


def _aaoi_or_unbounded(eps: float, slot_duration_s: float) -> float:
    if eps >= 1.0:
        return UNBOUNDED_AGE
    return aaoi_from_error_prob(eps, slot_duration_s)


@dataclass
class AaoiSet:
    """Analytic per-user average ages (seconds): common stream and overall."""

    aaoi_common: np.ndarray
    aaoi_overall: np.ndarray

    @property
    def mean_common(self) -> float:
        return float(np.mean(self.aaoi_common))

    @property
    def mean_overall(self) -> float:
        return float(np.mean(self.aaoi_overall))

    @property
    def max_overall(self) -> float:
        return float(np.max(self.aaoi_overall))

    @property
    def bounded(self) -> bool:
        return bool(np.all(np.isfinite(self.aaoi_common))
                    and np.all(np.isfinite(self.aaoi_overall)))


def analytic_aaoi(cfg: SystemConfig, budget: LinkBudget,
                  stats: Optional[DerivedStats], alloc: PowerAllocation,
                  split: RateSplit) -> AaoiSet:
    """Closed-form common and overall AAoI for every user.

    Exactly the renewal formula applied to the closed-form average BLERs,
    so the factorization AAoI(eps_overall) == T/2 + T/(1-eps_c)/(1-eps_p)
    holds as an identity.
    """
    if stats is None:
        stats = gamma_approx_params(cfg, budget, alloc)
    common_code, private_codes = code_params_from_split(cfg, split)
    blers = average_bler_set(stats, alloc, budget, common_code, private_codes)
    t_slot = cfg.slot_duration_s
    common = np.array([_aaoi_or_unbounded(e, t_slot) for e in blers.eps_common])
    overall = np.array([_aaoi_or_unbounded(e, t_slot) for e in blers.eps_overall])
    return AaoiSet(aaoi_common=common, aaoi_overall=overall)


# ---------------------------------------------------------------------------
# vectorized variant for grid searches
# ---------------------------------------------------------------------------

def analytic_aaoi_grid(cfg: SystemConfig, budget: LinkBudget,
                       alpha_c: np.ndarray, alpha: np.ndarray,
                       psi: np.ndarray):
    """Common/overall AAoI over a batch of decision points.

    alpha_c: (N,), alpha: (N, K), psi: (N, K) or (K,) broadcastable.
    Returns (aaoi_common, aaoi_overall), each (N, K), with inf where a
    stream cannot be decoded. Matches analytic_aaoi row by row.
    """
    alpha_c = np.asarray(alpha_c, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    psi = np.broadcast_to(np.asarray(psi, dtype=float), alpha.shape)
    nt, k = cfg.n_antennas, cfg.n_users
    rho = budget.rho
    r2, r4 = rho ** 2, rho ** 4
    dof = nt - k + 1
    t_slot = cfg.slot_duration_s
    m0, k0 = cfg.info_bits_total, cfg.multicast_fraction
    p_xi = budget.p_n * budget.xi  # (K,)

    m_c = k0 * m0 + (1.0 - k0) * m0 * psi.sum(axis=1, keepdims=True)   # (N,1)
    m_k = (1.0 - k0) * (1.0 - psi) * m0                                # (N,K)
    beta_c = 2.0 ** (m_c / cfg.blocklength_common) - 1.0
    n_k = np.asarray(cfg.blocklength_private, dtype=float)
    beta_k = 2.0 ** (m_k / n_k) - 1.0

    own_mean = dof * r2 + 1.0 - r2
    sum_sq = (alpha ** 2).sum(axis=1, keepdims=True)
    ac = alpha_c[:, None]
    num2 = dof * r2 * alpha + (1.0 - r2) * (1.0 - ac)
    den2 = dof * r4 * alpha ** 2 + (1.0 - r2) ** 2 * sum_sq
    with np.errstate(divide="ignore", invalid="ignore"):
        d2 = np.where(num2 > 0, num2 ** 2 / den2, 1.0)
        t2 = np.where(num2 > 0, den2 / num2, 0.0)
        others = 1.0 - ac - alpha
        others_sq = sum_sq - alpha ** 2
        d3 = np.where(others_sq > 0, others ** 2 / others_sq, 0.0)
        t3 = np.where(others > 0, (1.0 - r2) * others_sq / others, 0.0)

        # log of 1/(1 - eps) per stream; +inf marks an undecodable stream
        log_inv_surv_c = np.where(
            ac > 0,
            beta_c / (p_xi * ac) + d2 * np.log1p(t2 * beta_c / ac),
            np.inf)
        log_inv_surv_c = np.where(m_c > 0, log_inv_surv_c, 0.0)
        scale = own_mean * alpha
        log_inv_surv_p = np.where(
            alpha > 0,
            beta_k / (p_xi * scale) + d3 * np.log1p(t3 * beta_k / scale),
            np.inf)
        log_inv_surv_p = np.where(m_k > 0, log_inv_surv_p, 0.0)

    with np.errstate(over="ignore"):
        aaoi_common = t_slot * (0.5 + np.exp(log_inv_surv_c))
        aaoi_overall = t_slot * (0.5 + np.exp(log_inv_surv_c + log_inv_surv_p))
    return aaoi_common, aaoi_overall
