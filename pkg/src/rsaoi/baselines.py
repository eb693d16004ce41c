"""SDMA and NOMA comparison schemes with exhaustive power-allocation search.

Both baselines deliver every user's full payload without a shared stream,
so each user receives all m0 bits on its own code. Their decode-failure
probabilities reuse the same machinery as the rate-splitting analysis: an
exponential-equivalent desired gain over a moment-matched Gamma
interference term, evaluated at the rate threshold.

The NOMA construction (the reference scheme only sketches it): users are
sorted by distance and paired adjacently; each pair gets one block-ZF beam
that nulls the other pairs' CSIT rows and is matched to the far user's
projected CSIT; inside a pair the near user decodes and cancels the far
user's message before its own, the far user treats the near signal as
noise, and a failed far-message decode at the near user takes its own
message down with it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .model import LinkBudget, SystemConfig
from .stats import GammaParams, moment_match_sum

GRID_STEP = 0.01


@dataclass
class BaselineResult:
    scheme: str
    best_allocation: dict
    aaoi_per_user: np.ndarray
    mean_aaoi: float
    max_aaoi: float
    grid_points_evaluated: int


def simplex_grid(n_parts: int, step: float) -> np.ndarray:
    """All nonnegative compositions of 1.0 into n_parts on a uniform grid."""
    units = round(1.0 / step)
    if abs(units * step - 1.0) > 1e-12:
        raise ValueError("step must divide 1 exactly")

    def rec(parts, budget):
        if parts == 1:
            yield (budget,)
            return
        for first in range(budget + 1):
            for rest in rec(parts - 1, budget - first):
                yield (first,) + rest

    grid = np.array(list(rec(n_parts, units)), dtype=float)
    return grid * step


def _aaoi_from_eps(eps: np.ndarray, slot_s: float) -> np.ndarray:
    with np.errstate(divide="ignore"):
        out = slot_s * (0.5 + 1.0 / (1.0 - eps))
    return np.where(eps >= 1.0, np.inf, out)


# ---------------------------------------------------------------------------
# SDMA
# ---------------------------------------------------------------------------

def sdma_user_bler(cfg: SystemConfig, budget: LinkBudget,
                   alpha: np.ndarray) -> np.ndarray:
    """Decode-failure probability per user for ZF streams carrying m0 bits.

    alpha: (..., K) power fractions summing to 1 along the last axis.
    Zero-power users fail with probability 1.
    """
    alpha = np.asarray(alpha, dtype=float)
    k = cfg.n_users
    rho2 = budget.rho ** 2
    own_mean = (cfg.n_antennas - k + 1) * rho2 + 1.0 - rho2
    pxi = budget.p_n * budget.xi
    n_k = np.asarray(cfg.blocklength_private, dtype=float)
    beta = 2.0 ** (cfg.info_bits_total / n_k) - 1.0
    others = 1.0 - alpha
    others_sq = np.sum(alpha ** 2, axis=-1, keepdims=True) - alpha ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        d3 = np.where(others_sq > 0, others ** 2 / others_sq, 0.0)
        t3 = np.where(others > 0, (1.0 - rho2) * others_sq / others, 0.0)
        scale = own_mean * alpha
        log_surv = -beta / (pxi * scale) - d3 * np.log1p(t3 * beta / scale)
    eps = 1.0 - np.exp(np.where(alpha > 0, log_surv, -np.inf))
    return np.clip(eps, 0.0, 1.0)


def sdma_evaluate(cfg: SystemConfig, budget: LinkBudget,
                  rng: Optional[np.random.Generator] = None,
                  step: float = GRID_STEP) -> BaselineResult:
    """Exhaustive search of the K-simplex for the best mean AAoI."""
    del rng  # deterministic; kept for interface symmetry with the simulator
    k = cfg.n_users
    if k == 1:
        alphas = np.array([[1.0]])
    else:
        alphas = simplex_grid(k, step)
    eps = sdma_user_bler(cfg, budget, alphas)
    aaoi = _aaoi_from_eps(eps, cfg.slot_duration_s)
    objective = aaoi.mean(axis=-1)
    best = int(np.argmin(objective))
    return BaselineResult(
        scheme="sdma",
        best_allocation={"alpha": alphas[best]},
        aaoi_per_user=aaoi[best],
        mean_aaoi=float(objective[best]),
        max_aaoi=float(np.max(aaoi[best])),
        grid_points_evaluated=alphas.shape[0])


# ---------------------------------------------------------------------------
# NOMA
# ---------------------------------------------------------------------------

def noma_groups(cfg: SystemConfig) -> List[Tuple[int, int]]:
    """(near, far) index pairs: adjacent after sorting by distance."""
    if cfg.n_users % 2 != 0:
        raise ValueError("the pairing rule needs an even user count, "
                         f"got K={cfg.n_users}")
    order = np.argsort(np.asarray(cfg.distances_m), kind="stable")
    return [(int(order[i]), int(order[i + 1]))
            for i in range(0, cfg.n_users, 2)]


def _noma_fail_prob(beta, u, exp_mean, d_i, t_i):
    """P(decode fails) for SINR tau A/((1-tau) A + I + 1) style ratios.

    u is the effective threshold beta/(tau - (1-tau) beta) computed by the
    caller, already inf when the rate exceeds the interference-free limit.
    """
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        log_surv = -u / exp_mean - d_i * np.log1p(u * t_i / exp_mean)
        out = 1.0 - np.exp(log_surv)
    return np.where(np.isfinite(u), np.clip(out, 0.0, 1.0), 1.0)


def noma_pair_blers(cfg: SystemConfig, budget: LinkBudget, group_index: int,
                    gamma: np.ndarray, tau: np.ndarray):
    """Overall decode-failure probabilities (near, far) of one pair.

    gamma: (..., G) inter-group fractions; tau: (...,) fraction of the
    pair's power given to the far user. Broadcast over grid axes.
    """
    groups = noma_groups(cfg)
    near, far = groups[group_index]
    rho2 = budget.rho ** 2
    nulled = cfg.n_users - 2
    if cfg.n_antennas <= nulled:
        raise ValueError("block-ZF needs more antennas than nulled users "
                         f"(Nt={cfg.n_antennas}, nulled={nulled})")
    dof = cfg.n_antennas - nulled          # beam subspace dimension
    far_gain_mean = dof * rho2 + 1.0 - rho2   # beam matched to the far user
    near_gain_mean = 1.0                      # near user rides the far beam
    pxi = budget.p_n * budget.xi
    gamma = np.asarray(gamma, dtype=float)
    tau = np.asarray(tau, dtype=float)
    own_gamma = gamma[..., group_index]

    n_blk = np.asarray(cfg.blocklength_private, dtype=float)
    beta = 2.0 ** (cfg.info_bits_total / n_blk) - 1.0

    def interference(user):
        # residual block-ZF leakage from each other pair's beam is an
        # exponential with weight pxi (1-rho^2) gamma_g'; moment-match the sum
        weights = float(pxi[user]) * (1.0 - rho2) \
            * np.delete(gamma, group_index, axis=-1)
        m1 = weights.sum(axis=-1)
        m2 = (weights ** 2).sum(axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            d_i = np.where(m2 > 0, m1 ** 2 / m2, 0.0)
            t_i = np.where(m1 > 0, m2 / m1, 0.0)
        return d_i, t_i

    def sic_threshold(beta_val):
        denom = tau - (1.0 - tau) * beta_val
        with np.errstate(divide="ignore"):
            u = np.where(denom > 0, beta_val / denom, np.inf)
        return u

    # far user decodes its own message, near signal treated as noise
    d_i, t_i = interference(far)
    a_far = pxi[far] * own_gamma * far_gain_mean
    with np.errstate(divide="ignore", invalid="ignore"):
        eps_far = _noma_fail_prob(beta[far], sic_threshold(beta[far]),
                                  a_far, d_i, t_i)
    eps_far = np.where(own_gamma > 0, eps_far, 1.0)

    # near user: first the far message (same threshold), then its own after SIC
    d_i, t_i = interference(near)
    a_near = pxi[near] * own_gamma * near_gain_mean
    eps_nf = _noma_fail_prob(beta[far], sic_threshold(beta[far]),
                             a_near, d_i, t_i)
    with np.errstate(divide="ignore", invalid="ignore"):
        u_own = np.where(tau < 1.0, beta[near] / (1.0 - tau), np.inf)
    eps_own = _noma_fail_prob(beta[near], u_own, a_near, d_i, t_i)
    eps_near = eps_nf + (1.0 - eps_nf) * eps_own
    eps_near = np.where(own_gamma > 0, eps_near, 1.0)
    return np.clip(eps_near, 0, 1), np.clip(eps_far, 0, 1)


def noma_evaluate(cfg: SystemConfig, budget: LinkBudget,
                  rng: Optional[np.random.Generator] = None,
                  step: float = GRID_STEP) -> BaselineResult:
    """Exhaustive inter-group and intra-group power search.

    For fixed inter-group fractions the pairs decouple, so each pair's
    intra-group fraction is scanned independently; the search still visits
    every grid combination's objective value.
    """
    del rng
    groups = noma_groups(cfg)
    g = len(groups)
    t_slot = cfg.slot_duration_s
    gammas = np.array([[1.0]]) if g == 1 else simplex_grid(g, step)
    taus = np.linspace(0.0, 1.0, round(1.0 / step) + 1)

    n_gamma = gammas.shape[0]
    best_tau = np.zeros((n_gamma, g))
    pair_aaoi = np.full((n_gamma, g, 2), np.inf)
    pair_obj = np.full((n_gamma, g), np.inf)
    for gi in range(g):
        eps_near, eps_far = noma_pair_blers(
            cfg, budget, gi, gammas[:, None, :], taus[None, :])
        aaoi_near = _aaoi_from_eps(eps_near, t_slot)
        aaoi_far = _aaoi_from_eps(eps_far, t_slot)
        tot = aaoi_near + aaoi_far
        tot = np.where(np.isfinite(tot), tot, np.inf)
        idx = np.argmin(tot, axis=1)
        rows = np.arange(n_gamma)
        best_tau[:, gi] = taus[idx]
        pair_aaoi[:, gi, 0] = aaoi_near[rows, idx]
        pair_aaoi[:, gi, 1] = aaoi_far[rows, idx]
        pair_obj[:, gi] = tot[rows, idx]

    objective = pair_obj.sum(axis=1) / cfg.n_users
    best = int(np.argmin(objective))
    aaoi = np.empty(cfg.n_users)
    for gi, (near, far) in enumerate(groups):
        aaoi[near] = pair_aaoi[best, gi, 0]
        aaoi[far] = pair_aaoi[best, gi, 1]
    return BaselineResult(
        scheme="noma",
        best_allocation={"gamma": gammas[best], "tau": best_tau[best],
                         "groups": groups},
        aaoi_per_user=aaoi,
        mean_aaoi=float(objective[best]),
        max_aaoi=float(np.max(aaoi)),
        grid_points_evaluated=n_gamma * taus.size * g)


def noma_objective(cfg: SystemConfig, budget: LinkBudget, gamma: Sequence[float],
                   tau: Sequence[float]) -> float:
    """Mean AAoI of one explicit NOMA grid point (oracle hook for tests)."""
    gamma = np.asarray(gamma, dtype=float)
    tau = np.asarray(tau, dtype=float)
    total = 0.0
    for gi in range(len(noma_groups(cfg))):
        eps_near, eps_far = noma_pair_blers(cfg, budget, gi, gamma, tau[gi])
        total += float(_aaoi_from_eps(eps_near, cfg.slot_duration_s)
                       + _aaoi_from_eps(eps_far, cfg.slot_duration_s))
    return total / cfg.n_users


def sdma_objective(cfg: SystemConfig, budget: LinkBudget,
                   alpha: Sequence[float]) -> float:
    """Mean AAoI of one explicit SDMA grid point (oracle hook for tests)."""
    eps = sdma_user_bler(cfg, budget, np.asarray(alpha, dtype=float))
    return float(np.mean(_aaoi_from_eps(eps, cfg.slot_duration_s)))
