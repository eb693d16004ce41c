"""Finite-blocklength error models.

Instantaneous block errors follow the normal approximation (a Q-function of
the gap between capacity and the coding rate); channel averages use its
piecewise-linear surrogate, which collapses to evaluating the SINR CDF at
the rate threshold 2^(m/n) - 1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from scipy.special import erfc

from .model import LinkBudget, PowerAllocation, RateSplit, SystemConfig
from .stats import DerivedStats, sinr_cdf

LOG2_E = math.log2(math.e)


@dataclass(frozen=True)
class CodeParams:
    """One short packet: m information bits in a block of n channel uses."""

    info_bits: float
    blocklength: int

    def __post_init__(self):
        if self.blocklength < 1:
            raise ValueError(f"blocklength must be >= 1, got {self.blocklength}")
        if self.info_bits < 0:
            raise ValueError(f"info_bits must be >= 0, got {self.info_bits}")

    @property
    def rate_threshold(self) -> float:
        """SINR at which the rate meets capacity, 2^(m/n) - 1."""
        return 2.0 ** (self.info_bits / self.blocklength) - 1.0


def code_params_from_split(cfg: SystemConfig, split: RateSplit) \
        -> Tuple[CodeParams, Tuple[CodeParams, ...]]:
    """Bit loads induced by a rate split.

    The common stream carries the multicast payload plus every split-off
    unicast fraction: m_c = k0 m0 + (1-k0) m0 sum(psi); each private stream
    keeps m_k = (1-k0)(1-psi_k) m0.
    """
    split.validate()
    psi = np.asarray(split.psi, dtype=float)
    m0 = cfg.info_bits_total
    k0 = cfg.multicast_fraction
    m_common = k0 * m0 + (1.0 - k0) * m0 * float(psi.sum())
    common = CodeParams(info_bits=m_common, blocklength=cfg.blocklength_common)
    private = tuple(
        CodeParams(info_bits=(1.0 - k0) * (1.0 - psi[k]) * m0,
                   blocklength=cfg.blocklength_private[k])
        for k in range(cfg.n_users))
    return common, private


# ---------------------------------------------------------------------------
# instantaneous BLER (normal approximation)
# ---------------------------------------------------------------------------

def normal_approx_bler(gamma, code: CodeParams):
    """Q-form block error probability at SINR gamma; vectorized over gamma.

    Zero SINR with a nonzero payload always fails (the dispersion vanishes
    there and the continuous limit of the error probability is 1); a
    zero-bit payload never fails.
    """
    gamma = np.asarray(gamma, dtype=float)
    if np.any(gamma < 0):
        raise ValueError("SINR must be nonnegative")
    if code.info_bits == 0:
        out = np.zeros_like(gamma)
        return out if out.ndim else 0.0
    n = code.blocklength
    rate = code.info_bits / n
    with np.errstate(divide="ignore", invalid="ignore"):
        dispersion = 1.0 - (1.0 + gamma) ** -2
        arg = (math.sqrt(n) * (np.log2(1.0 + gamma) - rate)
               / (LOG2_E * np.sqrt(dispersion)))
    out = 0.5 * erfc(arg / math.sqrt(2.0))
    out = np.where(gamma > 0, out, 1.0)
    out = np.clip(out, 0.0, 1.0)
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# piecewise-linear surrogate
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LinearApprox:
    """Parameters of the three-piece linear BLER surrogate.

    1 below mu, 0 above nu, sloped through (beta, 1/2) in between;
    nu - mu = 1/delta identically.
    """

    delta: float
    beta: float
    mu: float
    nu: float


def linear_approx_params(code: CodeParams) -> LinearApprox:
    if code.info_bits <= 0:
        raise ValueError("the linear surrogate needs a nonzero payload "
                         "(a zero-bit stream never fails by convention)")
    n = code.blocklength
    m = code.info_bits
    beta = 2.0 ** (m / n) - 1.0
    delta = math.sqrt(n / (2.0 * math.pi * (2.0 ** (2.0 * m / n) - 1.0)))
    return LinearApprox(delta=delta, beta=beta,
                        mu=beta - 0.5 / delta, nu=beta + 0.5 / delta)


def piecewise_linear_bler(gamma, approx: LinearApprox):
    """Evaluate the surrogate; vectorized over gamma."""
    gamma = np.asarray(gamma, dtype=float)
    out = np.clip(0.5 - approx.delta * (gamma - approx.beta), 0.0, 1.0)
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# closed-form channel averages
# ---------------------------------------------------------------------------

@dataclass
class BlerSet:
    """Per-user average BLERs: common stream, private stream, and overall."""

    eps_common: np.ndarray
    eps_private: np.ndarray
    eps_overall: np.ndarray


def average_bler(stream: str, user: int, stats: DerivedStats,
                 alloc: PowerAllocation, budget: LinkBudget,
                 common_code: CodeParams,
                 private_codes: Sequence[CodeParams]) -> float:
    """Closed-form average BLER of one user's stream.

    Averaging the linear surrogate over the approximate SINR CDF reduces
    (midpoint rule) to the CDF at the rate threshold. The overall value
    composes the two streams: a common failure always takes the private
    stream down with it.
    """
    if stream == "common":
        if common_code.info_bits == 0:
            return 0.0
        if alloc.alpha_c <= 0.0:
            return 1.0
        return float(sinr_cdf("common", user, stats, alloc, budget,
                              common_code.rate_threshold))
    if stream == "private":
        code = private_codes[user]
        if code.info_bits == 0:
            return 0.0
        if stats.private_degenerate[user]:
            return 1.0
        return float(sinr_cdf("private", user, stats, alloc, budget,
                              code.rate_threshold))
    if stream == "overall":
        eps_c = average_bler("common", user, stats, alloc, budget,
                             common_code, private_codes)
        eps_p = average_bler("private", user, stats, alloc, budget,
                             common_code, private_codes)
        return eps_c + (1.0 - eps_c) * eps_p
    raise ValueError(f"unknown stream {stream!r}")


def average_bler_set(stats: DerivedStats, alloc: PowerAllocation,
                     budget: LinkBudget, common_code: CodeParams,
                     private_codes: Sequence[CodeParams]) -> BlerSet:
    k = len(private_codes)
    eps_c = np.array([average_bler("common", i, stats, alloc, budget,
                                   common_code, private_codes) for i in range(k)])
    eps_p = np.array([average_bler("private", i, stats, alloc, budget,
                                   common_code, private_codes) for i in range(k)])
    return BlerSet(eps_common=eps_c, eps_private=eps_p,
                   eps_overall=eps_c + (1.0 - eps_c) * eps_p)
