"""Multi-start two-step SCA minimization of the mean overall AAoI.

Step 1 optimizes the power split (common + per-user private) with the rate
split frozen; step 2 optimizes the rate split under the age-ratio QoS
constraint with the powers frozen. Both steps iterate convex surrogates
that are tight at the expansion point: products of auxiliaries are bounded
through the polarization identity xy = ((x+y)^2 - x^2 - y^2)/2 with the
convex square linearized, logarithms through their tangents, and the
remaining bilinear objective terms through a weighted Young inequality.
Each start runs both steps; the best QoS-feasible endpoint wins.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import brentq

from .aoi import analytic_aaoi
from .bler import code_params_from_split
from .model import (LinkBudget, PowerAllocation, RateSplit, SystemConfig,
                    uniform_allocation, validate_config)
from .solver import ConvexProgram, QuadraticFn, SubproblemError, solve
from .stats import gamma_approx_params

ALPHA_FLOOR = 1e-6      # keeps logs and divisions finite during step 1
AUX_FLOOR = 1e-8
DEFAULT_START_LEVELS = (0.0, 0.1, 0.25, 0.5, 0.75)
DEFAULT_MAX_ITER = 50


class StartFailure(RuntimeError):
    """One starting point could not produce a feasible solution."""


class OptimizationError(RuntimeError):
    """Every starting point failed; carries per-start diagnostics."""


@dataclass(frozen=True)
class QosParams:
    """Age-ratio constraint: common AAoI <= lam * overall AAoI (+ tolerance)."""

    lam: float
    feasibility_tol: float = 1e-9

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")


@dataclass
class ScaIterate:
    """Expansion point of one SCA iteration (consistent auxiliary values)."""

    alpha_c: float
    alpha: np.ndarray
    psi: np.ndarray
    d2: np.ndarray
    o2: np.ndarray
    d3: Optional[np.ndarray]
    o3: Optional[np.ndarray]
    a: np.ndarray
    b: Optional[np.ndarray]
    c: np.ndarray
    e: Optional[np.ndarray]
    beta_c: Optional[float] = None
    beta: Optional[np.ndarray] = None
    qos_h: Optional[np.ndarray] = None  # overall age factors for the ratio bound


@dataclass
class StartTrace:
    start_index: int
    psi_start: np.ndarray
    step1_objectives: List[float] = field(default_factory=list)
    step2_objectives: List[float] = field(default_factory=list)
    status: str = "ok"


@dataclass
class Solution:
    alloc: PowerAllocation
    split: RateSplit
    objective: float
    aaoi_common: np.ndarray
    aaoi_overall: np.ndarray
    traces: List[StartTrace]
    selected_start: int
    qos_satisfied: bool


# ---------------------------------------------------------------------------
# shared scenario constants
# ---------------------------------------------------------------------------

@dataclass
class _Consts:
    k: int
    nm: int                 # Nt - K + 1
    r2: float
    r4: float
    t_slot: float
    pxi: np.ndarray
    m1: float               # mean own-beam gain
    a_c: float              # 2^(m_c/n_c) - 1
    a_k: np.ndarray         # (2^(m_k/n_k) - 1) / m1


def _consts(cfg: SystemConfig, budget: LinkBudget, split: RateSplit) -> _Consts:
    common, private = code_params_from_split(cfg, split)
    r2 = budget.rho ** 2
    nm = cfg.n_antennas - cfg.n_users + 1
    m1 = nm * r2 + 1.0 - r2
    return _Consts(k=cfg.n_users, nm=nm, r2=r2, r4=r2 * r2,
                   t_slot=cfg.slot_duration_s,
                   pxi=budget.p_n * budget.xi, m1=m1,
                   a_c=common.rate_threshold,
                   a_k=np.array([p.rate_threshold for p in private]) / m1)


def consistent_iterate(cfg: SystemConfig, budget: LinkBudget,
                       alloc: PowerAllocation, split: RateSplit) -> ScaIterate:
    """Auxiliaries at their defining values, so every relaxed constraint is
    tight and the surrogate touches the true objective."""
    cs = _consts(cfg, budget, split)
    alpha = np.maximum(np.asarray(alloc.alpha, dtype=float), ALPHA_FLOOR)
    alpha_c = max(float(alloc.alpha_c), ALPHA_FLOOR)
    num = cs.nm * cs.r2 * alpha + (1.0 - cs.r2) * (1.0 - alpha_c)
    a_true = cs.nm * cs.r4 * alpha ** 2 + (1.0 - cs.r2) ** 2 * np.sum(alpha ** 2)
    d2 = np.maximum(num ** 2 / a_true, AUX_FLOOR)
    o2 = np.maximum(a_true / num, AUX_FLOOR)
    if cs.k == 1:
        d3 = o3 = b = e = None
    else:
        u = 1.0 - alpha_c - alpha
        b = np.maximum(np.sum(alpha ** 2) - alpha ** 2, AUX_FLOOR)
        d3 = np.maximum(u ** 2 / b, AUX_FLOOR)
        o3 = np.maximum((1.0 - cs.r2) * b / u, AUX_FLOOR)
        e = np.maximum(o3 / alpha, AUX_FLOOR)
    return ScaIterate(alpha_c=alpha_c, alpha=alpha,
                      psi=np.asarray(split.psi, dtype=float),
                      d2=d2, o2=o2, d3=d3, o3=o3,
                      a=np.maximum(a_true, AUX_FLOOR), b=b,
                      c=np.maximum(o2 / alpha_c, AUX_FLOOR), e=e)


# ---------------------------------------------------------------------------
# step-1 surrogate (power allocation)
# ---------------------------------------------------------------------------

class _P2Layout:
    """Variable indices: alpha_c, alpha, then per-user auxiliary blocks."""

    def __init__(self, k: int):
        self.k = k
        blocks = ["d2", "o2", "d3", "o3", "a", "b", "c", "e"] if k > 1 \
            else ["d2", "o2", "a", "c"]
        self.n = 1 + k + len(blocks) * k
        self.alpha_c = 0
        self.alpha = np.arange(1, k + 1)
        for i, name in enumerate(blocks):
            setattr(self, name, np.arange(1 + k + i * k, 1 + k + (i + 1) * k))
        self.blocks = blocks

    def pack(self, it: ScaIterate) -> np.ndarray:
        x = np.zeros(self.n)
        x[self.alpha_c] = it.alpha_c
        x[self.alpha] = it.alpha
        for name in self.blocks:
            x[getattr(self, name)] = getattr(it, name)
        return x


class _P2Objective:
    """Normalized surrogate objective 1/2 + (1/K) sum_k exp(gtilde_k)."""

    def __init__(self, layout: _P2Layout, cs: _Consts, it: ScaIterate):
        self.lay = layout
        self.cs = cs
        k = layout.k
        c_t = np.maximum(it.c, AUX_FLOOR)
        d2_t = np.maximum(it.d2, AUX_FLOOR)
        self.l2 = np.log1p(cs.a_c * c_t)
        self.c2 = cs.a_c / (2.0 * (cs.a_c * c_t + 1.0))
        self.r2c = d2_t / c_t
        self.r2d = c_t / d2_t
        self.m2 = cs.a_c * c_t / (cs.a_c * c_t + 1.0)
        if k > 1:
            e_t = np.maximum(it.e, AUX_FLOOR)
            d3_t = np.maximum(it.d3, AUX_FLOOR)
            self.l3 = np.log1p(cs.a_k * e_t)
            self.c3 = cs.a_k / (2.0 * (cs.a_k * e_t + 1.0))
            self.r3e = d3_t / e_t
            self.r3d = e_t / d3_t
            self.m3 = cs.a_k * e_t / (cs.a_k * e_t + 1.0)

    def gtilde(self, x: np.ndarray) -> np.ndarray:
        lay, cs = self.lay, self.cs
        ac = x[lay.alpha_c]
        ak = x[lay.alpha]
        g = (self.l2 - self.m2) * x[lay.d2] \
            + self.c2 * (x[lay.c] ** 2 * self.r2c + x[lay.d2] ** 2 * self.r2d) \
            + cs.a_c / (cs.pxi * ac) + cs.a_k / (cs.pxi * ak)
        if lay.k > 1:
            g = g + (self.l3 - self.m3) * x[lay.d3] \
                + self.c3 * (x[lay.e] ** 2 * self.r3e + x[lay.d3] ** 2 * self.r3d)
        return g

    def value(self, x: np.ndarray) -> float:
        g = self.gtilde(x)
        if np.any(g > 700):
            return math.inf
        return 0.5 + float(np.exp(g).sum()) / self.lay.k

    def _per_user_grads(self, x):
        """Gradient rows of gtilde_k, one sparse row per user."""
        lay, cs = self.lay, self.cs
        k = lay.k
        rows = np.zeros((k, lay.n))
        ac = x[lay.alpha_c]
        ak = x[lay.alpha]
        rows[:, lay.alpha_c] = -cs.a_c / (cs.pxi * ac ** 2)
        rows[np.arange(k), lay.alpha] = -cs.a_k / (cs.pxi * ak ** 2)
        rows[np.arange(k), lay.d2] = (self.l2 - self.m2) \
            + 2.0 * self.c2 * self.r2d * x[lay.d2]
        rows[np.arange(k), lay.c] = 2.0 * self.c2 * self.r2c * x[lay.c]
        if k > 1:
            rows[np.arange(k), lay.d3] = (self.l3 - self.m3) \
                + 2.0 * self.c3 * self.r3d * x[lay.d3]
            rows[np.arange(k), lay.e] = 2.0 * self.c3 * self.r3e * x[lay.e]
        return rows

    def grad(self, x: np.ndarray) -> np.ndarray:
        w = np.exp(np.minimum(self.gtilde(x), 700.0)) / self.lay.k
        return self._per_user_grads(x).T @ w

    def hess(self, x: np.ndarray) -> np.ndarray:
        lay, cs = self.lay, self.cs
        k = lay.k
        w = np.exp(np.minimum(self.gtilde(x), 700.0)) / k
        rows = self._per_user_grads(x)
        h = (rows * w[:, None]).T @ rows
        ac = x[lay.alpha_c]
        ak = x[lay.alpha]
        # curvature of gtilde itself (diagonal)
        diag = np.zeros(lay.n)
        diag[lay.alpha_c] = np.sum(w * 2.0 * cs.a_c / (cs.pxi * ac ** 3))
        diag[lay.alpha] = w * 2.0 * cs.a_k / (cs.pxi * ak ** 3)
        diag[lay.d2] = w * 2.0 * self.c2 * self.r2d
        diag[lay.c] = w * 2.0 * self.c2 * self.r2c
        if k > 1:
            diag[lay.d3] = w * 2.0 * self.c3 * self.r3d
            diag[lay.e] = w * 2.0 * self.c3 * self.r3e
        return h + np.diag(diag)


def p2_true_log_factor(x: np.ndarray, layout: _P2Layout, cs: _Consts) -> np.ndarray:
    """ln of the true age factor evaluated at the point's own auxiliaries:
    d2 ln(A_c o2/alpha_c + 1) + d3 ln(A_k o3/alpha_k + 1) + exponent terms."""
    ac = x[layout.alpha_c]
    ak = x[layout.alpha]
    val = x[layout.d2] * np.log1p(cs.a_c * x[layout.o2] / ac) \
        + cs.a_c / (cs.pxi * ac) + cs.a_k / (cs.pxi * ak)
    if layout.k > 1:
        val = val + x[layout.d3] * np.log1p(cs.a_k * x[layout.o3] / ak)
    return val


def _quad(layout: _P2Layout, name: str):
    n = layout.n
    return np.zeros((n, n)), np.zeros(n), 0.0, name


def surrogate_p2(iterate: ScaIterate, cfg: SystemConfig, budget: LinkBudget,
                 split: RateSplit) -> Tuple[ConvexProgram, _P2Layout, _Consts]:
    """Convex subproblem for the power-allocation step at one expansion point.

    Emits the exp-of-surrogate objective plus the full relaxed constraint
    list (shape/scale definitions, their quadratic envelopes, the ratio
    auxiliaries) together with the power simplex and box constraints.
    """
    cs = _consts(cfg, budget, split)
    k = cs.k
    lay = _P2Layout(k)
    if k >= 2:
        assert lay.n == 9 * k + 1, "step-1 subproblem must have 9K+1 variables"
    it = iterate
    if np.any(it.d2 <= 0) or np.any(it.c <= 0) or \
            (k > 1 and (np.any(it.d3 <= 0) or np.any(it.e <= 0))):
        raise ValueError("expansion point has a nonpositive auxiliary; "
                         "previous iterate must be strictly positive")
    one_r2 = 1.0 - cs.r2
    ineqs = []

    def add_sq_affine(Q, q, r, const, coeffs):
        """Accumulate (const + sum coeffs_i x_i)^2 into (Q, q, r)."""
        idx = np.array([i for i, _ in coeffs])
        vals = np.array([v for _, v in coeffs])
        Q[np.ix_(idx, idx)] += 2.0 * np.outer(vals, vals)
        q[idx] += 2.0 * const * vals
        return r + const * const

    for j in range(k):
        aj, d2j, o2j, cj = lay.alpha[j], lay.d2[j], lay.o2[j], lay.c[j]
        a_t_d_t = it.a[j] + it.d2[j]
        # envelope of num^2 <= a * d2
        Q, q, r, name = _quad(lay, f"def_shape_common[{j}]")
        r = add_sq_affine(Q, q, r, one_r2,
                          [(lay.alpha_c, -one_r2), (aj, cs.nm * cs.r2)])
        Q[lay.a[j], lay.a[j]] += 1.0
        Q[d2j, d2j] += 1.0
        q[lay.a[j]] -= a_t_d_t
        q[d2j] -= a_t_d_t
        r += 0.5 * a_t_d_t ** 2
        ineqs.append(QuadraticFn(Q, q, r, name))

        # envelope of a(alpha) <= o2 * num
        Q, q, r, name = _quad(lay, f"def_scale_common[{j}]")
        Q[aj, aj] += 2.0 * cs.nm * cs.r4 + cs.nm * cs.r2
        for i in range(k):
            Q[lay.alpha[i], lay.alpha[i]] += 2.0 * one_r2 ** 2
        Q[o2j, o2j] += cs.nm * cs.r2 + one_r2
        Q[lay.alpha_c, lay.alpha_c] += one_r2
        Q[lay.alpha_c, o2j] += one_r2
        Q[o2j, lay.alpha_c] += one_r2
        q[o2j] -= one_r2
        ao_t = it.alpha[j] + it.o2[j]
        q[aj] -= cs.nm * cs.r2 * ao_t
        q[o2j] -= cs.nm * cs.r2 * ao_t
        r += 0.5 * cs.nm * cs.r2 * ao_t ** 2
        q[lay.alpha_c] -= one_r2 * it.alpha_c
        q[o2j] -= one_r2 * it.o2[j]
        r += 0.5 * one_r2 * (it.alpha_c ** 2 + it.o2[j] ** 2)
        ineqs.append(QuadraticFn(Q, q, r, name))

        # linear upper bound on the auxiliary a (true value linearized)
        Q, q, r, name = _quad(lay, f"lin_a[{j}]")
        q[lay.a[j]] += 1.0
        q[aj] -= cs.nm * cs.r4 * 2.0 * it.alpha[j]
        r += cs.nm * cs.r4 * it.alpha[j] ** 2
        for i in range(k):
            q[lay.alpha[i]] -= one_r2 ** 2 * 2.0 * it.alpha[i]
            r += one_r2 ** 2 * it.alpha[i] ** 2
        ineqs.append(QuadraticFn(None, q, r, name))

        # envelope of o2 <= alpha_c * c
        Q, q, r, name = _quad(lay, f"def_ratio_common[{j}]")
        q[o2j] += 1.0
        Q[lay.alpha_c, lay.alpha_c] += 1.0
        Q[cj, cj] += 1.0
        act = it.alpha_c + it.c[j]
        q[lay.alpha_c] -= act
        q[cj] -= act
        r += 0.5 * act ** 2
        ineqs.append(QuadraticFn(Q, q, r, name))

        if k == 1:
            continue
        d3j, o3j, bj, ej = lay.d3[j], lay.o3[j], lay.b[j], lay.e[j]
        # envelope of (1 - alpha_c - alpha_k)^2 <= b * d3
        Q, q, r, name = _quad(lay, f"def_shape_private[{j}]")
        r = add_sq_affine(Q, q, r, 1.0, [(lay.alpha_c, -1.0), (aj, -1.0)])
        Q[bj, bj] += 1.0
        Q[d3j, d3j] += 1.0
        bd_t = it.b[j] + it.d3[j]
        q[bj] -= bd_t
        q[d3j] -= bd_t
        r += 0.5 * bd_t ** 2
        ineqs.append(QuadraticFn(Q, q, r, name))

        # envelope of (1-rho^2) b(alpha) <= o3 (1 - alpha_c - alpha_k)
        Q, q, r, name = _quad(lay, f"def_scale_private[{j}]")
        for i in range(k):
            if i != j:
                Q[lay.alpha[i], lay.alpha[i]] += 2.0 * one_r2
        Q[aj, aj] += 1.0
        Q[o3j, o3j] += 2.0
        Q[aj, o3j] += 1.0
        Q[o3j, aj] += 1.0
        Q[lay.alpha_c, lay.alpha_c] += 1.0
        Q[lay.alpha_c, o3j] += 1.0
        Q[o3j, lay.alpha_c] += 1.0
        q[o3j] -= 1.0
        q[aj] -= it.alpha[j]
        r += 0.5 * it.alpha[j] ** 2
        q[lay.alpha_c] -= it.alpha_c
        r += 0.5 * it.alpha_c ** 2
        q[o3j] -= 2.0 * it.o3[j]
        r += it.o3[j] ** 2
        ineqs.append(QuadraticFn(Q, q, r, name))

        # linear upper bound on the auxiliary b
        Q, q, r, name = _quad(lay, f"lin_b[{j}]")
        q[bj] += 1.0
        for i in range(k):
            if i != j:
                q[lay.alpha[i]] -= 2.0 * it.alpha[i]
                r += it.alpha[i] ** 2
        ineqs.append(QuadraticFn(None, q, r, name))

        # envelope of o3 <= alpha_k * e
        Q, q, r, name = _quad(lay, f"def_ratio_private[{j}]")
        q[o3j] += 1.0
        Q[aj, aj] += 1.0
        Q[ej, ej] += 1.0
        ae_t = it.alpha[j] + it.e[j]
        q[aj] -= ae_t
        q[ej] -= ae_t
        r += 0.5 * ae_t ** 2
        ineqs.append(QuadraticFn(Q, q, r, name))

    lb = np.full(lay.n, AUX_FLOOR)
    ub = np.full(lay.n, np.inf)
    lb[lay.alpha_c] = ALPHA_FLOOR
    lb[lay.alpha] = ALPHA_FLOOR
    ub[lay.alpha_c] = 1.0
    ub[lay.alpha] = 1.0
    eq_a = np.zeros((1, lay.n))
    eq_a[0, lay.alpha_c] = 1.0
    eq_a[0, lay.alpha] = 1.0
    prog = ConvexProgram(n=lay.n, objective=_P2Objective(lay, cs, it),
                         ineqs=ineqs, eq_a=eq_a, eq_b=np.array([1.0]),
                         lb=lb, ub=ub)
    return prog, lay, cs


# ---------------------------------------------------------------------------
# step-2 surrogate (rate splitting)
# ---------------------------------------------------------------------------

class _P4Layout:
    def __init__(self, k: int):
        self.k = k
        self.n = 2 * k + 1
        self.psi = np.arange(k)
        self.beta_c = k
        self.beta = np.arange(k + 1, 2 * k + 1)

    def pack(self, psi, beta_c, beta):
        x = np.zeros(self.n)
        x[self.psi] = psi
        x[self.beta_c] = beta_c
        x[self.beta] = beta
        return x


class _P4Objective:
    """1/2 + (1/K) sum exp(htilde_k) with htilde affine in (beta_c, beta)."""

    def __init__(self, lay: _P4Layout, consts: dict):
        self.lay = lay
        self.u = consts["u"]          # d htilde_k / d beta_c
        self.w = consts["w"]          # d htilde_k / d beta_k
        self.c0 = consts["c0"]        # htilde_k at (beta_c, beta_k) = 0

    def htilde(self, x: np.ndarray) -> np.ndarray:
        return self.c0 + self.u * x[self.lay.beta_c] + self.w * x[self.lay.beta]

    def value(self, x: np.ndarray) -> float:
        h = self.htilde(x)
        if np.any(h > 700):
            return math.inf
        return 0.5 + float(np.exp(h).sum()) / self.lay.k

    def _rows(self, x):
        k = self.lay.k
        rows = np.zeros((k, self.lay.n))
        rows[:, self.lay.beta_c] = self.u
        rows[np.arange(k), self.lay.beta] = self.w
        return rows

    def grad(self, x: np.ndarray) -> np.ndarray:
        wgt = np.exp(np.minimum(self.htilde(x), 700.0)) / self.lay.k
        return self._rows(x).T @ wgt

    def hess(self, x: np.ndarray) -> np.ndarray:
        wgt = np.exp(np.minimum(self.htilde(x), 700.0)) / self.lay.k
        rows = self._rows(x)
        return (rows * wgt[:, None]).T @ rows


class _BitBudgetCommon:
    """k0 + (1-k0) sum(psi) - (n_c/m0) log2(1 + beta_c) <= 0."""

    def __init__(self, lay: _P4Layout, k0: float, ratio: float):
        self.lay = lay
        self.k0 = k0
        self.ratio = ratio  # n_c / m0
        self.name = "bits_common"

    def value(self, x):
        if x[self.lay.beta_c] <= -1.0:
            return math.inf
        return self.k0 + (1.0 - self.k0) * float(x[self.lay.psi].sum()) \
            - self.ratio * math.log2(1.0 + x[self.lay.beta_c])

    def grad(self, x):
        g = np.zeros(self.lay.n)
        g[self.lay.psi] = 1.0 - self.k0
        g[self.lay.beta_c] = -self.ratio / (math.log(2.0) * (1.0 + x[self.lay.beta_c]))
        return g

    def hess(self, x):
        h = np.zeros((self.lay.n, self.lay.n))
        h[self.lay.beta_c, self.lay.beta_c] = \
            self.ratio / (math.log(2.0) * (1.0 + x[self.lay.beta_c]) ** 2)
        return h


class _BitBudgetPrivate:
    """(1-k0)(1 - psi_k) - (n_k/m0) log2(1 + beta_k) <= 0."""

    def __init__(self, lay: _P4Layout, user: int, k0: float, ratio: float):
        self.lay = lay
        self.user = user
        self.k0 = k0
        self.ratio = ratio
        self.name = f"bits_private[{user}]"

    def value(self, x):
        bk = x[self.lay.beta[self.user]]
        if bk <= -1.0:
            return math.inf
        return (1.0 - self.k0) * (1.0 - x[self.lay.psi[self.user]]) \
            - self.ratio * math.log2(1.0 + bk)

    def grad(self, x):
        g = np.zeros(self.lay.n)
        g[self.lay.psi[self.user]] = -(1.0 - self.k0)
        bk = x[self.lay.beta[self.user]]
        g[self.lay.beta[self.user]] = -self.ratio / (math.log(2.0) * (1.0 + bk))
        return g

    def hess(self, x):
        h = np.zeros((self.lay.n, self.lay.n))
        bk = x[self.lay.beta[self.user]]
        h[self.lay.beta[self.user], self.lay.beta[self.user]] = \
            self.ratio / (math.log(2.0) * (1.0 + bk) ** 2)
        return h


class _QosRelaxed:
    """-d3 ln(q beta_k + 1) - beta_k / s <= ln(lam_eff).

    The exact log of the common-to-overall age-factor ratio: the beta_c
    terms cancel, leaving a decreasing function of beta_k alone, so this
    puts a floor under the private bit load. lam_eff carries the affine
    age-ratio correction evaluated at the previous iterate (see
    _effective_lambda), making the original ratio constraint hold at the
    SCA fixed point instead of only its relaxation.
    """

    def __init__(self, lay: _P4Layout, user: int, d3: float, qcoef: float,
                 s: float, lam_eff: float):
        self.lay = lay
        self.user = user
        self.d3 = d3
        self.q = qcoef
        self.s = s
        self.log_lam = math.log(lam_eff)
        self.name = f"qos_ratio[{user}]"

    def value(self, x):
        bk = x[self.lay.beta[self.user]]
        if self.q * bk <= -1.0:
            return math.inf
        return -self.d3 * math.log1p(self.q * bk) - bk / self.s - self.log_lam

    def grad(self, x):
        g = np.zeros(self.lay.n)
        bk = x[self.lay.beta[self.user]]
        g[self.lay.beta[self.user]] = -self.d3 * self.q / (1.0 + self.q * bk) \
            - 1.0 / self.s
        return g

    def hess(self, x):
        h = np.zeros((self.lay.n, self.lay.n))
        bk = x[self.lay.beta[self.user]]
        h[self.lay.beta[self.user], self.lay.beta[self.user]] = \
            self.d3 * self.q ** 2 / (1.0 + self.q * bk) ** 2
        return h


def _p4_stats(cfg: SystemConfig, budget: LinkBudget, alloc: PowerAllocation):
    stats = gamma_approx_params(cfg, budget, alloc)
    k = cfg.n_users
    d3 = np.zeros(k) if stats.d3 is None else np.nan_to_num(stats.d3)
    t3 = np.zeros(k) if stats.t3 is None else np.nan_to_num(stats.t3)
    return stats, d3, t3


def _effective_lambda(lam: float, h_overall: float) -> float:
    """Per-iteration bound on the age-factor ratio h_ck / h_k.

    The exact per-user constraint is h_ck <= lam h_k + (lam - 1)/2. Dropping
    the affine term (the plain relaxation) enlarges the feasible set for
    lam < 1 and the optimizer then exploits the gap, so the final point can
    violate the original ratio. Folding the term into the bound at the
    previous iterate's overall factor keeps the subproblem form unchanged
    while making the original constraint hold at the fixed point.
    """
    return lam + (lam - 1.0) / (2.0 * h_overall)


def surrogate_p4(iterate: ScaIterate, cfg: SystemConfig, budget: LinkBudget,
                 alloc: PowerAllocation, qos: Optional[QosParams]) \
        -> Tuple[ConvexProgram, _P4Layout]:
    """Convex subproblem for the rate-splitting step.

    Variables are the splits plus the relaxed rate thresholds (beta_c,
    beta_k); the objective linearizes the log age factor at the previous
    thresholds. qos=None drops the age-ratio constraint.
    """
    if cfg.info_bits_total < 1:
        raise ValueError("rate splitting needs a nonzero payload")
    if iterate.beta_c is None or iterate.beta is None:
        raise ValueError("expansion point carries no rate thresholds")
    k = cfg.n_users
    lay = _P4Layout(k)
    assert lay.n == 2 * k + 1, "step-2 subproblem must have 2K+1 variables"
    stats, d3, t3 = _p4_stats(cfg, budget, alloc)
    alpha = np.maximum(np.asarray(alloc.alpha, dtype=float), ALPHA_FLOOR)
    alpha_c = max(float(alloc.alpha_c), ALPHA_FLOOR)
    pxi = budget.p_n * budget.xi
    m1 = stats.own_gain_mean
    bc_t = float(iterate.beta_c)
    bk_t = np.asarray(iterate.beta, dtype=float)

    u = stats.d2 * stats.t2 / (stats.t2 * bc_t + alpha_c) + 1.0 / (pxi * alpha_c)
    w = d3 * t3 / (t3 * bk_t + m1 * alpha) + 1.0 / (pxi * m1 * alpha)
    c0 = stats.d2 * (np.log1p(stats.t2 * bc_t / alpha_c)
                     - stats.t2 * bc_t / (stats.t2 * bc_t + alpha_c)) \
        + d3 * (np.log1p(t3 * bk_t / (m1 * alpha))
                - t3 * bk_t / (t3 * bk_t + m1 * alpha))
    obj = _P4Objective(lay, {"u": u, "w": w, "c0": c0})

    m0 = cfg.info_bits_total
    ineqs = [_BitBudgetCommon(lay, cfg.multicast_fraction,
                              cfg.blocklength_common / m0)]
    for j in range(k):
        ineqs.append(_BitBudgetPrivate(lay, j, cfg.multicast_fraction,
                                       cfg.blocklength_private[j] / m0))
    if qos is not None:
        h_prev = iterate.qos_h
        if h_prev is None:
            h_prev = np.exp(p4_true_log_factor(
                lay.pack(iterate.psi, bc_t, bk_t), lay, cfg, budget, alloc))
        for j in range(k):
            lam_eff = _effective_lambda(qos.lam, float(h_prev[j]))
            if lam_eff <= 1e-9:
                raise StartFailure(
                    f"age-ratio bound {qos.lam} is unsatisfiable for user {j}")
            ineqs.append(_QosRelaxed(lay, j, d3[j], t3[j] / (m1 * alpha[j]),
                                     pxi[j] * m1 * alpha[j], lam_eff))
    lb = np.zeros(lay.n)
    ub = np.full(lay.n, np.inf)
    ub[lay.psi] = 1.0
    return ConvexProgram(n=lay.n, objective=obj, ineqs=ineqs, lb=lb, ub=ub), lay


def p4_true_log_factor(x: np.ndarray, lay: _P4Layout, cfg: SystemConfig,
                       budget: LinkBudget, alloc: PowerAllocation) -> np.ndarray:
    """ln of the overall age factor at given relaxed thresholds."""
    stats, d3, t3 = _p4_stats(cfg, budget, alloc)
    alpha = np.maximum(np.asarray(alloc.alpha, dtype=float), ALPHA_FLOOR)
    alpha_c = max(float(alloc.alpha_c), ALPHA_FLOOR)
    pxi = budget.p_n * budget.xi
    m1 = stats.own_gain_mean
    bc = x[lay.beta_c]
    bk = x[lay.beta]
    return stats.d2 * np.log1p(stats.t2 * bc / alpha_c) \
        + d3 * np.log1p(t3 * bk / (m1 * alpha)) \
        + bc / (pxi * alpha_c) + bk / (pxi * m1 * alpha)


# ---------------------------------------------------------------------------
# generic subproblem interface
# ---------------------------------------------------------------------------

def solve_convex_subproblem(prog: ConvexProgram, x0: np.ndarray,
                            tol: float = 1e-8, max_iter: int = 200):
    """Solve one convex subproblem to the given KKT tolerance."""
    return solve(prog, x0, tol=tol, max_iter=max_iter)


# ---------------------------------------------------------------------------
# SCA drivers
# ---------------------------------------------------------------------------

def _objective(cfg, budget, alloc, split) -> float:
    return analytic_aaoi(cfg, budget, None, alloc, split).mean_overall


def _default_sca_tol(cfg: SystemConfig) -> float:
    return 1e-4 * cfg.slot_duration_s


def optimize_power(cfg: SystemConfig, budget: LinkBudget, split: RateSplit,
                   alpha0: Optional[PowerAllocation] = None,
                   sca_tol: Optional[float] = None,
                   max_iter: int = DEFAULT_MAX_ITER,
                   subproblem_tol: float = 1e-8) \
        -> Tuple[PowerAllocation, List[float]]:
    """Step 1: SCA over the power fractions with the rate split frozen.

    The expansion point of every iteration carries consistent auxiliaries,
    which makes each surrogate solve a descent step on the true objective;
    the returned trace of true objective values is nonincreasing.
    """
    if sca_tol is None:
        sca_tol = _default_sca_tol(cfg)
    alloc = alpha0 if alpha0 is not None else uniform_allocation(cfg, 0.5)
    trace = [_objective(cfg, budget, alloc, split)]

    def _project(alpha_c, alpha):
        alpha = np.maximum(alpha, ALPHA_FLOOR)
        alpha_c = max(alpha_c, ALPHA_FLOOR)
        total = alpha_c + alpha.sum()
        return PowerAllocation(alpha_c=alpha_c / total, alpha=alpha / total)

    for _ in range(max_iter):
        it = consistent_iterate(cfg, budget, alloc, split)
        prog, lay, _ = surrogate_p2(it, cfg, budget, split)
        res = solve_convex_subproblem(prog, lay.pack(it), tol=subproblem_tol)
        cand = _project(res.x[lay.alpha_c], res.x[lay.alpha])
        obj = _objective(cfg, budget, cand, split)
        # the surrogate is conservative; extrapolating along the SCA step
        # often keeps descending and cuts the iteration count
        step_c = cand.alpha_c - alloc.alpha_c
        step = cand.alpha - alloc.alpha
        for gamma in (2.0, 4.0, 8.0):
            trial = _project(alloc.alpha_c + gamma * step_c,
                             alloc.alpha + gamma * step)
            trial_obj = _objective(cfg, budget, trial, split)
            if trial_obj < obj:
                cand, obj = trial, trial_obj
            else:
                break
        if obj > trace[-1] + 1e-12:
            break  # solver noise; keep the previous certified point
        alloc = cand
        trace.append(obj)
        if abs(trace[-1] - trace[-2]) < sca_tol:
            break
    return alloc, trace


def _defining_thresholds(cfg: SystemConfig, split: RateSplit):
    common, private = code_params_from_split(cfg, split)
    return common.rate_threshold, \
        np.array([p.rate_threshold for p in private])


def _qos_beta_floor(d3, qcoef, s, lam) -> float:
    """Smallest beta_k satisfying the relaxed age-ratio constraint."""
    if lam >= 1.0:
        return 0.0
    log_lam = math.log(lam)

    def fn(beta):
        return -d3 * math.log1p(qcoef * beta) - beta / s - log_lam

    hi = max(s, 1.0)
    while fn(hi) > 0:
        hi *= 2.0
        if hi > 1e12:
            return hi
    return float(brentq(fn, 0.0, hi, xtol=1e-12))


def check_qos(cfg: SystemConfig, budget: LinkBudget, alloc: PowerAllocation,
              split: RateSplit, qos: QosParams) -> bool:
    """Original constraint: common AAoI <= lam * overall AAoI per user."""
    ages = analytic_aaoi(cfg, budget, None, alloc, split)
    if not np.all(np.isfinite(ages.aaoi_overall)):
        return False
    return bool(np.all(ages.aaoi_common
                       <= qos.lam * ages.aaoi_overall + qos.feasibility_tol))


def optimize_ratesplit(cfg: SystemConfig, budget: LinkBudget,
                       alloc: PowerAllocation, split0: RateSplit,
                       qos: Optional[QosParams],
                       sca_tol: Optional[float] = None,
                       max_iter: int = DEFAULT_MAX_ITER,
                       subproblem_tol: float = 1e-8) \
        -> Tuple[RateSplit, List[float]]:
    """Step 2: SCA over the rate splits with the power allocation frozen.

    When the incoming split violates the age-ratio constraint the first
    iteration restores feasibility and may increase the objective; from the
    second iteration on the trace is nonincreasing. The final point is
    validated against the original constraint.
    """
    if sca_tol is None:
        sca_tol = _default_sca_tol(cfg)
    split = RateSplit(psi=np.clip(np.asarray(split0.psi, dtype=float), 0.0, 1.0))
    trace = [_objective(cfg, budget, alloc, split)]
    stats, d3, t3 = _p4_stats(cfg, budget, alloc)
    alpha = np.maximum(np.asarray(alloc.alpha, dtype=float), ALPHA_FLOOR)
    m1 = stats.own_gain_mean
    pxi = budget.p_n * budget.xi
    k = cfg.n_users

    def _feasible(s: RateSplit) -> bool:
        return qos is None or check_qos(cfg, budget, alloc, s, qos)

    lay = _P4Layout(k)

    def _age_factors(s: RateSplit) -> np.ndarray:
        bc, bk = _defining_thresholds(cfg, s)
        return np.exp(p4_true_log_factor(lay.pack(s.psi, bc, bk), lay,
                                         cfg, budget, alloc))

    for _ in range(max_iter):
        bc_t, bk_t = _defining_thresholds(cfg, split)
        it = consistent_iterate(cfg, budget, alloc, split)
        it.beta_c = bc_t
        it.beta = np.maximum(bk_t, 1e-12)
        # inner fixpoint on the effective ratio bound: the accepted candidate
        # satisfies the bound evaluated at its own age factors, so it meets
        # the original constraint, not just the relaxation
        h_bound = _age_factors(split)
        cand = split
        for _ in range(8):
            it.qos_h = h_bound
            prog, lay = surrogate_p4(it, cfg, budget, alloc, qos)
            beta_floor = np.zeros(k)
            if qos is not None:
                beta_floor = np.array([
                    _qos_beta_floor(d3[j], t3[j] / (m1 * alpha[j]),
                                    pxi[j] * m1 * alpha[j],
                                    _effective_lambda(qos.lam, float(h_bound[j])))
                    for j in range(k)])
            x0 = lay.pack(split.psi, bc_t * (1.0 + 1e-6) + 1e-9,
                          np.maximum(bk_t, beta_floor) * (1.0 + 1e-6) + 1e-9)
            res = solve_convex_subproblem(prog, x0, tol=subproblem_tol)
            cand = RateSplit(psi=np.clip(res.x[lay.psi], 0.0, 1.0))
            if qos is None:
                break
            h_cand = _age_factors(cand)
            if np.max(np.abs(h_cand - h_bound) / h_bound) < 1e-9:
                break
            h_bound = h_cand
        obj = _objective(cfg, budget, alloc, cand)
        if len(trace) >= 2 and obj > trace[-1] + 1e-12 and _feasible(split):
            break  # feasible and no longer improving
        split = cand
        trace.append(obj)
        if len(trace) >= 3 and abs(trace[-1] - trace[-2]) < sca_tol \
                and _feasible(split):
            break
    if qos is not None and not check_qos(cfg, budget, alloc, split, qos):
        raise StartFailure("rate-splitting step could not restore the "
                           "age-ratio constraint")
    return split, trace


def multistart_optimize(cfg: SystemConfig, budget: Optional[LinkBudget] = None,
                        qos: Optional[QosParams] = None,
                        starts: Optional[Sequence] = None,
                        extra_starts: Optional[Sequence] = None,
                        sca_tol: Optional[float] = None,
                        max_iter: int = DEFAULT_MAX_ITER) -> Solution:
    """Run the two-step pipeline from every start and keep the best result.

    starts may be RateSplit instances or scalar uniform split levels.
    extra_starts are (PowerAllocation, RateSplit) warm pairs: step 1 starts
    from the given powers instead of the uniform default. Ties are broken
    toward the lowest start index.
    """
    if budget is None:
        budget = validate_config(cfg)
    if qos is None:
        qos = QosParams(lam=cfg.qos_lambda)
    if starts is None:
        starts = DEFAULT_START_LEVELS
    start_list: List[Tuple[Optional[PowerAllocation], RateSplit]] = []
    for s in starts:
        split = s if isinstance(s, RateSplit) \
            else RateSplit(psi=np.full(cfg.n_users, float(s)))
        start_list.append((None, split))
    for alloc, split in (extra_starts or []):
        start_list.append((alloc, split))

    traces: List[StartTrace] = []
    candidates = []
    for idx, (alpha0, split0) in enumerate(start_list):
        trace = StartTrace(start_index=idx, psi_start=np.asarray(split0.psi))
        try:
            alloc, tr1 = optimize_power(cfg, budget, split0, alpha0=alpha0,
                                        sca_tol=sca_tol, max_iter=max_iter)
            trace.step1_objectives = tr1
            split, tr2 = optimize_ratesplit(cfg, budget, alloc, split0, qos,
                                            sca_tol=sca_tol, max_iter=max_iter)
            trace.step2_objectives = tr2
            candidates.append((tr2[-1], idx, alloc, split))
        except (SubproblemError, StartFailure) as exc:
            trace.status = f"failed: {exc}"
        traces.append(trace)
    if not candidates:
        details = "; ".join(f"start {t.start_index}: {t.status}" for t in traces)
        raise OptimizationError(f"all starting points failed ({details})")

    _, best_idx, alloc, split = min(candidates, key=lambda c: (c[0], c[1]))
    ages = analytic_aaoi(cfg, budget, None, alloc, split)
    return Solution(alloc=alloc, split=split, objective=ages.mean_overall,
                    aaoi_common=ages.aaoi_common,
                    aaoi_overall=ages.aaoi_overall, traces=traces,
                    selected_start=best_idx,
                    qos_satisfied=check_qos(cfg, budget, alloc, split, qos))
