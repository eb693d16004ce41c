"""Small dense primal-dual interior-point solver for smooth convex programs.

    minimize f(x)
    s.t.     A x = b
             g_i(x) <= 0          (smooth convex, with gradients and Hessians)
             lb <= x <= ub

Inequalities are handled through slacks (g(x) + s = 0, s > 0) with a
log-barrier on s, so the starting point only needs to be finite: primal
feasibility is driven to zero by the Newton iteration. Problems here are a
few dozen variables, so all linear algebra is dense.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np


class SubproblemError(RuntimeError):
    """Raised when the interior-point iteration cannot reach the tolerance."""


# ---------------------------------------------------------------------------
# function objects
# ---------------------------------------------------------------------------

class QuadraticFn:
    """f(x) = 0.5 x^T Q x + q^T x + r with constant (PSD) Hessian Q."""

    def __init__(self, Q: Optional[np.ndarray], q: np.ndarray, r: float,
                 name: str = "quadratic"):
        self.Q = None if Q is None else np.asarray(Q, dtype=float)
        self.q = np.asarray(q, dtype=float)
        self.r = float(r)
        self.name = name

    def value(self, x: np.ndarray) -> float:
        val = float(self.q @ x) + self.r
        if self.Q is not None:
            val += 0.5 * float(x @ self.Q @ x)
        return val

    def grad(self, x: np.ndarray) -> np.ndarray:
        g = self.q.copy()
        if self.Q is not None:
            g += self.Q @ x
        return g

    def hess(self, x: np.ndarray) -> np.ndarray:
        if self.Q is None:
            return np.zeros((self.q.size, self.q.size))
        return self.Q


@dataclass
class ConvexProgram:
    """Problem description consumed by `solve`; also inspected by tests."""

    n: int
    objective: object
    ineqs: List[object] = field(default_factory=list)
    eq_a: Optional[np.ndarray] = None
    eq_b: Optional[np.ndarray] = None
    lb: Optional[np.ndarray] = None
    ub: Optional[np.ndarray] = None
    var_names: Optional[Sequence[str]] = None

    def constraint_values(self, x: np.ndarray) -> np.ndarray:
        return np.array([c.value(x) for c in self.ineqs])


@dataclass
class SolveResult:
    x: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int
    converged: bool


def _box_as_ineq_count(prog: ConvexProgram):
    lb = np.full(prog.n, -np.inf) if prog.lb is None else np.asarray(prog.lb, float)
    ub = np.full(prog.n, np.inf) if prog.ub is None else np.asarray(prog.ub, float)
    return lb, ub


def _eval_ineqs(prog, x, lb, ub, lo_idx, hi_idx):
    """Stack smooth inequalities and active box bounds into one vector."""
    vals = [c.value(x) for c in prog.ineqs]
    g = np.concatenate([np.asarray(vals, dtype=float),
                        lb[lo_idx] - x[lo_idx], x[hi_idx] - ub[hi_idx]])
    return g


def solve(prog: ConvexProgram, x0: np.ndarray, tol: float = 1e-8,
          max_iter: int = 200) -> SolveResult:
    """Primal-dual interior-point iteration.

    Terminates when the KKT residual (stationarity, equality residual,
    inequality violation, complementarity; infinity norm) drops below tol.
    Raises SubproblemError with a diagnostic when it cannot.
    """
    n = prog.n
    x = np.array(x0, dtype=float)
    if x.shape != (n,):
        raise ValueError(f"x0 must have shape ({n},)")
    lb, ub = _box_as_ineq_count(prog)
    lo_idx = np.flatnonzero(np.isfinite(lb))
    hi_idx = np.flatnonzero(np.isfinite(ub))
    # keep the start strictly inside the box so barrier slacks stay positive
    span = np.where(np.isfinite(lb) & np.isfinite(ub), (ub - lb) * 1e-4, 1e-4)
    x[lo_idx] = np.maximum(x[lo_idx], lb[lo_idx] + span[lo_idx])
    x[hi_idx] = np.minimum(x[hi_idx], ub[hi_idx] - span[hi_idx])

    a_eq = prog.eq_a
    if a_eq is not None:
        a_eq = np.atleast_2d(np.asarray(a_eq, dtype=float))
        b_eq = np.atleast_1d(np.asarray(prog.eq_b, dtype=float))
        p = a_eq.shape[0]
    else:
        b_eq = None
        p = 0

    n_smooth = len(prog.ineqs)
    m = n_smooth + lo_idx.size + hi_idx.size

    def residuals(x, s, y, z):
        grad_f = prog.objective.grad(x)
        r_d = grad_f.copy()
        if p:
            r_d += a_eq.T @ y
        if m:
            jac = _jacobian(x)
            r_d += jac.T @ z
        r_e = (a_eq @ x - b_eq) if p else np.zeros(0)
        g = _eval_ineqs(prog, x, lb, ub, lo_idx, hi_idx) if m else np.zeros(0)
        r_i = g + s
        r_c = s * z
        return r_d, r_e, r_i, r_c, g

    def _jacobian(x):
        rows = [c.grad(x) for c in prog.ineqs]
        jac = np.zeros((m, n))
        for i, row in enumerate(rows):
            jac[i] = row
        for i, j in enumerate(lo_idx):
            jac[n_smooth + i, j] = -1.0
        for i, j in enumerate(hi_idx):
            jac[n_smooth + lo_idx.size + i, j] = 1.0
        return jac

    if m:
        g0 = _eval_ineqs(prog, x, lb, ub, lo_idx, hi_idx)
        if not np.all(np.isfinite(g0)):
            raise SubproblemError("constraints not finite at the start point")
        s = np.maximum(-g0, 1e-4)
        z = np.maximum(1e-2, 1.0 / s)
        z = np.minimum(z, 1e6)
    else:
        s = np.zeros(0)
        z = np.zeros(0)
    y = np.zeros(p)

    delta = 0.0
    kkt = math.inf
    for it in range(max_iter):
        r_d, r_e, r_i, r_c, g = residuals(x, s, y, z)
        viol = np.max(g, initial=0.0)
        comp = np.max(r_c, initial=0.0)
        kkt = max(np.max(np.abs(r_d), initial=0.0),
                  np.max(np.abs(r_e), initial=0.0), viol, comp)
        if kkt < tol:
            return SolveResult(x=x, objective=prog.objective.value(x),
                               kkt_residual=kkt, iterations=it, converged=True)

        mu = 0.1 * (s @ z) / m if m else 0.0
        hess = prog.objective.hess(x).copy()
        if m:
            jac = _jacobian(x)
            for i, c in enumerate(prog.ineqs):
                if z[i]:
                    ch = c.hess(x)
                    if ch is not None:
                        hess += z[i] * ch
            w = z / s
            hess += (jac * w[:, None]).T @ jac
            rhs_x = -r_d - jac.T @ ((mu - s * z) / s + w * r_i)
        else:
            rhs_x = -r_d

        for attempt in range(12):
            reg = hess + (delta + 1e-12) * np.eye(n)
            if p:
                kkt_mat = np.block([[reg, a_eq.T],
                                    [a_eq, np.zeros((p, p))]])
                rhs = np.concatenate([rhs_x, -r_e])
            else:
                kkt_mat = reg
                rhs = rhs_x
            try:
                sol = np.linalg.solve(kkt_mat, rhs)
            except np.linalg.LinAlgError:
                delta = max(10.0 * delta, 1e-8)
                continue
            if np.all(np.isfinite(sol)):
                break
            delta = max(10.0 * delta, 1e-8)
        else:
            raise SubproblemError("KKT system remained singular "
                                  f"(kkt residual {kkt:.2e})")
        dx = sol[:n]
        dy = sol[n:] if p else np.zeros(0)
        if m:
            ds = -r_i - jac @ dx
            dz = (mu - s * z) / s - w * ds
            tau = 0.995
            with np.errstate(divide="ignore"):
                alpha_s = np.min(np.where(ds < 0, -tau * s / ds, np.inf),
                                 initial=1.0)
                alpha_z = np.min(np.where(dz < 0, -tau * z / dz, np.inf),
                                 initial=1.0)
            alpha_max = min(1.0, alpha_s, alpha_z)
        else:
            ds = dz = np.zeros(0)
            alpha_max = 1.0

        # backtracking on the full primal-dual residual norm
        merit0 = _merit(r_d, r_e, r_i, r_c, mu)
        alpha = alpha_max
        accepted = False
        for _ in range(40):
            xn = x + alpha * dx
            sn = s + alpha * ds
            yn = y + alpha * dy
            zn = z + alpha * dz
            trial = residuals(xn, sn, yn, zn)
            if all(np.all(np.isfinite(t)) for t in trial[:4]):
                merit = _merit(trial[0], trial[1], trial[2], trial[3], mu)
                if merit <= (1.0 - 1e-4 * alpha) * merit0 or merit < tol * 1e-3:
                    accepted = True
                    break
            alpha *= 0.5
        if not accepted:
            delta = max(10.0 * delta, 1e-8)
            alpha = min(alpha_max, 1e-8)
            xn, sn, yn, zn = x + alpha * dx, s + alpha * ds, y + alpha * dy, \
                z + alpha * dz
            if delta > 1e8:
                break
        x, s, y, z = xn, sn, yn, zn
        if m:
            s = np.maximum(s, 1e-300)
            z = np.maximum(z, 1e-300)
        delta = delta * 0.1 if accepted and delta > 0 else delta

    raise SubproblemError(
        f"interior-point iteration did not converge: kkt residual {kkt:.3e} "
        f"after {max_iter} iterations "
        f"(max inequality violation {np.max(_eval_ineqs(prog, x, lb, ub, lo_idx, hi_idx), initial=0.0):.3e})")


def _merit(r_d, r_e, r_i, r_c, mu):
    parts = [r_d, r_e, r_i, r_c - mu]
    return math.sqrt(sum(float(v @ v) for v in parts))
