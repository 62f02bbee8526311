"""Augmented Lagrangian solver for smooth constrained programs.

Problems follow a small structural protocol: attributes ``n_dec``, ``n_eq``,
``n_ineq`` plus ``eval(v) -> (f, c, g)`` with equalities ``c = 0`` and
inequalities ``g <= 0``, and ``eval_with_derivatives(v)`` returning
``(f, c, g, grad, Jeq, Jineq)``. Both transcription classes in
:mod:`mimpc.ocp` satisfy it; :class:`FunctionalProblem` adapts plain
callables (used heavily in tests).

The outer loop is a safeguarded multiplier method: inequalities enter
through the one-sided quadratic term ``max(0, lam + rho*g)^2`` so the
inner subproblem stays smooth and unconstrained, solved by L-BFGS-B.
Multipliers are updated only on sufficient feasibility progress,
otherwise the penalty grows.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import minimize

from .models import ModelError

OPTIMAL = "optimal"
MAX_ITERS = "max_iters"
INFEASIBLE = "infeasible"
SINGULAR = "singular"

_BIG = 1e20


@dataclass(frozen=True)
class SolveOptions:
    kkt_tol: float = 1e-6
    max_outer_iters: int = 50
    max_inner_iters: int = 500
    penalty_growth: float = 10.0
    penalty_init: float = 10.0
    penalty_max: float = 1e10
    lbfgs_memory: int = 30

    def __post_init__(self):
        if min(
            self.kkt_tol, self.max_outer_iters, self.max_inner_iters,
            self.penalty_growth, self.penalty_init, self.penalty_max,
            self.lbfgs_memory,
        ) <= 0:
            raise ValueError("solver options must be positive")
        if self.kkt_tol >= 1:
            raise ValueError("kkt_tol must be < 1")


@dataclass
class SolveResult:
    status: str
    x: np.ndarray
    nu: np.ndarray
    lam: np.ndarray
    objective: float
    stationarity: float
    feasibility: float
    complementarity: float
    outer_iters: int
    inner_iters: int
    wall_time: float

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


class FunctionalProblem:
    """Adapts plain callables to the problem protocol."""

    def __init__(
        self,
        n_dec: int,
        objective: Callable,
        gradient: Callable,
        eq: Callable | None = None,
        eq_jac: Callable | None = None,
        ineq: Callable | None = None,
        ineq_jac: Callable | None = None,
        n_eq: int = 0,
        n_ineq: int = 0,
    ):
        self.n_dec, self.n_eq, self.n_ineq = n_dec, n_eq, n_ineq
        self._f, self._g = objective, gradient
        self._c, self._Jc = eq, eq_jac
        self._h, self._Jh = ineq, ineq_jac

    def eval(self, v):
        v = np.asarray(v, dtype=float)
        c = np.asarray(self._c(v), float) if self._c else np.zeros(0)
        g = np.asarray(self._h(v), float) if self._h else np.zeros(0)
        return float(self._f(v)), c, g

    def eval_with_derivatives(self, v):
        v = np.asarray(v, dtype=float)
        f, c, g = self.eval(v)
        Jc = np.asarray(self._Jc(v), float) if self._Jc else np.zeros((0, self.n_dec))
        Jh = np.asarray(self._Jh(v), float) if self._Jh else np.zeros((0, self.n_dec))
        return f, c, g, np.asarray(self._g(v), float), Jc.reshape(self.n_eq, self.n_dec), Jh.reshape(self.n_ineq, self.n_dec)


def _proj_grad_norm(x, g, lb, ub) -> float:
    """Infinity norm of the gradient projected onto the feasible directions."""
    if g.size == 0:
        return 0.0
    pg = g.copy()
    at_lb = x <= lb
    at_ub = x >= ub
    pg[at_lb] = np.minimum(pg[at_lb], 0.0)
    pg[at_ub] = np.maximum(pg[at_ub], 0.0)
    return float(np.abs(pg).max())


def _bb_descent(fun, x0, lb, ub, gtol: float, max_steps: int = 80) -> np.ndarray:
    """Projected spectral-step gradient polish; returns the best iterate.

    Line-search methods stall once objective differences fall below the
    floating-point resolution of f; this descent uses only gradients, so
    it can push the stationarity norm down to near machine precision.
    """
    _, g = fun(x0)
    if g.size == 0 or not np.all(np.isfinite(g)):
        return x0
    n = _proj_grad_norm(x0, g, lb, ub)
    best_x, best_n = x0, n
    if n <= gtol:
        return x0

    def probe_step(x, n):
        # just large enough that the gradient difference carries curvature
        return 1e-8 * (1.0 + float(np.abs(x).max())) / max(n, 1e-16)

    x_prev, g_prev = x0, g
    alpha = probe_step(x0, n)
    for _ in range(max_steps):
        x = np.clip(x_prev - alpha * g_prev, lb, ub)
        _, g = fun(x)
        if not np.all(np.isfinite(g)):
            break
        n = _proj_grad_norm(x, g, lb, ub)
        if n < best_n:
            best_x, best_n = x, n
            if n <= gtol:
                break
        elif n > 1e8 * best_n:
            break
        s, y = x - x_prev, g - g_prev
        yy = float(y @ y)
        a = float(s @ y) / yy if yy > 0 else -1.0
        alpha = a if np.isfinite(a) and a > 1e-16 else probe_step(x, n)
        x_prev, g_prev = x, g
    return best_x


def check_kkt(problem, x, nu, lam) -> tuple[float, float, float]:
    """Infinity norms of the stationarity, feasibility and complementarity
    residuals at ``(x, nu, lam)``; independent of how the point was found."""
    x = np.asarray(x, dtype=float)
    nu = np.asarray(nu, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if nu.shape != (problem.n_eq,) or lam.shape != (problem.n_ineq,):
        raise ValueError("multiplier dimensions do not match the problem")
    _, c, g, grad, Jeq, Jineq = problem.eval_with_derivatives(x)
    r = grad.copy()
    if c.size:
        r += Jeq.T @ nu
    if g.size:
        r += Jineq.T @ lam
    stat = float(np.abs(r).max()) if r.size else 0.0
    feas = 0.0
    if c.size:
        feas = float(np.abs(c).max())
    if g.size:
        feas = max(feas, float(np.maximum(g, 0.0).max()))
    comp = float(np.abs(lam * g).max()) if g.size else 0.0
    return stat, feas, comp


def _box_from_rows(problem):
    """Split inequality rows into box bounds and general rows.

    Rows advertised through ``problem.bound_structure()`` touch a single
    variable each; they are folded into per-variable bounds the inner
    minimizer honors directly. Remaining rows go through the augmented
    Lagrangian. Returns (lb, ub, simple: (rows, cols, signs, offs), ns_rows).
    """
    n = problem.n_dec
    lb = np.full(n, -np.inf)
    ub = np.full(n, np.inf)
    structure = getattr(problem, "bound_structure", None)
    if structure is None or problem.n_ineq == 0:
        return lb, ub, None, np.arange(problem.n_ineq)
    rows, cols, signs, offs = structure()
    for col, sign, off in zip(cols, signs, offs):
        if sign < 0:  # off - v <= 0
            lb[col] = max(lb[col], off)
        else:  # v + off <= 0
            ub[col] = min(ub[col], -off)
    ns_rows = np.setdiff1d(np.arange(problem.n_ineq), rows)
    return lb, ub, (rows, cols, signs, offs), ns_rows


def _certify_multipliers(problem, x, lam_ns, ns_rows, simple, lb, ub):
    """Best first-order certificate at ``x``: least-squares equality
    multipliers over the bound-inactive coordinates, then the analytic
    nonnegative multipliers for active box rows.

    Any multipliers satisfying the KKT residual bounds certify the point,
    so the sharpest available estimate is the right one to report.
    """
    _, _, g, grad, Jeq, Jineq = problem.eval_with_derivatives(x)
    r = grad.copy()
    if ns_rows.size:
        r += Jineq[ns_rows].T @ lam_ns
    free = (x > lb) & (x < ub)
    if problem.n_eq:
        At = Jeq[:, free].T
        nu, *_ = np.linalg.lstsq(At, -r[free], rcond=None)
        r += Jeq.T @ nu
    else:
        nu = np.zeros(0)
    lam = np.zeros(problem.n_ineq)
    lam[ns_rows] = lam_ns
    if simple is not None:
        rows, cols, signs, _ = simple
        active = np.abs(g[rows]) <= 1e-8
        lam[rows[active]] = np.maximum(0.0, -r[cols[active]] * signs[active])
    return nu, lam


def solve_nlp(
    problem,
    opts: SolveOptions | None = None,
    x0=None,
    nu0=None,
    lam0=None,
) -> SolveResult:
    """Drive the multiplier method to a first-order point.

    Warm starts: ``x0`` primal, ``nu0``/``lam0`` duals (``lam0`` is clipped
    to be nonnegative). All-zero defaults reproduce identical runs.
    """
    t0 = time.perf_counter()
    opts = opts or SolveOptions()
    n = problem.n_dec
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    if x.shape != (n,):
        raise ValueError(f"initial guess has shape {x.shape}, expected ({n},)")
    nu = np.zeros(problem.n_eq) if nu0 is None else np.array(nu0, dtype=float)
    lam_full = (
        np.zeros(problem.n_ineq)
        if lam0 is None
        else np.maximum(np.array(lam0, dtype=float), 0.0)
    )

    lb, ub, simple, ns_rows = _box_from_rows(problem)
    if np.any(lb > ub):
        worst = float((lb - ub).max())
        return SolveResult(
            INFEASIBLE, x, nu, lam_full, np.inf, np.inf, worst, np.inf,
            0, 0, time.perf_counter() - t0,
        )
    x = np.clip(x, lb, ub)
    lam = lam_full[ns_rows]
    bounds = list(zip(lb, ub))

    rho = opts.penalty_init
    gtol = 1e-3
    gtol_floor = 0.3 * opts.kkt_tol
    feas_prev = np.inf
    stall = 0
    total_inner = 0
    singular = False
    best = (np.inf, x.copy(), nu.copy(), lam_full.copy(), np.inf, np.inf, np.inf)

    for outer in range(1, opts.max_outer_iters + 1):
        def al_value_and_grad(v, nu=nu, lam=lam, rho=rho):
            try:
                f, c, g, grad, Jeq, Jineq = problem.eval_with_derivatives(v)
            except (ModelError, FloatingPointError):
                return _BIG, np.zeros_like(v)
            L = f
            gL = grad.copy()
            if c.size:
                L += nu @ c + 0.5 * rho * (c @ c)
                gL += Jeq.T @ (nu + rho * c)
            if ns_rows.size:
                g_ns = g[ns_rows]
                lam_hat = np.maximum(0.0, lam + rho * g_ns)
                L += (lam_hat @ lam_hat - lam @ lam) / (2.0 * rho)
                gL += Jineq[ns_rows].T @ lam_hat
            if not (np.isfinite(L) and np.all(np.isfinite(gL))):
                return _BIG, np.zeros_like(v)
            return L, gL

        gtol_eff = max(gtol, gtol_floor)
        inner = minimize(
            al_value_and_grad,
            x,
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options=dict(
                maxiter=opts.max_inner_iters,
                maxfun=20 * opts.max_inner_iters,
                ftol=1e-18,
                gtol=gtol_eff,
                maxls=50,
                maxcor=opts.lbfgs_memory,
            ),
        )
        x = np.clip(inner.x, lb, ub)
        total_inner += int(inner.nit)
        if inner.jac.size and _proj_grad_norm(x, inner.jac, lb, ub) > gtol_eff:
            x = _bb_descent(al_value_and_grad, x, lb, ub, gtol_eff)

        try:
            _, c, g = problem.eval(x)
        except ModelError:
            singular = True
            break
        nu_step = nu + rho * c
        lam_ns_hat = np.maximum(0.0, lam + rho * g[ns_rows])
        try:
            nu_hat, lam_hat = _certify_multipliers(problem, x, lam_ns_hat, ns_rows, simple, lb, ub)
            stat, feas, comp = check_kkt(problem, x, nu_hat, lam_hat)
        except ModelError:
            singular = True
            break
        f_now = problem.eval(x)[0]
        # best iterate: lower violation wins, objective breaks near-ties
        if (feas, f_now) < (best[4], best[0]):
            best = (f_now, x.copy(), nu_hat.copy(), lam_hat.copy(), feas, stat, comp)

        if stat <= opts.kkt_tol and feas <= opts.kkt_tol and comp <= opts.kkt_tol:
            return SolveResult(
                OPTIMAL, x, nu_hat, lam_hat, f_now, stat, feas, comp,
                outer, total_inner, time.perf_counter() - t0,
            )

        if feas <= max(opts.kkt_tol, 0.25 * feas_prev):
            nu, lam = nu_step, lam_ns_hat
            gtol = max(0.1 * gtol, gtol_floor)
        else:
            rho = min(rho * opts.penalty_growth, opts.penalty_max)

        if rho >= opts.penalty_max and feas > 1e3 * opts.kkt_tol:
            stall += 1
            if stall >= 5:
                return SolveResult(
                    INFEASIBLE, x, nu_hat, lam_hat, f_now, stat, feas, comp,
                    outer, total_inner, time.perf_counter() - t0,
                )
        else:
            stall = 0
        feas_prev = feas

    if singular:
        return SolveResult(
            SINGULAR, x, nu, lam_full, np.inf, np.inf, np.inf, np.inf,
            outer, total_inner, time.perf_counter() - t0,
        )
    f_b, x_b, nu_b, lam_b, feas_b, stat_b, comp_b = best
    return SolveResult(
        MAX_ITERS, x_b, nu_b, lam_b, f_b, stat_b, feas_b, comp_b,
        opts.max_outer_iters, total_inner, time.perf_counter() - t0,
    )
