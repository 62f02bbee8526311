"""Online mixed-integer MPC policies.

Two controllers share the :class:`StepResult` interface: a one-step
policy that screens every integer assignment against the learned
terminal value, and a full-horizon policy that calls branch-and-bound
once per sample with a shifted warm start.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field

import numpy as np

from .learner import LearnedValue
from .minlp import BnbOptions, branch_and_bound
from .models import ModelSpec
from .nlp import OPTIMAL, SolveOptions, solve_nlp
from .ocp import OcpSpec, build_full_ocp, build_myopic_ocp

SCREEN_TOL = 1e-8
TIE_TOL = 1e-12


def enumerate_integer_grid(model: ModelSpec) -> list[np.ndarray]:
    """All integer assignments in lexicographic domain order.

    ``n_z = 0`` yields a single empty assignment so pure-continuous
    models still enumerate exactly one candidate.
    """
    return [
        np.array(combo, dtype=float)
        for combo in itertools.product(*model.z_domains)
    ]


@dataclass(frozen=True)
class CandidateInfo:
    """Diagnostics for one screened integer assignment."""

    z: tuple
    objective: float
    violation: float


@dataclass
class StepResult:
    """One controller decision.

    ``feasible`` is False when every candidate violated the one-step
    constraints (the least-violating control is still returned so a
    closed loop can continue).  Full-horizon steps additionally carry
    the incumbent decision vector and root duals for warm starting the
    next call.
    """

    w_star: np.ndarray
    objective: float
    wall_time: float
    feasible: bool
    status: str = "optimal"
    candidates: tuple[CandidateInfo, ...] = ()
    plan: np.ndarray | None = None
    root_nu: np.ndarray | None = None
    root_lam: np.ndarray | None = None
    nodes: int = 0


@dataclass(frozen=True)
class MyopicController:
    """One-step policy: stage cost plus learned quadratic terminal value.

    The integer grid is enumerated exhaustively; with no continuous
    channels (both benchmark models) each candidate is a direct function
    evaluation and the returned minimizer is exact.
    """

    model: ModelSpec
    Q: np.ndarray
    R: np.ndarray
    x_ref: np.ndarray
    learned: LearnedValue
    w_ref: np.ndarray | None = None
    steps_per_sample: int = 1
    solve_options: SolveOptions = field(default_factory=SolveOptions)
    grid: tuple[np.ndarray, ...] = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(enumerate_integer_grid(self.model)))

    def step(self, x_now) -> StepResult:
        return myopic_step(self, x_now)


def _screen_candidate(prob, z, n_u, opts):
    """Evaluate one integer assignment; returns (w, objective, violation)."""
    if n_u == 0:
        f, _, g = prob.eval(z)
        viol = float(g.max()) if g.size else 0.0
        return z, f, viol, True
    sub = prob.with_integer_bounds(z, z)
    guess = np.concatenate([prob.w_ref[:n_u], z])
    res = solve_nlp(sub, opts, x0=guess)
    if res.x is None:
        return None, np.inf, np.inf, False
    f, _, g = prob.eval(res.x)
    viol = float(g.max()) if g.size else 0.0
    return res.x, f, viol, res.status == OPTIMAL


def myopic_step(ctrl: MyopicController, x_now) -> StepResult:
    """Screen every integer assignment and return the feasible minimizer.

    Candidates whose successor state violates bounds beyond 1e-8 are
    discarded.  Objective ties within 1e-12 resolve to the smallest
    lexicographic assignment.  When every candidate is infeasible (a
    mismatched plant can push the state outside its box) the
    least-violating candidate is returned with ``feasible=False``.
    """
    t0 = time.perf_counter()
    m = ctrl.model
    prob = build_myopic_ocp(
        m, ctrl.Q, ctrl.R, ctrl.learned.P, x_now, ctrl.x_ref,
        w_ref=ctrl.w_ref, steps_per_sample=ctrl.steps_per_sample,
        validate_x_now=False,
    )
    best_w = best_f = None
    fallback_w = fallback_f = None
    fallback_viol = np.inf
    diags = []
    for z in ctrl.grid:
        w, f, viol, trusted = _screen_candidate(prob, z, m.n_u, ctrl.solve_options)
        diags.append(CandidateInfo(tuple(z.tolist()), f, viol))
        if w is None:
            continue
        if viol < fallback_viol:
            fallback_w, fallback_f, fallback_viol = w, f, viol
        if not trusted or viol > SCREEN_TOL:
            continue
        # lexicographic iteration order makes "strictly better" the tie rule
        if best_f is None or f < best_f - TIE_TOL:
            best_w, best_f = w, f
    wall = time.perf_counter() - t0
    if best_w is not None:
        return StepResult(
            w_star=np.asarray(best_w, dtype=float).copy(),
            objective=float(best_f), wall_time=wall, feasible=True,
            status="optimal", candidates=tuple(diags),
        )
    if fallback_w is None:
        # no candidate produced a point at all; hold the clipped reference
        w_ref = prob.w_ref
        z_fb = np.array(
            [dom[np.argmin([abs(v - w_ref[m.n_u + j]) for v in dom])]
             for j, dom in enumerate(m.z_domains)],
            dtype=float,
        )
        fallback_w = np.concatenate([w_ref[: m.n_u], z_fb])
        fallback_f, _, g = prob.eval(fallback_w)
        fallback_viol = float(g.max()) if g.size else 0.0
    return StepResult(
        w_star=np.asarray(fallback_w, dtype=float).copy(),
        objective=float(fallback_f), wall_time=wall, feasible=False,
        status="infeasible", candidates=tuple(diags),
    )


def full_minmpc_step(
    ocp: OcpSpec,
    x_now,
    opts: BnbOptions | None = None,
    warm: StepResult | None = None,
    solve_options: SolveOptions | None = None,
) -> StepResult:
    """One receding-horizon decision via branch-and-bound.

    ``warm`` shifts the previous incumbent by one stage (repeating the
    last stage), seeds the integer plan, and reuses the previous root
    duals; row structure is identical across calls so the duals line up.
    On an infeasible program the hull-clipped reference control is
    returned with ``feasible=False`` so a closed loop can continue.
    """
    t0 = time.perf_counter()
    prob = build_full_ocp(ocp, x_now, validate_x_init=False)
    lay = prob.layout
    x0 = z_seed = nu0 = lam0 = None
    if warm is not None and warm.plan is not None:
        X, W = lay.split(warm.plan)
        Xn = np.vstack([X[1:], X[-1:]])
        Wn = np.vstack([W[1:], W[-1:]])
        x0 = lay.join(Xn, Wn)
        z_seed = np.round(Wn[:, ocp.model.n_u:].ravel())
        nu0, lam0 = warm.root_nu, warm.root_lam
    res = branch_and_bound(
        ocp, x_now, opts=opts, solve_options=solve_options,
        x0=x0, nu0=nu0, lam0=lam0, z_seed=z_seed,
    )
    wall = time.perf_counter() - t0
    if res.x is None:
        m = ocp.model
        w_ref = ocp.w_ref
        z_fb = np.array(
            [dom[np.argmin([abs(v - w_ref[m.n_u + j]) for v in dom])]
             for j, dom in enumerate(m.z_domains)],
            dtype=float,
        )
        w_fb = np.concatenate([w_ref[: m.n_u], z_fb])
        return StepResult(
            w_star=w_fb, objective=np.inf, wall_time=wall, feasible=False,
            status=res.status, nodes=res.nodes,
        )
    _, W = lay.split(res.x)
    return StepResult(
        w_star=W[0].copy(), objective=float(res.objective), wall_time=wall,
        feasible=True, status=res.status, plan=res.x,
        root_nu=res.root_nu, root_lam=res.root_lam, nodes=res.nodes,
    )


@dataclass
class FullHorizonController:
    """Receding-horizon policy: branch-and-bound once per call.

    Carries the previous step's incumbent between calls so each search
    starts from the shifted plan, its integer sequence and the previous
    root duals. ``reset`` drops that state (new episode).
    """

    ocp: OcpSpec
    opts: BnbOptions | None = None
    solve_options: SolveOptions | None = None
    warm: StepResult | None = None

    @property
    def model(self) -> ModelSpec:
        return self.ocp.model

    def step(self, x_now) -> StepResult:
        res = full_minmpc_step(self.ocp, x_now, opts=self.opts,
                               warm=self.warm, solve_options=self.solve_options)
        self.warm = res if res.feasible else None
        return res

    def reset(self) -> None:
        self.warm = None


def short_horizon_controller(
    model: ModelSpec,
    Q,
    R,
    x_ref,
    w_ref=None,
    steps_per_sample: int = 1,
) -> MyopicController:
    """One-step MINMPC with the raw state weight as terminal penalty.

    The no-value-function baseline: equivalent to a horizon-1 program
    with terminal weight Q, so it shares the exact enumeration path.
    """
    Q = np.asarray(Q, dtype=float)
    anchor = LearnedValue(
        P=Q.copy(), eps=0.0, objective=0.0, r_stat_inf=0.0, r_comp_inf=0.0,
    )
    return MyopicController(
        model=model, Q=Q, R=np.asarray(R, dtype=float),
        x_ref=np.asarray(x_ref, dtype=float), learned=anchor,
        w_ref=w_ref, steps_per_sample=steps_per_sample,
    )
