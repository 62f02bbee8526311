"""Branch-and-bound over integer controls with rounding heuristics.

Solves the transcribed mixed-integer optimal control problem by relaxing
the integer channels to their hull boxes and recursively tightening the
boxes. Incumbents are seeded by sum-up rounding of the root relaxation
(and optionally a caller-supplied integer trajectory). Node relaxations
reuse the multiplier-method solver; children inherit primal and dual warm
starts from their parent, which keeps per-node cost low because the
constraint row layout is identical across the whole tree.
"""

from __future__ import annotations

import csv
import heapq
import time
from dataclasses import dataclass

import numpy as np

from . import nlp
from .nlp import SolveOptions, solve_nlp
from .ocp import FullOcp, OcpSpec, build_full_ocp, rollout_guess

__all__ = [
    "OPTIMAL",
    "GAP_LIMIT",
    "NODE_LIMIT",
    "INFEASIBLE",
    "FEASIBILITY_TOL",
    "BnbOptions",
    "MinlpResult",
    "sum_up_rounding",
    "branch_and_bound",
]

OPTIMAL = "optimal"
GAP_LIMIT = "gap_limit"
NODE_LIMIT = "node_limit"
INFEASIBLE = "infeasible"

# Reported incumbents must violate no constraint by more than this.
FEASIBILITY_TOL = 1e-8

_BRANCHING_RULES = ("most-fractional",)
_NODE_ORDERS = ("dfs-then-best-bound",)
_MAX_CAVEATS = 25


@dataclass(frozen=True)
class BnbOptions:
    """Tolerances and budgets for the integer search.

    The search stops once the incumbent is provably within
    ``max(abs_gap, rel_gap * |incumbent|)`` of the best open bound, or when
    a budget runs out. ``branching`` and ``node_order`` name the supported
    strategies so configs stay explicit about what ran.
    """

    abs_gap: float = 1e-6
    rel_gap: float = 1e-4
    node_limit: int = 100_000
    time_limit: float | None = None
    branching: str = "most-fractional"
    node_order: str = "dfs-then-best-bound"
    integrality_tol: float = 1e-6

    def __post_init__(self):
        if self.abs_gap < 0.0 or self.rel_gap < 0.0:
            raise ValueError("optimality gaps must be nonnegative")
        if self.node_limit < 1:
            raise ValueError("node_limit must be at least 1")
        if self.time_limit is not None and self.time_limit <= 0.0:
            raise ValueError("time_limit must be positive when set")
        if self.branching not in _BRANCHING_RULES:
            raise ValueError(f"unknown branching rule {self.branching!r}")
        if self.node_order not in _NODE_ORDERS:
            raise ValueError(f"unknown node order {self.node_order!r}")
        if not 0.0 < self.integrality_tol < 0.5:
            raise ValueError("integrality_tol must lie in (0, 0.5)")


@dataclass
class MinlpResult:
    """Outcome of a branch-and-bound run.

    ``x`` is the best decision vector with exactly integral z found so far
    (``None`` when no incumbent exists) and ``bound`` is a global lower
    bound on the optimal objective. Root-relaxation duals are kept so
    receding-horizon callers can warm-start the next call. ``caveats``
    records node solves whose bounds could not be certified.
    """

    status: str
    x: np.ndarray | None
    objective: float
    bound: float
    nodes: int
    wall_time: float
    caveats: tuple[str, ...] = ()
    root_nu: np.ndarray | None = None
    root_lam: np.ndarray | None = None

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL

    @property
    def gap(self) -> float:
        return self.objective - self.bound


def _nearest_member(dom: np.ndarray, v: float) -> float:
    """Closest value in a sorted domain, ties toward the larger member."""
    j = int(np.searchsorted(dom, v))
    if j == 0:
        return float(dom[0])
    if j == dom.size:
        return float(dom[-1])
    lo, hi = float(dom[j - 1]), float(dom[j])
    return hi if v - lo >= hi - v else lo


def sum_up_rounding(values, domain) -> np.ndarray:
    """Round a relaxed integer channel on a uniform time grid.

    Carries the accumulated difference between the relaxed channel and the
    emitted integers, and at every step emits the domain member nearest to
    the carry (ties toward the larger member). The emitted sequence tracks
    the running sum of the relaxed one to within half the largest domain
    gap.

    Args:
      values: relaxed channel over time, inside the domain hull.
      domain: admissible integer values, at least one.

    Returns:
      Integer array of the same length with entries from ``domain``.

    Raises:
      ValueError: empty domain, or a value outside the hull.
    """
    vals = np.asarray(values, dtype=float).ravel()
    dom = np.unique(np.asarray(tuple(domain), dtype=float))
    if dom.size == 0:
        raise ValueError("integer domain must be nonempty")
    if vals.size and (vals.min() < dom[0] - 1e-9 or vals.max() > dom[-1] + 1e-9):
        raise ValueError("relaxed values leave the domain hull")
    out = np.empty(vals.size, dtype=int)
    carry = 0.0
    for k, a in enumerate(vals):
        carry += a
        b = _nearest_member(dom, carry)
        out[k] = int(round(b))
        carry -= b
    return out


@dataclass
class _Node:
    z_lo: np.ndarray
    z_hi: np.ndarray
    bound: float
    depth: int
    x0: np.ndarray | None
    nu0: np.ndarray | None
    lam0: np.ndarray | None


def _violation(problem, v) -> float:
    _, c, g = problem.eval(v)
    viol = float(np.abs(c).max()) if c.size else 0.0
    if g.size:
        viol = max(viol, float(np.clip(g, 0.0, None).max()))
    return viol


def _complete_fixed_z(root: FullOcp, z: np.ndarray, sopts: SolveOptions,
                      seed=None, nu0=None, lam0=None):
    """Best feasible point with the integer channels pinned to ``z``.

    Returns ``(decision vector, objective)`` or ``None`` when the pinned
    problem is infeasible. Without continuous controls the trajectory is
    fully determined by the pins, so an exact rollout settles feasibility
    and keeps z exactly integral.
    """
    spec = root.spec
    z = np.asarray(z, dtype=float).ravel()
    if spec.model.n_u == 0:
        v = rollout_guess(root, z.reshape(spec.N, spec.model.n_z))
        if _violation(root, v) > FEASIBILITY_TOL:
            return None
        return v, float(root.eval(v)[0])
    pinned = root.with_integer_bounds(z, z)
    x0 = None
    if seed is not None:
        x0 = np.array(seed, dtype=float)
        x0[root.integer_indices] = z
    res = solve_nlp(pinned, sopts, x0=x0, nu0=nu0, lam0=lam0)
    if res.status == nlp.INFEASIBLE or res.feasibility > FEASIBILITY_TOL:
        return None
    return res.x, float(res.objective)


def _fractional_index(problem: FullOcp, node: _Node, v: np.ndarray, tol: float):
    """Most fractional integer coordinate of ``v`` within the node box.

    Returns ``(index or None, snapped members, clipped relaxed values)``;
    distance is to the nearest domain member and ties resolve to the
    earliest stage-major coordinate.
    """
    zvals = np.clip(v[problem.integer_indices], node.z_lo, node.z_hi)
    snapped = np.empty(zvals.size)
    best_j, best_d = None, tol
    for t, val in enumerate(zvals):
        dom = np.asarray(problem.integer_domains[t], dtype=float)
        m = _nearest_member(dom, float(val))
        snapped[t] = m
        d = abs(float(val) - m)
        if d > best_d:
            best_j, best_d = t, d
    return best_j, snapped, zvals


def _pin_split(problem: FullOcp, node: _Node, snapped: np.ndarray):
    """Split an integral-looking node whose completion failed.

    Pins the first unfixed coordinate to its snapped member and carves off
    the domain parts below and above it, so the box shrinks strictly and a
    fully pinned (hence exactly decidable) leaf is always reached.
    """
    for t in range(node.z_lo.size):
        if node.z_lo[t] < node.z_hi[t]:
            dom = np.asarray(problem.integer_domains[t], dtype=float)
            m = snapped[t]
            i = int(np.searchsorted(dom, m))
            children = []
            if i > 0 and dom[i - 1] >= node.z_lo[t]:
                lo, hi = node.z_lo.copy(), node.z_hi.copy()
                hi[t] = dom[i - 1]
                children.append(_Node(lo, hi, node.bound, node.depth + 1,
                                      node.x0, node.nu0, node.lam0))
            if i + 1 < dom.size and dom[i + 1] <= node.z_hi[t]:
                lo, hi = node.z_lo.copy(), node.z_hi.copy()
                lo[t] = dom[i + 1]
                children.append(_Node(lo, hi, node.bound, node.depth + 1,
                                      node.x0, node.nu0, node.lam0))
            lo, hi = node.z_lo.copy(), node.z_hi.copy()
            lo[t] = hi[t] = m
            children.append(_Node(lo, hi, node.bound, node.depth + 1,
                                  node.x0, node.nu0, node.lam0))
            return children
    return []


def branch_and_bound(
    ocp: OcpSpec,
    x_init,
    opts: BnbOptions | None = None,
    solve_options: SolveOptions | None = None,
    x0=None,
    nu0=None,
    lam0=None,
    z_seed=None,
    trace_path=None,
) -> MinlpResult:
    """Globally search the integer controls of a transcribed problem.

    Runs depth-first diving until the first incumbent, then switches to
    best-bound order. The root relaxation is seeded with ``x0``, ``nu0``
    and ``lam0`` (receding-horizon callers pass the previous solution);
    ``z_seed`` is an integer trajectory tried as an incumbent before any
    branching, and sum-up rounding of the root relaxation supplies a
    second candidate.

    Pruning trusts local relaxation objectives as lower bounds, which is
    exact for convex relaxations and heuristic otherwise; node solves that
    could not be certified are listed in ``caveats`` instead of silently
    trusted (their subtrees are searched without pruning).

    Args:
      ocp: problem data; integer channels are relaxed per node.
      x_init: state the horizon is anchored at.
      opts: search budgets and gaps.
      solve_options: forwarded to every node relaxation.
      x0, nu0, lam0: root warm start.
      z_seed: optional ``(N, n_z)`` integer trajectory for incumbent seeding.
      trace_path: optional CSV path receiving one row per node event.

    Returns:
      MinlpResult; on ``optimal`` the incumbent is within the configured
      gap of the reported bound.
    """
    t_start = time.perf_counter()
    opts = opts or BnbOptions()
    sopts = solve_options or SolveOptions()
    root = build_full_ocp(ocp, x_init, validate_x_init=False)
    n_int = root.integer_indices.size
    n_z = ocp.model.n_z

    inc_x, inc_obj = None, np.inf
    caveats: list[str] = []
    dropped_caveats = 0
    nodes = 0
    use_heap = False
    seq = 0
    open_list: list[tuple[float, int, _Node]] = [
        (-np.inf, seq,
         _Node(root.z_lower.copy(), root.z_upper.copy(), -np.inf, 0,
               None if x0 is None else np.array(x0, dtype=float),
               None if nu0 is None else np.array(nu0, dtype=float),
               None if lam0 is None else np.array(lam0, dtype=float))),
    ]
    root_nu = root_lam = None
    status = None
    final_bound = None

    trace_file = open(trace_path, "w", newline="") if trace_path else None
    writer = None
    if trace_file is not None:
        writer = csv.writer(trace_file)
        writer.writerow(["node", "depth", "bound", "incumbent", "decision"])

    def note(msg: str) -> None:
        nonlocal dropped_caveats
        if len(caveats) < _MAX_CAVEATS:
            caveats.append(msg)
        else:
            dropped_caveats += 1

    def trace(depth, bound, decision):
        if writer is not None:
            writer.writerow([nodes, depth, f"{bound:.12g}", f"{inc_obj:.12g}", decision])

    def allowance() -> float:
        return max(opts.abs_gap, opts.rel_gap * abs(inc_obj))

    def push(node: _Node) -> None:
        nonlocal seq
        seq += 1
        entry = (node.bound, seq, node)
        if use_heap:
            heapq.heappush(open_list, entry)
        else:
            open_list.append(entry)

    def offer(candidate) -> bool:
        """Adopt a completion as incumbent when it improves the best one."""
        nonlocal inc_x, inc_obj, use_heap
        if candidate is None:
            return False
        v, obj = candidate
        if obj < inc_obj:
            inc_x, inc_obj = v, obj
            if not use_heap:
                heapq.heapify(open_list)
                use_heap = True
            return True
        return False

    try:
        while open_list:
            best_open = open_list[0][0] if use_heap else min(e[0] for e in open_list)
            if inc_x is not None and inc_obj - best_open <= allowance():
                status, final_bound = OPTIMAL, min(best_open, inc_obj)
                break
            if opts.time_limit is not None and time.perf_counter() - t_start > opts.time_limit:
                status, final_bound = GAP_LIMIT, best_open
                break
            if nodes >= opts.node_limit:
                status, final_bound = NODE_LIMIT, best_open
                break

            _, _, node = heapq.heappop(open_list) if use_heap else open_list.pop()
            if inc_x is not None and node.bound >= inc_obj - allowance():
                trace(node.depth, node.bound, "pruned")
                continue

            prob = root.with_integer_bounds(node.z_lo, node.z_hi)
            guess = rollout_guess(prob) if node.x0 is None else node.x0
            res = solve_nlp(prob, sopts, x0=guess, nu0=node.nu0, lam0=node.lam0)
            nodes += 1

            if node.depth == 0:
                root_nu, root_lam = res.nu, res.lam

            if res.status == nlp.INFEASIBLE:
                trace(node.depth, np.inf, "infeasible")
                if node.depth == 0:
                    status, final_bound = INFEASIBLE, np.inf
                    break
                continue

            if res.status == nlp.OPTIMAL:
                bound = float(res.objective)
            else:
                # Uncertified relaxation: keep searching the subtree but
                # never prune siblings with its objective.
                bound = -np.inf
                note(f"node {nodes}: relaxation ended {res.status}, bound not certified")
            node.bound = bound

            if node.depth == 0:
                if z_seed is not None:
                    offer(_complete_fixed_z(root, np.asarray(z_seed, dtype=float),
                                            sopts, seed=res.x, nu0=res.nu, lam0=res.lam))
                if n_int:
                    zrel = np.clip(res.x[root.integer_indices], node.z_lo, node.z_hi)
                    Z = zrel.reshape(ocp.N, n_z)
                    sur = np.column_stack([
                        sum_up_rounding(Z[:, j], ocp.model.z_domains[j])
                        for j in range(n_z)
                    ]).ravel()
                    offer(_complete_fixed_z(root, sur, sopts,
                                            seed=res.x, nu0=res.nu, lam0=res.lam))

            if inc_x is not None and bound >= inc_obj - allowance():
                trace(node.depth, bound, "fathomed")
                continue

            j, snapped, zrel = _fractional_index(root, node, res.x, opts.integrality_tol)
            if j is None:
                got = offer(_complete_fixed_z(root, snapped, sopts,
                                              seed=res.x, nu0=res.nu, lam0=res.lam))
                if got:
                    trace(node.depth, bound, "incumbent")
                    continue
                children = _pin_split(root, node, snapped)
                if not children:
                    trace(node.depth, bound, "fathomed")
                    continue
                trace(node.depth, bound, "pin-split")
                for child in children:
                    child.x0, child.nu0, child.lam0 = res.x, res.nu, res.lam
                    child.bound = bound
                    push(child)
                continue

            dom = np.asarray(root.integer_domains[j], dtype=float)
            vj = float(zrel[j])
            i = int(np.searchsorted(dom, vj))
            lo_m = float(dom[max(i - 1, 0)])
            hi_m = float(dom[min(i, dom.size - 1)])
            lo_child = _Node(node.z_lo.copy(), node.z_hi.copy(), bound,
                             node.depth + 1, res.x, res.nu, res.lam)
            lo_child.z_hi[j] = lo_m
            hi_child = _Node(node.z_lo.copy(), node.z_hi.copy(), bound,
                             node.depth + 1, res.x, res.nu, res.lam)
            hi_child.z_lo[j] = hi_m
            trace(node.depth, bound, f"branch z[{j}]")
            # Dive toward the child containing the rounded value first.
            if vj - lo_m >= hi_m - vj:
                push(lo_child)
                push(hi_child)
            else:
                push(hi_child)
                push(lo_child)

        if status is None:
            if inc_x is not None:
                status, final_bound = OPTIMAL, inc_obj
            else:
                status, final_bound = INFEASIBLE, np.inf
    finally:
        if trace_file is not None:
            trace_file.close()

    if dropped_caveats:
        note(f"{dropped_caveats} further uncertified nodes")
    return MinlpResult(
        status=status,
        x=inc_x,
        objective=float(inc_obj),
        bound=float(final_bound),
        nodes=nodes,
        wall_time=time.perf_counter() - t_start,
        caveats=tuple(caveats),
        root_nu=root_nu,
        root_lam=root_lam,
    )
