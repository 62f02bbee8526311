"""Learning a quadratic cost-to-go from expert state-action pairs.

The one-step problem's first-order conditions are affine in the terminal
weight P and in the per-demo multipliers, so fitting P reduces to convex
least squares over stacked stationarity and complementarity residuals,
subject to P being symmetric with eigenvalues at least eps and the
multipliers nonnegative. The fit alternates exact block steps: nonnegative
least squares in the multipliers and PSD-projected least squares in P.
Exact two-block alternation on a smooth convex objective with separable
constraints converges to the global optimum; the result is certified by a
gradient-mapping norm before being reported as optimal.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import nnls

from .models import ModelSpec, rk4_step_with_jacobians
from .ocp import RowTag, build_myopic_ocp

__all__ = [
    "OPTIMAL",
    "MAX_ITERS",
    "DEMO_FEASIBILITY_TOL",
    "DemoPair",
    "Dataset",
    "ResidualSystem",
    "LearnerOptions",
    "LearnedValue",
    "assemble_residuals",
    "project_psd",
    "solve_psd_ls",
    "evaluate_residual_norms",
    "evaluate_system_norms",
]

OPTIMAL = "optimal"
MAX_ITERS = "max_iters"

# Demonstrations must respect the one-step constraints to this tolerance.
DEMO_FEASIBILITY_TOL = 1e-8


@dataclass(frozen=True)
class DemoPair:
    """One expert state-action sample.

    ``source`` tags which expert produced it (mixed-integer search or its
    continuous relaxation); the learner treats both identically.
    """

    x: np.ndarray
    w_star: np.ndarray
    source: str = "relaxed"

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float))
        object.__setattr__(self, "w_star", np.asarray(self.w_star, dtype=float))


@dataclass(frozen=True)
class Dataset:
    """Demonstrations plus the stage-cost data the expert optimized."""

    pairs: tuple[DemoPair, ...]
    model: ModelSpec
    Q: np.ndarray
    R: np.ndarray
    x_ref: np.ndarray
    w_ref: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple(self.pairs))
        if len(self.pairs) < 1:
            raise ValueError("dataset needs at least one demonstration")
        object.__setattr__(self, "Q", np.asarray(self.Q, dtype=float))
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float))
        object.__setattr__(self, "x_ref", np.asarray(self.x_ref, dtype=float).reshape(-1))
        w_ref = self.w_ref
        if w_ref is None:
            w_ref = np.zeros(self.model.n_w)
        object.__setattr__(self, "w_ref", np.asarray(w_ref, dtype=float).reshape(-1))
        n_x, n_w = self.model.n_x, self.model.n_w
        if self.x_ref.shape != (n_x,) or self.w_ref.shape != (n_w,):
            raise ValueError("reference dimensions do not match the model")
        for i, p in enumerate(self.pairs):
            if p.x.shape != (n_x,) or p.w_star.shape != (n_w,):
                raise ValueError(f"demo {i} has wrong state or control length")

    @property
    def M(self) -> int:
        return len(self.pairs)


def _sym_basis(n: int) -> list[np.ndarray]:
    """Symmetric coordinate matrices: diagonals, then upper off-diagonals."""
    basis = []
    for i in range(n):
        B = np.zeros((n, n))
        B[i, i] = 1.0
        basis.append(B)
    for i in range(n):
        for j in range(i + 1, n):
            B = np.zeros((n, n))
            B[i, j] = B[j, i] = 1.0
            basis.append(B)
    return basis


def _theta_to_matrix(theta: np.ndarray, n: int) -> np.ndarray:
    P = np.zeros((n, n))
    k = 0
    for i in range(n):
        P[i, i] = theta[k]
        k += 1
    for i in range(n):
        for j in range(i + 1, n):
            P[i, j] = P[j, i] = theta[k]
            k += 1
    return P


def _matrix_to_theta(P: np.ndarray) -> np.ndarray:
    n = P.shape[0]
    parts = [P[i, i] for i in range(n)]
    parts += [P[i, j] for i in range(n) for j in range(i + 1, n)]
    return np.array(parts)


@dataclass(frozen=True)
class ResidualSystem:
    """Per-demo affine residual maps of the one-step optimality system.

    For demo i with multipliers lam_i, the stationarity residual is
    ``A[i] @ theta + b[i] + G[i].T @ lam_i`` (theta are the symmetric
    coordinates of P; the constant part b is the control gradient of the
    stage cost) and the complementarity residual is ``g[i] * lam_i``.
    """

    A: np.ndarray  # (M, n_w, n_theta)
    b: np.ndarray  # (M, n_w)
    G: np.ndarray  # (M, n_g, n_w)
    g: np.ndarray  # (M, n_g)
    n_x: int
    row_tags: tuple[RowTag, ...]

    @property
    def M(self) -> int:
        return self.A.shape[0]

    @property
    def n_w(self) -> int:
        return self.A.shape[1]

    @property
    def n_g(self) -> int:
        return self.g.shape[1]

    @property
    def n_theta(self) -> int:
        return self.A.shape[2]

    @property
    def stacked_length(self) -> int:
        return self.M * (self.n_w + self.n_g)

    def lipschitz(self) -> float:
        """Exact P-block gradient Lipschitz constant in Frobenius geometry.

        The objective is quadratic in the symmetric coordinates theta with
        Hessian 2 sum_i A_i' A_i; off-diagonal coordinates occupy two matrix
        positions, so the metric correction rescales them by sqrt(2).
        """
        H = 2.0 * np.einsum("iwt,iws->ts", self.A, self.A)
        scale = np.ones(self.n_theta)
        scale[self.n_x:] = np.sqrt(2.0)
        H = H / scale[:, None] / scale[None, :]
        return float(np.linalg.eigvalsh(H).max()) if H.size else 0.0


def assemble_residuals(data: Dataset) -> ResidualSystem:
    """Stack the optimality residual maps of every demonstration.

    The constraint set is the relaxed one-step one: integer hulls on the
    control and state bounds on the successor. Demonstrations violating
    those constraints by more than ``DEMO_FEASIBILITY_TOL`` are rejected.

    Raises:
      ValueError: dimension mismatch, or infeasible demos (message lists
        the offending indices).
    """
    model = data.model
    n_x, n_w = model.n_x, model.n_w
    basis = _sym_basis(n_x)
    n_theta = len(basis)

    A_blocks, b_blocks, G_blocks, g_blocks = [], [], [], []
    tags: tuple[RowTag, ...] = ()
    bad: list[int] = []
    for i, pair in enumerate(data.pairs):
        prob = build_myopic_ocp(
            model, data.Q, data.R, np.eye(n_x), pair.x, data.x_ref,
            w_ref=data.w_ref, validate_x_now=False,
        )
        _, _, gval, _, _, Jineq = prob.eval_with_derivatives(pair.w_star)
        viol = float(np.clip(gval, 0.0, None).max()) if gval.size else 0.0
        if viol > DEMO_FEASIBILITY_TOL:
            bad.append(i)
            continue
        F, _, phiw = rk4_step_with_jacobians(prob.dmap, pair.x, pair.w_star)
        d = F - data.x_ref
        A = np.empty((n_w, n_theta))
        for a, B in enumerate(basis):
            A[:, a] = phiw.T @ (2.0 * B @ d)
        A_blocks.append(A)
        b_blocks.append(2.0 * data.R @ (pair.w_star - data.w_ref))
        G_blocks.append(Jineq)
        g_blocks.append(gval)
        tags = prob.ineq_tags
    if bad:
        raise ValueError(
            f"demonstrations at indices {bad} violate the one-step "
            f"constraints beyond {DEMO_FEASIBILITY_TOL:g}"
        )
    return ResidualSystem(
        A=np.array(A_blocks),
        b=np.array(b_blocks),
        G=np.array(G_blocks),
        g=np.array(g_blocks),
        n_x=n_x,
        row_tags=tags,
    )


def project_psd(Msym: np.ndarray, eps: float = 0.0) -> np.ndarray:
    """Nearest symmetric matrix with eigenvalues at least ``eps``.

    Inputs that are asymmetric beyond 1e-12 are symmetrized first with a
    warning. Matrices already satisfying the floor (within 1e-10) pass
    through unchanged, which makes the projection exactly idempotent.
    """
    M = np.asarray(Msym, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("expected a square matrix")
    if eps < 0.0:
        raise ValueError("eps must be nonnegative")
    skew = float(np.abs(M - M.T).max()) if M.size else 0.0
    if skew > 1e-12:
        warnings.warn(
            f"asymmetric input (max deviation {skew:.3e}) symmetrized before projection",
            stacklevel=2,
        )
    M = 0.5 * (M + M.T)
    evals = np.linalg.eigvalsh(M)
    if evals.size and evals.min() >= eps - 1e-10:
        return M
    w, V = np.linalg.eigh(M)
    out = (V * np.maximum(w, eps)) @ V.T
    return 0.5 * (out + out.T)


def _lambda_step(system: ResidualSystem, theta: np.ndarray) -> np.ndarray:
    """Exact per-demo nonnegative least squares in the multipliers."""
    M, n_w, n_g = system.M, system.n_w, system.n_g
    lam = np.zeros((M, n_g))
    if n_g == 0:
        return lam
    for i in range(M):
        design = np.vstack([system.G[i].T, np.diag(system.g[i])])
        target = np.concatenate([-(system.A[i] @ theta + system.b[i]), np.zeros(n_g)])
        lam[i], _ = nnls(design, target)
    return lam


def _residuals(system: ResidualSystem, theta: np.ndarray, lam: np.ndarray):
    r_stat = system.A @ theta + system.b
    if system.n_g:
        r_stat = r_stat + np.einsum("igw,ig->iw", system.G, lam)
    r_comp = system.g * lam
    return r_stat, r_comp


def _objective(system: ResidualSystem, theta: np.ndarray, lam: np.ndarray) -> float:
    r_stat, r_comp = _residuals(system, theta, lam)
    return float(np.sum(r_stat**2) + np.sum(r_comp**2))


def _p_grad(system: ResidualSystem, theta: np.ndarray, lam: np.ndarray) -> np.ndarray:
    r_stat, _ = _residuals(system, theta, lam)
    return 2.0 * np.einsum("iwt,iw->t", system.A, r_stat)


def _p_step(system, lam, eps, start_theta, lip, max_iters):
    """Exact minimization over P at fixed multipliers.

    Tries the unconstrained least-squares solution first; when that leaves
    the eigenvalue-floor cone, falls back to an accelerated projected
    gradient run started from the current iterate.
    """
    n = system.n_x
    rhs = system.b.copy()
    if system.n_g:
        rhs = rhs + np.einsum("igw,ig->iw", system.G, lam)
    A_all = system.A.reshape(-1, system.n_theta)
    theta_ls, *_ = np.linalg.lstsq(A_all, -rhs.ravel(), rcond=None)
    P_ls = _theta_to_matrix(theta_ls, n)
    if np.linalg.eigvalsh(P_ls).min() >= eps - 1e-12:
        return theta_ls
    if lip <= 0.0:
        return _matrix_to_theta(project_psd(np.zeros((n, n)), eps))

    step = 1.0 / lip
    P = project_psd(_theta_to_matrix(start_theta, n), eps)
    Y = P.copy()
    t_acc = 1.0
    for _ in range(max_iters):
        grad = _p_grad_matrix(system, Y, lam)
        P_new = project_psd(Y - step * grad, eps)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_acc**2))
        Y = P_new + ((t_acc - 1.0) / t_new) * (P_new - P)
        move = float(np.abs(P_new - P).max())
        P, t_acc = P_new, t_new
        if move <= 1e-14 * (1.0 + float(np.abs(P).max())):
            break
    return _matrix_to_theta(P)


def _p_grad_matrix(system: ResidualSystem, P: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Gradient of the objective in matrix coordinates (Frobenius geometry).

    Off-diagonal theta coordinates occupy two matrix positions, so their
    derivative splits evenly between the symmetric entries.
    """
    n = system.n_x
    grad = np.zeros((n, n))
    gt = _p_grad(system, _matrix_to_theta(P), lam)
    k = 0
    for i in range(n):
        grad[i, i] += gt[k]
        k += 1
    for i in range(n):
        for j in range(i + 1, n):
            grad[i, j] += 0.5 * gt[k]
            grad[j, i] += 0.5 * gt[k]
            k += 1
    return grad


def _gradient_mapping(system, theta, lam, eps, lip) -> float:
    """Joint first-order certificate at (P, lambda)."""
    n = system.n_x
    P = _theta_to_matrix(theta, n)
    pg = 0.0
    if lip > 0.0:
        step = 1.0 / lip
        grad = _p_grad_matrix(system, P, lam)
        moved = project_psd(P - step * grad, eps)
        pg = lip * float(np.linalg.norm(P - moved, "fro"))
    if system.n_g:
        r_stat, r_comp = _residuals(system, theta, lam)
        grad_lam = 2.0 * (
            np.einsum("igw,iw->ig", system.G, r_stat) + system.g * r_comp
        )
        free = lam > 0.0
        pg_lam = np.where(free, np.abs(grad_lam), np.clip(-grad_lam, 0.0, None))
        if pg_lam.size:
            pg = max(pg, float(pg_lam.max()))
    return pg


@dataclass(frozen=True)
class LearnerOptions:
    """Stopping rules for the alternating fit.

    The alternation converges linearly while the multiplier active sets
    are still settling and accelerates once they freeze, so the budget
    is sized for the slow phase; certified runs exit early.
    """

    tol: float = 1e-8
    rel_decrease: float = 1e-10
    max_iters: int = 2000
    pstep_max_iters: int = 5000

    def __post_init__(self):
        if self.tol <= 0 or self.rel_decrease <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iters < 1 or self.pstep_max_iters < 1:
            raise ValueError("iteration budgets must be at least 1")


@dataclass
class LearnedValue:
    """Fitted terminal weight with its residual diagnostics."""

    P: np.ndarray
    eps: float
    objective: float
    r_stat_inf: float
    r_comp_inf: float
    iterations: int = 0
    status: str = OPTIMAL

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=float)

    def to_json_dict(self) -> dict:
        return {
            "P": self.P.tolist(),
            "eps": float(self.eps),
            "r_stat_inf": float(self.r_stat_inf),
            "r_comp_inf": float(self.r_comp_inf),
            "objective": float(self.objective),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2)

    @classmethod
    def from_json_dict(cls, d: dict) -> "LearnedValue":
        missing = {"P", "eps", "r_stat_inf", "r_comp_inf", "objective"} - set(d)
        if missing:
            raise ValueError(f"value-function JSON missing keys: {sorted(missing)}")
        P = np.asarray(d["P"], dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise ValueError("P must be a square matrix")
        if float(np.abs(P - P.T).max()) > 1e-9:
            raise ValueError("P must be symmetric")
        return cls(
            P=P,
            eps=float(d["eps"]),
            objective=float(d["objective"]),
            r_stat_inf=float(d["r_stat_inf"]),
            r_comp_inf=float(d["r_comp_inf"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "LearnedValue":
        return cls.from_json_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "LearnedValue":
        return cls.from_json(Path(path).read_text())


def solve_psd_ls(
    system: ResidualSystem,
    eps: float = 1e-6,
    opts: LearnerOptions | None = None,
) -> LearnedValue:
    """Fit P by minimizing the stacked residuals over the PSD-floor cone.

    The objective is jointly convex in (P, multipliers), each block step is
    an exact minimization, and the loop stops when the objective stalls;
    optimality is then certified by the gradient-mapping norm. Failing the
    certificate within the iteration budget returns the best iterate with
    ``max_iters`` status.
    """
    if eps < 0.0:
        raise ValueError("eps must be nonnegative")
    opts = opts or LearnerOptions()
    n = system.n_x
    lip = system.lipschitz()

    theta = _matrix_to_theta(project_psd(np.zeros((n, n)), eps))
    lam = np.zeros((system.M, system.n_g))
    theta = _p_step(system, lam, eps, theta, lip, opts.pstep_max_iters)
    prev = _objective(system, theta, lam)
    status = MAX_ITERS
    iterations = 0
    for it in range(1, opts.max_iters + 1):
        iterations = it
        lam = _lambda_step(system, theta)
        theta = _p_step(system, lam, eps, theta, lip, opts.pstep_max_iters)
        obj = _objective(system, theta, lam)
        stalled = prev - obj <= opts.rel_decrease * max(1.0, abs(prev))
        prev = obj
        # a stalled objective alone is not enough: certify first-order
        # optimality, otherwise keep alternating (the P step refines its
        # projected-gradient run from the current iterate each pass)
        if stalled and _gradient_mapping(system, theta, lam, eps, lip) <= opts.tol:
            status = OPTIMAL
            break
    else:
        if _gradient_mapping(system, theta, lam, eps, lip) <= opts.tol:
            status = OPTIMAL

    P = project_psd(_theta_to_matrix(theta, n), eps)
    theta_final = _matrix_to_theta(P)
    lam = _lambda_step(system, theta_final)
    r_stat, r_comp = _residuals(system, theta_final, lam)
    return LearnedValue(
        P=P,
        eps=eps,
        objective=_objective(system, theta_final, lam),
        r_stat_inf=float(np.abs(r_stat).max()) if r_stat.size else 0.0,
        r_comp_inf=float(np.abs(r_comp).max()) if r_comp.size else 0.0,
        iterations=iterations,
        status=status,
    )


def evaluate_system_norms(system: ResidualSystem, P) -> tuple[float, float, float]:
    """Residual norms of a fixed P with per-demo optimal multipliers."""
    P = np.asarray(P, dtype=float)
    if P.shape != (system.n_x, system.n_x):
        raise ValueError("P has the wrong shape")
    if float(np.abs(P - P.T).max()) > 1e-9:
        raise ValueError("P must be symmetric")
    P = 0.5 * (P + P.T)
    theta = _matrix_to_theta(P)
    lam = _lambda_step(system, theta)
    r_stat, r_comp = _residuals(system, theta, lam)
    obj = _objective(system, theta, lam)
    stat = float(np.abs(r_stat).max()) if r_stat.size else 0.0
    comp = float(np.abs(r_comp).max()) if r_comp.size else 0.0
    return stat, comp, obj


def evaluate_residual_norms(P, data: Dataset) -> tuple[float, float, float]:
    """Norms of the optimality residuals a fixed P leaves on a dataset.

    Each demo's multipliers are set to their optimal nonnegative values
    before the norms are taken. Symmetry of P is required; definiteness is
    not, so externally reported matrices can be evaluated as given.
    """
    return evaluate_system_norms(assemble_residuals(data), P)
