"""Multiple-shooting transcription of the finite-horizon and one-step problems.

The decision vector is stage-major: ``[x_0, w_0, x_1, w_1, ..., x_N]``.
Equality rows pin ``x_0`` to the measured state and tie consecutive states
through RK4 defects; inequality rows are simple bounds (state box at stages
1..N, integer-hull box on the controls at stages 0..N-1), one variable per
row, so their Jacobian is constant.

Objectives are quadratic penalties on deviations from the references:
``sum_k (x_k - x_ref)' Q (x_k - x_ref) + (w_k - w_ref)' R (w_k - w_ref)``
plus a terminal term ``(x_N - x_ref)' Qf (x_N - x_ref)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .models import DiscreteMap, ModelSpec, rk4_step, rk4_step_with_jacobians


class InfeasibleInputError(ValueError):
    """Raised when a supplied state violates the model's bounds."""


class RowTag(NamedTuple):
    """Identity of one constraint row, stable across problem rebuilds."""

    kind: str  # pin | defect | fix | state_lo | state_hi | hull_lo | hull_hi
    stage: int
    index: int  # state or integer-channel index within the stage


def _as_sym_psd(M, n: int, name: str) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.shape != (n, n):
        raise ValueError(f"{name} must be {n}x{n}, got {M.shape}")
    if not np.allclose(M, M.T, atol=1e-12, rtol=0):
        raise ValueError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(M).min() < -1e-10:
        raise ValueError(f"{name} must be positive semidefinite")
    return 0.5 * (M + M.T)


@dataclass(frozen=True, eq=False)
class OcpSpec:
    """Weights, references and horizon for the full-horizon problem."""

    model: ModelSpec
    N: int
    Q: np.ndarray
    R: np.ndarray
    x_ref: np.ndarray
    Qf: np.ndarray | None = None
    w_ref: np.ndarray | None = None
    relax_integers: bool = True
    steps_per_sample: int = 1

    def __post_init__(self):
        m = self.model
        if self.N < 1:
            raise ValueError("horizon N must be >= 1")
        object.__setattr__(self, "Q", _as_sym_psd(self.Q, m.n_x, "Q"))
        object.__setattr__(self, "R", _as_sym_psd(self.R, m.n_w, "R"))
        qf = self.Q if self.Qf is None else _as_sym_psd(self.Qf, m.n_x, "Qf")
        object.__setattr__(self, "Qf", qf)
        x_ref = np.asarray(self.x_ref, dtype=float)
        if x_ref.shape != (m.n_x,):
            raise ValueError("x_ref has wrong length")
        if not m.within_bounds(x_ref):
            raise InfeasibleInputError("x_ref violates state bounds")
        object.__setattr__(self, "x_ref", x_ref)
        w_ref = np.zeros(m.n_w) if self.w_ref is None else np.asarray(self.w_ref, float)
        if w_ref.shape != (m.n_w,):
            raise ValueError("w_ref has wrong length")
        object.__setattr__(self, "w_ref", w_ref)

    @property
    def dmap(self) -> DiscreteMap:
        return DiscreteMap(self.model, self.steps_per_sample)


@dataclass(frozen=True)
class Layout:
    """Index maps into the stage-major decision vector."""

    n_x: int
    n_w: int
    N: int

    @property
    def stage_width(self) -> int:
        return self.n_x + self.n_w

    @property
    def n_dec(self) -> int:
        return (self.N + 1) * self.n_x + self.N * self.n_w

    def x_slice(self, k: int) -> slice:
        if not 0 <= k <= self.N:
            raise IndexError(f"stage {k} outside 0..{self.N}")
        start = k * self.stage_width
        return slice(start, start + self.n_x)

    def w_slice(self, k: int) -> slice:
        if not 0 <= k < self.N:
            raise IndexError(f"stage {k} outside 0..{self.N - 1}")
        start = k * self.stage_width + self.n_x
        return slice(start, start + self.n_w)

    def split(self, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (states (N+1, n_x), controls (N, n_w)) views of a point."""
        v = np.asarray(v, dtype=float)
        if v.shape != (self.n_dec,):
            raise ValueError(f"point has length {v.shape}, expected {self.n_dec}")
        body = v[: self.N * self.stage_width].reshape(self.N, self.stage_width)
        X = np.vstack([body[:, : self.n_x], v[self.n_dec - self.n_x :]])
        W = body[:, self.n_x :]
        return X, W

    def join(self, X: np.ndarray, W: np.ndarray) -> np.ndarray:
        v = np.empty(self.n_dec)
        body = v[: self.N * self.stage_width].reshape(self.N, self.stage_width)
        body[:, : self.n_x] = X[: self.N]
        body[:, self.n_x :] = W
        v[self.n_dec - self.n_x :] = X[self.N]
        return v


class FullOcp:
    """Transcribed full-horizon problem; immutable after construction.

    Inequalities are stored as ``sign * v[col] + offset <= 0`` triplets so
    both evaluation and the (constant) Jacobian are single gather ops.
    Every row touches exactly one variable, which the solver exploits by
    enforcing them as box bounds. Integer hull intervals may be overridden
    per variable (branch-and-bound pinches them down to a point).
    """

    def __init__(
        self,
        spec: OcpSpec,
        x_init,
        z_lower: np.ndarray | None = None,
        z_upper: np.ndarray | None = None,
        validate_x_init: bool = True,
    ):
        m = spec.model
        x_init = np.asarray(x_init, dtype=float)
        if x_init.shape != (m.n_x,):
            raise ValueError("x_init has wrong length")
        if validate_x_init and not m.within_bounds(x_init):
            raise InfeasibleInputError(f"x_init {x_init} violates state bounds")
        self.spec = spec
        self.x_init = x_init
        self.layout = Layout(m.n_x, m.n_w, spec.N)
        self.dmap = spec.dmap

        N, n_x, n_z = spec.N, m.n_x, m.n_z
        # integer variables in stage-major order, with per-variable hulls
        idx = []
        for k in range(N):
            w0 = self.layout.w_slice(k).start
            idx.extend(w0 + m.n_u + j for j in range(n_z))
        self.integer_indices = np.array(idx, dtype=int)
        self.integer_domains = tuple(m.z_domains[j] for _ in range(N) for j in range(n_z))
        if z_lower is None:
            z_lower = np.tile(m.z_hull_lower, N)
        if z_upper is None:
            z_upper = np.tile(m.z_hull_upper, N)
        self.z_lower = np.asarray(z_lower, dtype=float)
        self.z_upper = np.asarray(z_upper, dtype=float)
        if self.z_lower.shape != (N * n_z,) or self.z_upper.shape != (N * n_z,):
            raise ValueError("hull override has wrong length")
        if np.any(self.z_lower > self.z_upper + 1e-12):
            raise InfeasibleInputError("empty integer hull interval")

        eq_tags: list[RowTag] = [RowTag("pin", 0, i) for i in range(n_x)]
        for k in range(N):
            eq_tags.extend(RowTag("defect", k, i) for i in range(n_x))
        self.eq_tags = tuple(eq_tags)

        cols, signs, offs, ineq_tags = [], [], [], []
        for k in range(1, N + 1):
            x0 = self.layout.x_slice(k).start
            for i in range(n_x):
                if np.isfinite(m.x_lower[i]):
                    cols.append(x0 + i); signs.append(-1.0); offs.append(m.x_lower[i])
                    ineq_tags.append(RowTag("state_lo", k, i))
                if np.isfinite(m.x_upper[i]):
                    cols.append(x0 + i); signs.append(1.0); offs.append(-m.x_upper[i])
                    ineq_tags.append(RowTag("state_hi", k, i))
        for t, col in enumerate(self.integer_indices):
            k, j = divmod(t, n_z)
            cols.append(col); signs.append(-1.0); offs.append(self.z_lower[t])
            ineq_tags.append(RowTag("hull_lo", k, j))
            cols.append(col); signs.append(1.0); offs.append(-self.z_upper[t])
            ineq_tags.append(RowTag("hull_hi", k, j))

        self.ineq_cols = np.array(cols, dtype=int)
        self.ineq_signs = np.array(signs, dtype=float)
        self.ineq_offsets = np.array(offs, dtype=float)
        self.ineq_tags = tuple(ineq_tags)

        self.n_dec = self.layout.n_dec
        self.n_eq = len(self.eq_tags)
        self.n_ineq = len(self.ineq_tags)
        J = np.zeros((self.n_ineq, self.n_dec))
        J[np.arange(self.n_ineq), self.ineq_cols] = self.ineq_signs
        self._Jineq = J

    def with_integer_bounds(self, z_lower, z_upper) -> "FullOcp":
        """Same problem with tightened hull intervals (used per search node)."""
        return FullOcp(self.spec, self.x_init, z_lower, z_upper, validate_x_init=False)

    def bound_structure(self):
        """All inequality rows as (row, col, sign, offset) box-bound data."""
        return (
            np.arange(self.n_ineq),
            self.ineq_cols,
            self.ineq_signs,
            self.ineq_offsets,
        )

    # -- evaluation ----------------------------------------------------

    def _defects(self, X, W, with_jac: bool):
        if with_jac:
            F, phix, phiw = rk4_step_with_jacobians(self.dmap, X[:-1], W)
            return F - X[1:], F, phix, phiw
        return rk4_step(self.dmap, X[:-1], W) - X[1:], None, None, None

    def eval(self, v) -> tuple[float, np.ndarray, np.ndarray]:
        X, W = self.layout.split(v)
        s = self.spec
        dev, wdev = X - s.x_ref, W - s.w_ref
        f = (
            np.einsum("ki,ij,kj->", dev[:-1], s.Q, dev[:-1])
            + np.einsum("ki,ij,kj->", wdev, s.R, wdev)
            + dev[-1] @ s.Qf @ dev[-1]
        )
        defects, *_ = self._defects(X, W, with_jac=False)
        v = np.asarray(v, dtype=float)
        eq = np.concatenate([X[0] - self.x_init, defects.ravel()])
        ineq = self.ineq_signs * v[self.ineq_cols] + self.ineq_offsets
        return float(f), eq, ineq

    def eval_with_derivatives(self, v):
        """Return (f, eq, ineq, grad, Jeq, Jineq)."""
        v = np.asarray(v, dtype=float)
        X, W = self.layout.split(v)
        s, lay = self.spec, self.layout
        dev, wdev = X - s.x_ref, W - s.w_ref
        f = (
            np.einsum("ki,ij,kj->", dev[:-1], s.Q, dev[:-1])
            + np.einsum("ki,ij,kj->", wdev, s.R, wdev)
            + dev[-1] @ s.Qf @ dev[-1]
        )
        gX = np.vstack([2.0 * dev[:-1] @ s.Q, 2.0 * dev[-1] @ s.Qf])
        gW = 2.0 * wdev @ s.R
        grad = lay.join(gX, gW)

        defects, _, phix, phiw = self._defects(X, W, with_jac=True)
        eq = np.concatenate([X[0] - self.x_init, defects.ravel()])
        n_x = lay.n_x
        Jeq = np.zeros((self.n_eq, self.n_dec))
        Jeq[:n_x, lay.x_slice(0)] = np.eye(n_x)
        for k in range(s.N):
            r = slice(n_x * (k + 1), n_x * (k + 2))
            Jeq[r, lay.x_slice(k)] = phix[k]
            Jeq[r, lay.w_slice(k)] = phiw[k]
            Jeq[r, lay.x_slice(k + 1)] = -np.eye(n_x)

        ineq = self.ineq_signs * v[self.ineq_cols] + self.ineq_offsets
        return float(f), eq, ineq, grad, Jeq, self._Jineq.copy()


class MyopicOcp:
    """One-step problem over the control alone at a fixed current state.

    Objective: stage cost at the current state plus a quadratic terminal
    penalty ``(F(x, w) - x_ref)' P (F(x, w) - x_ref)`` on the successor.
    Inequalities: integer-hull box on w, then state bounds on the successor.
    """

    def __init__(
        self,
        model: ModelSpec,
        Q,
        R,
        P,
        x_now,
        x_ref,
        w_ref: np.ndarray | None = None,
        steps_per_sample: int = 1,
        validate_x_now: bool = True,
        z_lower: np.ndarray | None = None,
        z_upper: np.ndarray | None = None,
    ):
        self.model = model
        self.Q = _as_sym_psd(Q, model.n_x, "Q")
        self.R = _as_sym_psd(R, model.n_w, "R")
        self.P = _as_sym_psd(P, model.n_x, "P")
        self.x_now = np.asarray(x_now, dtype=float)
        self.x_ref = np.asarray(x_ref, dtype=float)
        if self.x_now.shape != (model.n_x,) or self.x_ref.shape != (model.n_x,):
            raise ValueError("state has wrong length")
        if validate_x_now and not model.within_bounds(self.x_now):
            raise InfeasibleInputError(f"x_now {self.x_now} violates state bounds")
        self.w_ref = np.zeros(model.n_w) if w_ref is None else np.asarray(w_ref, float)
        self.dmap = DiscreteMap(model, steps_per_sample)

        self.n_dec = model.n_w
        self.n_eq = 0
        self.eq_tags: tuple[RowTag, ...] = ()
        self.integer_indices = np.arange(model.n_u, model.n_w)
        self.integer_domains = model.z_domains
        if z_lower is None:
            z_lower = model.z_hull_lower
        if z_upper is None:
            z_upper = model.z_hull_upper
        self.z_lower = np.asarray(z_lower, dtype=float)
        self.z_upper = np.asarray(z_upper, dtype=float)
        if self.z_lower.shape != (model.n_z,) or self.z_upper.shape != (model.n_z,):
            raise ValueError("hull override has wrong length")
        if np.any(self.z_lower > self.z_upper + 1e-12):
            raise InfeasibleInputError("empty integer hull interval")

        cols, signs, offs, tags = [], [], [], []
        for j in range(model.n_z):
            cols.append(model.n_u + j); signs.append(-1.0)
            offs.append(self.z_lower[j]); tags.append(RowTag("hull_lo", 0, j))
            cols.append(model.n_u + j); signs.append(1.0)
            offs.append(-self.z_upper[j]); tags.append(RowTag("hull_hi", 0, j))
        self._hull_cols = np.array(cols, dtype=int)
        self._hull_signs = np.array(signs, dtype=float)
        self._hull_offsets = np.array(offs, dtype=float)
        succ = []
        for i in range(model.n_x):
            if np.isfinite(model.x_lower[i]):
                succ.append((i, -1.0, model.x_lower[i], RowTag("state_lo", 1, i)))
            if np.isfinite(model.x_upper[i]):
                succ.append((i, 1.0, -model.x_upper[i], RowTag("state_hi", 1, i)))
        self._succ_state = np.array([s[0] for s in succ], dtype=int)
        self._succ_signs = np.array([s[1] for s in succ], dtype=float)
        self._succ_offsets = np.array([s[2] for s in succ], dtype=float)
        self.ineq_tags = tuple(tags) + tuple(s[3] for s in succ)
        self.n_ineq = len(self.ineq_tags)
        self._stage_const = float(
            (self.x_now - self.x_ref) @ self.Q @ (self.x_now - self.x_ref)
        )

    def with_integer_bounds(self, z_lower, z_upper) -> "MyopicOcp":
        """Same problem with tightened hull intervals (pins integer channels)."""
        return MyopicOcp(
            self.model, self.Q, self.R, self.P, self.x_now, self.x_ref,
            w_ref=self.w_ref, steps_per_sample=self.dmap.steps_per_sample,
            validate_x_now=False, z_lower=z_lower, z_upper=z_upper,
        )

    def bound_structure(self):
        """Hull rows are box bounds; successor rows are nonlinear in w."""
        n_hull = len(self._hull_cols)
        return (
            np.arange(n_hull),
            self._hull_cols,
            self._hull_signs,
            self._hull_offsets,
        )

    def successor(self, w) -> np.ndarray:
        return rk4_step(self.dmap, self.x_now, np.asarray(w, dtype=float))

    def eval(self, w) -> tuple[float, np.ndarray, np.ndarray]:
        w = np.asarray(w, dtype=float)
        if w.shape != (self.n_dec,):
            raise ValueError(f"point has shape {w.shape}, expected ({self.n_dec},)")
        x_next = self.successor(w)
        wdev, tdev = w - self.w_ref, x_next - self.x_ref
        f = self._stage_const + wdev @ self.R @ wdev + tdev @ self.P @ tdev
        ineq = np.concatenate(
            [
                self._hull_signs * w[self._hull_cols] + self._hull_offsets,
                self._succ_signs * x_next[self._succ_state] + self._succ_offsets,
            ]
        )
        return float(f), np.zeros(0), ineq

    def eval_with_derivatives(self, w):
        w = np.asarray(w, dtype=float)
        if w.shape != (self.n_dec,):
            raise ValueError(f"point has shape {w.shape}, expected ({self.n_dec},)")
        x_next, _, phiw = rk4_step_with_jacobians(self.dmap, self.x_now, w)
        wdev, tdev = w - self.w_ref, x_next - self.x_ref
        f = self._stage_const + wdev @ self.R @ wdev + tdev @ self.P @ tdev
        grad = 2.0 * self.R @ wdev + phiw.T @ (2.0 * self.P @ tdev)
        ineq = np.concatenate(
            [
                self._hull_signs * w[self._hull_cols] + self._hull_offsets,
                self._succ_signs * x_next[self._succ_state] + self._succ_offsets,
            ]
        )
        n_hull = len(self._hull_cols)
        Jineq = np.zeros((self.n_ineq, self.n_dec))
        Jineq[np.arange(n_hull), self._hull_cols] = self._hull_signs
        Jineq[n_hull:] = self._succ_signs[:, None] * phiw[self._succ_state]
        return float(f), np.zeros(0), ineq, grad, np.zeros((0, self.n_dec)), Jineq


def build_full_ocp(spec: OcpSpec, x_init, validate_x_init: bool = True) -> FullOcp:
    """Transcribe the full-horizon problem anchored at ``x_init``."""
    return FullOcp(spec, x_init, validate_x_init=validate_x_init)


def build_myopic_ocp(
    model: ModelSpec,
    Q,
    R,
    P,
    x_now,
    x_ref,
    w_ref=None,
    steps_per_sample: int = 1,
    validate_x_now: bool = True,
) -> MyopicOcp:
    """Build the one-step problem with terminal weight ``P``."""
    return MyopicOcp(
        model, Q, R, P, x_now, x_ref,
        w_ref=w_ref, steps_per_sample=steps_per_sample, validate_x_now=validate_x_now,
    )


def eval_objective_and_constraints(problem, point):
    """Evaluate (objective, equality residuals, inequality values <= 0)."""
    return problem.eval(point)


def eval_derivatives(problem, point):
    """Evaluate (gradient, equality Jacobian, inequality Jacobian)."""
    _, _, _, grad, Jeq, Jineq = problem.eval_with_derivatives(point)
    return grad, Jeq, Jineq


def rollout_guess(problem: FullOcp, W: np.ndarray | None = None) -> np.ndarray:
    """Dynamics-consistent decision vector from rolling out controls.

    Defaults to clipping the reference control into each stage's hull, so
    the guess satisfies every equality row exactly.
    """
    lay, spec = problem.layout, problem.spec
    N, n_z = spec.N, spec.model.n_z
    if W is None:
        W = np.tile(spec.w_ref, (N, 1))
    W = np.array(W, dtype=float).reshape(N, lay.n_w)
    if n_z:
        zlo = problem.z_lower.reshape(N, n_z)
        zhi = problem.z_upper.reshape(N, n_z)
        W[:, spec.model.n_u :] = np.clip(W[:, spec.model.n_u :], zlo, zhi)
    X = np.empty((N + 1, lay.n_x))
    X[0] = problem.x_init
    for k in range(N):
        X[k + 1] = rk4_step(problem.dmap, X[k], W[k])
    return lay.join(X, W)
