"""Benchmark dynamics and the fixed-step RK4 discretization.

Two continuous-time systems are provided:

* the Lotka-Volterra fishing benchmark: prey/predator populations with a
  single binary harvest decision,
* a satellite in a planar orbit steered by ternary radial and tangential
  thrust levels, with a safe-radius corridor.

Both are wrapped in :class:`ModelSpec`, which carries the vector field,
its analytic Jacobians, the integer control domains, state bounds and the
sampling interval.  :func:`rk4_step` turns the vector field into the
discrete map used everywhere downstream; :func:`rk4_step_with_jacobians`
additionally propagates exact first derivatives through the Runge-Kutta
stages so optimizers see consistent gradients.

All evaluation functions are pure and broadcast over leading batch
dimensions: states of shape ``(..., n_x)`` and controls ``(..., n_w)``
give results of the matching batch shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

__all__ = [
    "ModelError",
    "SingularStateError",
    "IntegrationError",
    "ModelSpec",
    "DiscreteMap",
    "lv_rhs",
    "lv_jacobians",
    "sat_rhs",
    "sat_jacobians",
    "rk4_step",
    "rk4_step_with_jacobians",
    "lotka_volterra_model",
    "satellite_model",
    "get_model",
    "MODEL_NAMES",
]


class ModelError(ValueError):
    """Invalid model input (non-finite state, bad dimensions, ...)."""


class SingularStateError(ModelError):
    """State hit a singularity of the vector field (satellite radius 0)."""


class IntegrationError(RuntimeError):
    """RK4 produced a non-finite value; carries the offending substep."""

    def __init__(self, substep: int, message: str | None = None):
        self.substep = substep
        super().__init__(message or f"non-finite value at RK4 substep {substep}")


# ----------------------------------------------------------------------
# Lotka-Volterra fishing dynamics
# ----------------------------------------------------------------------

def lv_rhs(x: np.ndarray, z, c1: float = 0.4, c2: float = 0.2) -> np.ndarray:
    """Prey/predator vector field with a harvest decision ``z``.

        dx1 = x1 - x1*x2 - c1*x1*z
        dx2 = -x2 + x1*x2 - c2*x2*z

    ``x`` has shape ``(..., 2)``; ``z`` is a scalar or ``(...,)`` array and
    is treated as a real (relaxed) value.
    """
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    if z.ndim and z.shape[-1] == 1 and z.ndim == x.ndim:
        z = z[..., 0]
    x1, x2 = x[..., 0], x[..., 1]
    return np.stack(
        [x1 - x1 * x2 - c1 * x1 * z, -x2 + x1 * x2 - c2 * x2 * z], axis=-1
    )


def lv_jacobians(x: np.ndarray, z, c1: float = 0.4, c2: float = 0.2):
    """Jacobians of :func:`lv_rhs` w.r.t. the state and the (relaxed) decision.

    Returns ``(Jx, Jz)`` with shapes ``(..., 2, 2)`` and ``(..., 2, 1)``.
    """
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    if z.ndim and z.shape[-1] == 1 and z.ndim == x.ndim:
        z = z[..., 0]
    x1, x2 = x[..., 0], x[..., 1]
    one = np.ones(np.broadcast_shapes(x1.shape, z.shape))
    jx = np.stack(
        [
            np.stack([(1.0 - x2 - c1 * z) * one, -x1 * one], axis=-1),
            np.stack([x2 * one, (-1.0 + x1 - c2 * z) * one], axis=-1),
        ],
        axis=-2,
    )
    jz = np.stack([-c1 * x1 * one, -c2 * x2 * one], axis=-1)[..., None]
    return jx, jz


# ----------------------------------------------------------------------
# Satellite orbit dynamics (polar coordinates)
# ----------------------------------------------------------------------

_SAT_RADIUS_FLOOR = 1e-9


def _sat_d3_value(d3, x1):
    return d3(x1) if callable(d3) else d3


def sat_rhs(
    x: np.ndarray,
    z,
    d1: float = 2.0,
    d2: float = 0.1,
    d3: Union[float, Callable] = 0.1,
) -> np.ndarray:
    """Orbital vector field in polar coordinates with thrust pair ``z``.

    States are radius, radial velocity and angular velocity:

        dx1 = x2
        dx2 = x1*x3^2 - d1/x1^2 + d3*z1
        dx3 = -2*x2*x3/x1 - d2*x3^2/x1 + d3*z2/x1

    ``d1`` is the gravitational constant, ``d2`` the drag coefficient and
    ``d3`` the thrust efficiency; ``d3`` may be a callable of the radius
    (used for the variable-efficiency plant).  Raises
    :class:`SingularStateError` at radius 0.
    """
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
    if np.any(np.abs(x1) < _SAT_RADIUS_FLOOR):
        raise SingularStateError("satellite radius too close to zero")
    z1, z2 = z[..., 0], z[..., 1]
    d3v = _sat_d3_value(d3, x1)
    zero = np.zeros(np.broadcast_shapes(x1.shape, z1.shape))
    return np.stack(
        [
            x2 + zero,
            x1 * x3**2 - d1 / x1**2 + d3v * z1,
            (-2.0 * x2 * x3 - d2 * x3**2 + d3v * z2) / x1,
        ],
        axis=-1,
    )


def sat_jacobians(x: np.ndarray, z, d1: float = 2.0, d2: float = 0.1, d3: float = 0.1):
    """Jacobians of :func:`sat_rhs` for constant ``d3``.

    Returns ``(Jx, Jz)`` with shapes ``(..., 3, 3)`` and ``(..., 3, 2)``.
    """
    if callable(d3):
        raise ModelError("analytic Jacobians require a constant thrust efficiency")
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
    if np.any(np.abs(x1) < _SAT_RADIUS_FLOOR):
        raise SingularStateError("satellite radius too close to zero")
    z2 = z[..., 1]
    zero = np.zeros(np.broadcast_shapes(x1.shape, z2.shape))
    one = zero + 1.0
    jx = np.stack(
        [
            np.stack([zero, one, zero], axis=-1),
            np.stack([(x3**2 + 2.0 * d1 / x1**3) * one, zero, 2.0 * x1 * x3 * one], axis=-1),
            np.stack(
                [
                    (2.0 * x2 * x3 + d2 * x3**2 - d3 * z2) / x1**2 * one,
                    -2.0 * x3 / x1 * one,
                    (-2.0 * x2 - 2.0 * d2 * x3) / x1 * one,
                ],
                axis=-1,
            ),
        ],
        axis=-2,
    )
    jz = np.stack(
        [
            np.stack([zero, zero], axis=-1),
            np.stack([d3 * one, zero], axis=-1),
            np.stack([zero, d3 / x1 * one], axis=-1),
        ],
        axis=-2,
    )
    return jx, jz


# ----------------------------------------------------------------------
# Model container
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class ModelSpec:
    """Continuous-time model with control domains, bounds and sample time.

    ``rhs(x, u, z)`` and ``rhs_jac(x, u, z)`` broadcast over leading batch
    dimensions; ``rhs_jac`` returns ``(Jx, Ju, Jz)`` and may be ``None``
    for simulation-only models (for which no optimizer derivatives are
    ever requested).
    """

    name: str
    n_x: int
    n_u: int
    n_z: int
    rhs: Callable
    rhs_jac: Callable | None
    z_domains: tuple[tuple[int, ...], ...]
    x_lower: np.ndarray
    x_upper: np.ndarray
    Ts: float

    def __post_init__(self):
        if self.Ts <= 0:
            raise ModelError("sampling interval must be positive")
        if len(self.z_domains) != self.n_z:
            raise ModelError("one integer domain required per z channel")
        object.__setattr__(self, "z_domains", tuple(tuple(sorted(d)) for d in self.z_domains))
        for dom in self.z_domains:
            if len(dom) == 0:
                raise ModelError("integer domains must be nonempty")
        lo = np.asarray(self.x_lower, dtype=float).reshape(self.n_x)
        hi = np.asarray(self.x_upper, dtype=float).reshape(self.n_x)
        if np.any(lo > hi):
            raise ModelError("state lower bound exceeds upper bound")
        object.__setattr__(self, "x_lower", lo)
        object.__setattr__(self, "x_upper", hi)

    @property
    def n_w(self) -> int:
        return self.n_u + self.n_z

    @property
    def z_hull_lower(self) -> np.ndarray:
        return np.array([float(d[0]) for d in self.z_domains])

    @property
    def z_hull_upper(self) -> np.ndarray:
        return np.array([float(d[-1]) for d in self.z_domains])

    def split_w(self, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Split a stacked control ``[u, z]`` into its two parts."""
        w = np.asarray(w, dtype=float)
        return w[..., : self.n_u], w[..., self.n_u :]

    def within_bounds(self, x: np.ndarray, tol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(
            np.all(x >= self.x_lower - tol) and np.all(x <= self.x_upper + tol)
        )


@dataclass(frozen=True)
class DiscreteMap:
    """Fixed-step RK4 discretization of a model over one sampling interval."""

    model: ModelSpec
    steps_per_sample: int = 1

    def __post_init__(self):
        if self.steps_per_sample < 1:
            raise ModelError("steps_per_sample must be at least 1")


def rk4_step(dmap: DiscreteMap, x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Advance the state by one sampling interval under a held control.

    Classical RK4 with step ``Ts / steps_per_sample`` composed
    ``steps_per_sample`` times.  Batched: ``x`` of shape ``(..., n_x)``
    with ``w`` of shape ``(..., n_w)`` advances every batch entry.
    """
    model = dmap.model
    u, z = model.split_w(w)
    x = np.asarray(x, dtype=float)
    h = model.Ts / dmap.steps_per_sample
    for s in range(dmap.steps_per_sample):
        k1 = model.rhs(x, u, z)
        k2 = model.rhs(x + 0.5 * h * k1, u, z)
        k3 = model.rhs(x + 0.5 * h * k2, u, z)
        k4 = model.rhs(x + h * k3, u, z)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise IntegrationError(s)
    return x


def rk4_step_with_jacobians(dmap: DiscreteMap, x: np.ndarray, w: np.ndarray):
    """One sampling interval of RK4 plus exact sensitivities.

    Returns ``(x_next, Phi_x, Phi_w)`` where ``Phi_x = d x_next / d x`` and
    ``Phi_w = d x_next / d w``, obtained by forward-mode propagation of the
    model Jacobians through every Runge-Kutta stage and substep.  Integer
    channels are differentiated as reals.
    """
    model = dmap.model
    if model.rhs_jac is None:
        raise ModelError(f"model '{model.name}' has no Jacobian implementation")
    u, z = model.split_w(w)
    x = np.asarray(x, dtype=float)
    batch = x.shape[:-1]
    n_x, n_w = model.n_x, model.n_w
    h = model.Ts / dmap.steps_per_sample
    eye = np.broadcast_to(np.eye(n_x), batch + (n_x, n_x))
    Dx = np.array(eye, dtype=float, copy=True)
    Dw = np.zeros(batch + (n_x, n_w))

    def stage(xs):
        ks = model.rhs(xs, u, z)
        jx, ju, jz = model.rhs_jac(xs, u, z)
        jw = np.concatenate([np.broadcast_to(ju, xs.shape[:-1] + (n_x, model.n_u)),
                             np.broadcast_to(jz, xs.shape[:-1] + (n_x, model.n_z))], axis=-1)
        return ks, jx, jw

    for s in range(dmap.steps_per_sample):
        k1, A1, B1 = stage(x)
        x2 = x + 0.5 * h * k1
        k2, J2x, J2w = stage(x2)
        A2 = J2x @ (eye + 0.5 * h * A1)
        B2 = 0.5 * h * (J2x @ B1) + J2w
        x3 = x + 0.5 * h * k2
        k3, J3x, J3w = stage(x3)
        A3 = J3x @ (eye + 0.5 * h * A2)
        B3 = 0.5 * h * (J3x @ B2) + J3w
        x4 = x + h * k3
        k4, J4x, J4w = stage(x4)
        A4 = J4x @ (eye + h * A3)
        B4 = h * (J4x @ B3) + J4w

        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise IntegrationError(s)
        phi_x = eye + (h / 6.0) * (A1 + 2.0 * A2 + 2.0 * A3 + A4)
        phi_w = (h / 6.0) * (B1 + 2.0 * B2 + 2.0 * B3 + B4)
        Dw = phi_x @ Dw + phi_w
        Dx = phi_x @ Dx
    return x, Dx, Dw


# ----------------------------------------------------------------------
# Benchmark registrations
# ----------------------------------------------------------------------

def lotka_volterra_model(
    c1: float = 0.4, c2: float = 0.2, Ts: float = 0.1
) -> ModelSpec:
    """Fishing benchmark: two populations, one binary harvest decision."""

    def rhs(x, u, z):
        return lv_rhs(x, z[..., 0] if np.ndim(z) else z, c1=c1, c2=c2)

    def rhs_jac(x, u, z):
        jx, jz = lv_jacobians(x, z[..., 0] if np.ndim(z) else z, c1=c1, c2=c2)
        ju = np.zeros(np.shape(x)[:-1] + (2, 0))
        return jx, ju, jz

    return ModelSpec(
        name="lotka-volterra",
        n_x=2,
        n_u=0,
        n_z=1,
        rhs=rhs,
        rhs_jac=rhs_jac,
        z_domains=((0, 1),),
        x_lower=np.array([0.0, 0.0]),
        x_upper=np.array([np.inf, np.inf]),
        Ts=Ts,
    )


def satellite_model(
    d1: float = 2.0,
    d2: float = 0.1,
    d3: Union[float, Callable] = 0.1,
    Ts: float = 0.5,
) -> ModelSpec:
    """Orbit benchmark: radius corridor 3..7, two ternary thrust channels."""

    def rhs(x, u, z):
        return sat_rhs(x, z, d1=d1, d2=d2, d3=d3)

    if callable(d3):
        rhs_jac = None
    else:

        def rhs_jac(x, u, z):
            jx, jz = sat_jacobians(x, z, d1=d1, d2=d2, d3=d3)
            ju = np.zeros(np.shape(x)[:-1] + (3, 0))
            return jx, ju, jz

    return ModelSpec(
        name="satellite",
        n_x=3,
        n_u=0,
        n_z=2,
        rhs=rhs,
        rhs_jac=rhs_jac,
        z_domains=((-1, 0, 1), (-1, 0, 1)),
        x_lower=np.array([3.0, -np.inf, -np.inf]),
        x_upper=np.array([7.0, np.inf, np.inf]),
        Ts=Ts,
    )


_REGISTRY = {
    "lotka-volterra": lotka_volterra_model,
    "satellite": satellite_model,
}

MODEL_NAMES = tuple(sorted(_REGISTRY))


def get_model(name: str) -> ModelSpec:
    """Look up a registered benchmark model by name."""
    try:
        return _REGISTRY[name]()
    except KeyError:
        raise ModelError(f"unknown model '{name}'; known: {', '.join(MODEL_NAMES)}")
