import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mimpc.models import (
    DiscreteMap,
    IntegrationError,
    ModelError,
    ModelSpec,
    SingularStateError,
    get_model,
    lotka_volterra_model,
    lv_rhs,
    rk4_step,
    rk4_step_with_jacobians,
    sat_rhs,
    satellite_model,
)


# ----------------------------------------------------------------------
# Fishing vector field
# ----------------------------------------------------------------------

@pytest.mark.parametrize(
    "x, z, expected",
    [
        ((1.0, 1.0), 0, (0.0, 0.0)),
        ((1.0, 1.0), 1, (-0.4, -0.2)),
        ((2.0, 0.5), 1, (0.2, 0.4)),
    ],
)
def test_lv_rhs_values(x, z, expected):
    np.testing.assert_allclose(lv_rhs(np.array(x), z), expected, atol=1e-15)


def test_lv_rhs_bilinear_in_harvest():
    # doubling z at fixed x shifts only the harvest terms, linearly
    x = np.array([1.7, 0.9])
    base = lv_rhs(x, 0.0)
    d1 = lv_rhs(x, 1.0) - base
    d2 = lv_rhs(x, 2.0) - base
    np.testing.assert_allclose(d2, 2.0 * d1, rtol=0, atol=1e-14)
    np.testing.assert_allclose(d1, [-0.4 * x[0], -0.2 * x[1]], atol=1e-15)


def test_lv_rhs_batched():
    xs = np.array([[1.0, 1.0], [2.0, 0.5]])
    zs = np.array([1.0, 1.0])
    np.testing.assert_allclose(lv_rhs(xs, zs), [[-0.4, -0.2], [0.2, 0.4]], atol=1e-15)


# ----------------------------------------------------------------------
# Satellite vector field
# ----------------------------------------------------------------------

@pytest.mark.parametrize(
    "x, z, expected",
    [
        ((2.0, 0.0, 0.0), (0, 0), (0.0, -0.5, 0.0)),
        ((5.0, 0.0, np.sqrt(0.016)), (0, 0), (0.0, 0.0, -3.2e-4)),
        ((5.0, 0.0, 0.126), (1, 0), (0.0, 0.09938, -3.1752e-4)),
    ],
)
def test_sat_rhs_values(x, z, expected):
    got = sat_rhs(np.array(x), np.array(z, dtype=float))
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)


def test_sat_rhs_circular_orbit_is_stationary_in_r():
    # at r=5 the gravity term 2/r^2 balances r*w^2 exactly when w^2 = 2/125
    x = np.array([5.0, 0.0, np.sqrt(2.0 / 125.0)])
    dx = sat_rhs(x, np.zeros(2))
    assert dx[0] == 0.0
    assert dx[1] == pytest.approx(0.0, abs=1e-16)
    assert dx[2] == pytest.approx(-0.1 * (2.0 / 125.0) / 5.0, abs=1e-18)


def test_sat_rhs_singularity():
    with pytest.raises(SingularStateError):
        sat_rhs(np.array([0.0, 0.0, 0.1]), np.zeros(2))


# ----------------------------------------------------------------------
# RK4 map
# ----------------------------------------------------------------------

def _scalar_exp_model() -> ModelSpec:
    return ModelSpec(
        name="exp",
        n_x=1,
        n_u=0,
        n_z=0,
        rhs=lambda x, u, z: x,
        rhs_jac=lambda x, u, z: (
            np.ones(np.shape(x)[:-1] + (1, 1)),
            np.zeros(np.shape(x)[:-1] + (1, 0)),
            np.zeros(np.shape(x)[:-1] + (1, 0)),
        ),
        z_domains=(),
        x_lower=np.array([-np.inf]),
        x_upper=np.array([np.inf]),
        Ts=0.1,
    )


def test_rk4_matches_fourth_order_polynomial():
    # single step of xdot = x from 1: 1 + h + h^2/2 + h^3/6 + h^4/24
    dmap = DiscreteMap(_scalar_exp_model(), steps_per_sample=1)
    h = 0.1
    expected = 1 + h + h**2 / 2 + h**3 / 6 + h**4 / 24
    got = rk4_step(dmap, np.array([1.0]), np.zeros(0))
    assert got[0] == pytest.approx(expected, abs=1e-12)
    assert got[0] == pytest.approx(1.10517083, abs=5e-9)


def test_rk4_zero_field_identity():
    model = ModelSpec(
        name="still",
        n_x=2,
        n_u=0,
        n_z=0,
        rhs=lambda x, u, z: np.zeros_like(x),
        rhs_jac=None,
        z_domains=(),
        x_lower=np.full(2, -np.inf),
        x_upper=np.full(2, np.inf),
        Ts=0.3,
    )
    x = np.array([0.4, -2.0])
    np.testing.assert_array_equal(rk4_step(DiscreteMap(model, 4), x, np.zeros(0)), x)


def test_rk4_fishing_equilibrium_fixed_point():
    model = lotka_volterra_model()
    for steps in (1, 3):
        got = rk4_step(DiscreteMap(model, steps), np.array([1.0, 1.0]), np.array([0.0]))
        np.testing.assert_array_equal(got, [1.0, 1.0])


def _reversal_error(model: ModelSpec, x, w, h):
    steps = max(1, round(model.Ts / h))
    fwd = DiscreteMap(model, steps)
    back_model = ModelSpec(
        name=model.name + "-rev",
        n_x=model.n_x,
        n_u=model.n_u,
        n_z=model.n_z,
        rhs=lambda xx, uu, zz: -model.rhs(xx, uu, zz),
        rhs_jac=None,
        z_domains=model.z_domains,
        x_lower=model.x_lower,
        x_upper=model.x_upper,
        Ts=model.Ts,
    )
    bwd = DiscreteMap(back_model, steps)
    x1 = rk4_step(fwd, x, w)
    x0 = rk4_step(bwd, x1, w)
    return np.max(np.abs(x0 - x))


def test_rk4_forward_backward_roundtrip():
    rng = np.random.default_rng(7)
    lv = lotka_volterra_model(Ts=0.1)
    sat = satellite_model(Ts=0.5)
    for _ in range(10):
        x = rng.uniform(0.5, 2.0, size=2)
        z = np.array([rng.uniform(0, 1)])
        assert _reversal_error(lv, x, z, h=0.01) <= 1e-8
    for _ in range(10):
        x = np.array([rng.uniform(4, 6), rng.uniform(-0.2, 0.2), rng.uniform(0.1, 0.15)])
        z = rng.uniform(-1, 1, size=2)
        assert _reversal_error(sat, x, z, h=0.01) <= 1e-8


def test_rk4_reports_offending_substep():
    model = ModelSpec(
        name="blowup",
        n_x=1,
        n_u=0,
        n_z=0,
        rhs=lambda x, u, z: x**3,
        rhs_jac=None,
        z_domains=(),
        x_lower=np.array([-np.inf]),
        x_upper=np.array([np.inf]),
        Ts=10.0,
    )
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(IntegrationError) as err:
            rk4_step(DiscreteMap(model, 8), np.array([5.0]), np.zeros(0))
    assert 0 <= err.value.substep < 8


# ----------------------------------------------------------------------
# RK4 sensitivities vs central finite differences
# ----------------------------------------------------------------------

def _fd_jacobians(dmap, x, w, h=1e-6):
    n_x, n_w = x.size, w.size
    jx = np.zeros((n_x, n_x))
    jw = np.zeros((n_x, n_w))
    for i in range(n_x):
        e = np.zeros(n_x)
        e[i] = h
        jx[:, i] = (rk4_step(dmap, x + e, w) - rk4_step(dmap, x - e, w)) / (2 * h)
    for i in range(n_w):
        e = np.zeros(n_w)
        e[i] = h
        jw[:, i] = (rk4_step(dmap, x, w + e) - rk4_step(dmap, x, w - e)) / (2 * h)
    return jx, jw


@pytest.mark.parametrize("steps", [1, 3])
def test_rk4_jacobians_match_finite_differences(steps):
    rng = np.random.default_rng(3)
    for model, sample in [
        (lotka_volterra_model(), lambda: (rng.uniform(0.5, 2, 2), rng.uniform(0, 1, 1))),
        (
            satellite_model(),
            lambda: (
                np.array([rng.uniform(4, 6), rng.uniform(-0.3, 0.3), rng.uniform(0.1, 0.15)]),
                rng.uniform(-1, 1, 2),
            ),
        ),
    ]:
        dmap = DiscreteMap(model, steps)
        for _ in range(5):
            x, w = sample()
            xn, phix, phiw = rk4_step_with_jacobians(dmap, x, w)
            np.testing.assert_allclose(xn, rk4_step(dmap, x, w), rtol=0, atol=0)
            fdx, fdw = _fd_jacobians(dmap, x, w)
            np.testing.assert_allclose(phix, fdx, rtol=1e-6, atol=1e-9)
            np.testing.assert_allclose(phiw, fdw, rtol=1e-6, atol=1e-9)


def test_rk4_jacobians_batched_consistency():
    model = satellite_model()
    dmap = DiscreteMap(model, 2)
    xs = np.array([[5.0, 0.1, 0.12], [4.2, -0.05, 0.13]])
    ws = np.array([[1.0, -1.0], [0.0, 1.0]])
    xb, phixb, phiwb = rk4_step_with_jacobians(dmap, xs, ws)
    for i in range(2):
        xi, phixi, phiwi = rk4_step_with_jacobians(dmap, xs[i], ws[i])
        np.testing.assert_array_equal(xb[i], xi)
        np.testing.assert_array_equal(phixb[i], phixi)
        np.testing.assert_array_equal(phiwb[i], phiwi)


# ----------------------------------------------------------------------
# Spec containers
# ----------------------------------------------------------------------

def test_model_registry():
    assert get_model("lotka-volterra").n_z == 1
    assert get_model("satellite").z_domains == ((-1, 0, 1), (-1, 0, 1))
    with pytest.raises(ModelError):
        get_model("pendulum")


def test_hull_bounds():
    sat = satellite_model()
    np.testing.assert_array_equal(sat.z_hull_lower, [-1, -1])
    np.testing.assert_array_equal(sat.z_hull_upper, [1, 1])
    lv = lotka_volterra_model()
    np.testing.assert_array_equal(lv.z_hull_lower, [0])
    np.testing.assert_array_equal(lv.z_hull_upper, [1])


def test_bad_specs_rejected():
    with pytest.raises(ModelError):
        lotka_volterra_model(Ts=-0.1)
    with pytest.raises(ModelError):
        DiscreteMap(lotka_volterra_model(), steps_per_sample=0)


@settings(max_examples=40, deadline=None)
@given(
    x1=st.floats(0.2, 3.0),
    x2=st.floats(0.2, 3.0),
    z=st.floats(0.0, 1.0),
)
def test_lv_flow_stays_finite_one_step(x1, x2, z):
    dmap = DiscreteMap(lotka_volterra_model(), 1)
    out = rk4_step(dmap, np.array([x1, x2]), np.array([z]))
    assert np.all(np.isfinite(out))
