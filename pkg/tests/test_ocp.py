import numpy as np
import pytest

from mimpc.models import lotka_volterra_model, satellite_model
from mimpc.ocp import (
    FullOcp,
    InfeasibleInputError,
    Layout,
    OcpSpec,
    build_full_ocp,
    build_myopic_ocp,
    eval_derivatives,
    eval_objective_and_constraints,
    rollout_guess,
)

LV_REF = np.array([1.0, 1.0])
SAT_REF = np.array([5.0, 0.0, 0.126])


def lv_spec(N=30, **kw):
    model = lotka_volterra_model()
    return OcpSpec(model, N, np.eye(2), np.array([[0.01]]), LV_REF, **kw)


def sat_spec(N=30, **kw):
    model = satellite_model()
    return OcpSpec(model, N, np.diag([10.0, 1.0, 1.0]), np.eye(2), SAT_REF, **kw)


# ----------------------------------------------------------------------
# Layout arithmetic
# ----------------------------------------------------------------------

def test_fishing_layout_counts():
    p = build_full_ocp(lv_spec(30), np.array([1.2, 1.1]))
    assert p.n_dec == 92  # 31*2 states + 30*1 controls
    assert p.n_eq == 31 * 2  # pin + defects
    assert p.n_ineq == 60 + 60  # x >= 0 at stages 1..30, hull both sides


def test_satellite_layout_counts():
    p = build_full_ocp(sat_spec(30), SAT_REF)
    assert p.n_dec == 153  # 31*3 + 30*2
    assert p.n_eq == 31 * 3
    assert p.n_ineq == 60 + 120  # x1 box at 1..30, two hulls both sides


def test_smallest_horizon():
    p = build_full_ocp(lv_spec(1), np.array([1.0, 1.0]))
    assert p.n_dec == 5
    assert p.n_eq == 4  # 2 pin + 2 defect


def test_layout_slices_are_disjoint_and_cover():
    lay = Layout(n_x=3, n_w=2, N=4)
    seen = []
    for k in range(4):
        seen.extend(range(lay.n_dec)[lay.x_slice(k)])
        seen.extend(range(lay.n_dec)[lay.w_slice(k)])
    seen.extend(range(lay.n_dec)[lay.x_slice(4)])
    assert sorted(seen) == list(range(lay.n_dec))
    with pytest.raises(IndexError):
        lay.w_slice(4)


def test_split_join_roundtrip():
    lay = Layout(n_x=2, n_w=1, N=3)
    rng = np.random.default_rng(0)
    v = rng.standard_normal(lay.n_dec)
    X, W = lay.split(v)
    np.testing.assert_array_equal(lay.join(X, W), v)


def test_x_init_out_of_bounds_rejected():
    with pytest.raises(InfeasibleInputError):
        build_full_ocp(lv_spec(5), np.array([-0.5, 1.0]))
    p = build_full_ocp(lv_spec(5), np.array([-0.5, 1.0]), validate_x_init=False)
    assert p.n_dec == 6 * 2 + 5


# ----------------------------------------------------------------------
# Objective and constraint values
# ----------------------------------------------------------------------

def test_rollout_guess_zeroes_equalities():
    p = build_full_ocp(lv_spec(12), np.array([1.2, 1.1]))
    v = rollout_guess(p)
    _, eq, _ = eval_objective_and_constraints(p, v)
    np.testing.assert_array_equal(eq, np.zeros_like(eq))


def test_objective_zero_at_references():
    p = build_full_ocp(lv_spec(8), LV_REF)
    f, eq, _ = eval_objective_and_constraints(p, rollout_guess(p))
    assert f == 0.0
    np.testing.assert_array_equal(eq, np.zeros_like(eq))


def test_fishing_stage_cost_contribution():
    # one stage at x=(1.5,1), z=1: (0.5)^2 + 0.01*1 = 0.26
    spec = lv_spec(1, Qf=np.zeros((2, 2)))
    p = build_full_ocp(spec, np.array([1.5, 1.0]))
    v = rollout_guess(p, W=np.array([[1.0]]))
    f, _, _ = eval_objective_and_constraints(p, v)
    assert f == pytest.approx(0.26, abs=1e-15)


def test_inequality_rows_linear_gather():
    p = build_full_ocp(lv_spec(2), np.array([1.0, 1.0]))
    v = rollout_guess(p, W=np.array([[0.3], [1.0]]))
    _, _, g = eval_objective_and_constraints(p, v)
    X, W = p.layout.split(v)
    manual = []
    for k in (1, 2):
        manual.extend([-X[k][0], -X[k][1]])  # 0 - x <= 0
    for k in (0, 1):
        manual.extend([-W[k][0], W[k][0] - 1.0])
    np.testing.assert_allclose(g, manual, atol=1e-15)


def test_row_tags_match_layout():
    p = build_full_ocp(sat_spec(2), SAT_REF)
    kinds = [t.kind for t in p.ineq_tags]
    assert kinds.count("state_lo") == 2 and kinds.count("state_hi") == 2
    assert kinds.count("hull_lo") == 4 and kinds.count("hull_hi") == 4
    assert [t.kind for t in p.eq_tags[:3]] == ["pin"] * 3
    assert all(t.kind == "defect" for t in p.eq_tags[3:])


def test_integer_bound_override_pinches_hull():
    p = build_full_ocp(lv_spec(3), np.array([1.2, 1.1]))
    lo, hi = p.z_lower.copy(), p.z_upper.copy()
    lo[1] = hi[1] = 1.0
    q = p.with_integer_bounds(lo, hi)
    # row structure is stable across overrides, only offsets move
    assert q.n_eq == p.n_eq and q.n_ineq == p.n_ineq
    assert q.ineq_tags == p.ineq_tags
    v = rollout_guess(p, W=np.array([[0.0], [0.5], [0.0]]))  # unclipped layout
    _, _, g = q.eval(v)
    lo_row = q.ineq_tags.index(type(q.ineq_tags[0])("hull_lo", 1, 0))
    assert g[lo_row] == pytest.approx(0.5)  # 1.0 - 0.5 > 0: violated
    v2 = rollout_guess(q, W=np.zeros((3, 1)))  # clipped into [1,1] at stage 1
    X, W = q.layout.split(v2)
    assert W[1, 0] == 1.0


def test_bound_structure_covers_all_rows():
    p = build_full_ocp(sat_spec(4), SAT_REF)
    rows, cols, signs, offs = p.bound_structure()
    assert rows.size == p.n_ineq
    v = rollout_guess(p, W=0.3 * np.ones((4, 2)))
    _, _, g = p.eval(v)
    np.testing.assert_allclose(g[rows], signs * v[cols] + offs, atol=0)


# ----------------------------------------------------------------------
# Derivatives
# ----------------------------------------------------------------------

def _fd_check(problem, v, h=1e-6):
    f0, eq0, g0 = problem.eval(v)
    grad, Jeq, Jineq = eval_derivatives(problem, v)
    n = v.size
    worst = 0.0
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        fp, eqp, gp = problem.eval(v + e)
        fm, eqm, gm = problem.eval(v - e)
        fd_g = (fp - fm) / (2 * h)
        worst = max(worst, abs(fd_g - grad[i]) / max(1.0, abs(fd_g), abs(grad[i])))
        if eq0.size:
            fd = (eqp - eqm) / (2 * h)
            err = np.abs(fd - Jeq[:, i]) / np.maximum(1.0, np.maximum(np.abs(fd), np.abs(Jeq[:, i])))
            worst = max(worst, err.max())
        if g0.size:
            fd = (gp - gm) / (2 * h)
            err = np.abs(fd - Jineq[:, i]) / np.maximum(1.0, np.maximum(np.abs(fd), np.abs(Jineq[:, i])))
            worst = max(worst, err.max())
    return worst


def test_gradient_zero_at_reference_point():
    p = build_full_ocp(lv_spec(4), LV_REF)
    grad, _, _ = eval_derivatives(p, rollout_guess(p))
    np.testing.assert_array_equal(grad, np.zeros_like(grad))


def test_defect_jacobian_next_state_block():
    p = build_full_ocp(lv_spec(3), np.array([1.2, 1.1]))
    v = rollout_guess(p, W=np.array([[0.5], [0.0], [1.0]]))
    _, Jeq, _ = eval_derivatives(p, v)
    for k in range(3):
        rows = slice(2 * (k + 1), 2 * (k + 2))
        np.testing.assert_array_equal(Jeq[rows, p.layout.x_slice(k + 1)], -np.eye(2))


@pytest.mark.parametrize("bench", ["lv", "sat"])
def test_full_ocp_derivatives_match_finite_differences(bench):
    rng = np.random.default_rng(11)
    if bench == "lv":
        p = build_full_ocp(lv_spec(4), np.array([1.2, 1.1]))
        draw = lambda: np.concatenate(
            [c for k in range(4) for c in (rng.uniform(0.5, 2, 2), rng.uniform(0.05, 0.95, 1))]
            + [rng.uniform(0.5, 2, 2)]
        )
    else:
        p = build_full_ocp(sat_spec(3), SAT_REF)
        draw = lambda: np.concatenate(
            [
                c
                for k in range(3)
                for c in (
                    np.array([rng.uniform(4, 6), rng.uniform(-0.3, 0.3), rng.uniform(0.08, 0.16)]),
                    rng.uniform(-0.9, 0.9, 2),
                )
            ]
            + [np.array([rng.uniform(4, 6), rng.uniform(-0.3, 0.3), rng.uniform(0.08, 0.16)])]
        )
    for _ in range(8):
        assert _fd_check(p, draw()) <= 1e-5


def test_myopic_derivatives_match_finite_differences():
    rng = np.random.default_rng(5)
    P = np.array([[0.6, 0.46], [0.46, 0.36]])
    for _ in range(10):
        x = rng.uniform(0.5, 2.0, 2)
        m = build_myopic_ocp(lotka_volterra_model(), np.eye(2), [[0.01]], P, x, LV_REF)
        assert _fd_check(m, rng.uniform(0.05, 0.95, 1)) <= 1e-5
    sat = satellite_model()
    Ps = np.diag([10.0, 1.0, 1.0])
    for _ in range(10):
        x = np.array([rng.uniform(4, 6), rng.uniform(-0.2, 0.2), rng.uniform(0.1, 0.15)])
        m = build_myopic_ocp(sat, np.diag([10.0, 1.0, 1.0]), np.eye(2), Ps, x, SAT_REF)
        assert _fd_check(m, rng.uniform(-0.9, 0.9, 2)) <= 1e-5


# ----------------------------------------------------------------------
# Myopic problem structure
# ----------------------------------------------------------------------

def test_myopic_row_counts():
    m = build_myopic_ocp(
        lotka_volterra_model(), np.eye(2), [[0.01]], np.eye(2), [1.2, 1.1], LV_REF
    )
    assert (m.n_dec, m.n_eq, m.n_ineq) == (1, 0, 4)
    m = build_myopic_ocp(
        satellite_model(), np.diag([10.0, 1, 1]), np.eye(2), np.eye(3), SAT_REF, SAT_REF
    )
    assert (m.n_dec, m.n_eq, m.n_ineq) == (2, 0, 6)
    assert [t.kind for t in m.ineq_tags] == [
        "hull_lo", "hull_hi", "hull_lo", "hull_hi", "state_lo", "state_hi",
    ]


def test_myopic_zero_value_weight_minimized_by_zero_control():
    m = build_myopic_ocp(
        lotka_volterra_model(), np.eye(2), [[0.01]], np.zeros((2, 2)), [1.3, 0.9], LV_REF
    )
    f0, _, _ = m.eval(np.zeros(1))
    for w in (0.2, 0.7, 1.0):
        fw, _, _ = m.eval(np.array([w]))
        assert fw > f0


def test_myopic_equals_full_horizon_one_step():
    rng = np.random.default_rng(19)
    P = np.array([[0.6, 0.46], [0.46, 0.36]])
    model = lotka_volterra_model()
    for _ in range(20):
        x = rng.uniform(0.5, 2.0, 2)
        w = rng.uniform(0.0, 1.0, 1)
        myo = build_myopic_ocp(model, np.eye(2), [[0.01]], P, x, LV_REF)
        fm, _, gm = myo.eval(w)
        spec = OcpSpec(model, 1, np.eye(2), [[0.01]], LV_REF, Qf=P)
        full = build_full_ocp(spec, x)
        v = rollout_guess(full, W=w[None, :])
        ff, eq, gf = full.eval(v)
        assert abs(fm - ff) <= 1e-12
        np.testing.assert_array_equal(eq, np.zeros(4))
        # same successor bound rows, full lists state rows before hulls
        np.testing.assert_allclose(np.sort(gm), np.sort(gf), atol=1e-12)


def test_evaluations_are_deterministic():
    p = build_full_ocp(sat_spec(5), np.array([4.4, 0.0, 0.14]))
    rng = np.random.default_rng(2)
    v = rollout_guess(p, W=rng.uniform(-1, 1, (5, 2)))
    a = p.eval_with_derivatives(v)
    b = p.eval_with_derivatives(v)
    assert a[0] == b[0]
    for x, y in zip(a[1:], b[1:]):
        np.testing.assert_array_equal(x, y)


def test_spec_validation():
    model = lotka_volterra_model()
    with pytest.raises(ValueError):
        OcpSpec(model, 0, np.eye(2), [[0.01]], LV_REF)
    with pytest.raises(ValueError):
        OcpSpec(model, 3, np.array([[1.0, 0.5], [0.0, 1.0]]), [[0.01]], LV_REF)
    with pytest.raises(InfeasibleInputError):
        OcpSpec(model, 3, np.eye(2), [[0.01]], np.array([-1.0, 1.0]))
