import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from orwdro import Ball, Box, ConicProgram, FullSpace, solve
from orwdro.conic import add_perspective_h, add_support_fn_term

from oracles import lp_enumeration_minimize


def lp_min_x_above_one():
    prog = ConicProgram()
    x = prog.add_var("x")
    s = prog.add_var("slack")
    prog.add_obj(x, 1.0)
    prog.add_eq([x, s], [1.0, -1.0], 1.0)
    prog.add_nonneg([s])
    return prog, x


def test_lp_scalar():
    prog, x = lp_min_x_above_one()
    rep = solve(prog)
    assert rep.status == "optimal"
    assert rep.objective == pytest.approx(1.0, abs=1e-8)
    assert rep.primal[x] == pytest.approx(1.0, abs=1e-8)


def test_max_sense():
    prog = ConicProgram(sense="max")
    x = prog.add_var("x")
    s = prog.add_var("s")
    prog.add_obj(x, 1.0)
    prog.add_eq([x, s], [1.0, 1.0], 2.0)  # x <= 2
    prog.add_nonneg([x, s])
    rep = solve(prog)
    assert rep.status == "optimal"
    assert rep.objective == pytest.approx(2.0, abs=1e-8)


def test_objective_constant_carried():
    prog, _ = lp_min_x_above_one()
    prog.add_obj_const(10.0)
    assert solve(prog).objective == pytest.approx(11.0, abs=1e-8)


def test_infeasible_lp():
    prog = ConicProgram()
    x = prog.add_var("x")
    prog.add_eq([x], [1.0], 1.0)
    prog.add_eq([x], [1.0], 2.0)
    assert solve(prog).status == "infeasible"


def test_unbounded_lp():
    prog = ConicProgram()
    x = prog.add_var("x")
    prog.add_obj(x, -1.0)
    prog.add_nonneg([x])
    assert solve(prog).status == "unbounded"


def test_soc_norm():
    prog = ConicProgram()
    t = prog.add_var("t")
    xs = prog.add_var("x", 2)
    prog.add_obj(t, 1.0)
    prog.add_eq([xs[0]], [1.0], 3.0)
    prog.add_eq([xs[1]], [1.0], 4.0)
    prog.add_soc(t, xs)
    rep = solve(prog)
    assert rep.status == "optimal"
    assert rep.objective == pytest.approx(5.0, abs=1e-7)


def test_rsoc_square_over_two():
    prog = ConicProgram()
    u = prog.add_var("u")
    v = prog.add_var("v")
    x = prog.add_var("x")
    prog.add_obj(u, 1.0)
    prog.add_eq([v], [1.0], 1.0)
    prog.add_eq([x], [1.0], 2.0)
    prog.add_rsoc(u, v, [x])
    rep = solve(prog)
    assert rep.status == "optimal"
    assert rep.objective == pytest.approx(2.0, abs=1e-7)


def correlation_program():
    # max S12 over 2x2 correlation matrices; optimum is the all-ones matrix
    prog = ConicProgram()
    s11 = prog.add_var("s11")
    s12 = prog.add_var("s12")
    s22 = prog.add_var("s22")
    prog.add_obj(s12, -1.0)
    prog.add_eq([s11], [1.0], 1.0)
    prog.add_eq([s22], [1.0], 1.0)
    prog.add_psd(np.array([[s11, s12], [s12, s22]]))
    return prog


def test_psd_correlation():
    rep = solve(correlation_program())
    assert rep.status == "optimal"
    assert rep.objective == pytest.approx(-1.0, abs=1e-7)


def test_psd_backends_agree():
    a = solve(correlation_program(), force_backend="clarabel")
    b = solve(correlation_program(), force_backend="cvxopt")
    assert a.status == b.status == "optimal"
    assert a.objective == pytest.approx(b.objective, abs=1e-6)


def random_sdp(seed):
    # min <C, S> with unit trace: optimum is the smallest eigenvalue of C
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 5))
    c = rng.normal(size=(k, k))
    c = 0.5 * (c + c.T)
    prog = ConicProgram()
    idx = np.zeros((k, k), dtype=int)
    for i in range(k):
        for j in range(i, k):
            idx[i, j] = idx[j, i] = prog.add_var(f"s{i}{j}")
    for i in range(k):
        for j in range(i, k):
            prog.add_obj(idx[i, j], c[i, j] if i == j else 2.0 * c[i, j])
    prog.add_eq([idx[i, i] for i in range(k)], np.ones(k), 1.0)
    prog.add_psd(idx)
    return prog, float(np.linalg.eigvalsh(c)[0])


@settings(max_examples=12, deadline=None)
@given(st.integers(0, 10**6))
def test_sdp_eigenvalue_both_backends(seed):
    prog, want = random_sdp(seed)
    for backend in ("clarabel", "cvxopt"):
        rep = solve(prog, force_backend=backend)
        assert rep.status == "optimal"
        assert rep.objective == pytest.approx(want, abs=2e-6)


def random_lp(seed):
    # bounded by construction: one row fixes sum(x), the rest pass through
    # a strictly positive point, so the feasible set is a nonempty polytope
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 6))
    m = int(rng.integers(1, n))
    x0 = rng.uniform(0.5, 1.5, size=n)
    a = np.vstack([np.ones(n), rng.normal(size=(m, n))])
    b = a @ x0
    c = rng.normal(size=n)
    prog = ConicProgram()
    xs = prog.add_var("x", n)
    prog.add_obj(xs, c)
    for i in range(a.shape[0]):
        prog.add_eq(xs, a[i], float(b[i]))
    prog.add_nonneg(xs)
    return prog, a, b, c


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_lp_matches_enumeration_oracle(seed):
    prog, a, b, c = random_lp(seed)
    rep = solve(prog)
    want, _ = lp_enumeration_minimize(c, a, b)
    assert want is not None and rep.status == "optimal"
    assert rep.objective == pytest.approx(want, abs=1e-6 * (1 + abs(want)))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6))
def test_objective_scaling(seed):
    prog, a, b, c = random_lp(seed)
    rep = solve(prog)
    if rep.status != "optimal":
        return
    scaled = ConicProgram()
    xs = scaled.add_var("x", len(c))
    scaled.add_obj(xs, 7.5 * np.asarray(c))
    for i in range(a.shape[0]):
        scaled.add_eq(xs, a[i], float(b[i]))
    scaled.add_nonneg(xs)
    rep2 = solve(scaled)
    assert rep2.objective == pytest.approx(7.5 * rep.objective, abs=1e-5 * (1 + abs(rep.objective)))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6))
def test_weak_duality_certificate(seed):
    # at optimality the reported residuals certify near-feasibility
    prog, a, b, _ = random_lp(seed)
    rep = solve(prog)
    if rep.status != "optimal":
        return
    x = rep.primal
    gap = np.abs(a @ x[: len(x)][: a.shape[1]] - b).max()
    assert gap <= 1e-6 * (1.0 + np.abs(b).max())
    assert x.min() >= -1e-7


def test_perspective_p1_is_norm_cone():
    prog = ConicProgram()
    lam = prog.add_var("lam")
    z = prog.add_var("z", 2)
    prog.add_obj(lam, 1.0)
    prog.add_eq([z[0]], [1.0], 0.6)
    prog.add_eq([z[1]], [1.0], 0.8)
    out = add_perspective_h(prog, z, lam, 1)
    assert out is None
    rep = solve(prog)
    assert rep.objective == pytest.approx(1.0, abs=1e-7)


def test_perspective_p2_quarter_square():
    prog = ConicProgram()
    lam = prog.add_var("lam")
    z = prog.add_var("z", 2)
    prog.add_eq([lam], [1.0], 1.0)
    prog.add_eq([z[0]], [1.0], 2.0)
    prog.add_eq([z[1]], [1.0], 0.0)
    t = add_perspective_h(prog, z, lam, 2)
    prog.add_obj(t, 1.0)
    rep = solve(prog)
    assert rep.objective == pytest.approx(1.0, abs=1e-7)


def test_perspective_rejects_other_orders():
    prog = ConicProgram()
    lam = prog.add_var("lam")
    z = prog.add_var("z")
    with pytest.raises(ValueError):
        add_perspective_h(prog, [z], lam, 3)


def support_fn_value(domain, point):
    prog = ConicProgram()
    z = prog.add_var("z", len(point))
    for k, v in enumerate(point):
        prog.add_eq([z[k]], [1.0], float(v))
    terms = add_support_fn_term(prog, z, domain)
    for idx, coef in terms:
        prog.add_obj(idx, coef)
    rep = solve(prog)
    return rep.status, rep.objective


def test_support_fn_full_space_pins_zeta():
    status, _ = support_fn_value(FullSpace(), [1.0, 0.0])
    assert status == "infeasible"
    status, val = support_fn_value(FullSpace(), [0.0, 0.0])
    assert status == "optimal" and val == pytest.approx(0.0, abs=1e-8)


def test_support_fn_box():
    dom = Box(lower=np.array([-1.0, -1.0]), upper=np.array([1.0, 1.0]))
    status, val = support_fn_value(dom, [2.0, -3.0])
    assert status == "optimal"
    assert val == pytest.approx(5.0, abs=1e-6)


def test_support_fn_ball():
    dom = Ball(center=np.zeros(2), radius=2.0)
    status, val = support_fn_value(dom, [3.0, 4.0])
    assert status == "optimal"
    assert val == pytest.approx(10.0, abs=1e-6)
    shifted = Ball(center=np.array([1.0, 0.0]), radius=2.0)
    _, val2 = support_fn_value(shifted, [3.0, 4.0])
    assert val2 == pytest.approx(13.0, abs=1e-6)


def test_validate_catches_bad_programs():
    prog = ConicProgram()
    x = prog.add_var("x")
    prog.add_psd(np.array([[x, x], [x, 99]]))
    with pytest.raises(ValueError):
        prog.validate()
    prog2 = ConicProgram()
    y = prog2.add_var("y")
    prog2.add_obj(y, 1.0)
    prog2.obj[5] = 1.0
    with pytest.raises(ValueError):
        prog2.validate()


def test_dump_mentions_vars_and_cones():
    prog = correlation_program()
    text = prog.dump()
    assert "program min vars=3" in text
    assert "cone psd" in text


def test_force_backend_rejects_nonlinear_on_highs():
    prog = correlation_program()
    with pytest.raises(ValueError):
        solve(prog, force_backend="highs")
