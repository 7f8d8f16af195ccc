import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from orwdro import (
    AmbiguitySpec,
    G2,
    Gcov,
    GroundCost,
    RiskBoundInputs,
    build_inner_dual_I,
    build_inner_dual_II,
    closed_form_value_p1,
    cvar,
    empirical,
    eval_inner,
    extract_worst_case,
    full_mask,
    joint_fit,
    mad_regression,
    resolve_z0,
    risk_bound,
    rwp_one_sided,
    second_moment_about,
    solve_inner,
    solve_worst_case,
    trimmed_mean,
)

import gen
from oracles import cvar_oracle, theta_grid_min

LINE = [(np.array([1.0]), 0.0)]  # loss xi on the line
ABS = [(np.array([1.0]), 0.0), (np.array([-1.0]), 0.0)]  # loss |xi|


def g2_spec(eps, rho, sigma, z0, p=1):
    return AmbiguitySpec(p=p, eps=eps, rho=rho, family=G2(sigma=sigma, z0=np.atleast_1d(z0)))


def gcov_spec(eps, rho, sigma, z0, p=1):
    return AmbiguitySpec(p=p, eps=eps, rho=rho, family=Gcov(sigma=sigma, z0=np.atleast_1d(z0)))


def value_of(pieces, data, spec):
    if isinstance(spec.family, G2):
        prog = build_inner_dual_I(pieces, data, spec)
    else:
        prog = build_inner_dual_II(pieces, data, spec)
    return solve_inner(prog)


# -- order-1 ball, no moment cap: hand-checkable values -----------------------


def test_dual_point_mass_absolute_loss():
    data = empirical([[0.0]])
    sol = value_of(ABS, data, g2_spec(0.0, 0.5, math.inf, 0.0))
    assert sol.status == "optimal"
    assert sol.value == pytest.approx(0.5, abs=1e-6)


def test_dual_trims_to_the_top_atom():
    data = empirical([[0.0], [1.0]])
    sol = value_of(LINE, data, g2_spec(0.5, 1e-6, math.inf, 0.0))
    assert sol.status == "optimal"
    assert sol.value == pytest.approx(1.0, abs=1e-4)


def test_dual_zero_eps_is_lipschitz_regularization():
    # classical ball: value = E[loss] + rho * (steepest slope)
    rng = np.random.default_rng(3)
    data = gen.random_measure(rng, 4, 2)
    pieces = gen.random_pieces(rng, 2, 3)
    rho = 0.37
    sol = value_of(pieces, data, g2_spec(0.0, rho, math.inf, np.zeros(2)))
    sample_loss = sum(
        w * max(float(a @ z + b) for a, b in pieces)
        for w, z in zip(data.weights, data.support)
    )
    lip = max(np.linalg.norm(a) for a, _ in pieces)
    assert sol.value - sample_loss == pytest.approx(rho * lip, abs=1e-5)


def test_moment_cap_tightens_the_value():
    data = empirical([[0.0], [1.0]])
    loose = value_of(LINE, data, g2_spec(0.3, 0.5, math.inf, 0.0))
    capped = value_of(LINE, data, g2_spec(0.3, 0.5, 1.2, 0.0))
    assert capped.status == "optimal"
    assert capped.value <= loose.value + 1e-7


def test_dual_multiplier_dominates_slopes():
    # order-1 transport multiplier must clear every slope norm
    rng = np.random.default_rng(11)
    data = gen.random_measure(rng, 3, 2)
    pieces = gen.random_pieces(rng, 2, 3)
    sol = value_of(pieces, data, g2_spec(0.2, 0.4, math.inf, np.zeros(2)))
    lip = max(np.linalg.norm(a) for a, _ in pieces)
    assert sol.dual.lambda2 >= lip - 1e-6
    assert sol.dual.splitting_residual <= 1e-5


def test_rho_zero_warns_and_bumps():
    data = empirical([[0.0]])
    with pytest.warns(UserWarning):
        sol = value_of(ABS, data, g2_spec(0.1, 0.0, 4.0, 0.0))
    assert sol.status == "optimal"


def test_per_sample_pieces_accepted():
    data = empirical([[0.0], [1.0]])
    per = [ABS, LINE]
    sol = value_of(per, data, g2_spec(0.0, 0.1, math.inf, 0.0))
    assert sol.status == "optimal"
    with pytest.raises(ValueError):
        value_of([ABS, LINE, ABS], data, g2_spec(0.0, 0.1, math.inf, 0.0))


# -- closed form and cvar ------------------------------------------------------


def test_cvar_uniform_examples():
    vals = np.array([0.0, 1.0])
    w = np.array([0.5, 0.5])
    assert cvar(vals, w, 0.0) == pytest.approx(0.5)
    assert cvar(vals, w, 0.5) == pytest.approx(1.0)
    # top 0.75 mass: all of atom 1 (0.5) plus 0.25 from atom 0
    assert cvar(vals, w, 0.25) == pytest.approx(0.5 / 0.75)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_cvar_matches_scan_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 8))
    vals = rng.normal(size=n)
    w = rng.uniform(0.1, 1.0, size=n)
    w /= w.sum()
    eps = float(rng.uniform(0.0, 0.8))
    assert cvar(vals, w, eps) == pytest.approx(cvar_oracle(vals, w, eps), abs=1e-10)


def test_closed_form_examples():
    data = empirical([[0.0], [1.0]])
    assert closed_form_value_p1(LINE, data, 0.0, 0.25) == pytest.approx(0.75)
    assert closed_form_value_p1(LINE, data, 0.5, 0.25) == pytest.approx(1.25)


def test_closed_form_guards():
    data = empirical([[0.0]])
    with pytest.raises(ValueError):
        closed_form_value_p1(LINE, data, 0.1, 0.1, p=2)
    with pytest.raises(ValueError):
        closed_form_value_p1(LINE, data, 0.1, 0.1, sigma=5.0)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6))
def test_dual_matches_closed_form(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 3))
    data = gen.random_measure(rng, int(rng.integers(1, 5)), d)
    pieces = gen.random_pieces(rng, d, int(rng.integers(1, 4)))
    eps = float(rng.uniform(0.0, 0.6))
    rho = float(rng.uniform(0.05, 1.0))
    sol = value_of(pieces, data, g2_spec(eps, rho, math.inf, np.zeros(d)))
    want = closed_form_value_p1(pieces, data, eps, rho)
    assert sol.value == pytest.approx(want, abs=1e-4 * (1 + abs(want)))


# -- covariance-capped family --------------------------------------------------


@settings(max_examples=12, deadline=None)
@given(st.integers(0, 10**6))
def test_families_coincide_on_the_line(seed):
    rng = np.random.default_rng(seed)
    data = gen.random_measure(rng, int(rng.integers(1, 4)), 1)
    pieces = gen.random_pieces(rng, 1, int(rng.integers(1, 3)))
    eps = float(rng.uniform(0.0, 0.4))
    rho = float(rng.uniform(0.1, 0.8))
    sigma = float(np.sqrt(second_moment_about(data, np.zeros(1)))) + 1.0
    a = value_of(pieces, data, g2_spec(eps, rho, sigma, 0.0))
    b = value_of(pieces, data, gcov_spec(eps, rho, sigma, 0.0))
    assert a.status == "optimal" and b.status == "optimal"
    assert a.value == pytest.approx(b.value, abs=1e-5 * (1 + abs(a.value)))


def test_covariance_cap_is_tighter_than_trace_cap():
    rng = np.random.default_rng(5)
    d = 2
    data = gen.random_measure(rng, 3, d)
    pieces = gen.random_pieces(rng, d, 2)
    sigma = float(np.sqrt(second_moment_about(data, np.zeros(d)))) + 0.5
    cov = value_of(pieces, data, gcov_spec(0.2, 0.3, sigma, np.zeros(d)))
    tr = value_of(pieces, data, g2_spec(0.2, 0.3, sigma * math.sqrt(d), np.zeros(d)))
    assert cov.status == "optimal" and tr.status == "optimal"
    assert cov.value <= tr.value + 1e-5


def test_dual_ii_reports_matrix_multiplier():
    rng = np.random.default_rng(9)
    data = gen.random_measure(rng, 2, 2)
    pieces = gen.random_pieces(rng, 2, 2)
    sigma = float(np.sqrt(second_moment_about(data, np.zeros(2)))) + 1.0
    sol = value_of(pieces, data, gcov_spec(0.1, 0.2, sigma, np.zeros(2)))
    lam = sol.dual.Lambda1
    assert lam.shape == (2, 2)
    assert np.allclose(lam, lam.T, atol=1e-7)
    assert np.linalg.eigvalsh(lam)[0] >= -1e-7


# -- worst-case primal and extraction -------------------------------------------


def worst_case_instance(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 3))
    data = gen.random_measure(rng, int(rng.integers(2, 5)), d)
    pieces = gen.random_pieces(rng, d, int(rng.integers(1, 4)))
    eps = float(rng.uniform(0.05, 0.5))
    rho = float(rng.uniform(0.1, 0.8))
    z0 = data.mean()
    sigma = math.sqrt(1.3 * second_moment_about(data, z0) + 0.5)
    spec = g2_spec(eps, rho, sigma, z0)
    return pieces, data, spec


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10**6))
def test_strong_duality_small_instances(seed):
    pieces, data, spec = worst_case_instance(seed)
    dual = value_of(pieces, data, spec)
    primal = solve_worst_case(pieces, data, spec)
    assert dual.status == "optimal" and primal.status == "optimal"
    assert primal.value == pytest.approx(dual.value, abs=1e-5 * (1 + abs(dual.value)))


def test_extracted_distribution_is_feasible_and_tight():
    pieces, data, spec = worst_case_instance(123)
    primal = solve_worst_case(pieces, data, spec)
    nu = extract_worst_case(primal)
    assert abs(nu.weights.sum() - 1.0) < 1e-9
    cost = GroundCost(spec.p, full_mask(data.dim))
    assert rwp_one_sided(data, nu, spec.eps, cost) <= spec.rho + 1e-4
    assert second_moment_about(nu, spec.family.z0) <= spec.family.sigma ** 2 + 1e-4
    attained = sum(
        w * max(float(a @ z + b) for a, b in pieces)
        for w, z in zip(nu.weights, nu.support)
    )
    assert attained == pytest.approx(primal.value, rel=1e-5, abs=1e-7)


def test_worst_case_concentrates_on_top_atom():
    data = empirical([[0.0], [1.0]])
    spec = g2_spec(0.5, 1e-4, 3.0, 0.5)
    primal = solve_worst_case(LINE, data, spec)
    nu = extract_worst_case(primal)
    # trimming keeps the high-loss atom; transport barely moves it
    top = nu.support[np.argmax(nu.weights)]
    assert top[0] == pytest.approx(1.0, abs=1e-2)


def test_worst_case_needs_second_moment_family():
    data = empirical([[0.0]])
    with pytest.raises(ValueError):
        solve_worst_case(ABS, data, gcov_spec(0.1, 0.1, 1.0, 0.0))


def test_extraction_rejects_budget_on_zero_mass_pairs():
    # without a moment cap the order-1 optimum can spread its budget over
    # pairs carrying no mass; extraction refuses and points at the fix
    rng = np.random.default_rng(0)
    data = empirical(rng.normal(size=(5, 2)))
    pieces = [(np.array([0.8, -1.0]), 0.0), (np.array([-0.8, 1.0]), 0.0)]
    spec = g2_spec(0.2, 0.3, math.inf, np.zeros(2))
    primal = solve_worst_case(pieces, data, spec)
    assert primal.status == "optimal"
    with pytest.raises(ValueError, match="zero-mass"):
        extract_worst_case(primal)
    capped = solve_worst_case(pieces, data, g2_spec(0.2, 0.3, 6.0, np.zeros(2)))
    nu = extract_worst_case(capped)
    losses = [max(float(a @ z + b) for a, b in pieces) for z in nu.support]
    assert float(nu.weights @ losses) == pytest.approx(capped.value, abs=1e-6)


def test_extraction_requires_optimal_status():
    pieces, data, spec = worst_case_instance(7)
    primal = solve_worst_case(pieces, data, spec)
    primal.status = "inaccurate"
    with pytest.raises(ValueError):
        extract_worst_case(primal)


# -- joint minimization ----------------------------------------------------------


def test_joint_fit_interpolates_single_point():
    fam = mad_regression(2)
    data = empirical([[1.0, 1.0]])
    spec = g2_spec(0.0, 1e-6, math.inf, np.zeros(2))
    fit = joint_fit(fam, data, spec)
    assert fit.status == "optimal"
    assert fit.value == pytest.approx(0.0, abs=1e-5)
    assert fit.theta[0] == pytest.approx(1.0, abs=1e-3)


def test_joint_fit_matches_grid_scan():
    # 1-D parameter, no moment cap: the profile is the exact closed form
    rng = np.random.default_rng(21)
    x = rng.normal(size=6)
    y = 0.7 * x + 0.1 * rng.normal(size=6)
    data = empirical(np.column_stack([x, y]))
    fam = mad_regression(2)
    eps, rho = 0.2, 0.15
    spec = g2_spec(eps, rho, math.inf, np.zeros(2))
    fit = joint_fit(fam, data, spec)

    def profile(t):
        pieces = [(np.array([t, -1.0]), 0.0), (np.array([-t, 1.0]), 0.0)]
        return closed_form_value_p1(pieces, data, eps, rho)

    _, grid_val = theta_grid_min(profile, -3.0, 3.0, steps=4001)
    assert fit.value <= grid_val + 1e-5
    assert fit.value >= grid_val - 2e-3  # grid resolution slack


def test_joint_fit_value_certified_by_eval_inner():
    rng = np.random.default_rng(2)
    data = empirical(rng.normal(size=(4, 2)))
    fam = mad_regression(2)
    z0 = data.mean()
    sigma = math.sqrt(1.5 * second_moment_about(data, z0) + 0.5)
    spec = g2_spec(0.2, 0.3, sigma, z0)
    fit = joint_fit(fam, data, spec)
    assert fit.status == "optimal"
    check = eval_inner(fam, fit.theta, data, spec)
    assert check.value == pytest.approx(fit.value, abs=1e-5 * (1 + abs(fit.value)))


def test_joint_fit_resolves_z0_sources():
    rng = np.random.default_rng(4)
    data = empirical(rng.normal(size=(6, 2)) + 3.0)
    fam = mad_regression(2)
    spec = g2_spec(0.1, 0.3, 25.0, np.zeros(2))
    fit = joint_fit(fam, data, spec, z0_source="trimmed")
    assert np.allclose(fit.z0, trimmed_mean(data))
    assert np.allclose(fit.spec.family.z0, fit.z0)


def test_resolve_z0_policies():
    rng = np.random.default_rng(8)
    data = empirical(rng.normal(size=(5, 2)))
    assert np.allclose(resolve_z0(data, "origin"), np.zeros(2))
    assert np.allclose(resolve_z0(data, "trimmed"), trimmed_mean(data))
    given_pt = np.array([1.0, 2.0])
    assert np.allclose(resolve_z0(data, given_pt), given_pt)
    with pytest.raises(ValueError):
        resolve_z0(data, "median")


# -- monotonicity of the worst case ----------------------------------------------


def test_value_monotone_in_radius_cap_and_trim():
    rng = np.random.default_rng(17)
    data = gen.random_measure(rng, 4, 2)
    pieces = gen.random_pieces(rng, 2, 2)
    z0 = data.mean()
    base = math.sqrt(second_moment_about(data, z0))

    def val(eps, rho, sigma):
        return value_of(pieces, data, g2_spec(eps, rho, sigma, z0)).value

    v_rho = [val(0.1, r, base + 1.0) for r in (0.1, 0.3, 0.6)]
    assert v_rho == sorted(v_rho)
    v_sig = [val(0.1, 0.3, s) for s in (base + 0.5, base + 1.0, base + 2.0)]
    assert all(a <= b + 1e-7 for a, b in zip(v_sig, v_sig[1:]))
    v_eps = [val(e, 0.3, base + 1.0) for e in (0.0, 0.15, 0.3)]
    assert all(a <= b + 1e-7 for a, b in zip(v_eps, v_eps[1:]))


# -- risk bound -------------------------------------------------------------------


def test_risk_bound_values():
    flat = RiskBoundInputs(p=1, eps=0.0, rho=1.0, tau=0.0, lipschitz=1.0)
    assert risk_bound(flat) == pytest.approx(2.0)
    shifted = RiskBoundInputs(p=1, eps=0.0, rho=1.0, tau=3.0, lipschitz=math.sqrt(2.0))
    assert risk_bound(shifted) == pytest.approx(8.0 * math.sqrt(2.0))


def test_risk_bound_order_two_includes_curvature():
    inp = RiskBoundInputs(p=2, eps=0.0, rho=0.5, tau=0.0, sobolev12=1.0, smoothness=2.0)
    # radius = 2 * 0.5 = 1; bound = 1 + 0.5 * 2 * 1
    assert risk_bound(inp) == pytest.approx(2.0)


def test_risk_bound_requires_matching_seminorms():
    with pytest.raises(ValueError):
        risk_bound(RiskBoundInputs(p=1, eps=0.1, rho=0.1, tau=0.0))
    with pytest.raises(ValueError):
        risk_bound(RiskBoundInputs(p=2, eps=0.1, rho=0.1, tau=0.0, lipschitz=1.0))
    with pytest.raises(ValueError):
        RiskBoundInputs(p=1, eps=-0.1, rho=0.1, tau=0.0, lipschitz=1.0)


def test_spec_validation():
    with pytest.raises(ValueError):
        AmbiguitySpec(p=3, eps=0.1, rho=0.1, family=G2(sigma=1.0, z0=np.zeros(1)))
    with pytest.raises(ValueError):
        AmbiguitySpec(p=1, eps=1.0, rho=0.1, family=G2(sigma=1.0, z0=np.zeros(1)))
    with pytest.raises(ValueError):
        Gcov(sigma=math.inf, z0=np.zeros(1))
    with pytest.raises(ValueError):
        G2(sigma=0.0, z0=np.zeros(1))
