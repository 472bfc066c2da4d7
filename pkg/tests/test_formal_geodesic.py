import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp
from scipy.linalg import expm

from besselab.errors import InvalidInput, NotApplicable, RealizationFailed
from besselab.formal_geodesic import (
    CurvatureProfile,
    FormalGeodesic,
    PolynomialRule,
    SampledRule,
    Segment,
    bott_check,
    concat,
    concavity_index,
    conjugate_points,
    fundamental_solution,
    index_gap_bounds,
    index_report,
    is_regular,
    iterate,
    poincare_map,
    propagate,
    random_rational_rotation,
    realize_poincare,
    round_sphere_block,
    twist_block,
)
from besselab.symplectic_core import omega_matrix, symplectic_defect

TWO_PI = 2 * math.pi


def rot(s):
    return np.array([[np.cos(s), -np.sin(s)], [np.sin(s), np.cos(s)]])


def nine_quarters(m=2):
    return FormalGeodesic.constant(2.25 * np.eye(m))


def random_poly_fg(rng, m, deg=2, T=TWO_PI):
    # elliptic base plus a bounded perturbation, so flows stay of moderate size
    C = rng.normal(size=(deg + 1, m, m)) * 0.15
    C = C + np.swapaxes(C, 1, 2)
    C[0] += np.diag(rng.uniform(0.5, 2.0, size=m))
    C /= np.array([T**k for k in range(deg + 1)])[:, None, None]
    Q = np.linalg.qr(rng.normal(size=(m, m)))[0]
    return FormalGeodesic(m, CurvatureProfile([Segment(0.0, T, PolynomialRule(C))]), Q)


def integrate_direct(fg, t1):
    """Independent oracle: one solve_ivp call over the whole interval."""
    m = fg.m

    def rhs(t, y):
        Y = y.reshape(2 * m, 2 * m)
        return np.concatenate([Y[m:], -fg.R(t) @ Y[:m]]).ravel()

    pts = [t for t in fg.R.breakpoints if 0 < t < t1]
    Y = np.eye(2 * m)
    t0 = 0.0
    for t in pts + [t1]:
        sol = solve_ivp(rhs, (t0, t), Y.ravel(), method="LSODA", rtol=1e-12, atol=1e-13)
        Y = sol.y[:, -1].reshape(2 * m, 2 * m)
        t0 = t
    return Y


# -- propagation ------------------------------------------------------------


def test_harmonic_oscillator_zero_at_pi():
    fg = FormalGeodesic.constant([[1.0]])
    x = propagate(fg, [0.0, 1.0], 0.0, math.pi)
    assert abs(x[0]) < 1e-10
    assert abs(x[1] + 1) < 1e-10


def test_flat_block_is_constant():
    fg = FormalGeodesic.constant([[0.0]])
    for t in (0.5, 3.0, TWO_PI):
        x = propagate(fg, [1.0, 0.0], 0.0, t)
        assert np.allclose(x, [1.0, 0.0], atol=1e-12)


def test_nine_quarters_full_period_is_minus_identity():
    fs = fundamental_solution(nine_quarters())
    assert np.max(np.abs(fs.end + np.eye(4))) < 1e-9


def test_propagate_between_interior_times():
    fg = FormalGeodesic.constant([[4.0]])
    x = propagate(fg, [1.0, 0.0], 0.3, 1.1)
    # cos(2t) solution started at 0.3 with value 1 and slope 0
    assert np.allclose(x, [math.cos(1.6), -2 * math.sin(1.6)], atol=1e-10)


def test_propagate_rejects_bad_input():
    fg = FormalGeodesic.constant(np.eye(2))
    with pytest.raises(InvalidInput):
        propagate(fg, [1.0, 0.0], 0, 1)
    with pytest.raises(InvalidInput):
        propagate(fg, np.zeros(4), 0, 7.0)


def test_ode_segments_match_direct_integration():
    rng = np.random.default_rng(3)
    fg = random_poly_fg(rng, 3)
    fs = fundamental_solution(fg)
    assert np.max(np.abs(fs.end - integrate_direct(fg, fg.T))) < 1e-8
    assert np.max(np.abs(fs(2.0) - integrate_direct(fg, 2.0))) < 1e-8


def test_sampled_rule_tracks_its_samples():
    t = np.linspace(0, TWO_PI, 40)
    vals = np.array([[[1 + 0.1 * np.sin(s)]] for s in t])
    prof = CurvatureProfile.sampled(t, vals)
    assert abs(prof(t[7])[0, 0] - vals[7, 0, 0]) < 1e-12
    fg = FormalGeodesic(1, prof, np.eye(1))
    assert symplectic_defect(fundamental_solution(fg).end) < 1e-9


def test_jump_in_curvature_is_honoured():
    # R = 1 on [0, pi], 4 on [pi, 2pi]; closed form by composing the two flows
    prof = CurvatureProfile.piecewise_constant([0, math.pi, TWO_PI], [[[1.0]], [[4.0]]])
    fg = FormalGeodesic(1, prof, np.eye(1))
    c1 = np.array([[-1.0, 0.0], [0.0, -1.0]])  # flow of R=1 over pi
    c2 = np.eye(2)  # flow of R=4 over pi
    assert np.max(np.abs(fundamental_solution(fg).end - c2 @ c1)) < 1e-12


# -- Poincare map -----------------------------------------------------------


def test_round_sphere_poincare_is_identity():
    for m in (1, 2, 4):
        P = poincare_map(round_sphere_block(m)).entries
        assert np.max(np.abs(P - np.eye(2 * m))) < 1e-12


def test_nine_quarters_poincare_is_minus_identity():
    P = poincare_map(nine_quarters()).entries
    assert np.max(np.abs(P + np.eye(4))) < 1e-9


def exemplar_B():
    B = np.zeros((4, 4))
    B[0, 2] = -1
    B[1, 3] = 1
    B[2, 0] = 1
    B[3, 1] = -1
    return B


@pytest.mark.parametrize("s", [0.0, 0.7, 2.0, 4.5])
def test_exemplar_poincare_is_rotated_B(s):
    # each block turns a quarter with R = 1, then a full turn pads to 2 pi
    h = math.pi / 2
    prof = CurvatureProfile.piecewise_constant(
        [0, h, 3 * h, 4 * h], [np.eye(2), np.diag([1.0, 16 / 9]), np.diag([16.0, 16 / 9])])
    fg = FormalGeodesic(2, prof, rot(-s))
    P = poincare_map(fg).entries
    assert np.max(np.abs(P - twist_block(rot(s)) @ exemplar_B())) < 1e-10
    ev = np.linalg.eigvals(P)
    assert np.allclose(ev.real, 0, atol=1e-6)
    assert np.allclose(np.sort(ev.imag), [-1, -1, 1, 1], atol=1e-6)


def test_poincare_map_is_symplectic_with_stats():
    rng = np.random.default_rng(11)
    pm = poincare_map(random_poly_fg(rng, 2))
    Om = omega_matrix(2)
    P = pm.entries
    assert np.max(np.abs(P.T @ Om @ P - Om)) < 1e-9
    assert pm.stats["nfev"] > 0


# -- concat and iterate -----------------------------------------------------


def test_concat_with_flat_block_matches_direct_integration():
    rng = np.random.default_rng(5)
    a = random_poly_fg(rng, 2)
    flat = FormalGeodesic.constant(np.zeros((2, 2)), T=1.5)
    c = concat([a, flat])
    assert abs(c.T - (a.T + 1.5)) < 1e-12
    free = np.block([[np.eye(2), 1.5 * np.eye(2)], [np.zeros((2, 2)), np.eye(2)]])
    P = poincare_map(c).entries
    assert np.max(np.abs(P - free @ fundamental_solution(a).end)) < 1e-9
    assert np.max(np.abs(P - integrate_direct(c, c.T))) < 1e-8


def test_padding_keeps_the_poincare_map():
    # 4 Id and Id both have identity flow over 2 pi
    rng = np.random.default_rng(8)
    a = random_poly_fg(rng, 2)
    padded = concat([a, FormalGeodesic.constant(4 * np.eye(2)), FormalGeodesic.constant(np.eye(2))], A_total=a.A)
    assert abs(padded.T - 3 * TWO_PI) < 1e-12
    assert len(padded.R.segments) == 3
    assert np.allclose(padded.R(TWO_PI + 1.0), 4 * np.eye(2))
    assert np.allclose(padded.R(2 * TWO_PI + 1.0), np.eye(2))
    assert np.max(np.abs(poincare_map(padded).entries - poincare_map(a).entries)) < 1e-9


def test_twisted_composition_rule():
    # (Delta A_3)^-1 Phi_2 Phi_1 computed from the pieces
    rng = np.random.default_rng(9)
    a, b = random_poly_fg(rng, 2), random_poly_fg(rng, 2)
    A3 = rot(0.4)
    c = concat([a, b], A_total=A3)
    lhs = twist_block(A3.T) @ fundamental_solution(b).end @ fundamental_solution(a).end
    assert np.max(np.abs(poincare_map(c).entries - lhs)) < 1e-9


def test_concat_is_associative():
    rng = np.random.default_rng(10)
    a, b, c = (random_poly_fg(rng, 2) for _ in range(3))
    P1 = poincare_map(concat([a, concat([b, c])])).entries
    P2 = poincare_map(concat([concat([a, b]), c])).entries
    assert np.max(np.abs(P1 - P2)) < 1e-9


def test_concat_rejects_mixed_dimensions():
    with pytest.raises(InvalidInput):
        concat([round_sphere_block(1), round_sphere_block(2)])
    with pytest.raises(InvalidInput):
        concat([])


def test_iterate_round_sphere_stays_identity():
    fg = round_sphere_block(3)
    for k in (1, 2, 5):
        P = poincare_map(iterate(fg, k)).entries
        assert np.max(np.abs(P - np.eye(6))) < 1e-9


def test_iterate_nine_quarters_squared_is_identity():
    P = poincare_map(iterate(nine_quarters(), 2)).entries
    assert np.max(np.abs(P - np.eye(4))) < 1e-9


def test_iterate_law_with_twist():
    rng = np.random.default_rng(12)
    fg = random_poly_fg(rng, 3)
    assert np.max(np.abs(fg.A - np.eye(3))) > 0.1
    P = poincare_map(fg).entries
    P3 = poincare_map(iterate(fg, 3)).entries
    assert np.max(np.abs(P3 - np.linalg.matrix_power(P, 3))) < 1e-8


def test_iterate_rejects_bad_q():
    with pytest.raises(InvalidInput):
        iterate(round_sphere_block(1), 0)
    with pytest.raises(InvalidInput):
        iterate(round_sphere_block(1), 1.5)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 3), st.integers(2, 4))
def test_iterate_law_property(seed, m, q):
    fg = random_poly_fg(np.random.default_rng(seed), m, deg=1)
    P = poincare_map(fg).entries
    Pq = poincare_map(iterate(fg, q)).entries
    scale = max(1.0, np.linalg.norm(P, 2) ** q)
    assert np.max(np.abs(Pq - np.linalg.matrix_power(P, q))) <= 1e-8 * scale


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 3))
def test_flow_stays_symplectic(seed, m):
    fg = random_poly_fg(np.random.default_rng(seed), m)
    fs = fundamental_solution(fg)
    for t in np.linspace(0, fg.T, 7):
        Phi = fs(t)
        assert symplectic_defect(Phi) <= 1e-9 * max(1.0, np.linalg.norm(Phi, 2) ** 2)


# -- conjugate points and index ---------------------------------------------


@pytest.mark.parametrize("m", [1, 2, 3])
def test_round_sphere_conjugate_point_at_pi(m):
    cp = conjugate_points(round_sphere_block(m))
    assert cp.ind_omega == m
    assert len(cp.points) == 1
    t, mult = cp.points[0]
    assert abs(t - math.pi) < 1e-9 and mult == m


def test_nine_quarters_conjugate_points():
    cp = conjugate_points(nine_quarters())
    assert cp.ind_omega == 4
    ts = [t for t, _ in cp.points]
    assert np.allclose(ts, [TWO_PI / 3, 2 * TWO_PI / 3], atol=1e-9)
    assert all(k == 2 for _, k in cp.points)


def test_nine_quarters_third_iterate_conjugate_points():
    cp = conjugate_points(iterate(nine_quarters(), 3))
    # zeros of sin(3t/2) at 2k pi/3 for k = 1..8; k = 9 is the endpoint
    assert cp.ind_omega == 16
    assert np.allclose([t for t, _ in cp.points], [2 * k * math.pi / 3 for k in range(1, 9)], atol=1e-9)


def test_distinct_frequencies_give_simple_points():
    fg = FormalGeodesic.constant(np.diag([1.0, 2.0]))
    cp = conjugate_points(fg)
    w = math.sqrt(2)
    expected = sorted([math.pi] + [k * math.pi / w for k in range(1, 3)])
    assert np.allclose([t for t, _ in cp.points], expected, atol=1e-9)
    assert cp.ind_omega == 3


def test_round_sphere_index_report():
    for m in (1, 2, 3):
        r = index_report(round_sphere_block(m), oracle=True)
        assert (r.ind_omega, r.ind_P, r.ind, r.nullity, r.ind0) == (m, 0, m, 2 * m, 3 * m)
        assert r.hessian["negative"] == m and r.hessian["null"] == 2 * m


@pytest.mark.parametrize("n", [2, 3, 4, 5])
def test_round_sphere_iterates_follow_odd_multiples(n):
    m = n - 1
    for k in (1, 2, 3, 4):
        r = index_report(iterate(round_sphere_block(m), k))
        assert r.ind == (2 * k - 1) * m
        assert r.nullity == 2 * m


def test_nine_quarters_index_values():
    fg = nine_quarters()
    got = [(r.ind, r.nullity, r.ind_omega) for r in (index_report(iterate(fg, k), oracle=True) for k in (1, 2, 3))]
    assert got == [(6, 0, 4), (10, 4, 10), (18, 0, 16)]


def test_index_report_json():
    r = index_report(round_sphere_block(2), oracle=True)
    d = json.loads(json.dumps(r.to_json()))
    assert d["ind"] == 2 and d["ind0"] == 6
    assert d["conjugate_points"][0]["multiplicity"] == 2
    assert d["hessian"]["negative"] == 2


def test_concavity_index_on_minus_identity():
    # D = {u = 0}; for X = (0, v), (P - Id)X = (0, -2v) pairs to zero with (0, w)
    c = concavity_index(-np.eye(4))
    assert c["domain_dim"] == 2 and c["kernel"] == 2 and c["ker_P_minus_id"] == 0
    assert c["ind_P"] == 2


def test_concavity_index_identity():
    c = concavity_index(np.eye(6))
    assert c["domain_dim"] == 6 and c["kernel"] == 6 and c["ind_P"] == 0


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10**6))
def test_index_split_and_oracle_agree(seed):
    rng = np.random.default_rng(seed)
    fg, q = random_rational_rotation(int(rng.integers(1, 4)), rng)
    r = index_report(fg, oracle=True)
    assert r.ind == r.ind_omega + r.ind_P
    assert r.ind0 == r.ind + r.nullity
    assert r.hessian["negative"] == r.ind and r.hessian["null"] == r.nullity


# -- iteration identities ---------------------------------------------------


def test_bott_worked_instance():
    rec = bott_check(nine_quarters(), 2, 1, oracle=True)
    assert (rec.eq_a.lhs, rec.eq_a.rhs) == (18, 18)
    assert (rec.eq_b.lhs, rec.eq_b.rhs) == (14, 14)
    assert rec.holds


def test_bott_needs_regular_iterate():
    fg = FormalGeodesic.constant(np.diag([1.0, 2.0]))
    assert not is_regular(fg, 2)
    with pytest.raises(NotApplicable):
        bott_check(fg, 2, 1)
    with pytest.raises(InvalidInput):
        bott_check(nine_quarters(), 2, 2)


def test_bott_random_sample():
    rng = np.random.default_rng(21)
    for _ in range(5):
        fg, q = random_rational_rotation(int(rng.integers(1, 4)), rng)
        l = int(rng.integers(1, q))
        assert bott_check(fg, q, l).holds


def test_random_rational_rotation_is_regular():
    rng = np.random.default_rng(4)
    for _ in range(10):
        fg, q = random_rational_rotation(int(rng.integers(1, 5)), rng)
        assert is_regular(fg, q)


def test_gap_round_sphere_equality_case():
    m = 2
    g = index_gap_bounds(round_sphere_block(m), 1, 2, m)
    assert (g.lhs, g.bound) == (3 * m, 3 * m)
    assert g.holds and not g.strict and g.equality_allowed and g.consistent


def test_gap_nine_quarters_strict():
    g = index_gap_bounds(nine_quarters(), 2, 3, 2)
    assert (g.lhs, g.bound) == (18, 14) and g.strict and not g.equality_allowed


def test_gap_below_q():
    g = index_gap_bounds(nine_quarters(), 2, 1, 2)
    assert (g.lhs, g.bound) == (6, 10) and g.holds and g.consistent


# -- realisation near the identity ------------------------------------------


def test_realize_identity_is_base():
    r = realize_poincare(np.eye(4))
    assert r.iterations == 0 and np.all(r.coefficients == 0)


def random_sp_algebra(m, rng):
    S = rng.normal(size=(2 * m, 2 * m))
    S = S + S.T
    return -omega_matrix(m) @ S  # Omega^{-1} S with Omega^{-1} = -Omega


def test_realize_small_exponential():
    rng = np.random.default_rng(2)
    X = random_sp_algebra(2, rng)
    target = expm(1e-2 * X / np.max(np.abs(X)))
    r = realize_poincare(target)
    assert r.residual <= 1e-7
    P = fundamental_solution(FormalGeodesic(2, r.profile, np.eye(2))).end
    assert np.max(np.abs(P - target)) <= 1e-7


def test_realize_boundary_never_returns_bad_fit():
    rng = np.random.default_rng(6)
    X = random_sp_algebra(2, rng)
    target = expm(0.25 * X / np.max(np.abs(X)))
    if np.max(np.abs(target - np.eye(4))) > 0.25:
        with pytest.raises(InvalidInput):
            realize_poincare(target)
        return
    try:
        r = realize_poincare(target, max_iter=10)
    except RealizationFailed:
        return
    assert r.residual <= 1e-7


def test_realize_rejects_far_target():
    with pytest.raises(InvalidInput):
        realize_poincare(-np.eye(2))


# -- serialisation and validation -------------------------------------------


def test_json_round_trip_all_rules():
    rng = np.random.default_rng(1)
    t = np.linspace(0, 1.0, 6)
    vals = rng.normal(size=(6, 2, 2))
    segs = [
        Segment(0.0, 1.0, SampledRule(t, vals + np.swapaxes(vals, 1, 2))),
        Segment(1.0, 2.0, PolynomialRule([np.eye(2), 0.5 * np.eye(2)])),
    ]
    fg = FormalGeodesic(2, CurvatureProfile(segs), rot(0.3), "mixed")
    back = FormalGeodesic.from_json(json.dumps(fg.to_json()))
    assert back.label == "mixed"
    assert np.max(np.abs(poincare_map(back).entries - poincare_map(fg).entries)) < 1e-12


def test_validation_errors():
    with pytest.raises(InvalidInput):
        FormalGeodesic.constant(np.eye(2), A=np.ones((2, 2)))
    with pytest.raises(InvalidInput):
        FormalGeodesic.constant([[1.0, 2.0], [0.0, 1.0]])
    with pytest.raises(InvalidInput):
        CurvatureProfile([Segment(0.0, 1.0, PolynomialRule(np.eye(1))), Segment(1.5, 2.0, PolynomialRule(np.eye(1)))])
    with pytest.raises(InvalidInput):
        FormalGeodesic.from_json({"m": 1})
