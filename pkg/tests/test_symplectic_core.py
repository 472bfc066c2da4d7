import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from besselab.errors import InvalidInput, NoDirection, PreconditionViolation
from besselab.symplectic_core import (
    Subspace,
    SymplecticSpace,
    as_symplectic,
    chi,
    chi_fd_derivative,
    chi_positive_direction,
    eigen_structure,
    genericity_classify,
    jordan_symplectic,
    lagrangian_symplectic_identity,
    numerical_rank,
    omega,
    omega_matrix,
    positive_field,
    preimage_dim,
    random_lagrangian,
    random_orthosymplectic,
    random_symplectic,
    random_symplectic_subspace,
    refined_block_form,
    symplectic_defect,
    symplectic_inverse,
    unipotent_symplectic,
)


def rot(s):
    return np.array([[np.cos(s), -np.sin(s)], [np.sin(s), np.cos(s)]])


def test_omega_basis_pairing():
    sp = SymplecticSpace(3)
    assert sp.omega(sp.e(0), sp.f(0)) == 1
    assert sp.omega(sp.f(1), sp.e(1)) == -1
    assert sp.omega(sp.e(0), sp.f(2)) == 0
    assert abs(np.linalg.det(sp.gram)) == 1


def test_omega_example_against_gram_product():
    x = np.array([1.0, 0, 2, 0])
    y = np.array([0.0, 3, 0, -1])
    # oracle: x^T Omega y evaluated directly
    assert x @ omega_matrix(2) @ y == 0.0
    assert omega(x, y, 2) == 0.0


def test_omega_dimension_mismatch():
    with pytest.raises(InvalidInput):
        omega(np.zeros(4), np.zeros(6))
    with pytest.raises(InvalidInput):
        omega(np.zeros(4), np.zeros(4), m=3)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_omega_bilinear_antisymmetric(m, seed):
    rng = np.random.default_rng(seed)
    u, v, w = rng.normal(size=(3, 2 * m))
    a = rng.normal()
    assert omega(u, u) == 0.0
    assert np.isclose(omega(u, v), -omega(v, u))
    assert np.isclose(omega(a * u + w, v), a * omega(u, v) + omega(w, v))


def test_as_symplectic_rejects():
    with pytest.raises(PreconditionViolation):
        as_symplectic(np.diag([2.0, 2.0]))
    with pytest.raises(InvalidInput):
        as_symplectic(np.eye(3))


def test_random_generators_are_symplectic():
    rng = np.random.default_rng(5)
    for m in range(1, 5):
        assert symplectic_defect(random_symplectic(m, rng)) < 1e-10
        U = random_orthosymplectic(m, rng)
        assert symplectic_defect(U) < 1e-12
        assert np.allclose(U.T @ U, np.eye(2 * m))
        P = random_symplectic(m, rng)
        assert np.allclose(symplectic_inverse(P) @ P, np.eye(2 * m))


def test_eigen_identity():
    rep = eigen_structure(np.eye(4))
    assert len(rep.entries) == 1
    e = rep.entries[0]
    assert e.value == 1 and e.algebraic_mult == 4 and e.geometric_mult == 4


def test_eigen_hyperbolic():
    rep = eigen_structure(np.diag([2.0, 0.5]))
    assert sorted(v.real for v in rep.values) == [0.5, 2.0]
    assert all(e.algebraic_mult == e.geometric_mult == 1 for e in rep.entries)


def test_eigen_exemplar_loop_is_plus_minus_i():
    B = np.zeros((4, 4))
    B[np.ix_([0, 2], [0, 2])] = [[0, -1], [1, 0]]
    B[np.ix_([1, 3], [1, 3])] = [[0, 1], [-1, 0]]
    for s in np.linspace(0, 2 * np.pi, 9):
        R = rot(s)
        D = np.kron(np.eye(2), R)
        rep = eigen_structure(D @ B)
        vals = sorted(rep.values, key=lambda z: z.imag)
        assert np.allclose(vals, [-1j, 1j], atol=1e-9)
        assert [e.algebraic_mult for e in sorted(rep.entries, key=lambda e: e.value.imag)] == [2, 2]


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_eigen_quadruple_symmetry(m, seed):
    rng = np.random.default_rng(seed)
    P = random_symplectic(m, rng, 0.8)
    rep = eigen_structure(P)
    assert sum(e.algebraic_mult for e in rep.entries) == 2 * m
    for e in rep.entries:
        assert e.geometric_mult <= e.algebraic_mult
        assert e.basis.shape[1] == e.algebraic_mult
        if abs(abs(e.value) - 1) > 1e-6:
            partner = rep.find(1 / e.value, tol=1e-6)
            assert partner is not None and partner.algebraic_mult == e.algebraic_mult
        conj = rep.find(np.conj(e.value), tol=1e-6)
        assert conj is not None


def test_chi_vanishes_exactly_on_spectrum():
    rng = np.random.default_rng(11)
    for _ in range(100):
        m = int(rng.integers(1, 5))
        P = random_symplectic(m, rng, 0.8)
        rep = eigen_structure(P)
        for e in rep.real_positive:
            assert abs(chi(P, e.value.real)) < 1e-6 * max(1, np.linalg.norm(P, 2)) ** (2 * m)
        lam = float(rng.uniform(0.1, 3))
        if rep.find(lam, tol=1e-3) is None:
            assert abs(chi(P, lam)) > 1e-10


def test_genericity_examples():
    assert genericity_classify(np.eye(2), 1.0).stratum == "not_in_Sp1"
    assert genericity_classify(np.eye(6), 1.0).kernel_dim == 6
    assert genericity_classify(np.diag([2.0, 0.5]), 2.0).stratum == "G1"
    assert genericity_classify(np.diag([2.0, 0.5]), 3.0).stratum == "G_interior"
    P = np.array([[1.0, 0.0], [1.0, 1.0]])
    # oracle: rank of P - I is 1, so the kernel is a line
    assert np.linalg.matrix_rank(P - np.eye(2)) == 1
    assert genericity_classify(P, 1.0).stratum == "G0"
    with pytest.raises(InvalidInput):
        genericity_classify(P, -1.0)


def test_genericity_random_land_in_sp1():
    rng = np.random.default_rng(3)
    for _ in range(50):
        P = random_symplectic(3, rng)
        for e in eigen_structure(P).real_positive:
            assert genericity_classify(P, e.value.real).stratum in ("G1", "G0")


def test_chi_identity():
    assert chi(np.eye(4), 1.0) == 0.0


def test_direction_hyperbolic_example():
    d = chi_positive_direction(np.diag([2.0, 0.5]), 2.0)
    assert np.isclose(d.derivative, 3.0, rtol=1e-12)
    for h in (1e-3, 1e-4, 1e-5, 1e-6):
        assert np.isclose(chi_fd_derivative(np.diag([2.0, 0.5]), 2.0, d.generator, h), 3.0, rtol=1e-6)


@pytest.mark.parametrize("lam", [2.0, 1 / 3, 5.0])
@pytest.mark.parametrize("a", [1, 2, 3])
def test_direction_matches_closed_form(lam, a):
    rng = np.random.default_rng(int(100 * lam) + a)
    for _ in range(5):
        P = jordan_symplectic(lam, a, rng)
        d = chi_positive_direction(P, lam)
        expected = lam * abs(lam - 1 / lam) ** a
        assert d.derivative > 0
        assert np.isclose(d.derivative, expected, rtol=1e-6)
        fd = chi_fd_derivative(P, lam, d.generator, 1e-4)
        assert np.isclose(fd, expected, rtol=1e-6)


def test_direction_with_complement_picks_up_det_factor():
    rng = np.random.default_rng(8)
    C = random_symplectic(1, rng)
    P = jordan_symplectic(2.0, 2, rng, complement=C)
    d = chi_positive_direction(P, 2.0)
    factor = abs(np.linalg.det(C - 2.0 * np.eye(2)))
    assert np.isclose(d.derivative, 2 * 1.5**2 * factor, rtol=1e-6)
    assert np.isclose(d.derivative, d.predicted, rtol=1e-8)


@pytest.mark.parametrize("a", [1, 2, 3])
def test_direction_at_one(a):
    rng = np.random.default_rng(40 + a)
    P = unipotent_symplectic(a, 0.8, rng)
    d = chi_positive_direction(P, 1.0)
    assert d.derivative > 0
    assert np.isclose(d.derivative, d.predicted, rtol=1e-6)
    assert np.isclose(chi_fd_derivative(P, 1.0, d.generator, 1e-4), d.derivative, rtol=1e-6)


def test_pure_unipotent_derivative_sign():
    # in the pure normal form the unflipped generator gives (-1)^a c
    for a in (1, 2, 3):
        P = unipotent_symplectic(a, 0.5)
        d = chi_positive_direction(P, 1.0)
        bf = d.block_form
        assert np.isclose(abs(bf.blocks["c"]), 0.5)
        assert np.isclose(d.derivative, 0.5)


def test_no_direction_outside_strata():
    with pytest.raises(NoDirection):
        chi_positive_direction(np.eye(4), 1.0)
    with pytest.raises(NoDirection):
        chi_positive_direction(np.diag([2.0, 0.5]), 3.0)


def test_block_form_trivial():
    bf = refined_block_form(np.diag([3.0, 1 / 3]), 3.0)
    assert bf.a == 1 and bf.complement.size == 0
    assert np.allclose(np.abs(bf.conjugator), np.eye(2))
    assert bf.residual < 1e-12


def test_block_form_splits_planes():
    P = np.diag([2.0, 5.0, 0.5, 0.2])
    bf = refined_block_form(P, 2.0)
    assert np.allclose(np.sort(np.linalg.eigvals(bf.complement).real), [0.2, 5.0])
    assert bf.residual < 1e-12


def test_block_form_unipotent_recovered():
    rng = np.random.default_rng(17)
    S = np.array([[1.0, 0.0], [0.7, 1.0]])
    C = random_symplectic(1, rng)
    P = C @ S @ symplectic_inverse(C)
    bf = refined_block_form(P, 1.0)
    assert bf.a == 1 and bf.geometric_mult == 1
    assert bf.residual <= 1e-6
    assert symplectic_defect(bf.conjugator) < 1e-8


@settings(max_examples=40, deadline=None)
@given(st.sampled_from([2.0, 1 / 3, 5.0, 1.0]), st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_block_form_round_trip(lam, a, seed):
    rng = np.random.default_rng(seed)
    comp = random_symplectic(1, rng, 0.3) if rng.random() < 0.5 else None
    if comp is not None and min(abs(np.linalg.eigvals(comp) - lam)) < 0.1:
        comp = None
    if lam == 1.0:
        P = unipotent_symplectic(a, float(rng.uniform(0.3, 2)) * rng.choice([-1, 1]), rng, comp)
    else:
        P = jordan_symplectic(lam, a, rng, comp)
    bf = refined_block_form(P, lam)
    C = bf.conjugator
    assert np.max(np.abs(C @ bf.assembled() @ symplectic_inverse(C) - P)) <= 1e-6


def test_positive_field_positive_everywhere():
    rng = np.random.default_rng(23)
    P = jordan_symplectic(1 / 3, 1, rng, complement=np.diag([0.5, 2.0]))
    V = positive_field(P)
    h = 1e-5
    for lam in (1 / 3, 3.0, 0.5, 2.0):
        d = (chi(P + h * V, lam) - chi(P - h * V, lam)) / (2 * h)
        assert d > 0


def test_numerical_rank_borderline_flagged():
    M = np.diag([1.0, 2e-8])
    info = numerical_rank(M)
    assert info.degraded
    assert numerical_rank(np.diag([1.0, 1e-3])).rank == 2


def test_subspace_kind_validation():
    with pytest.raises(InvalidInput):
        Subspace(np.eye(4)[:, [0, 2]], "lagrangian")
    with pytest.raises(InvalidInput):
        Subspace(np.eye(4)[:, [0, 1]], "symplectic")
    with pytest.raises(InvalidInput):
        Subspace(np.eye(4), "weird")


def test_lagrangian_identity_examples():
    L = Subspace(np.eye(4)[:, [2, 3]], "lagrangian")
    K = Subspace(np.eye(4)[:, [0, 2]], "symplectic")
    r = lagrangian_symplectic_identity(L, K)
    assert (r.dim_L_cap_Kperp, r.dim_L_cap_K, r.dim_K) == (1, 1, 2)
    assert r.identity_holds
    r = lagrangian_symplectic_identity(L, Subspace(np.eye(4), "symplectic"))
    assert (r.dim_L_cap_Kperp, r.dim_L_cap_K, r.dim_K) == (0, 2, 4)
    assert r.identity_holds
    with pytest.raises(InvalidInput):
        lagrangian_symplectic_identity(K, L)


def test_lagrangian_identity_random():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        m = int(rng.integers(1, 5))
        k = int(rng.integers(0, m + 1))
        L = random_lagrangian(m, rng)
        K = random_symplectic_subspace(m, k, rng, aligned=rng.random() < 0.5)
        assert lagrangian_symplectic_identity(L, K).identity_holds


def test_preimage_examples():
    L = Subspace(np.eye(4)[:, [2, 3]], "lagrangian")
    assert preimage_dim(np.eye(4), L).dim == 4
    P = np.eye(4)
    P[np.ix_([0, 2], [0, 2])] = rot(np.pi / 2)
    r = preimage_dim(P, L)
    assert r.dim == 3 and r.dim_K == 2 and r.dim_L_cap_Kperp == 1 and r.formula_holds
    # oracle: solve (P - I) x in span(f1, f2) directly, i.e. first and second rows vanish
    D = P - np.eye(4)
    assert 4 - np.linalg.matrix_rank(D[:2]) == 3


def test_preimage_requires_compact():
    with pytest.raises(PreconditionViolation):
        preimage_dim(np.diag([2.0, 0.5]), Subspace(np.eye(2)[:, [1]], "lagrangian"))


def test_preimage_random():
    rng = np.random.default_rng(99)
    for _ in range(100):
        m = int(rng.integers(1, 4))
        U = random_orthosymplectic(m, rng)
        if rng.random() < 0.5:
            # force a fixed subspace
            k = int(rng.integers(1, m + 1))
            W = random_orthosymplectic(m, rng)
            D = np.eye(m, dtype=complex)
            D[k:, k:] = np.diag(np.exp(1j * rng.uniform(0.5, 2, m - k)))
            Dr = np.block([[D.real, -D.imag], [D.imag, D.real]])
            U = W @ Dr @ W.T
        r = preimage_dim(U, random_lagrangian(m, rng))
        assert r.formula_holds
