import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from besselab.errors import OracleFailed
from besselab.formal_geodesic import FormalGeodesic, CurvatureProfile, iterate, round_sphere_block
from besselab.index_form import (
    assemble,
    cyclic_inertia,
    discretized_hessian_index,
    negative_count,
)


def rot(s):
    return np.array([[np.cos(s), -np.sin(s)], [np.sin(s), np.cos(s)]])


def dense_negatives(form, sigma):
    S = (form.H + sigma * form.M).toarray()
    return int(np.sum(np.linalg.eigvalsh(S) < 0))


def test_assembled_matrices_are_symmetric():
    fg = FormalGeodesic.constant(np.diag([1.0, 2.0]), A=rot(0.8))
    form = assemble(fg, 40)
    for S in (form.H, form.M):
        assert abs(S - S.T).max() <= 1e-12
    # the mass matrix is a Gram matrix, hence positive definite
    assert np.min(np.linalg.eigvalsh(form.M.toarray())) > 0


def test_quadratic_form_of_constant_field():
    # X = const on R = 0, A = Id: H(X, X) = 0 and M(X, X) = T |X|^2
    fg = FormalGeodesic.constant(np.zeros((2, 2)))
    form = assemble(fg, 30)
    x = np.tile([1.0, 2.0], form.N)
    assert abs(x @ form.H @ x) < 1e-12
    assert abs(x @ form.M @ x - 2 * math.pi * 5) < 1e-10


@pytest.mark.parametrize("m,N", [(1, 17), (2, 33), (3, 20)])
def test_inertia_sweep_matches_dense_and_banded(m, N):
    rng = np.random.default_rng(m * 100 + N)
    R = rng.normal(size=(m, m))
    Q = np.linalg.qr(rng.normal(size=(m, m)))[0]
    fg = FormalGeodesic.constant(R + R.T + 2 * np.eye(m), A=Q)
    form = assemble(fg, N)
    for sigma in (1e-6, -0.3, 0.7, -2.0):
        ref = dense_negatives(form, sigma)
        assert form.negative_count(sigma) == ref
        assert negative_count(form.H + sigma * form.M, m, form.N) == ref


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 3), st.integers(2, 12))
def test_cyclic_inertia_random_blocks(seed, m, N):
    rng = np.random.default_rng(seed)
    Bd = rng.normal(size=(N, m, m))
    Bd = Bd + np.swapaxes(Bd, 1, 2)
    Co = rng.normal(size=(N - 1, m, m))
    Cc = rng.normal(size=(m, m))
    S = np.zeros((N * m, N * m))
    for k in range(N):
        S[k * m:(k + 1) * m, k * m:(k + 1) * m] = Bd[k]
    for k in range(N - 1):
        S[k * m:(k + 1) * m, (k + 1) * m:(k + 2) * m] = Co[k]
        S[(k + 1) * m:(k + 2) * m, k * m:(k + 1) * m] = Co[k].T
    S[(N - 1) * m:, :m] += Cc
    S[:m, (N - 1) * m:] += Cc.T
    ev = np.linalg.eigvalsh(S)
    if np.min(np.abs(ev)) < 1e-8:
        return
    assert cyclic_inertia(Bd, Co, Cc) == int(np.sum(ev < 0))


def test_round_sphere_count():
    res = discretized_hessian_index(round_sphere_block(2))
    assert res.negative == 2 and res.null == 4
    assert res.kernel_map_rank == 4


def test_flat_cylinder_has_no_negative_directions():
    res = discretized_hessian_index(FormalGeodesic.constant(np.zeros((2, 2))))
    assert res.negative == 0
    # constant fields are the kernel
    assert res.null == 2 and res.kernel_map_rank == 2


def test_nine_quarters_count():
    res = discretized_hessian_index(FormalGeodesic.constant(2.25 * np.eye(2)))
    assert res.negative == 6 and res.null == 0


def test_count_stable_over_three_meshes():
    res = discretized_hessian_index(iterate(round_sphere_block(1), 3), kernel=False)
    hist = res.form.history
    assert len(hist) >= 3
    assert len({(a, b) for _, a, b in hist[-3:]}) == 1
    assert [n for n, _, _ in hist[-3:]] == sorted(n for n, _, _ in hist[-3:])
    assert (res.negative, res.null) == (5, 2)


def test_twisted_boundary_condition():
    # R = 1/4 with A = -1: fields with X(2pi) = -X(0); sin(t/2), cos(t/2) solve
    # the Jacobi equation and satisfy the twist, so the kernel is 2-dimensional
    fg = FormalGeodesic.constant([[0.25]], A=-np.eye(1))
    res = discretized_hessian_index(fg)
    assert res.null == 2
    # antiperiodic modes have eigenvalues (k^2 - 1)/4 with k odd, none negative
    assert res.negative == 0


def test_smallest_eigenvalues_reported():
    res = discretized_hessian_index(round_sphere_block(1))
    # spectrum of -d^2 - 1 on the circle: k^2 - 1
    assert res.smallest[0] == pytest.approx(-1.0, abs=1e-3)
    assert np.allclose(res.smallest[1:3], 0.0, atol=1e-2)


def test_oracle_failure_on_tiny_budget():
    with pytest.raises(OracleFailed):
        discretized_hessian_index(round_sphere_block(2), n_max=20)


def test_piecewise_profile_counts():
    # R = 1 on the first half, 0 on the second; compare with a dense spectrum
    prof = CurvatureProfile.piecewise_constant([0, math.pi, 2 * math.pi], [np.eye(1), np.zeros((1, 1))])
    fg = FormalGeodesic(1, prof, np.eye(1))
    res = discretized_hessian_index(fg, kernel=False)
    form = assemble(fg, 400)
    assert res.negative == dense_negatives(form, 1e-6)
