"""Linear algebra on the symplectic space V + V.

Vectors of V + V = R^{2m} are stored as (u, v) with u, v in R^m and the
symplectic form is omega((u1, v1), (u2, v2)) = <u1, v2> - <u2, v1>, i.e.
omega(x, y) = x^T Omega y with Omega = [[0, I], [-I, 0]].

Everything here is a pure function of its inputs.  Rank and kernel
decisions go through :func:`numerical_rank` so that borderline cases are
flagged instead of silently rounded.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import mpmath
import numpy as np
import scipy.linalg as sla

from .errors import (
    BlockFormFailed,
    InvalidInput,
    NoDirection,
    PreconditionViolation,
)

TOL_SP = 1e-9
TOL_EIG = 1e-7
TOL_BLOCK = 1e-6
RANK_RTOL = 1e-8

STRATA = ("G_interior", "G1", "G0", "not_in_Sp1")


def omega_matrix(m: int) -> np.ndarray:
    I = np.eye(m)
    Z = np.zeros((m, m))
    return np.block([[Z, I], [-I, Z]])


@dataclass(frozen=True)
class SymplecticSpace:
    """The space V + V with V = R^m and its standard Darboux basis."""

    m: int

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 1:
            raise InvalidInput(f"m must be a positive integer, got {self.m!r}")

    @property
    def dim(self) -> int:
        return 2 * self.m

    @property
    def gram(self) -> np.ndarray:
        return omega_matrix(self.m)

    def e(self, i: int) -> np.ndarray:
        x = np.zeros(2 * self.m)
        x[i] = 1.0
        return x

    def f(self, i: int) -> np.ndarray:
        x = np.zeros(2 * self.m)
        x[self.m + i] = 1.0
        return x

    def omega(self, u, v) -> float:
        return omega(u, v, self.m)


def omega(u, v, m: int | None = None) -> float:
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.ndim != 1 or u.shape != v.shape or u.size % 2:
        raise InvalidInput(f"omega needs two vectors of equal even length, got {u.shape} and {v.shape}")
    k = u.size // 2
    if m is not None and k != m:
        raise InvalidInput(f"vectors have length {u.size}, expected {2 * m}")
    return float(u[:k] @ v[k:] - v[:k] @ u[k:])


def _omega_form(X, Y) -> np.ndarray:
    """Matrix of omega values between the columns of X and Y."""
    k = X.shape[0] // 2
    return X[:k].T @ Y[k:] - X[k:].T @ Y[:k]


def symplectic_defect(P) -> float:
    P = np.asarray(P, dtype=float)
    Om = omega_matrix(P.shape[0] // 2)
    return float(np.max(np.abs(P.T @ Om @ P - Om)))


def symplectic_inverse(P) -> np.ndarray:
    P = np.asarray(P, dtype=float)
    Om = omega_matrix(P.shape[0] // 2)
    return -Om @ P.T @ Om


@dataclass(frozen=True)
class SymplecticMatrix:
    entries: np.ndarray
    symplectic_defect: float

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.entries, dtype=dtype)

    @property
    def m(self) -> int:
        return self.entries.shape[0] // 2

    def to_json(self) -> list:
        return self.entries.tolist()


def as_symplectic(P, tol: float = TOL_SP) -> SymplecticMatrix:
    """Validate ``P`` and wrap it; raises if the defect exceeds ``tol``."""
    if isinstance(P, SymplecticMatrix):
        if P.symplectic_defect <= tol:
            return P
        P = P.entries
    P = np.array(P, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1] or P.shape[0] % 2 or P.shape[0] == 0:
        raise InvalidInput(f"expected a square matrix of even size, got shape {P.shape}")
    if not np.all(np.isfinite(P)):
        raise InvalidInput("matrix has non-finite entries")
    d = symplectic_defect(P)
    if d > tol:
        raise PreconditionViolation(f"matrix is not symplectic: defect {d:.3e} > {tol:.1e}")
    P.setflags(write=False)
    return SymplecticMatrix(P, d)


# ---------------------------------------------------------------------------
# ranks and subspaces


@dataclass(frozen=True)
class RankInfo:
    rank: int
    degraded: bool
    singular_values: np.ndarray
    threshold: float


def numerical_rank(M, rtol: float = RANK_RTOL, atol: float = 0.0) -> RankInfo:
    """Rank by singular values with threshold ``max(rtol * s_max, atol)``.

    When a singular value sits within a factor 10 of the threshold the
    values are recomputed at 50 digits and the result carries a
    ``degraded`` flag.
    """
    M = np.atleast_2d(np.asarray(M))
    M = M.astype(complex if np.iscomplexobj(M) else float)
    if M.size == 0:
        return RankInfo(0, False, np.zeros(0), atol)
    s = np.linalg.svd(M, compute_uv=False)
    thr = max(rtol * (s[0] if s.size else 0.0), atol)
    if thr == 0.0:
        thr = np.finfo(float).tiny
    near = (s > thr / 10) & (s < thr * 10)
    degraded = bool(np.any(near))
    if degraded:
        with mpmath.workdps(50):
            svd = mpmath.svd_c if np.iscomplexobj(M) else mpmath.svd_r
            s_hp = svd(mpmath.matrix(M.tolist()), compute_uv=False)
            s = np.array(sorted((float(x) for x in s_hp), reverse=True))
    return RankInfo(int(np.sum(s > thr)), degraded, s, thr)


def null_space(M, rtol: float = RANK_RTOL, atol: float = 0.0) -> np.ndarray:
    """Orthonormal basis (columns) of the numerical kernel of ``M``."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    n = M.shape[1]
    if M.shape[0] == 0:
        return np.eye(n)
    r = numerical_rank(M, rtol, atol).rank
    _, _, vt = np.linalg.svd(M)
    return vt[r:].T.copy()


def orth(X, rtol: float = RANK_RTOL) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] == 0:
        return X
    u, s, _ = np.linalg.svd(X, full_matrices=False)
    r = int(np.sum(s > rtol * max(s[0], 1.0))) if s.size else 0
    return u[:, :r]


def intersection_dim(X, Y, rtol: float = RANK_RTOL) -> int:
    X, Y = orth(X, rtol), orth(Y, rtol)
    if X.shape[1] == 0 or Y.shape[1] == 0:
        return 0
    return X.shape[1] + Y.shape[1] - numerical_rank(np.hstack([X, Y]), rtol).rank


def intersection(X, Y, rtol: float = RANK_RTOL) -> np.ndarray:
    X, Y = orth(X, rtol), orth(Y, rtol)
    n = X.shape[0]
    if X.shape[1] == 0 or Y.shape[1] == 0:
        return np.zeros((n, 0))
    K = null_space(np.hstack([X, -Y]), rtol)
    return orth(X @ K[: X.shape[1]], rtol)


def symplectic_complement(X, rtol: float = RANK_RTOL) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Om = omega_matrix(X.shape[0] // 2)
    if X.shape[1] == 0:
        return np.eye(X.shape[0])
    return null_space(X.T @ Om, rtol)


def symplectic_gram_schmidt(W) -> tuple[np.ndarray, np.ndarray]:
    """Darboux basis (E, F) of the symplectic subspace spanned by W.

    Returns E, F with omega(E_i, F_j) = delta_ij and omega vanishing on
    E and on F.
    """
    W = orth(W)
    n = W.shape[0]
    es, fs = [], []
    while W.shape[1] > 0:
        x = W[:, 0]
        rest = W[:, 1:]
        if rest.shape[1] == 0:
            raise InvalidInput("subspace is not symplectic (odd dimension)")
        w = _omega_form(x[:, None], rest)[0]
        j = int(np.argmax(np.abs(w)))
        if abs(w[j]) < 1e-10:
            raise InvalidInput("subspace is not symplectic (degenerate form)")
        y = rest[:, j] / w[j]
        es.append(x)
        fs.append(y)
        Z = np.delete(rest, j, axis=1)
        if Z.shape[1]:
            a = _omega_form(Z, y[:, None])[:, 0]
            b = _omega_form(Z, x[:, None])[:, 0]
            Z = Z - np.outer(x, a) + np.outer(y, b)
            Z = orth(Z)
        W = Z
    E = np.array(es).T if es else np.zeros((n, 0))
    F = np.array(fs).T if fs else np.zeros((n, 0))
    return E, F


@dataclass(frozen=True)
class Subspace:
    basis: np.ndarray
    kind: str = "generic"

    def __post_init__(self):
        if self.kind not in ("generic", "lagrangian", "symplectic"):
            raise InvalidInput(f"unknown subspace kind {self.kind!r}")
        B = np.atleast_2d(np.asarray(self.basis, dtype=float))
        if B.shape[0] % 2:
            raise InvalidInput("ambient dimension must be even")
        object.__setattr__(self, "basis", orth(B) if B.shape[1] else B)
        m = B.shape[0] // 2
        G = _omega_form(self.basis, self.basis)
        if self.kind == "lagrangian":
            if self.dim != m or (G.size and np.max(np.abs(G)) > 1e-8):
                raise InvalidInput("basis does not span a Lagrangian subspace")
        elif self.kind == "symplectic":
            if self.dim % 2 or (self.dim and numerical_rank(G).rank != self.dim):
                raise InvalidInput("basis does not span a symplectic subspace")

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    @property
    def m(self) -> int:
        return self.basis.shape[0] // 2


# ---------------------------------------------------------------------------
# eigen-structure


@dataclass(frozen=True)
class EigenEntry:
    value: complex
    algebraic_mult: int
    geometric_mult: int
    basis: np.ndarray
    spread: float


@dataclass(frozen=True)
class EigenReport:
    entries: list
    degraded: bool = False
    tol: float = TOL_EIG

    @property
    def values(self) -> list:
        return [e.value for e in self.entries]

    @property
    def real_positive(self) -> list:
        return [e for e in self.entries if abs(e.value.imag) <= self.tol and e.value.real > 0]

    def find(self, lam: complex, tol: float | None = None):
        tol = self.tol if tol is None else tol
        best = min(self.entries, key=lambda e: abs(e.value - lam), default=None)
        if best is None:
            return None
        radius = max(tol, 2 * best.spread) * max(1.0, abs(lam))
        return best if abs(best.value - lam) <= radius else None


def _cluster(vals: np.ndarray, scale: float) -> list[list[int]]:
    # A perturbed Jordan block of size k splits into k eigenvalues on a circle
    # of radius ~ (eps * scale)^(1/k).  Greedily take, around each unassigned
    # eigenvalue, the largest set of nearest neighbours compatible with that.
    n = len(vals)
    free = set(range(n))
    groups = []

    def allowed(g):
        k = len(g)
        mag = max(1.0, float(np.max(np.abs(vals[g]))))
        return max(TOL_EIG, 3.0 * (1e-14 * scale) ** (1.0 / k)) * mag

    for i in range(n):
        if i not in free:
            continue
        near = sorted(free, key=lambda j: abs(vals[j] - vals[i]))
        best = [i]
        for k in range(len(near), 1, -1):
            g = near[:k]
            s = float(np.max(np.abs(vals[g] - vals[g].mean())))
            if s <= allowed(g):
                best = g
                break
        groups.append(best)
        free -= set(best)
    return groups


def invariant_subspace(P, center: complex, radius: float) -> np.ndarray:
    """Orthonormal basis of the generalised eigenspace for eigenvalues within
    ``radius`` of ``center`` (real basis when ``center`` is real)."""
    P = np.asarray(P, dtype=float)
    if abs(center.imag) <= radius:
        sel = lambda x: abs(x - center) <= radius or abs(np.conj(x) - center) <= radius
        _, Z, sdim = sla.schur(P, output="real", sort=sel)
    else:
        sel = lambda x: abs(x - center) <= radius
        _, Z, sdim = sla.schur(P.astype(complex), output="complex", sort=sel)
    return Z[:, :sdim]


def eigen_structure(P, tol: float = TOL_EIG) -> EigenReport:
    """Eigenvalues with algebraic and geometric multiplicities.

    Eigenvalues of a symplectic matrix come in quadruples; after clustering,
    partners lambda and 1/lambda are symmetrised by averaging their
    log-magnitudes and unimodular ones are projected onto the circle.
    """
    S = as_symplectic(P)
    A = S.entries
    n = A.shape[0]
    scale = max(1.0, float(np.linalg.norm(A, 2)))
    vals = np.linalg.eigvals(A)
    groups = _cluster(vals, scale)
    centers = [complex(vals[g].mean()) for g in groups]
    spreads = [float(np.max(np.abs(vals[g] - vals[g].mean()))) for g in groups]
    sizes = [len(g) for g in groups]

    # symmetrise lambda <-> 1/lambda
    sym = list(centers)
    for i, c in enumerate(centers):
        r = abs(c)
        if abs(np.log(r)) <= tol:
            sym[i] = c / r if r else c
            continue
        j = min(range(len(centers)), key=lambda k: abs(centers[k] - 1 / c))
        d = centers[j]
        if abs(d - 1 / c) > max(tol, 2 * spreads[i] + 2 * spreads[j]) * max(1, abs(1 / c)):
            continue
        # geometric mean of c and 1/d; the ratio is close to 1 so the
        # principal square root is unambiguous
        z = c * np.sqrt((1 / d) / c)
        sym[i] = complex(z.real, 0.0) if abs(c.imag) <= tol * scale else complex(z)
    degraded = False
    entries = []
    for c, s, k in zip(sym, spreads, sizes):
        if abs(c.imag) <= max(tol, s) * max(1, abs(c)):
            c = complex(c.real, 0.0)
        radius = max(tol, 4 * s) * max(1.0, abs(c)) + 1e-12
        basis = invariant_subspace(A, c, radius)
        if basis.shape[1] != k and abs(c.imag) > 0:
            basis = invariant_subspace(A, c, radius)
        geo_thr = max(tol, 10 * s) * scale
        geo = n - numerical_rank(A - c * np.eye(n), 0.0, geo_thr).rank
        geo = max(1, min(geo, k))
        if s > tol * max(1.0, abs(c)):
            degraded = True
        entries.append(EigenEntry(c, k, geo, basis, s))
    entries.sort(key=lambda e: (abs(e.value), np.angle(e.value)))
    return EigenReport(entries, degraded, tol)


# ---------------------------------------------------------------------------
# genericity strata and the characteristic function


@dataclass(frozen=True)
class Classification:
    stratum: str
    kernel_dim: int
    degraded: bool


def genericity_classify(P, lam: float, tol: float = TOL_EIG) -> Classification:
    if not lam > 0:
        raise InvalidInput(f"lambda must be positive, got {lam}")
    S = as_symplectic(P)
    A = S.entries
    rep = eigen_structure(S, tol)
    degraded = rep.degraded
    for e in rep.real_positive:
        if e.geometric_mult >= 2:
            return Classification("not_in_Sp1", e.geometric_mult, degraded)
    n = A.shape[0]
    scale = max(1.0, float(np.linalg.norm(A, 2)))
    hit = rep.find(lam)
    thr = tol * scale
    if hit is not None:
        thr = max(thr, 10 * hit.spread * scale)
    info = numerical_rank(A - lam * np.eye(n), 0.0, thr)
    k = n - info.rank
    degraded = degraded or info.degraded
    if k == 0:
        return Classification("G_interior", 0, degraded)
    if k >= 2:
        return Classification("not_in_Sp1", k, degraded)
    if abs(lam - 1.0) <= tol:
        return Classification("G0", 1, degraded)
    return Classification("G1", 1, degraded)


def chi(P, lam: float) -> float:
    A = np.asarray(P, dtype=float)
    return float(np.linalg.det(A - lam * np.eye(A.shape[0])))


def adjugate(X) -> np.ndarray:
    """Adjugate via the SVD; valid for singular matrices."""
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    if n == 1:
        return np.ones((1, 1))
    u, s, vt = np.linalg.svd(X)
    sign = np.linalg.det(u) * np.linalg.det(vt)
    cof = np.empty(n)
    for i in range(n):
        cof[i] = np.prod(np.delete(s, i))
    return sign * (vt.T * cof) @ u.T


def chi_derivative(P, lam: float, tangent) -> float:
    """d/de det(P + e*tangent - lam) at e = 0."""
    A = np.asarray(P, dtype=float)
    return float(np.trace(adjugate(A - lam * np.eye(A.shape[0])) @ np.asarray(tangent, dtype=float)))


@dataclass(frozen=True)
class BlockForm:
    """Symplectic conjugator C and blocks with C^{-1} P C block diagonal.

    For lambda != 1 the blocks are ``lam_Ut`` on E_lambda, ``inv_lam_U`` on
    E_{1/lambda} and ``R`` on the symplectic complement.  For lambda = 1 the
    first block is ``S1`` = [[U^{-1}, 0], [U^T T, U^T]] (or a general
    unipotent block when the kernel has dimension > 1); ``c`` = T_aa, and
    the kernel of S1 - I is one-dimensional iff c != 0.
    """

    lam: float
    a: int
    conjugator: np.ndarray
    blocks: dict
    residual: float
    geometric_mult: int

    def assembled(self) -> np.ndarray:
        return _assemble(self)

    @property
    def complement(self) -> np.ndarray:
        return self.blocks["R"]


def _assemble(bf: BlockForm) -> np.ndarray:
    n = bf.conjugator.shape[0]
    m = n // 2
    a = bf.a
    B = np.zeros((n, n))
    ie = list(range(a))
    iw_e = list(range(a, m))
    i_f = list(range(m, m + a))
    iw_f = list(range(m + a, n))
    if bf.lam != 1.0:
        B[np.ix_(ie, ie)] = bf.blocks["lam_Ut"]
        B[np.ix_(i_f, i_f)] = bf.blocks["inv_lam_U"]
    else:
        S1 = bf.blocks["S1"]
        B[np.ix_(ie + i_f, ie + i_f)] = S1
    iw = iw_e + iw_f
    if iw:
        B[np.ix_(iw, iw)] = bf.blocks["R"]
    return B


def _jordan_chain(M, lam: float) -> np.ndarray:
    """Basis g_1..g_a with (M - lam) g_k = g_{k-1}, for a single Jordan block."""
    a = M.shape[0]
    N = M - lam * np.eye(a)
    Na = np.linalg.matrix_power(N, a - 1)
    _, _, vt = np.linalg.svd(Na)
    g = [vt[0]]
    for _ in range(a - 1):
        g.append(N @ g[-1])
    G = np.array(g[::-1]).T
    return G


def refined_block_form(P, lam: float) -> BlockForm:
    """Symplectic conjugation of P separating the eigenvalue ``lam``.

    The reconstruction residual ||C B C^{-1} - P|| with idealised blocks
    must stay below TOL_BLOCK, otherwise :class:`BlockFormFailed` is raised.
    """
    S = as_symplectic(P)
    A = S.entries
    n = A.shape[0]
    m = n // 2
    rep = eigen_structure(S)
    hit = rep.find(lam, tol=1e-5)
    if hit is None or abs(hit.value.imag) > 0:
        raise PreconditionViolation(f"{lam} is not a real eigenvalue of P")
    lam_c = hit.value.real
    radius = max(TOL_EIG, 4 * hit.spread) * max(1.0, lam_c) + 1e-12
    Om = omega_matrix(m)
    if abs(lam_c - 1.0) > 1e-6:
        lam_exact = lam_c
        partner = rep.find(1.0 / lam_c, tol=1e-5)
        if partner is None:
            raise BlockFormFailed("eigenvalue 1/lambda not found")
        E = invariant_subspace(A, lam_c, radius)
        F0 = invariant_subspace(A, 1.0 / lam_c, max(TOL_EIG, 4 * partner.spread) + 1e-12)
        a = E.shape[1]
        if F0.shape[1] != a:
            raise BlockFormFailed("generalised eigenspaces of lambda and 1/lambda differ in dimension")
        M = E.T @ A @ E
        geo = hit.geometric_mult
        if geo == 1:
            G = _jordan_chain(M, lam_exact)
            ideal = lam_exact * np.eye(a) + np.diag(np.ones(a - 1), 1)
        else:
            T, Q = sla.schur(M, output="real")
            G = Q
            ideal = np.triu(T)
            np.fill_diagonal(ideal, lam_exact)
        e = E @ G
        pair = _omega_form(e, F0)
        f = F0 @ np.linalg.inv(pair)
        W = symplectic_complement(np.hstack([e, f]))
        we, wf = symplectic_gram_schmidt(W) if W.shape[1] else (np.zeros((n, 0)), np.zeros((n, 0)))
        C = np.hstack([e, we, f, wf])
        B = symplectic_inverse(C) @ A @ C
        iw = list(range(a, m)) + list(range(m + a, n))
        R = B[np.ix_(iw, iw)]
        blocks = {"lam_Ut": ideal, "inv_lam_U": np.linalg.inv(ideal).T, "R": R}
        bf = BlockForm(lam_exact, a, C, blocks, 0.0, geo)
    else:
        E1 = invariant_subspace(A, 1.0, radius)
        two_a = E1.shape[1]
        a = two_a // 2
        geo = hit.geometric_mult
        if geo == 1:
            Pe = E1.T @ A @ E1
            N1 = np.linalg.matrix_power(Pe - np.eye(two_a), a)
            _, _, vt = np.linalg.svd(N1)
            Lc = vt[two_a - a:].T  # generalised kernel of order a, in E1 coordinates
            L = E1 @ Lc
            ML = np.linalg.pinv(L) @ A @ L
            G = _jordan_chain(ML, 1.0)
            Ut = np.triu(np.ones((a, a)))
            Wc = np.array([np.linalg.matrix_power(Ut - np.eye(a), a - k) @ np.eye(a)[:, a - 1]
                           for k in range(1, a + 1)]).T
            f = L @ G @ np.linalg.inv(Wc)
            comp = E1 @ null_space(Lc.T)  # complement of L inside E1
            pair = _omega_form(comp, f)
            e = comp @ np.linalg.inv(pair).T
            Aw = _omega_form(e, e)
            e = e + 0.5 * f @ Aw.T
        else:
            e, f = symplectic_gram_schmidt(E1)
            a = e.shape[1]
        W = symplectic_complement(np.hstack([e, f]))
        we, wf = symplectic_gram_schmidt(W) if W.shape[1] else (np.zeros((n, 0)), np.zeros((n, 0)))
        C = np.hstack([e, we, f, wf])
        B = symplectic_inverse(C) @ A @ C
        i1 = list(range(a)) + list(range(m, m + a))
        iw = list(range(a, m)) + list(range(m + a, n))
        S1 = B[np.ix_(i1, i1)]
        blocks = {"S1": S1, "R": B[np.ix_(iw, iw)]}
        if geo == 1:
            Ut = np.triu(np.ones((a, a)))
            U = Ut.T
            Tm = np.linalg.solve(Ut, S1[a:, :a])
            Tm = 0.5 * (Tm + Tm.T)
            S1i = np.block([[np.linalg.inv(U), np.zeros((a, a))], [Ut @ Tm, Ut]])
            blocks.update({"S1": S1i, "U": U, "T": Tm, "c": float(Tm[a - 1, a - 1])})
        bf = BlockForm(1.0, a, C, blocks, 0.0, geo)
    Cinv = symplectic_inverse(bf.conjugator)
    recon = bf.conjugator @ _assemble(bf) @ Cinv
    res = float(np.max(np.abs(recon - A)))
    if symplectic_defect(bf.conjugator) > 1e-6 * max(1.0, np.linalg.norm(bf.conjugator, 2) ** 2):
        raise BlockFormFailed("conjugator lost symplecticity")
    if res > TOL_BLOCK:
        raise BlockFormFailed(f"block form residual {res:.2e} exceeds {TOL_BLOCK:.0e}")
    return BlockForm(bf.lam, bf.a, bf.conjugator, bf.blocks, res, bf.geometric_mult)


@dataclass(frozen=True)
class Direction:
    """Tangent vector at P with positive derivative of chi(., lam)."""

    tangent: np.ndarray
    generator: np.ndarray
    derivative: float
    predicted: float
    block_form: BlockForm = field(repr=False)


def chi_positive_direction(P, lam: float) -> Direction:
    """Tangent vector v at P with d chi_(P, lam)(v) > 0.

    The vector is the left translate of an element of sp built in the block
    basis of :func:`refined_block_form`.  For lambda != 1 its derivative is
    lambda |lambda - 1/lambda|^a |det(R - lambda)|, where R is the complement
    block (the factor is 1 when the lambda-block fills the whole space).
    For lambda = 1 it is |c| |det(R - 1)| with c = T_aa of the normal form;
    along the unflipped generator the derivative is (-1)^a c.
    """
    cls = genericity_classify(P, lam)
    if cls.stratum not in ("G1", "G0"):
        raise NoDirection(f"(P, {lam}) lies in {cls.stratum}, not in G1 or G0")
    A = np.asarray(P, dtype=float)
    try:
        bf = refined_block_form(A, lam)
    except BlockFormFailed as exc:
        raise NoDirection(str(exc)) from exc
    n = A.shape[0]
    m = n // 2
    a = bf.a
    Xb = np.zeros((n, n))
    if bf.lam != 1.0:
        E = np.zeros((a, a))
        E[a - 1, 0] = 1.0
        sgn = 1.0 if bf.lam > 1 else (-1.0) ** a
        Xb[:a, :a] = -sgn * E
        Xb[m:m + a, m:m + a] = sgn * E.T
        R = bf.blocks["R"]
        detR = np.linalg.det(R - bf.lam * np.eye(R.shape[0])) if R.size else 1.0
        predicted = bf.lam * abs(bf.lam - 1.0 / bf.lam) ** a
    else:
        Xb[0, m] = 1.0
        R = bf.blocks["R"]
        detR = np.linalg.det(R - np.eye(R.shape[0])) if R.size else 1.0
        predicted = abs(bf.blocks.get("c", 0.0))
    C = bf.conjugator
    X = C @ Xb @ symplectic_inverse(C)
    tangent = A @ X
    d = chi_derivative(A, bf.lam, tangent)
    if d < 0:
        X, tangent, d = -X, -tangent, -d
    if not d > 0:
        raise NoDirection("constructed direction has vanishing derivative")
    return Direction(tangent, X, d, predicted * abs(detR), bf)


def chi_fd_derivative(P, lam: float, generator, h: float) -> float:
    """Central difference of chi along the curve P exp(s X) at s = 0."""
    A = np.asarray(P, dtype=float)
    X = np.asarray(generator, dtype=float)
    plus = A @ sla.expm(h * X)
    minus = A @ sla.expm(-h * X)
    return (chi(plus, lam) - chi(minus, lam)) / (2 * h)


def positive_field(P) -> np.ndarray:
    """Sum of the directions over the real eigenvalues of P in (0, 1]."""
    A = np.asarray(P, dtype=float)
    rep = eigen_structure(A)
    total = np.zeros_like(A)
    for e in rep.real_positive:
        lam = e.value.real
        if lam <= 1.0 + TOL_EIG:
            total += chi_positive_direction(A, lam).tangent
    return total


# ---------------------------------------------------------------------------
# the two subspace-dimension lemmas


@dataclass(frozen=True)
class LagrangianSymplecticRecord:
    dim_L_cap_Kperp: int
    dim_L_cap_K: int
    dim_K: int
    m: int
    identity_holds: bool


def lagrangian_symplectic_identity(L: Subspace, K: Subspace) -> LagrangianSymplecticRecord:
    if not isinstance(L, Subspace) or not isinstance(K, Subspace):
        raise InvalidInput("arguments must be Subspace instances")
    if L.kind != "lagrangian" or K.kind != "symplectic":
        raise InvalidInput("expected a Lagrangian L and a symplectic K")
    if L.m != K.m:
        raise InvalidInput("L and K live in different spaces")
    Kperp = symplectic_complement(K.basis) if K.dim else np.eye(2 * K.m)
    a = intersection_dim(L.basis, Kperp)
    b = intersection_dim(L.basis, K.basis)
    return LagrangianSymplecticRecord(a, b, K.dim, L.m, a - b + K.dim == L.m)


@dataclass(frozen=True)
class PreimageRecord:
    dim: int
    dim_K: int
    dim_L_cap_Kperp: int
    formula_holds: bool


def preimage_dim(P, L, tol: float = 1e-8) -> PreimageRecord:
    """dim (P - Id)^{-1}(L) for P orthogonal and symplectic."""
    A = np.asarray(P, dtype=float)
    n = A.shape[0]
    if np.max(np.abs(A.T @ A - np.eye(n))) > tol or symplectic_defect(A) > tol:
        raise PreconditionViolation("P is not in the maximal compact subgroup (orthogonal and symplectic)")
    Lb = L.basis if isinstance(L, Subspace) else orth(L)
    D = A - np.eye(n)
    # (P - I) x in L  <=>  projection of (P - I) x onto L^perp (Euclidean) vanishes
    Lperp = null_space(Lb.T) if Lb.shape[1] else np.eye(n)
    Q = Lperp.T @ D
    dim = n - numerical_rank(Q, 0.0, tol).rank if Q.shape[0] else n
    K = null_space(D, 0.0, tol)
    Kperp = symplectic_complement(K) if K.shape[1] else np.eye(n)
    c = intersection_dim(Lb, Kperp)
    return PreimageRecord(dim, K.shape[1], c, dim == K.shape[1] + c)


# ---------------------------------------------------------------------------
# random generators (seeded) for the randomized suites


def random_symplectic(m: int, rng, scale: float = 1.0) -> np.ndarray:
    """Product of symplectic shears and a block-diagonal factor; exact in
    the sense that no matrix exponential is involved."""
    I = np.eye(m)
    Z = np.zeros((m, m))
    S1 = rng.normal(scale=scale, size=(m, m))
    S1 = 0.5 * (S1 + S1.T)
    S2 = rng.normal(scale=scale, size=(m, m))
    S2 = 0.5 * (S2 + S2.T)
    G = np.eye(m) + rng.normal(scale=0.3 * scale, size=(m, m))
    while abs(np.linalg.det(G)) < 0.1:
        G = np.eye(m) + rng.normal(scale=0.3 * scale, size=(m, m))
    up = np.block([[I, S1], [Z, I]])
    lo = np.block([[I, Z], [S2, I]])
    dg = np.block([[G, Z], [Z, np.linalg.inv(G).T]])
    return up @ dg @ lo


def random_orthosymplectic(m: int, rng) -> np.ndarray:
    """Real form of a random unitary matrix (Haar via QR)."""
    Z = rng.normal(size=(m, m)) + 1j * rng.normal(size=(m, m))
    Q, R = np.linalg.qr(Z)
    Q = Q * (np.diag(R) / np.abs(np.diag(R)))
    X, Y = Q.real, Q.imag
    return np.block([[X, -Y], [Y, X]])


def random_lagrangian(m: int, rng) -> Subspace:
    base = np.vstack([np.zeros((m, m)), np.eye(m)])
    U = random_orthosymplectic(m, rng)
    if rng.random() < 0.5:
        # also hit non-generic positions relative to the coordinate planes
        k = int(rng.integers(0, m + 1))
        base = np.vstack([np.diag([1.0] * k + [0.0] * (m - k)), np.diag([0.0] * k + [1.0] * (m - k))])
        return Subspace(base if rng.random() < 0.5 else U @ base, "lagrangian")
    return Subspace(U @ base, "lagrangian")


def random_symplectic_subspace(m: int, k: int, rng, aligned: bool = False) -> Subspace:
    """Symplectic subspace of dimension 2k."""
    idx = list(range(k)) + list(range(m, m + k))
    B = np.eye(2 * m)[:, idx]
    if aligned:
        return Subspace(B, "symplectic")
    return Subspace(random_symplectic(m, rng, 0.7) @ B, "symplectic")


def jordan_symplectic(lam: float, a: int, rng=None, complement=None) -> np.ndarray:
    """Matrix with a single Jordan block at lam (and 1/lam), optionally
    conjugated by a random symplectic matrix and padded with a complement."""
    Ut = lam * np.eye(a) + np.diag(np.ones(a - 1), 1)
    block = [Ut, np.linalg.inv(Ut).T]
    return _place(block, complement, rng)


def unipotent_symplectic(a: int, c: float = 1.0, rng=None, complement=None) -> np.ndarray:
    """Unipotent block [[U^{-1}, 0], [U^T T, U^T]] with one Jordan block of
    size 2a at 1.  Only T_aa = c is nonzero; c != 0 is exactly the condition
    for a one-dimensional kernel."""
    Ut = np.triu(np.ones((a, a)))
    U = Ut.T
    T = np.zeros((a, a))
    T[a - 1, a - 1] = c
    S1 = np.block([[np.linalg.inv(U), np.zeros((a, a))], [Ut @ T, Ut]])
    return _place([S1], complement, rng, paired=False)


def _place(blocks, complement, rng, paired: bool = True) -> np.ndarray:
    if paired:
        Ut, inv = blocks
        a = Ut.shape[0]
        S1 = np.block([[Ut, np.zeros((a, a))], [np.zeros((a, a)), inv]])
    else:
        S1 = blocks[0]
        a = S1.shape[0] // 2
    if complement is None:
        P = S1
        m = a
    else:
        Rm = np.asarray(complement, dtype=float)
        k = Rm.shape[0] // 2
        m = a + k
        P = np.zeros((2 * m, 2 * m))
        i1 = list(range(a)) + list(range(m, m + a))
        iw = list(range(a, m)) + list(range(m + a, 2 * m))
        P[np.ix_(i1, i1)] = S1
        P[np.ix_(iw, iw)] = Rm
    if rng is not None:
        C = random_symplectic(m, rng, 0.4)
        P = C @ P @ symplectic_inverse(C)
    return P
