"""Finite element discretisation of the index form.

Fields X on [0, T] with X(T) = A X(0) are approximated by continuous
piecewise linear functions on a mesh whose nodes include every segment
boundary of the curvature profile.  Unknowns are the nodal values
X_0 .. X_{N-1}; the last element couples X_{N-1} with A X_0.

Negative directions of H are counted through the inertia of H + eps M,
where M is the L^2 Gram matrix.  Since the discrete space is a subspace,
its Rayleigh-Ritz values approximate the true ones from above, so kernel
modes never show up as negative.  Inertia comes from a block LDL^T sweep
along the mesh with X_0 as a border; a banded eigen-solver on the zig-zag
reordered matrix serves as a slower cross-check.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.linalg import eigvals_banded
from scipy.sparse.linalg import eigsh

from .errors import OracleFailed
from .formal_geodesic import ConstantRule, FormalGeodesic
from .tolerances import Tolerances, get_profile

N_MAX = 2**14
_GAUSS_X = np.array([-math.sqrt(0.6), 0.0, math.sqrt(0.6)])
_GAUSS_W = np.array([5 / 9, 8 / 9, 5 / 9])


@dataclass
class DiscretizedIndexForm:
    """Block form of H and of the Gram matrix M on the twisted mesh.

    ``Hd[k]`` couples X_k with itself, ``Ho[k]`` couples X_k with X_{k+1}
    and ``Hc`` couples X_{N-1} with X_0 through the twist; same for M.
    """

    N: int
    nodes: np.ndarray
    A: np.ndarray
    Hd: np.ndarray
    Ho: np.ndarray
    Hc: np.ndarray
    Md: np.ndarray
    Mo: np.ndarray
    Mc: np.ndarray
    history: list = field(default_factory=list)

    @property
    def m(self) -> int:
        return self.A.shape[0]

    def _sparse(self, d, o, c):
        N, m = self.N, self.m
        n = N * m
        ii, jj = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
        k = np.arange(N)[:, None, None]
        kk = np.arange(N - 1)[:, None, None]
        rows = [k * m + ii, kk * m + ii, (kk + 1) * m + ii, ((N - 1) * m + ii)[None], ii[None]]
        cols = [k * m + jj, (kk + 1) * m + jj, kk * m + jj, jj[None], ((N - 1) * m + jj)[None]]
        vals = [d, o, np.swapaxes(o, 1, 2), c[None], c.T[None]]
        S = sp.coo_matrix((np.concatenate([v.ravel() for v in vals]),
                           (np.concatenate([r.ravel() for r in rows]), np.concatenate([q.ravel() for q in cols]))),
                          shape=(n, n))
        return S.tocsr()

    @cached_property
    def H(self) -> sp.csr_matrix:
        return self._sparse(self.Hd, self.Ho, self.Hc)

    @cached_property
    def M(self) -> sp.csr_matrix:
        return self._sparse(self.Md, self.Mo, self.Mc)

    def symmetry_defect(self) -> float:
        d = float(np.max(np.abs(self.Hd - np.swapaxes(self.Hd, 1, 2))))
        return d

    def negative_count(self, sigma: float) -> int:
        """Number of negative eigenvalues of H + sigma M (inertia by Sylvester)."""
        for nudge in (0.0, 1e-11, -1e-11, 1e-9):
            s = sigma + nudge * max(1.0, abs(sigma))
            try:
                return cyclic_inertia(self.Hd + s * self.Md, self.Ho + s * self.Mo, self.Hc + s * self.Mc)
            except (np.linalg.LinAlgError, FloatingPointError):
                continue
        raise OracleFailed(f"singular pivots in the inertia sweep at shift {sigma}")


def build_mesh(fg: FormalGeodesic, N: int) -> np.ndarray:
    T = fg.T
    pts = [0.0]
    for seg in fg.R.segments:
        k = max(2, int(math.ceil(N * seg.length / T)))
        pts += list(np.linspace(seg.t0, seg.t1, k + 1)[1:])
    return np.array(pts)


def assemble(fg: FormalGeodesic, N: int) -> DiscretizedIndexForm:
    m = fg.m
    nodes = build_mesh(fg, N)
    ne = len(nodes) - 1
    A = np.asarray(fg.A)
    I = np.eye(m)
    h = np.diff(nodes)
    R00 = np.zeros((ne, m, m))
    R01 = np.zeros((ne, m, m))
    R11 = np.zeros((ne, m, m))
    for e in range(ne):
        a = nodes[e]
        he = h[e]
        seg = fg.R.segments[fg.R.segment_index(a + 0.5 * he)]
        if isinstance(seg.rule, ConstantRule):
            Rv = seg.rule.value
            R00[e] = he / 3 * Rv
            R01[e] = he / 6 * Rv
            R11[e] = he / 3 * Rv
        else:
            for x, w in zip(_GAUSS_X, _GAUSS_W):
                xi = 0.5 * (1 + x)
                Rt = seg.rule(a + xi * he - seg.t0)
                ww = 0.5 * he * w
                R00[e] += ww * (1 - xi) ** 2 * Rt
                R01[e] += ww * (1 - xi) * xi * Rt
                R11[e] += ww * xi**2 * Rt
    K = I[None] / h[:, None, None]
    E00, E01, E11 = K - R00, -K - R01, K - R11
    G00 = (h / 3)[:, None, None] * I
    G01 = (h / 6)[:, None, None] * I
    Hd = E00.copy()
    Md = G00.copy()
    Hd[1:] += E11[:-1]
    Md[1:] += G00[:-1]
    # the last element ends at A X_0
    Hd[0] += A.T @ E11[-1] @ A
    Md[0] += A.T @ G00[-1] @ A
    Ho = E01[:-1].copy()
    Mo = G01[:-1].copy()
    Hc = E01[-1] @ A
    Mc = G01[-1] @ A
    Hd = 0.5 * (Hd + np.swapaxes(Hd, 1, 2))
    Md = 0.5 * (Md + np.swapaxes(Md, 1, 2))
    return DiscretizedIndexForm(ne, nodes, A, Hd, Ho, Hc, Md, Mo, Mc)


def cyclic_inertia(Bd, Co, Cc) -> int:
    """Negative eigenvalue count of the symmetric block matrix with diagonal
    blocks Bd[k], blocks Co[k] at (k, k+1) and Cc at (N-1, 0).

    Block LDL^T on X_1 .. X_{N-1} with X_0 kept as a border, then the
    Schur complement on X_0 (Haynsworth inertia additivity).
    """
    N, m = Bd.shape[0], Bd.shape[1]
    if N == 1:
        return int(np.sum(np.linalg.eigvalsh(Bd[0] + Cc + Cc.T) < 0))
    W = np.zeros((N, m, m))  # border blocks S[0, k]
    W[1] += Co[0]
    W[N - 1] += Cc.T
    D = np.empty((N - 1, m, m))
    D[0] = Bd[1]
    G = W[1].copy()
    S0 = Bd[0].copy()
    for k in range(2, N):
        Dp = D[k - 2]
        Ck = Co[k - 1]
        rhs = np.concatenate([Ck, G.T], axis=1)
        sol = np.linalg.solve(Dp, rhs)
        L, Y = sol[:, :m], sol[:, m:]
        S0 -= G @ Y
        D[k - 1] = Bd[k] - Ck.T @ L
        G = W[k] - G @ L
    S0 -= G @ np.linalg.solve(D[N - 2], G.T)
    if not (np.all(np.isfinite(D)) and np.all(np.isfinite(S0))):
        raise FloatingPointError("non-finite pivot")
    D = 0.5 * (D + np.swapaxes(D, 1, 2))
    S0 = 0.5 * (S0 + S0.T)
    return int(np.sum(np.linalg.eigvalsh(D) < 0) + np.sum(np.linalg.eigvalsh(S0) < 0))


def negative_count(S: sp.spmatrix, m: int, ne: int) -> int:
    """Reference count for a general sparse symmetric matrix, via a banded
    eigen-solver after the zig-zag reordering 0, N-1, 1, N-2, ..."""
    perm = _zigzag(ne, m)
    Sp = S[perm][:, perm].tocsr()
    n = Sp.shape[0]
    u = 3 * m - 1
    ab = np.zeros((u + 1, n))
    for d in range(u + 1):
        ab[d, : n - d] = Sp.diagonal(-d)
    vals = eigvals_banded(ab, lower=True, check_finite=False)
    return int(np.sum(vals < 0.0))


def _zigzag(ne: int, m: int) -> np.ndarray:
    order = []
    lo, hi = 0, ne - 1
    while lo <= hi:
        order.append(lo)
        if hi != lo:
            order.append(hi)
        lo += 1
        hi -= 1
    order = np.array(order)
    return (order[:, None] * m + np.arange(m)[None, :]).ravel()


@dataclass
class HessianResult:
    negative: int
    null: int
    smallest: np.ndarray
    form: DiscretizedIndexForm
    kernel_map_rank: int | None = None
    kernel_vectors: np.ndarray | None = None
    initial_data: np.ndarray | None = None


def kernel_band(form: DiscretizedIndexForm, scale: float) -> float:
    """Upper edge of the window that counts as kernel on this mesh.

    A kernel mode of frequency k is lifted by about h^2 k^4 / 12 and
    k^2 <= scale, so the window shrinks like h^2 under refinement while
    genuinely positive eigenvalues stay put."""
    h = float(np.max(np.diff(form.nodes)))
    return scale**2 * h * h / 4 + 1e-9 * scale


def _counts(form: DiscretizedIndexForm, eps: float, scale: float):
    neg = form.negative_count(eps)
    below_band = form.negative_count(-kernel_band(form, scale))
    return neg, below_band - neg


def discretized_hessian_index(fg: FormalGeodesic, N: int | None = None, tol=None,
                              kernel: bool = True, n_max: int = N_MAX) -> HessianResult:
    """Count negative and null directions of the index form by mesh refinement.

    The mesh is doubled until the pair (negative, null) is the same for three
    consecutive meshes; exceeding n_max elements raises OracleFailed.
    """
    tol = tol if isinstance(tol, Tolerances) else get_profile(tol or "default")
    scale = max(1.0, fg.R.bound())
    eps = tol.neg * scale
    # start on a mesh whose kernel window is at most null_band * scale
    h_needed = math.sqrt(4 * tol.null_band / scale)
    N0 = max(16, int(math.ceil(fg.T / h_needed)))
    if N is not None:
        N0 = max(N0, int(N))
    history = []
    Ncur = N0
    form = None
    while True:
        if Ncur > n_max:
            raise OracleFailed(f"index count did not stabilise below {n_max} elements: history {history}")
        form = assemble(fg, Ncur)
        neg, null = _counts(form, eps, scale)
        history.append((form.N, neg, null))
        if len(history) >= 3 and len({(a, b) for _, a, b in history[-3:]}) == 1:
            break
        Ncur *= 2
    form.history = history
    res = HessianResult(neg, null, np.zeros(0), form)
    if kernel:
        _kernel_analysis(fg, res, eps)
    return res


def _kernel_analysis(fg, res: HessianResult, eps: float):
    form = res.form
    n = form.H.shape[0]
    k = min(n - 2, res.negative + res.null + 3)
    if k <= 0:
        return
    shift = -max(1.0, fg.R.bound()) - 1.0
    vals, vecs = eigsh(form.H.tocsc(), k=k, M=form.M.tocsc(), sigma=shift, which="LM")
    order = np.argsort(vals)
    vals, vecs = vals[order], vecs[:, order]
    res.smallest = vals
    if res.null == 0:
        res.kernel_map_rank = 0
        return
    ker = vecs[:, res.negative: res.negative + res.null]
    res.kernel_vectors = ker
    m = form.m
    A = form.A
    X = ker.reshape(form.N, m, -1)
    h0 = form.nodes[1] - form.nodes[0]
    h1 = form.nodes[-1] - form.nodes[-2]
    X0 = X[0]
    Xp = (X[1] - A.T @ X[-1]) / (h0 + h1)
    data = np.vstack([X0, Xp])
    res.initial_data = data
    s = np.linalg.svd(data, compute_uv=False)
    res.kernel_map_rank = int(np.sum(s > 1e-6 * s[0])) if s.size else 0
