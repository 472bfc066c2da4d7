"""Formal geodesics: a curvature profile R on [0, T] and an orthogonal twist A.

A formal geodesic abstracts the linearised geodesic flow along a closed
geodesic.  Jacobi fields solve J'' + R J = 0, the Poincare map is
P = diag(A^-1, A^-1) Phi(T) with Phi the fundamental solution of the first
order system, and the index form is H(X, Y) = int <X', Y'> - <R X, Y> on
fields with X(T) = A X(0).

From these data this module computes conjugate points, the index split
ind = ind_Omega + ind_P through the concavity form, iterates and
concatenations, and the two iteration identities for regular iterates.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicSpline

from .errors import (
    ContractViolation,
    IntegrationFailed,
    InvalidInput,
    NotApplicable,
    RealizationFailed,
    UnresolvedConjugatePoint,
)
from .symplectic_core import (
    SymplecticMatrix,
    as_symplectic,
    null_space,
    numerical_rank,
    omega_matrix,
    symplectic_defect,
)
from .tolerances import Tolerances, get_profile

TWO_PI = 2 * math.pi


def _sym(M) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    return 0.5 * (M + np.swapaxes(M, -1, -2))


# ---------------------------------------------------------------------------
# curvature rules; all evaluated in local time s = t - t_start


class ConstantRule:
    kind = "constant"

    def __init__(self, value):
        v = np.atleast_2d(np.asarray(value, dtype=float))
        if v.shape[0] != v.shape[1]:
            raise InvalidInput(f"curvature value must be square, got {v.shape}")
        if np.max(np.abs(v - v.T), initial=0.0) > 1e-8 * max(1.0, np.max(np.abs(v))):
            raise InvalidInput("curvature value is not symmetric")
        self.value = _sym(v)
        self.m = v.shape[0]

    def __call__(self, s):
        return self.value

    @cached_property
    def spectral(self):
        kappa, Q = np.linalg.eigh(self.value)
        return kappa, Q

    def conjugated(self, Q):
        return ConstantRule(Q @ self.value @ Q.T)

    def bound(self, length) -> float:
        return float(np.linalg.norm(self.value, 2))

    def to_json(self):
        return {"rule": "constant", "value": self.value.tolist()}


class PolynomialRule:
    """R(s) = sum_k C_k s^k."""

    kind = "polynomial"

    def __init__(self, coeffs):
        C = np.asarray(coeffs, dtype=float)
        if C.ndim == 2:
            C = C[None]
        if C.ndim != 3 or C.shape[1] != C.shape[2]:
            raise InvalidInput("polynomial coefficients must be a list of square matrices")
        self.coeffs = _sym(C)
        self.m = C.shape[1]

    def __call__(self, s):
        out = np.zeros((self.m, self.m))
        for C in self.coeffs[::-1]:
            out = out * s + C
        return out

    def conjugated(self, Q):
        return PolynomialRule(np.einsum("ij,kjl,ml->kim", Q, self.coeffs, Q))

    def bound(self, length) -> float:
        return float(sum(np.linalg.norm(C, 2) * length**k for k, C in enumerate(self.coeffs)))

    def to_json(self):
        return {"rule": "polynomial", "coeffs": self.coeffs.tolist()}


class SampledRule:
    """Samples on a grid of local times, joined by a cubic spline."""

    kind = "sampled"

    def __init__(self, times, values):
        t = np.asarray(times, dtype=float)
        V = _sym(np.asarray(values, dtype=float))
        if V.ndim != 3 or V.shape[0] != t.size or V.shape[1] != V.shape[2]:
            raise InvalidInput("sampled rule needs values of shape (len(times), m, m)")
        if t.size < 2 or np.any(np.diff(t) <= 0):
            raise InvalidInput("sample times must be strictly increasing")
        self.times = t
        self.values = V
        self.m = V.shape[1]
        self._spline = CubicSpline(t, V, axis=0) if t.size >= 4 else None

    def __call__(self, s):
        if self._spline is None:
            i = np.clip(np.searchsorted(self.times, s) - 1, 0, self.times.size - 2)
            w = (s - self.times[i]) / (self.times[i + 1] - self.times[i])
            return (1 - w) * self.values[i] + w * self.values[i + 1]
        return _sym(self._spline(s))

    def conjugated(self, Q):
        return SampledRule(self.times, np.einsum("ij,kjl,ml->kim", Q, self.values, Q))

    def bound(self, length) -> float:
        return float(np.max(np.linalg.norm(self.values, 2, axis=(1, 2))))

    def to_json(self):
        return {"rule": "sampled", "times": self.times.tolist(), "values": self.values.tolist()}


def rule_from_json(d):
    kind = d.get("rule")
    if kind == "constant":
        return ConstantRule(d["value"])
    if kind == "polynomial":
        return PolynomialRule(d["coeffs"])
    if kind == "sampled":
        return SampledRule(d["times"], d["values"])
    raise InvalidInput(f"unknown curvature rule {kind!r}")


@dataclass(frozen=True)
class Segment:
    t0: float
    t1: float
    rule: object

    @property
    def length(self) -> float:
        return self.t1 - self.t0


class CurvatureProfile:
    """Piecewise curvature on [0, T]; jumps are allowed at segment ends."""

    def __init__(self, segments):
        segs = [s if isinstance(s, Segment) else Segment(*s) for s in segments]
        if not segs:
            raise InvalidInput("a curvature profile needs at least one segment")
        if abs(segs[0].t0) > 1e-12:
            raise InvalidInput("profile must start at t = 0")
        m = segs[0].rule.m
        for a, b in zip(segs, segs[1:]):
            if abs(a.t1 - b.t0) > 1e-12:
                raise InvalidInput(f"segments do not partition the domain at t = {a.t1}")
        for s in segs:
            if s.t1 <= s.t0:
                raise InvalidInput("segments must have positive length")
            if s.rule.m != m:
                raise InvalidInput("segments disagree on the dimension m")
        self.segments = tuple(segs)
        self.m = m

    @property
    def T(self) -> float:
        return self.segments[-1].t1

    @property
    def breakpoints(self) -> np.ndarray:
        return np.array([s.t0 for s in self.segments] + [self.T])

    def segment_index(self, t) -> int:
        b = self.breakpoints
        i = int(np.searchsorted(b, t, side="left")) - 1
        return min(max(i, 0), len(self.segments) - 1)

    def __call__(self, t) -> np.ndarray:
        s = self.segments[self.segment_index(t)]
        return s.rule(t - s.t0)

    def bound(self) -> float:
        return max(s.rule.bound(s.length) for s in self.segments)

    def shifted(self, dt) -> list:
        return [Segment(s.t0 + dt, s.t1 + dt, s.rule) for s in self.segments]

    def conjugated(self, Q) -> "CurvatureProfile":
        return CurvatureProfile([Segment(s.t0, s.t1, s.rule.conjugated(Q)) for s in self.segments])

    def star(self, other: "CurvatureProfile") -> "CurvatureProfile":
        """Run self on [0, T] and then other on [T, T + T']."""
        return CurvatureProfile(list(self.segments) + other.shifted(self.T))

    @classmethod
    def constant(cls, value, T=TWO_PI):
        return cls([Segment(0.0, float(T), ConstantRule(value))])

    @classmethod
    def piecewise_constant(cls, breaks, values):
        if len(breaks) != len(values) + 1:
            raise InvalidInput("need one more breakpoint than values")
        return cls([Segment(float(a), float(b), ConstantRule(v)) for a, b, v in zip(breaks, breaks[1:], values)])

    @classmethod
    def sampled(cls, times, values):
        t = np.asarray(times, dtype=float)
        return cls([Segment(float(t[0]), float(t[-1]), SampledRule(t - t[0], values))])

    def to_json(self):
        return [dict(t0=s.t0, t1=s.t1, **s.rule.to_json()) for s in self.segments]


@dataclass(frozen=True)
class FormalGeodesic:
    m: int
    R: CurvatureProfile
    A: np.ndarray
    label: str = ""

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        if A.shape != (self.m, self.m):
            raise InvalidInput(f"twist must be {self.m}x{self.m}, got {A.shape}")
        if np.max(np.abs(A.T @ A - np.eye(self.m))) > 1e-10:
            raise InvalidInput("twist A is not orthogonal")
        if self.R.m != self.m:
            raise InvalidInput("curvature profile has the wrong dimension")
        A.setflags(write=False)
        object.__setattr__(self, "A", A)

    @property
    def T(self) -> float:
        return self.R.T

    @classmethod
    def constant(cls, value, A=None, T=TWO_PI, label=""):
        v = np.atleast_2d(np.asarray(value, dtype=float))
        m = v.shape[0]
        return cls(m, CurvatureProfile.constant(v, T), np.eye(m) if A is None else A, label)

    def to_json(self) -> dict:
        return {"m": self.m, "T": self.T, "segments": self.R.to_json(), "A": self.A.tolist(), "label": self.label}

    @classmethod
    def from_json(cls, d) -> "FormalGeodesic":
        if isinstance(d, str):
            d = json.loads(d)
        try:
            segs = [Segment(float(s["t0"]), float(s["t1"]), rule_from_json(s)) for s in d["segments"]]
            fg = cls(int(d["m"]), CurvatureProfile(segs), np.asarray(d["A"], dtype=float), d.get("label", ""))
        except KeyError as exc:
            raise InvalidInput(f"formal geodesic JSON lacks field {exc}") from None
        if "T" in d and abs(float(d["T"]) - fg.T) > 1e-9:
            raise InvalidInput("declared T does not match the segments")
        return fg


def round_sphere_block(m: int, T=TWO_PI) -> FormalGeodesic:
    return FormalGeodesic.constant(np.eye(m), T=T, label=f"round-sphere m={m}")


# ---------------------------------------------------------------------------
# propagation


def _cs(kappa, s):
    """c, s, c' for x'' + kappa x = 0 with the standard initial data."""
    x = kappa * s * s
    if abs(x) < 1e-3:
        c = 1 - x / 2 + x * x / 24 - x**3 / 720
        sn = s * (1 - x / 6 + x * x / 120 - x**3 / 5040)
    elif kappa > 0:
        w = math.sqrt(kappa)
        c, sn = math.cos(w * s), math.sin(w * s) / w
    else:
        w = math.sqrt(-kappa)
        c, sn = math.cosh(w * s), math.sinh(w * s) / w
    return c, sn, -kappa * sn


def constant_propagator(R, s) -> np.ndarray:
    """Exact fundamental solution of J'' + R J = 0 over time s for constant R."""
    rule = R if isinstance(R, ConstantRule) else ConstantRule(R)
    kappa, Q = rule.spectral
    cs = np.array([_cs(k, s) for k in kappa])
    m = len(kappa)
    out = np.empty((2 * m, 2 * m))
    out[:m, :m] = out[m:, m:] = (Q * cs[:, 0]) @ Q.T
    out[:m, m:] = (Q * cs[:, 1]) @ Q.T
    out[m:, :m] = (Q * cs[:, 2]) @ Q.T
    return out


class FundamentalSolution:
    """Phi(t) with Phi(0) = Id for the system (J, J')' = [[0, I], [-R, 0]] (J, J').

    Constant segments use the closed form, the others an adaptive
    8th-order Runge-Kutta with dense output; segment boundaries are always
    step points.  Callable at any t in [0, T].
    """

    def __init__(self, fg: FormalGeodesic, tol: Tolerances | None = None):
        self.fg = fg
        self.tol = tol or get_profile()
        m = fg.m
        self.m = m
        self.pieces = []
        Phi = np.eye(2 * m)
        self.nfev = 0
        for seg in fg.R.segments:
            start = Phi
            if isinstance(seg.rule, ConstantRule):
                fn = self._constant_piece(seg.rule)
            else:
                fn = self._ode_piece(seg)
            self.pieces.append((seg.t0, seg.t1, fn, start))
            Phi = fn(seg.length) @ start
            if not np.all(np.isfinite(Phi)):
                raise IntegrationFailed(f"fundamental solution overflowed on segment [{seg.t0}, {seg.t1}]")
        self.end = Phi
        self.max_defect = self._check()

    @staticmethod
    def _constant_piece(rule):
        return lambda s: constant_propagator(rule, s)

    def _ode_piece(self, seg):
        m = self.m
        rule = seg.rule

        def rhs(s, y):
            Y = y.reshape(2 * m, 2 * m)
            return np.concatenate([Y[m:], -rule(s) @ Y[:m]]).ravel()

        sol = solve_ivp(rhs, (0.0, seg.length), np.eye(2 * m).ravel(), method="DOP853",
                        rtol=self.tol.ode_rtol, atol=self.tol.ode_atol, dense_output=True)
        if sol.status != 0:
            raise IntegrationFailed(f"integration failed on [{seg.t0}, {seg.t1}] near t = {seg.t0 + sol.t[-1]}: {sol.message}")
        self.nfev += sol.nfev
        dense = sol.sol
        n = 2 * m
        return lambda s: dense(min(max(s, 0.0), seg.length)).reshape(n, n)

    def _check(self) -> float:
        worst = 0.0
        for t0, t1, fn, start in self.pieces:
            for s in np.linspace(0, t1 - t0, 5):
                Phi = fn(s) @ start
                d = symplectic_defect(Phi) / max(1.0, np.linalg.norm(Phi, 2) ** 2)
                worst = max(worst, d)
        if worst > self.tol.sp:
            raise IntegrationFailed(f"fundamental solution lost symplecticity: relative defect {worst:.2e}")
        return worst

    def __call__(self, t) -> np.ndarray:
        T = self.fg.T
        if t < -1e-12 or t > T + 1e-9:
            raise InvalidInput(f"t = {t} outside [0, {T}]")
        i = self.fg.R.segment_index(t)
        t0, t1, fn, start = self.pieces[i]
        return fn(min(max(t - t0, 0.0), t1 - t0)) @ start


def fundamental_solution(fg: FormalGeodesic, tol=None) -> FundamentalSolution:
    return FundamentalSolution(fg, get_profile(tol) if not isinstance(tol, Tolerances) else tol)


def propagate(fg: FormalGeodesic, init, t0: float, t1: float, fs: FundamentalSolution | None = None) -> np.ndarray:
    x = np.asarray(init, dtype=float)
    if x.shape != (2 * fg.m,):
        raise InvalidInput(f"initial state must have length {2 * fg.m}")
    for t in (t0, t1):
        if t < 0 or t > fg.T + 1e-12:
            raise InvalidInput(f"time {t} outside [0, {fg.T}]")
    fs = fs or FundamentalSolution(fg)
    return fs(t1) @ np.linalg.solve(fs(t0), x)


@dataclass(frozen=True)
class PoincareMap:
    matrix: SymplecticMatrix
    label: str = ""
    stats: dict = field(default_factory=dict)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.matrix.entries, dtype=dtype)

    @property
    def entries(self) -> np.ndarray:
        return self.matrix.entries


def twist_block(A) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    Z = np.zeros_like(A)
    return np.block([[A, Z], [Z, A]])


def poincare_map(fg: FormalGeodesic, fs: FundamentalSolution | None = None, tol=None) -> PoincareMap:
    fs = fs or fundamental_solution(fg, tol)
    P = twist_block(fg.A.T) @ fs.end
    scale = max(1.0, np.linalg.norm(P, 2) ** 2)
    S = as_symplectic(P, fs.tol.sp * scale)
    stats = {"segments": len(fg.R.segments), "nfev": fs.nfev, "relative_defect": fs.max_defect}
    return PoincareMap(S, fg.label, stats)


def concat(fgs, A_total=None, label="") -> FormalGeodesic:
    """Run the curvature profiles one after the other.

    The propagators compose in the natural order, Phi_total = Phi_k ... Phi_1,
    so the Poincare map is diag(A_total^-1, A_total^-1) Phi_k ... Phi_1.  The
    individual twists are not used; A_total defaults to the identity.
    """
    fgs = list(fgs)
    if not fgs:
        raise InvalidInput("concat needs at least one formal geodesic")
    m = fgs[0].m
    if any(f.m != m for f in fgs):
        raise InvalidInput("all formal geodesics must share m")
    R = fgs[0].R
    for f in fgs[1:]:
        R = R.star(f.R)
    A = np.eye(m) if A_total is None else A_total
    return FormalGeodesic(m, R, A, label or "*".join(f.label or "?" for f in fgs))


def iterate(fg: FormalGeodesic, q: int) -> FormalGeodesic:
    """The q-fold iterate on [0, qT].

    Lap j runs A^j R A^-j (the curvature seen in the frame continued past
    j turns of the twist), and the total twist is A^q.  With this choice
    poincare_map(iterate(fg, q)) = poincare_map(fg)^q.
    """
    if int(q) != q or q < 1:
        raise InvalidInput(f"q must be a positive integer, got {q}")
    q = int(q)
    segs = []
    Aj = np.eye(fg.m)
    for j in range(q):
        Rj = fg.R if j == 0 else fg.R.conjugated(Aj)
        segs += Rj.shifted(j * fg.T)
        Aj = fg.A @ Aj
    label = f"{fg.label}^{q}" if fg.label else f"iterate {q}"
    return FormalGeodesic(fg.m, CurvatureProfile(segs), np.linalg.matrix_power(fg.A, q), label)


# ---------------------------------------------------------------------------
# conjugate points


@dataclass(frozen=True)
class ConjugatePoints:
    points: list  # (t, multiplicity)
    ind_omega: int


class _ConjugateCounter:
    """N(t) = number of conjugate points in (0, t).

    Uses the unitary U = (J + iJ')(J - iJ')^-1 of the Lagrangian frame with
    J(0) = 0, J'(0) = Id.  Eigenvalue -1 of U means J is singular, and at
    such a crossing the eigen-angles always move clockwise.  Comparing the
    sum of principal angles with the continuous phase of det(J + iJ')
    counts completed crossings.
    """

    def __init__(self, fs: FundamentalSolution):
        self.fs = fs
        self.m = fs.m
        T = fs.fg.T
        grid = [0.0]
        for seg in fs.fg.R.segments:
            step = 0.05 / math.sqrt(1.0 + seg.rule.bound(seg.length))
            k = max(2, int(math.ceil(seg.length / step)))
            grid += list(np.linspace(seg.t0, seg.t1, k + 1)[1:])
        grid[-1] = T
        self.grid, self.phase, self._z = self._unwrap(grid)

    def frame(self, t):
        Phi = self.fs(t)
        m = self.m
        return Phi[:m, m:], Phi[m:, m:]

    def _detz(self, t):
        J, Jp = self.frame(t)
        d = np.linalg.det(J + 1j * Jp)
        return d / abs(d)

    def _unwrap(self, grid):
        ts = [grid[0]]
        phase = [self.m * math.pi / 2]
        prev = self._detz(grid[0])
        zs = [prev]
        pending = list(grid[1:])
        while pending:
            t = pending[0]
            z = self._detz(t)
            inc = float(np.angle(z / prev))
            if abs(inc) > math.pi / 4 and t - ts[-1] > 1e-6:
                pending.insert(0, 0.5 * (ts[-1] + t))
                continue
            pending.pop(0)
            ts.append(t)
            phase.append(phase[-1] + inc)
            zs.append(z)
            prev = z
        return np.array(ts), np.array(phase), np.array(zs)

    def count(self, t, snap=1e-12) -> int:
        if t <= 0:
            return 0
        k = int(np.searchsorted(self.grid, t, side="right")) - 1
        k = min(max(k, 0), len(self.grid) - 1)
        J, Jp = self.frame(t)
        Z = J + 1j * Jp
        d = np.linalg.det(Z)
        g = self.phase[k] + float(np.angle(d / abs(d) / self._z[k]))
        U = Z @ np.linalg.inv(np.conj(Z))
        ang = np.angle(np.linalg.eigvals(U))
        ang = np.where(np.abs(np.abs(ang) - math.pi) <= snap, -math.pi, ang)
        return int(round((ang.sum() - 2 * g) / (2 * math.pi)))


def conjugate_points(fg: FormalGeodesic, fs: FundamentalSolution | None = None, tol=None) -> ConjugatePoints:
    """Zeros of det J on (0, T) for J(0) = 0, J'(0) = Id, with multiplicity.

    The endpoint T is excluded.  Each crossing is localised by bisection to
    tol.loc; its multiplicity (jump of the counting function) must match the
    rank deficiency of J there, otherwise UnresolvedConjugatePoint is raised.
    """
    fs = fs or fundamental_solution(fg, tol)
    tol = fs.tol
    ctr = _ConjugateCounter(fs)
    T = fg.T
    grid = ctr.grid
    counts = [ctr.count(t) for t in grid[:-1]] + [ctr.count(T, snap=1e-6)]
    points = []

    def locate(a, b, na, nb):
        while b - a > tol.loc:
            c = 0.5 * (a + b)
            nc = ctr.count(c)
            if nc == na:
                a = c
            elif nc == nb:
                b = c
            else:
                locate(a, c, na, nc)
                locate(c, b, nc, nb)
                return
        points.append((0.5 * (a + b), nb - na))

    for i in range(1, len(grid)):
        if counts[i] < counts[i - 1]:
            raise UnresolvedConjugatePoint(f"crossing count decreased near t = {grid[i]:.6g}")
        if counts[i] > counts[i - 1]:
            locate(grid[i - 1], grid[i], counts[i - 1], counts[i])
    points.sort()
    for t, mult in points:
        J, _ = ctr.frame(t)
        s = np.linalg.svd(J, compute_uv=False)
        scale = max(1.0, s[0])
        deficiency = int(np.sum(s < 1e-6 * scale))
        if deficiency != mult:
            raise UnresolvedConjugatePoint(
                f"conjugate point near t = {t:.10g}: crossing count {mult} but rank deficiency {deficiency}")
    ind = counts[-1]
    if sum(mult for _, mult in points) != ind:
        raise UnresolvedConjugatePoint("localised conjugate points do not add up to the crossing count")
    return ConjugatePoints(points, ind)


# ---------------------------------------------------------------------------
# index via the concavity form


@dataclass(frozen=True)
class IndexReport:
    ind_omega: int
    conjugate_points: list
    ind_P: int
    ind: int
    nullity: int
    ind0: int
    concavity: dict
    label: str = ""
    length: float = 0.0
    hessian: dict | None = None

    def to_json(self) -> dict:
        d = {
            "label": self.label,
            "ind_omega": self.ind_omega,
            "ind_P": self.ind_P,
            "ind": self.ind,
            "nullity": self.nullity,
            "ind0": self.ind0,
            "conjugate_points": [{"t": t, "multiplicity": k} for t, k in self.conjugate_points],
            "concavity": self.concavity,
            "length": self.length,
        }
        if self.hessian is not None:
            d["hessian"] = self.hessian
        return d


def concavity_index(P, tol: Tolerances | None = None) -> dict:
    """ind_P = (index + nullity of H~) - dim ker(P - Id).

    H~(X, Y) = -omega((P - Id) X, Y) on D = (P - Id)^-1(0 + V).
    """
    tol = tol or get_profile()
    P = np.asarray(P, dtype=float)
    n = P.shape[0]
    m = n // 2
    scale = max(1.0, float(np.linalg.norm(P, 2)))
    thr = tol.kernel * scale
    E = P - np.eye(n)
    D = null_space(E[:m], 0.0, thr) if m else np.eye(n)
    Om = omega_matrix(m)
    Ht = -D.T @ E.T @ Om @ D
    asym = float(np.max(np.abs(Ht - Ht.T), initial=0.0))
    if asym > 1e-8 * scale**2:
        raise ContractViolation(f"concavity form is not symmetric on its domain (defect {asym:.2e})")
    Ht = 0.5 * (Ht + Ht.T)
    mu = np.linalg.eigvalsh(Ht) if Ht.size else np.zeros(0)
    neg = int(np.sum(mu < -thr))
    zero = int(np.sum(np.abs(mu) <= thr))
    ker = n - numerical_rank(E, 0.0, thr).rank
    return {
        "domain_dim": int(D.shape[1]),
        "index": neg,
        "kernel": zero,
        "ker_P_minus_id": ker,
        "ind_P": neg + zero - ker,
        "asymmetry": asym,
    }


def index_report(fg: FormalGeodesic, tol=None, oracle: bool = False, fs=None) -> IndexReport:
    """Morse data of the formal geodesic: ind = ind_Omega + ind_P.

    nullity is dim ker(P - Id), the space of closed Jacobi fields.  With
    ``oracle=True`` the discretised Hessian is evaluated as well and any
    disagreement raises ContractViolation.
    """
    tol = tol if isinstance(tol, Tolerances) else get_profile(tol or "default")
    fs = fs or FundamentalSolution(fg, tol)
    P = poincare_map(fg, fs).entries
    cp = conjugate_points(fg, fs)
    conc = concavity_index(P, tol)
    ind = cp.ind_omega + conc["ind_P"]
    nullity = conc["ker_P_minus_id"]
    hess = None
    if oracle:
        from .index_form import discretized_hessian_index

        res = discretized_hessian_index(fg, tol=tol, kernel=False)
        hess = {"negative": res.negative, "null": res.null, "nodes": res.form.N, "kernel_map_rank": res.kernel_map_rank}
        if res.negative != ind:
            raise ContractViolation(f"index {ind} disagrees with the discretised Hessian count {res.negative}")
        if res.null != nullity:
            raise ContractViolation(f"nullity {nullity} disagrees with the discretised kernel {res.null}")
    return IndexReport(cp.ind_omega, cp.points, conc["ind_P"], ind, nullity, ind + nullity, conc,
                       fg.label, fg.T, hess)


# ---------------------------------------------------------------------------
# iteration identities


def is_regular(fg: FormalGeodesic, q: int, tol=None) -> bool:
    tol = tol if isinstance(tol, Tolerances) else get_profile(tol or "default")
    P = poincare_map(iterate(fg, q), tol=tol).entries
    return bool(np.max(np.abs(P - np.eye(2 * fg.m))) <= tol.kernel * max(1.0, np.linalg.norm(P, 2)))


@dataclass(frozen=True)
class IdentityCheck:
    lhs: int
    rhs: int

    @property
    def holds(self) -> bool:
        return self.lhs == self.rhs


@dataclass(frozen=True)
class BottRecord:
    q: int
    l: int
    eq_a: IdentityCheck  # ind(c^{q+l}) = ind(c^q) + ind(c^l) + m
    eq_b: IdentityCheck  # ind0(c^q) = ind0(c^{q-l}) + ind(c^l) + m
    reports: dict

    @property
    def holds(self) -> bool:
        return self.eq_a.holds and self.eq_b.holds


def _reports(fg, ks, tol, oracle):
    return {k: index_report(iterate(fg, k), tol, oracle=oracle) for k in sorted(set(ks))}


def bott_check(fg: FormalGeodesic, q: int, l: int, tol=None, oracle: bool = False) -> BottRecord:
    if not (0 < l < q):
        raise InvalidInput(f"need 0 < l < q, got q={q}, l={l}")
    tol = tol if isinstance(tol, Tolerances) else get_profile(tol or "default")
    if not is_regular(fg, q, tol):
        raise NotApplicable(f"the {q}-th iterate is not regular (its Poincare map is not the identity)")
    r = _reports(fg, [l, q, q + l, q - l], tol, oracle)
    m = fg.m
    a = IdentityCheck(r[q + l].ind, r[q].ind + r[l].ind + m)
    b = IdentityCheck(r[q].ind0, r[q - l].ind0 + r[l].ind + m)
    return BottRecord(q, l, a, b, r)


@dataclass(frozen=True)
class GapRecord:
    q: int
    k: int
    i_M: int
    lhs: int
    bound: int
    holds: bool
    strict: bool
    equality_allowed: bool

    @property
    def consistent(self) -> bool:
        return self.holds and (self.strict or self.equality_allowed)


def index_gap_bounds(fg: FormalGeodesic, q: int, k: int, i_M: int, tol=None) -> GapRecord:
    """ind(c^k) >= ind(c^q) + m + i(M) for k > q, and
    ind0(c^k) <= ind(c^q) + m - i(M) for k < q; equality is only possible
    when |k - q| = 1 and ind(c) = i(M)."""
    if k == q or k < 1 or q < 1:
        raise InvalidInput("need positive k != q")
    tol = tol if isinstance(tol, Tolerances) else get_profile(tol or "default")
    if not is_regular(fg, q, tol):
        raise NotApplicable(f"the {q}-th iterate is not regular")
    r = _reports(fg, [1, q, k], tol, False)
    m = fg.m
    allowed = abs(k - q) == 1 and r[1].ind == i_M
    if k > q:
        lhs, bound = r[k].ind, r[q].ind + m + i_M
        return GapRecord(q, k, i_M, lhs, bound, lhs >= bound, lhs > bound, allowed)
    lhs, bound = r[k].ind0, r[q].ind + m - i_M
    return GapRecord(q, k, i_M, lhs, bound, lhs <= bound, lhs < bound, allowed)


# ---------------------------------------------------------------------------
# realising a prescribed Poincare map near the identity


def default_family(m: int, pieces: int = 6, T=TWO_PI):
    """Base profile diag(1, 4, ..., m^2) (Poincare map Id) and the
    perturbations E_ij + E_ji supported on ``pieces`` sub-intervals.

    Distinct frequencies in the base are needed: around R = Id the
    perturbed maps miss the rotations inside U(m) to first order.  The
    sub-intervals are deliberately unequal, since equal ones inherit the
    period-pi symmetry of sin^2, cos^2 and sin cos and lose rank.
    """
    base = np.diag([(i + 1.0) ** 2 for i in range(m)])
    basis = []
    for i in range(m):
        for j in range(i, m):
            E = np.zeros((m, m))
            E[i, j] = E[j, i] = 1.0
            basis.append(E)
    breaks = T * (np.arange(pieces + 1) / pieces) ** 1.3
    family = [(p, E) for p in range(pieces) for E in basis]
    return base, breaks, family


def _profile_from_coeffs(base, breaks, family, a):
    vals = [base.copy() for _ in range(len(breaks) - 1)]
    for c, (p, E) in zip(a, family):
        vals[p] = vals[p] + c * E
    return CurvatureProfile.piecewise_constant(breaks, vals)


@dataclass(frozen=True)
class Realization:
    profile: CurvatureProfile
    coefficients: np.ndarray
    residual: float
    iterations: int


def realize_poincare(target, family=None, residual_tol: float = 1e-7, max_iter: int = 50,
                     delta: float = 0.25, fd_step: float = 1e-6) -> Realization:
    """Find a piecewise-constant curvature whose Poincare map (A = Id) is ``target``.

    Damped Gauss-Newton on the coefficients with a central-difference
    Jacobian.  Raises RealizationFailed rather than returning a poor fit.
    """
    S = as_symplectic(target)
    Pt = S.entries
    m = S.m
    if np.max(np.abs(Pt - np.eye(2 * m))) > delta:
        raise InvalidInput(f"target is farther than {delta} from the identity")
    base, breaks, fam = family if family is not None else default_family(m)

    def pmap(a):
        R = _profile_from_coeffs(base, breaks, fam, a)
        try:
            return FundamentalSolution(FormalGeodesic(m, R, np.eye(m))).end
        except (OverflowError, IntegrationFailed):
            return np.full((2 * m, 2 * m), np.inf)

    a = np.zeros(len(fam))
    P = pmap(a)
    res = float(np.max(np.abs(P - Pt)))
    it = 0
    while res > residual_tol:
        if it >= max_iter:
            raise RealizationFailed(f"no convergence after {max_iter} iterations (residual {res:.2e})")
        it += 1
        Jac = np.empty(((2 * m) ** 2, len(fam)))
        for k in range(len(fam)):
            e = np.zeros(len(fam))
            e[k] = fd_step
            Jac[:, k] = ((pmap(a + e) - pmap(a - e)) / (2 * fd_step)).ravel()
        step = -np.linalg.pinv(Jac, rcond=1e-6) @ (P - Pt).ravel()
        big = np.max(np.abs(step))
        if big > 1.0:
            step /= big
        lam = 1.0
        while lam > 1e-4:
            a_new = a + lam * step
            P_new = pmap(a_new)
            r_new = float(np.max(np.abs(P_new - Pt)))
            if r_new < res:
                break
            lam *= 0.5
        else:
            raise RealizationFailed(f"line search stalled at residual {res:.2e}")
        a, P, res = a_new, P_new, r_new
    return Realization(_profile_from_coeffs(base, breaks, fam, a), a, res, it)


def random_rational_rotation(m: int, rng, period: int | None = None) -> tuple[FormalGeodesic, int]:
    """Random constant-curvature formal geodesic whose ``period``-th iterate is regular.

    R = Q diag(w_i^2) Q^T with w_i = p_i / period, and a twist that commutes
    with R and satisfies A^period = Id: a rotation by a multiple of
    2 pi / period on pairs with equal w, and a sign elsewhere.
    """
    q = int(period or rng.integers(2, 5))
    w = rng.integers(1, 2 * q + 1, size=m) / q
    Ablk = np.eye(m)
    i = 0
    while i < m:
        if i + 1 < m and rng.random() < 0.5:
            w[i + 1] = w[i]
            th = 2 * math.pi * rng.integers(0, q) / q
            Ablk[i:i + 2, i:i + 2] = [[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]]
            i += 2
        else:
            if q % 2 == 0 and rng.random() < 0.3:
                Ablk[i, i] = -1.0
            i += 1
    Q = np.linalg.qr(rng.normal(size=(m, m)))[0]
    R = Q @ np.diag(w**2) @ Q.T
    A = Q @ Ablk @ Q.T
    return FormalGeodesic(m, CurvatureProfile.constant(R), A, f"rational w={np.round(w, 4).tolist()}"), q
