"""Geodesics of concrete Besse metrics and extraction of (R, A) data.

Every metric here lives on the unit sphere S^n in R^{n+1} with the ambient
quadratic form G(p) = I + psi(z) e e^T, where z = p_n is the last
coordinate and e the last unit vector.  This covers

* the round sphere (psi = 0),
* Zoll surfaces of revolution a(z)^2 dtheta^2 + sin^2 theta dphi^2 with
  a = 1 + h(z), h odd and h(1) = 0; then a^2 - 1 is divisible by 1 - z^2
  and psi = (a^2 - 1) / (1 - z^2) is a polynomial,
* spheroids x^2 + y^2 + z^2 / c^2 = 1 (psi = c^2 - 1), a non-Besse control.

Working in the embedding avoids coordinate poles altogether.  Geodesics and
parallel frames solve the constrained equations
    G a - lam p = -Gamma(v, w),  p . a = -v . w
with Gamma(v, w) = psi'(z) v_z w_z e / 2, plus a small Baumgarte term that
pulls drift back onto the constraint.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import Polynomial
from scipy.integrate import solve_ivp
from scipy.optimize import minimize_scalar

from .errors import IntegrationFailed, InvalidInput, NotClosed, NumericalFailure
from .formal_geodesic import ConstantRule, CurvatureProfile, FormalGeodesic, SampledRule, Segment
from .tolerances import Tolerances, get_profile

TWO_PI = 2 * math.pi
_BAUMGARTE = 1.0


def _poly_extrema(poly: Polynomial, lo=-1.0, hi=1.0):
    pts = [lo, hi]
    for r in poly.deriv().roots():
        if abs(r.imag) < 1e-12 and lo <= r.real <= hi:
            pts.append(r.real)
    vals = poly(np.array(pts))
    return float(np.min(vals)), float(np.max(vals))


class MetricSpec:
    """A metric G = I + psi(z) e e^T on S^n; see the module docstring."""

    FAMILIES = ("round_sphere", "zoll_revolution", "spheroid", "custom")

    def __init__(self, family: str, n: int = 2, psi=None, dpsi=None, params=None):
        if family not in self.FAMILIES:
            raise InvalidInput(f"unknown metric family {family!r}")
        if int(n) != n or n < 2:
            raise InvalidInput(f"dimension must be an integer >= 2, got {n}")
        self.family = family
        self.n = int(n)
        self.params = dict(params or {})
        self._psi = psi
        self._dpsi = dpsi

    # constructors

    @classmethod
    def round_sphere(cls, n: int = 2) -> "MetricSpec":
        return cls("round_sphere", n)

    @classmethod
    def zoll_revolution(cls, h) -> "MetricSpec":
        """h given by coefficients in increasing degree, e.g. [0, 0.3, 0, -0.3]."""
        hp = Polynomial(np.asarray(h, dtype=float))
        c = hp.coef
        if np.any(np.abs(c[0::2]) > 1e-14):
            raise InvalidInput("h must be an odd polynomial")
        if abs(hp(1.0)) > 1e-12:
            raise InvalidInput(f"h(1) must vanish, got {hp(1.0)}")
        lo, hi = _poly_extrema(hp)
        if max(-lo, hi) >= 1:
            raise InvalidInput(f"sup |h| on [-1, 1] is {max(-lo, hi):.4g}, must be < 1")
        num = (1 + hp) ** 2 - 1
        psi, rem = divmod(num, Polynomial([1.0, 0.0, -1.0]))
        if np.max(np.abs(rem.coef)) > 1e-12:
            raise NumericalFailure("a^2 - 1 is not divisible by 1 - z^2")
        return cls("zoll_revolution", 2, psi, psi.deriv(), {"h": [float(x) for x in c]})

    @classmethod
    def spheroid(cls, c: float) -> "MetricSpec":
        if c <= 0:
            raise InvalidInput("axis ratio must be positive")
        psi = Polynomial([c * c - 1.0])
        return cls("spheroid", 2, psi, psi.deriv(), {"c": float(c)})

    @classmethod
    def custom(cls, psi, dpsi=None, n: int = 2) -> "MetricSpec":
        """psi as polynomial coefficients (JSON friendly) or a callable with dpsi."""
        if callable(psi):
            if dpsi is None:
                raise InvalidInput("a callable psi needs its derivative dpsi")
            return cls("custom", n, psi, dpsi, {})
        p = Polynomial(np.asarray(psi, dtype=float))
        lo, _ = _poly_extrema(p * Polynomial([1.0, 0.0, -1.0]) + 1)
        if lo <= 0:
            raise InvalidInput("custom metric is not positive definite on the sphere")
        return cls("custom", n, p, p.deriv(), {"psi": [float(x) for x in p.coef]})

    # evaluation

    @property
    def dim_ambient(self) -> int:
        return self.n + 1

    @property
    def flat_psi(self) -> bool:
        return self._psi is None

    def psi(self, z) -> float:
        return 0.0 if self._psi is None else float(self._psi(z))

    def dpsi(self, z) -> float:
        return 0.0 if self._dpsi is None else float(self._dpsi(z))

    def gram(self, p) -> np.ndarray:
        G = np.eye(self.dim_ambient)
        G[-1, -1] += self.psi(p[-1])
        return G

    def inner(self, p, u, w) -> float:
        return float(u @ w + self.psi(p[-1]) * u[-1] * w[-1])

    def gauss_curvature(self, z) -> float:
        """Sectional curvature of a surface of revolution at height z."""
        if self.n != 2:
            raise InvalidInput("Gauss curvature is defined for surfaces only")
        s = 1.0 - z * z
        a2 = 1.0 + self.psi(z) * s
        a = math.sqrt(a2)
        a_z = (self.dpsi(z) * s - 2.0 * z * self.psi(z)) / (2.0 * a)
        return (a - z * a_z) / a**3

    def jacobi_operator(self, p, v, frame) -> np.ndarray:
        """<R(e_i, v) v, e_j> in the frame e_1 .. e_{n-1} orthonormal to v."""
        m = frame.shape[1]
        if self.flat_psi:
            return np.eye(m) * self.inner(p, v, v)
        # surfaces: a single normal direction and R = K |v|^2
        return np.array([[self.gauss_curvature(p[-1]) * self.inner(p, v, v)]])

    def to_json(self) -> dict:
        if self.family == "custom" and not self.params:
            raise InvalidInput("a custom metric given by callables cannot be serialised")
        return {"family": self.family, "n": self.n, **self.params}

    @classmethod
    def from_json(cls, d) -> "MetricSpec":
        if isinstance(d, str):
            d = json.loads(d)
        fam = d.get("family")
        try:
            if fam == "round_sphere":
                return cls.round_sphere(int(d.get("n", 2)))
            if fam == "zoll_revolution":
                return cls.zoll_revolution(d["h"])
            if fam == "spheroid":
                return cls.spheroid(float(d["c"]))
            if fam == "custom":
                return cls.custom(d["psi"], n=int(d.get("n", 2)))
        except KeyError as exc:
            raise InvalidInput(f"metric spec lacks field {exc}") from None
        raise InvalidInput(f"unknown metric family {fam!r}")

    def __repr__(self):
        return f"MetricSpec({self.family}, n={self.n}, {self.params})"


# ---------------------------------------------------------------------------
# integration


def _accelerations(metric: MetricSpec, p, v, W):
    """Second derivative of p and first derivative of the frame columns."""
    N = metric.dim_ambient
    G = metric.gram(p)
    K = np.zeros((N + 1, N + 1))
    K[:N, :N] = G
    K[:N, N] = -p
    K[N, :N] = p
    cols = np.column_stack([v, W]) if W is not None else v[:, None]
    rhs = np.zeros((N + 1, cols.shape[1]))
    g1 = 0.5 * metric.dpsi(p[-1]) * v[-1]
    rhs[N - 1] = -g1 * cols[-1]
    rhs[N] = -(v @ cols) - _BAUMGARTE * (p @ cols)
    # the position constraint |p|^2 = 1 gets its own correction
    rhs[N, 0] -= 0.5 * _BAUMGARTE**2 * (p @ p - 1.0)
    sol = np.linalg.solve(K, rhs)[:N]
    return sol[:, 0], sol[:, 1:]


@dataclass
class GeodesicPath:
    metric: MetricSpec
    p0: np.ndarray
    v0: np.ndarray
    length: float
    sol: object = field(repr=False)
    m: int = 0
    speed_drift: float = 0.0
    clairaut_drift: float = 0.0
    constraint_drift: float = 0.0

    def state(self, t):
        y = self.sol(t)
        N = self.metric.dim_ambient
        return y[:N], y[N:2 * N], y[2 * N:].reshape(N, self.m)

    def samples(self, k: int = 200):
        ts = np.linspace(0, self.length, k + 1)
        return ts, np.array([self.sol(t)[: 2 * self.metric.dim_ambient] for t in ts])


def unit_initial(metric: MetricSpec, p, v):
    p = np.asarray(p, dtype=float)
    v = np.asarray(v, dtype=float)
    N = metric.dim_ambient
    if p.shape != (N,) or v.shape != (N,):
        raise InvalidInput(f"initial point and velocity need length {N}")
    if abs(np.linalg.norm(p) - 1) > 1e-8:
        raise InvalidInput("initial point is not on the unit sphere")
    if abs(p @ v) > 1e-8:
        raise InvalidInput("initial velocity is not tangent")
    speed = math.sqrt(metric.inner(p, v, v))
    if speed == 0:
        raise InvalidInput("initial velocity vanishes")
    return p, v / speed


def random_unit_initial(metric: MetricSpec, rng):
    N = metric.dim_ambient
    p = rng.normal(size=N)
    p /= np.linalg.norm(p)
    v = rng.normal(size=N)
    v -= (v @ p) * p
    return unit_initial(metric, p, v)


def initial_frame(metric: MetricSpec, p, v) -> np.ndarray:
    """g-orthonormal basis of the tangent space orthogonal to v, by
    Gram-Schmidt on the projected coordinate vectors."""
    N = metric.dim_ambient
    basis = [v / math.sqrt(metric.inner(p, v, v))]
    for i in range(N):
        w = np.zeros(N)
        w[i] = 1.0
        w -= (w @ p) * p
        for b in basis:
            w = w - metric.inner(p, w, b) * b
        nrm = math.sqrt(max(metric.inner(p, w, w), 0.0))
        if nrm > 1e-6:
            basis.append(w / nrm)
        if len(basis) == metric.n:
            break
    if len(basis) != metric.n:
        raise NumericalFailure("could not complete the initial frame")
    return np.column_stack(basis[1:])


def integrate_geodesic(metric: MetricSpec, init, max_length: float, tol=None, frame: bool = True,
                       frame0=None) -> GeodesicPath:
    """Unit-speed geodesic from init = (p, v) up to arc length max_length,
    optionally with a parallel frame of the normal space (``frame0`` overrides
    the default Gram-Schmidt frame)."""
    tol = tol if isinstance(tol, Tolerances) else get_profile(tol)
    p0, v0 = unit_initial(metric, *init)
    N = metric.dim_ambient
    if frame0 is not None:
        W0 = np.asarray(frame0, dtype=float)
        gram = W0.T @ metric.gram(p0) @ W0
        if W0.shape != (N, metric.n - 1) or np.max(np.abs(gram - np.eye(metric.n - 1))) > 1e-10 \
                or np.max(np.abs(W0.T @ metric.gram(p0) @ v0)) > 1e-10 or np.max(np.abs(p0 @ W0)) > 1e-10:
            raise InvalidInput("frame0 must be g-orthonormal, tangent and orthogonal to the velocity")
    else:
        W0 = initial_frame(metric, p0, v0) if frame else np.zeros((N, 0))
    m = W0.shape[1]

    def rhs(t, y):
        p, v = y[:N], y[N:2 * N]
        W = y[2 * N:].reshape(N, m)
        a, dW = _accelerations(metric, p, v, W)
        return np.concatenate([v, a, dW.ravel()])

    y0 = np.concatenate([p0, v0, W0.ravel()])
    sol = solve_ivp(rhs, (0.0, max_length), y0, method="DOP853", rtol=tol.ode_rtol, atol=tol.ode_atol,
                    dense_output=True)
    if sol.status != 0:
        raise IntegrationFailed(f"geodesic integration failed near s = {sol.t[-1]:.6g}: {sol.message}")
    path = GeodesicPath(metric, p0, v0, float(max_length), sol.sol, m)
    ys = sol.y
    P, V = ys[:N], ys[N:2 * N]
    speed = np.array([metric.inner(P[:, k], V[:, k], V[:, k]) for k in range(P.shape[1])])
    path.speed_drift = float(np.max(np.abs(speed - 1.0)))
    path.constraint_drift = float(max(np.max(np.abs(np.sum(P * P, 0) - 1)), np.max(np.abs(np.sum(P * V, 0)))))
    if metric.family != "custom" or metric.params:
        # rotation about the symmetry axis
        L = P[0] * V[1] - P[1] * V[0]
        path.clairaut_drift = float(np.max(np.abs(L - L[0])))
    return path


# ---------------------------------------------------------------------------
# closure


def _phase_residual(path: GeodesicPath, t) -> float:
    p, v, _ = path.state(t)
    return float(math.sqrt(np.sum((p - path.p0) ** 2) + np.sum((v - path.v0) ** 2)))


def detect_closure(path: GeodesicPath, tol=None, min_period: float = 0.5, step: float = 0.01):
    """Smallest period: (True, l, residual), or NotClosed over the horizon.

    The phase-space distance to the initial state is scanned on a grid; each
    dip below ``10 * step`` is refined by a bounded scalar minimisation.
    """
    tol = tol if isinstance(tol, Tolerances) else get_profile(tol)
    ts = np.arange(min_period, path.length + 1e-12, step)
    if ts.size < 3:
        raise InvalidInput("path too short to detect a return")
    r = np.array([_phase_residual(path, t) for t in ts])
    k0 = int(np.argmin(r))
    best = (float(r[k0]), float(ts[k0]))
    for k in range(1, len(ts) - 1):
        if r[k] <= r[k - 1] and r[k] <= r[k + 1] and r[k] < 10 * step:
            # the squared distance is smooth at the minimum, the distance is not
            # and a local variable keeps the optimiser's relative stopping rule tight
            tk = ts[k]
            res = minimize_scalar(lambda u: _phase_residual(path, tk + u) ** 2, bounds=(-step, step),
                                  method="bounded", options={"xatol": 1e-14})
            ell = float(tk + res.x)
            d = _phase_residual(path, ell)
            if d <= tol.close:
                return True, ell, d
            best = min(best, (d, ell))
    raise NotClosed(f"no return within length {path.length:.6g} (closest approach {best[0]:.3g} at {best[1]:.6g})")


@dataclass
class GeodesicRecord:
    metric: MetricSpec
    p0: np.ndarray
    v0: np.ndarray
    period: float
    residual: float
    closed: bool
    path: GeodesicPath = field(repr=False)
    holonomy: np.ndarray | None = None
    frame_defect: float | None = None
    formal: FormalGeodesic | None = None

    def to_json(self) -> dict:
        d = {
            "metric": self.metric.to_json(),
            "p0": self.p0.tolist(),
            "v0": self.v0.tolist(),
            "period": self.period,
            "residual": self.residual,
            "closed": self.closed,
            "speed_drift": self.path.speed_drift,
            "clairaut_drift": self.path.clairaut_drift,
        }
        if self.holonomy is not None:
            d["holonomy"] = self.holonomy.tolist()
            d["frame_defect"] = self.frame_defect
        return d


def closed_geodesic(metric: MetricSpec, init, max_length: float = 2.5 * TWO_PI, tol=None,
                    frame0=None) -> GeodesicRecord:
    tol = tol if isinstance(tol, Tolerances) else get_profile(tol)
    path = integrate_geodesic(metric, init, max_length, tol, frame0=frame0)
    ok, ell, res = detect_closure(path, tol)
    return GeodesicRecord(metric, path.p0, path.v0, ell, res, ok, path)


def transport_frame(metric: MetricSpec, record: GeodesicRecord):
    """Parallel frame at 0 and at the period, and the holonomy H with
    frame(l) = frame(0) H (entries g(e_i(0), e_j(l)))."""
    if not record.closed:
        raise InvalidInput("record is not closed")
    path = record.path
    p0, _, F0 = path.state(0.0)
    pl, _, Fl = path.state(record.period)
    H = F0.T @ metric.gram(p0) @ Fl
    defect = float(np.max(np.abs(Fl - F0 @ H), initial=0.0))
    orth = float(np.max(np.abs(H.T @ H - np.eye(H.shape[0])), initial=0.0))
    if orth > 1e-6:
        raise NumericalFailure(f"transported frame lost orthonormality ({orth:.2e})")
    record.holonomy = H
    record.frame_defect = defect
    return F0, Fl, H


def extract_formal(metric: MetricSpec, record: GeodesicRecord, samples: int = 1024, T: float = TWO_PI,
                   label: str = "") -> FormalGeodesic:
    """Curvature in the parallel frame, rescaled from [0, l] to [0, T].

    In frame coordinates a closed Jacobi field returns as X(l) = H^T X(0),
    so the twist of the formal geodesic is the transpose of the holonomy.
    """
    if record.holonomy is None:
        transport_frame(metric, record)
    path = record.path
    ell = record.period
    scale = ell / T
    ts = np.linspace(0.0, T, samples + 1)
    vals = []
    for t in ts:
        p, v, F = path.state(t * scale)
        Rj = metric.jacobi_operator(p, v, F)
        vals.append(scale**2 * 0.5 * (Rj + Rj.T))
    vals = np.array(vals)
    # constant up to integration noise: keep the exact closed-form propagator
    if np.max(np.abs(vals - vals[0])) <= 1e-9 * max(1.0, float(np.max(np.abs(vals)))):
        rule = ConstantRule(vals.mean(axis=0))
    else:
        rule = SampledRule(ts, vals)
    A = record.holonomy.T
    # polish to an exactly orthogonal matrix
    U, _, Vt = np.linalg.svd(A)
    A = U @ Vt
    fg = FormalGeodesic(A.shape[0], CurvatureProfile([Segment(0.0, float(T), rule)]), A,
                        label or f"{metric.family} l={ell:.6f}")
    record.formal = fg
    return fg


# ---------------------------------------------------------------------------
# critical manifold dimension


def _unit_tangent_basis(metric: MetricSpec, p, v) -> np.ndarray:
    N = metric.dim_ambient
    G = metric.gram(p)
    dpsi = metric.dpsi(p[-1])
    # gradients of |p|^2, p.v and g(v, v)
    C = np.zeros((3, 2 * N))
    C[0, :N] = 2 * p
    C[1, :N] = v
    C[1, N:] = p
    C[2, N - 1] = dpsi * v[-1] ** 2
    C[2, N:] = 2 * G @ v
    _, s, Vt = np.linalg.svd(C)
    return Vt[3:].T


def _project_unit(metric, p, v):
    p = p / np.linalg.norm(p)
    v = v - (v @ p) * p
    return p, v / math.sqrt(metric.inner(p, v, v))


def _flow(metric, p, v, ell, tol):
    path = integrate_geodesic(metric, (p, v), ell, tol, frame=False)
    q, w, _ = path.state(ell)
    return np.concatenate([q, w])


@dataclass(frozen=True)
class ManifoldProbe:
    dimension: int
    estimates: list
    singular_values: list
    degraded: bool


def probe_critical_manifold(metric: MetricSpec, ell: float = TWO_PI, samples: int = 3, rng=None,
                            tol=None, fd_step: float = 1e-6) -> ManifoldProbe:
    """Local dimension of {closed geodesics of length ell} in the unit tangent
    bundle: (2n - 1) - rank(d Phi_ell - Id) at sampled closed initial data."""
    tol = tol if isinstance(tol, Tolerances) else get_profile(tol)
    rng = rng if rng is not None else np.random.default_rng(0)
    dimT1 = 2 * metric.n - 1
    estimates, svals = [], []
    degraded = False
    for _ in range(samples):
        p, v = random_unit_initial(metric, rng)
        B = _unit_tangent_basis(metric, p, v)
        x0 = np.concatenate([p, v])
        D = np.empty((B.shape[1], B.shape[1]))
        for k in range(B.shape[1]):
            cols = []
            for sgn in (1, -1):
                y = x0 + sgn * fd_step * B[:, k]
                q, w = _project_unit(metric, y[: metric.dim_ambient], y[metric.dim_ambient:])
                cols.append(_flow(metric, q, w, ell, tol))
            D[:, k] = B.T @ (cols[0] - cols[1]) / (2 * fd_step)
        s = np.linalg.svd(D - np.eye(B.shape[1]), compute_uv=False)
        rank = int(np.sum(s > 1e-3))
        if np.any((s > 1e-5) & (s <= 1e-3)):
            degraded = True
        estimates.append(dimT1 - rank)
        svals.append(s.tolist())
    dim = max(set(estimates), key=estimates.count)
    if len(set(estimates)) > 1:
        degraded = True
    return ManifoldProbe(dim, estimates, svals, degraded)
