"""Orientability of negative bundles over loops of formal geodesics.

Three routes are provided and kept separate on purpose:

* the class of the twist loop s -> A_s in pi_1(SO(m)), read off from a
  lift through the Clifford double cover (``spin_lift_sign``);
* projection transport of a basis of the negative eigenspace of the
  discretised index form around the loop (``transport_negative_orientation``);
* a deformation of the loop to a trivial one, along which the modified
  bundle N + E (E = real eigenvectors of the Poincare map with eigenvalue
  in (0, 1)) is carried across index transitions (``build_variation``,
  ``make_generic``, ``modified_transport``).

Coefficient spaces are the nodal values of the finite element index form
on a mesh that only depends on the segment structure, so bases at
different parameters can be compared directly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import scipy.linalg as sla
from scipy.sparse.linalg import eigsh

from .clifford import M_MAX, Clifford
from .errors import (
    GenericityFailed,
    IndexNotConstant,
    InvalidInput,
    ModelViolation,
    NotApplicable,
    NumericalFailure,
    PreconditionViolation,
    RefineSampling,
)
from .formal_geodesic import (
    ConstantRule,
    CurvatureProfile,
    FormalGeodesic,
    PolynomialRule,
    SampledRule,
    Segment,
    poincare_map,
)
from .index_form import assemble, discretized_hessian_index
from .symplectic_core import genericity_classify
from .tolerances import Tolerances, get_profile

TWO_PI = 2 * math.pi
LIFT_STEP_MAX = math.pi / 2
ZERO_SHIFT = 1e-9


def _tol(tol) -> Tolerances:
    return tol if isinstance(tol, Tolerances) else get_profile(tol or "default")


def _rot2(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s], [s, c]])


def _polar(C: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(C)
    return U @ Vt


def _spectrum_distance(a, b) -> float:
    """Largest distance in an optimal matching of two spectra."""
    from scipy.optimize import linear_sum_assignment

    D = np.abs(a[:, None] - b[None, :])
    i, j = linear_sum_assignment(D)
    return float(np.max(D[i, j], initial=0.0))


def _rotation_angles(R: np.ndarray) -> np.ndarray:
    return np.abs(np.angle(np.linalg.eigvals(R)))


# ---------------------------------------------------------------------------
# spin class of a loop of rotations


@dataclass(frozen=True)
class SpinClass:
    """Homotopy class of a loop in SO(m).

    ``winding`` is the integer class for m = 2 (None otherwise); ``sign``
    is the class after stabilisation into SO(m') with m' >= 3, so +1 means
    nullhomotopic there.
    """

    m: int
    sign: int
    winding: int | None = None

    @property
    def trivial(self) -> bool:
        return self.sign == 1

    def to_json(self) -> dict:
        return {"m": self.m, "sign": self.sign, "winding": self.winding}


def _samples_of(loop) -> list:
    if isinstance(loop, DataLoop):
        return loop.A_samples()
    return [np.atleast_2d(np.asarray(a, dtype=float)) for a in loop]


def spin_lift_sign(loop, m: int | None = None) -> SpinClass:
    """Class of the closed loop A_0, ..., A_{S-1} (A_S = A_0 implied)."""
    As = _samples_of(loop)
    if not As:
        raise InvalidInput("empty loop")
    m = m or As[0].shape[0]
    for A in As:
        if A.shape != (m, m) or np.max(np.abs(A.T @ A - np.eye(m))) > 1e-8 or np.linalg.det(A) < 0:
            raise InvalidInput("loop samples must be rotations of a common size")
    if m <= 1:
        return SpinClass(m, 1, None)
    steps = [As[(k + 1) % len(As)] @ As[k].T for k in range(len(As))]
    worst = max(float(np.max(_rotation_angles(R))) for R in steps)
    if worst >= LIFT_STEP_MAX:
        raise RefineSampling(f"consecutive samples differ by a rotation of {worst:.3f} rad >= pi/2")
    if m == 2:
        total = sum(math.atan2(R[1, 0], R[0, 0]) for R in steps)
        w = int(round(total / TWO_PI))
        return SpinClass(2, -1 if w % 2 else 1, w)
    if m > M_MAX:
        raise InvalidInput(f"spin lift implemented for m <= {M_MAX}")
    cl = Clifford(m)
    r = cl.one()
    for R in steps:
        th = np.real(sla.logm(R))
        th = 0.5 * (th - th.T)
        r = cl.normalize(cl.mul(cl.rotor(th), r))
    if abs(abs(r[0]) - 1) > 1e-6 or np.max(np.abs(r[1:])) > 1e-6:
        raise NumericalFailure("terminal lift is not +-1; the samples do not close up")
    return SpinClass(m, 1 if r[0] > 0 else -1, None)


# ---------------------------------------------------------------------------
# loops of data


@dataclass
class DataLoop:
    """Family s in [0, 1] -> FormalGeodesic with family(1) = family(0),
    sampled at s_j = j / S.  ``recipe`` rebuilds the family from JSON."""

    family: Callable
    S: int = 32
    label: str = ""
    recipe: dict | None = None
    nullhomotopy: Callable | None = None

    def s_values(self) -> np.ndarray:
        return np.arange(self.S) / self.S

    def sample(self, j: int) -> FormalGeodesic:
        return self.family(j / self.S)

    def A_samples(self) -> list:
        return [self.family(s).A for s in self.s_values()]

    def refined(self, factor: int = 2) -> "DataLoop":
        return replace(self, S=self.S * factor)

    def validate(self):
        f0, f1 = self.family(0.0), self.family(1.0)
        if np.max(np.abs(f0.A - f1.A)) > 1e-9:
            raise InvalidInput("loop does not close: A(1) != A(0)")
        for t in np.linspace(0, f0.T, 7):
            if np.max(np.abs(f0.R(t) - f1.R(t))) > 1e-9:
                raise InvalidInput("loop does not close: R(1) != R(0)")
        breaks = f0.R.breakpoints
        for j in range(self.S):
            fg = self.sample(j)
            if fg.m != f0.m or abs(fg.T - f0.T) > 1e-12 or not np.allclose(fg.R.breakpoints, breaks):
                raise InvalidInput("loop samples must share m, T and segment structure")
        As = self.A_samples()
        for k in range(self.S):
            ang = float(np.max(_rotation_angles(As[(k + 1) % self.S] @ As[k].T), initial=0.0))
            if ang >= LIFT_STEP_MAX:
                raise RefineSampling(f"twist moves by {ang:.3f} rad between samples {k} and {k + 1}")

    def to_json(self) -> dict:
        if self.recipe is not None:
            return {"recipe": self.recipe, "S": self.S, "label": self.label}
        return {"S": self.S, "label": self.label, "samples": [self.sample(j).to_json() for j in range(self.S)]}

    @classmethod
    def from_json(cls, d) -> "DataLoop":
        S = int(d.get("S", 32))
        if "recipe" in d:
            r = d["recipe"]
            if r.get("kind") == "elliptic":
                return elliptic_loop(r["m"], r["weights"], Q=r.get("Q"), signs=r.get("signs"),
                                     pads=r.get("pads"), S=S, label=d.get("label", ""))
            if r.get("kind") == "constant":
                return constant_loop(FormalGeodesic.from_json(r["fg"]), S)
            raise InvalidInput(f"unknown loop recipe {r.get('kind')!r}")
        samples = [FormalGeodesic.from_json(x) for x in d["samples"]]
        S = len(samples)

        def family(s):
            x = s * S
            j = int(round(x))
            if abs(x - j) > 1e-9:
                raise RefineSampling("a sampled loop can only be evaluated at its samples")
            return samples[j % S]

        return cls(family, S, d.get("label", ""))


def constant_loop(fg: FormalGeodesic, S: int = 8) -> DataLoop:
    m = fg.m

    def nullh(u, s):
        return np.eye(m)

    def family(s):
        return fg

    nh = nullh if np.max(np.abs(fg.A - np.eye(m))) < 1e-12 else None
    return DataLoop(family, S, fg.label or "constant", {"kind": "constant", "fg": fg.to_json()}, nh)


def _block_rotation(m: int, angles) -> np.ndarray:
    out = np.eye(m)
    for i, a in enumerate(angles):
        out[2 * i:2 * i + 2, 2 * i:2 * i + 2] = _rot2(a)
    return out


def _axis_profile(d: int, k: int) -> list:
    """Curvature on the pieces [0, pi/2], [pi/2, 3pi/2], [3pi/2, 2pi] along
    one axis: a quarter (d = -1) or three-quarter (d = +1) turn at unit
    frequency, then k full turns."""
    if d == 1:
        return [1.0, 1.0, (4.0 * k) ** 2]
    return [1.0, (4.0 * k / 3) ** 2, (4.0 * k / 3) ** 2]


def elliptic_loop(m: int, weights, Q=None, signs=None, pads=None, S: int | None = None,
                  label: str = "") -> DataLoop:
    """Loop (R, A_s) with A_s = Q diag(Rot(2 pi w_i s), [1]) Q^T and a fixed
    piecewise-constant R whose propagator is [[0, -D], [D, 0]], D = Q diag(d) Q^T.

    When D reverses every rotating plane, D A_s D = A_s^{-1} and the
    Poincare map P_s satisfies P_s^2 = -Id for every s: no eigenvalue 1
    anywhere, hence constant index.
    """
    p = m // 2
    w = [int(x) for x in weights]
    if len(w) != p:
        raise InvalidInput(f"need {p} plane weights for m = {m}")
    d = [1, -1] * p + [1] * (m % 2) if signs is None else [int(x) for x in signs]
    if len(d) != m or any(x not in (1, -1) for x in d):
        raise InvalidInput("signs must be m entries of +-1")
    for i in range(p):
        if w[i] != 0 and d[2 * i] == d[2 * i + 1]:
            raise InvalidInput(f"plane {i} rotates, so its two signs must differ")
    k = [1] * m if pads is None else [int(x) for x in pads]
    if len(k) != m or min(k) < 1:
        raise InvalidInput("pads must be m positive integers")
    Qm = np.eye(m) if Q is None else np.asarray(Q, dtype=float)
    if Qm.shape != (m, m) or np.max(np.abs(Qm.T @ Qm - np.eye(m))) > 1e-10:
        raise InvalidInput("Q must be orthogonal")
    vals = np.array([_axis_profile(d[i], k[i]) for i in range(m)]).T
    h = math.pi / 2
    prof = CurvatureProfile.piecewise_constant([0, h, 3 * h, 4 * h], [Qm @ np.diag(v) @ Qm.T for v in vals])
    wmax = max([abs(x) for x in w] + [1])
    S = S or max(16, 8 * wmax)
    name = label or f"elliptic m={m} w={w}"

    def A(s):
        return Qm @ _block_rotation(m, [TWO_PI * x * s for x in w]) @ Qm.T

    def family(s):
        return FormalGeodesic(m, prof, A(s), name)

    recipe = {"kind": "elliptic", "m": m, "weights": w, "Q": Qm.tolist(), "signs": d, "pads": k}
    total = sum(w)
    trivial = total == 0 if m == 2 else total % 2 == 0
    nh = _torus_nullhomotopy(m, w, Qm) if trivial and (m >= 3 or total == 0) else None
    return DataLoop(family, S, name, recipe, nh)


def exemplar_nonorientable(S: int = 32) -> DataLoop:
    """Fixed curvature Q with propagator B and twist Rot(-2 pi s), m = 2."""
    return elliptic_loop(2, [-1], S=S, label="exemplar (Q, Rot_-s)")


def exemplar_B() -> np.ndarray:
    B = np.zeros((4, 4))
    B[0, 2], B[1, 3], B[2, 0], B[3, 1] = -1.0, 1.0, 1.0, -1.0
    return B


def exemplar_w_line(theta: float) -> np.ndarray:
    """Initial data (J(0), J'(0)) spanning the twisting line at angle theta."""
    a = -theta / 2
    return np.array([math.sin(a), math.cos(a), math.cos(a), math.sin(a)])


def random_elliptic_loop(m: int, rng, max_weight: int = 2, trivial: bool | None = None) -> DataLoop:
    """Random instance of ``elliptic_loop``; ``trivial`` forces the class."""
    p = m // 2
    while True:
        w = [int(x) for x in rng.integers(-max_weight, max_weight + 1, size=p)]
        if m == 1:
            w = []
        total = sum(w)
        if m == 2:
            triv = total % 2 == 0  # stabilised class
        else:
            triv = total % 2 == 0
        if trivial is None or triv == trivial or m == 1:
            break
    d = []
    for i in range(p):
        a = int(rng.choice([-1, 1]))
        d += [a, -a] if w[i] != 0 else [a, int(rng.choice([-1, 1]))]
    if m % 2:
        d.append(int(rng.choice([-1, 1])))
    Q = np.linalg.qr(rng.normal(size=(m, m)))[0]
    pads = [int(x) for x in rng.integers(1, 3, size=m)]
    return elliptic_loop(m, w, Q=Q, signs=d, pads=pads)


# ---------------------------------------------------------------------------
# nullhomotopies of twist loops


def _plane_generator(m: int, i: int, j: int) -> np.ndarray:
    """Skew K with K e_i = e_j."""
    K = np.zeros((m, m))
    K[j, i], K[i, j] = 1.0, -1.0
    return K


def _axis_rotation(m: int, axis: np.ndarray, angle: float) -> np.ndarray:
    """Rotation about a unit axis in span(e_0, e_1, e_2), identity elsewhere."""
    x, y, z = axis
    K = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    R3 = np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * K @ K
    out = np.eye(m)
    out[:3, :3] = R3
    return out


def _torus_nullhomotopy(m: int, weights, Q) -> Callable:
    """H(u, s) with H(0, s) = Q diag(Rot(2 pi w_i s)) Q^T and H(1, s) = Id.

    Every rotating plane is first turned onto plane 0 (its rotation then
    adds to the weight of plane 0); the even total is then removed two
    turns at a time by tipping the axis of one full turn over (the belt
    trick), which needs a third axis.
    """
    p = len(weights)
    w = list(weights)
    stages = [("merge", i) for i in range(1, p) if w[i] != 0]
    total = sum(w)
    if total != 0 and m < 3:
        raise NotApplicable("a loop in SO(2) with nonzero winding is not nullhomotopic there")
    if total % 2:
        raise NotApplicable("odd total weight: the twist loop is not nullhomotopic")
    sgn = 1 if total > 0 else -1
    stages += [("belt", sgn)] * (abs(total) // 2)
    gens = {i: _plane_generator(m, 2 * i, 0) + _plane_generator(m, 2 * i + 1, 1) for i in range(1, p)}
    e2 = np.array([0.0, 0.0, 1.0])

    def rot_plane(i, a):
        out = np.eye(m)
        out[2 * i:2 * i + 2, 2 * i:2 * i + 2] = _rot2(a)
        return out

    def loop_at(u, s):
        n = len(stages)
        if n == 0:
            return np.eye(m) if total == 0 and not any(w) else _block_rotation(m, [TWO_PI * x * s for x in w])
        x = min(max(u, 0.0), 1.0) * n
        idx = min(int(x), n - 1)
        t = x - idx
        w0 = w[0]
        pending = [i for i in range(1, p) if w[i] != 0]
        for kind, arg in stages[:idx]:
            if kind == "merge":
                w0 += w[arg]
                pending.remove(arg)
            else:
                w0 -= 2 * arg
        kind, arg = stages[idx]
        if kind == "merge":
            G = sla.expm(0.5 * math.pi * t * gens[arg])
            out = rot_plane(0, TWO_PI * w0 * s) @ G @ rot_plane(arg, TWO_PI * w[arg] * s) @ G.T
            for i in pending:
                if i != arg:
                    out = out @ rot_plane(i, TWO_PI * w[i] * s)
            return out
        a = np.array([math.sin(math.pi * t), 0.0, math.cos(math.pi * t)])
        ang = TWO_PI * arg * s
        out = rot_plane(0, TWO_PI * (w0 - 2 * arg) * s) @ _axis_rotation(m, a, ang) @ _axis_rotation(m, e2, ang)
        for i in pending:
            out = out @ rot_plane(i, TWO_PI * w[i] * s)
        return out

    def H(u, s):
        return Q @ loop_at(u, s) @ Q.T

    return H


def log_chart_nullhomotopy(loop: DataLoop, margin: float = 0.05) -> Callable | None:
    """H(u, s) = exp((1 - u) log A_s) when every A_s stays inside the chart of
    the principal logarithm (rotation angles below pi - margin)."""
    for s in np.linspace(0, 1, 4 * loop.S + 1):
        if np.max(_rotation_angles(loop.family(s).A), initial=0.0) >= math.pi - margin:
            return None

    def H(u, s):
        L = np.real(sla.logm(loop.family(s).A))
        return sla.expm((1 - u) * 0.5 * (L - L.T))

    return H


# ---------------------------------------------------------------------------
# negative eigenvectors of the discretised index form


def _negative_basis(form, k: int, scale: float, extra: int = 1):
    """Lowest k + extra generalised eigenpairs of (H, M), M-orthonormal."""
    n = form.N * form.m
    want = min(n, k + extra)
    if want == 0:
        return np.zeros((n, 0)), np.zeros(0)
    if n <= 400 or want >= n - 2:
        vals, vecs = sla.eigh(form.H.toarray(), form.M.toarray(), subset_by_index=[0, want - 1])
    else:
        vals, vecs = eigsh(form.H.tocsc(), k=want, M=form.M.tocsc(), sigma=-scale - 1.0, which="LM")
        order = np.argsort(vals)
        vals, vecs = vals[order], vecs[:, order]
    return vecs, vals


def _stable_mesh(fg: FormalGeodesic, tol: Tolerances) -> int:
    res = discretized_hessian_index(fg, tol=tol, kernel=False)
    final = res.form.history[-1][1:]
    for n, a, b in res.form.history:
        if (a, b) == final:
            return n
    return res.form.N


@dataclass
class OrientationTransportResult:
    sign: int
    method: str
    ledger: "TransitionLedger | None" = None
    mesh: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"sign": self.sign, "method": self.method, "mesh": self.mesh,
                "ledger": self.ledger.to_json() if self.ledger else None}


def _loop_sign(loop: DataLoop, S: int, N: int, tol: Tolerances, min_sv: float) -> tuple:
    fgs = [loop.family(j / S) for j in range(S)]
    scale = max(1.0, max(fg.R.bound() for fg in fgs))
    eps = tol.neg * scale
    bases = []
    k0 = None
    for j, fg in enumerate(fgs):
        form = assemble(fg, N)
        k = form.negative_count(eps)
        if k0 is None:
            k0 = k
        elif k != k0:
            raise IndexNotConstant(f"negative count {k} at s = {j / S:.4f} differs from {k0} at s = 0; "
                                   "use the modified transport across transitions")
        V, _ = _negative_basis(form, k, scale, extra=0)
        bases.append((V, form.M))
    if k0 == 0:
        return 1, 0, 1.0, fgs and assemble(fgs[0], N).N
    W = bases[0][0]
    worst = 1.0
    for j in range(1, S + 1):
        V, M = bases[j % S]
        C = V.T @ (M @ W)
        sv = np.linalg.svd(C, compute_uv=False)
        worst = min(worst, float(sv[-1]))
        if sv[-1] < min_sv:
            raise RefineSampling(f"negative spaces at consecutive samples are nearly transverse "
                                 f"(singular value {sv[-1]:.3f}); increase S")
        W = V @ _polar(C)
    V0, M0 = bases[0]
    sign = 1 if np.linalg.det(V0.T @ (M0 @ W)) > 0 else -1
    return sign, k0, worst, assemble(fgs[0], N).N


def transport_negative_orientation(loop: DataLoop, N: int | None = None, verify: bool = True,
                                   tol=None, min_sv: float = 0.3) -> OrientationTransportResult:
    """Carry an orthonormal negative basis once around the loop and return
    the sign of the closing change of basis."""
    tol = _tol(tol)
    loop.validate()
    N = N or _stable_mesh(loop.sample(0), tol)
    sign, k, worst, ne = _loop_sign(loop, loop.S, N, tol, min_sv)
    mesh = {"S": loop.S, "N": N, "elements": ne, "index": k, "min_singular_value": worst,
            "condition": 1.0 / worst if worst > 0 else math.inf}
    if verify:
        checks = []
        for S2, N2 in ((2 * loop.S, N), (loop.S, 2 * N)):
            s2, k2, _, _ = _loop_sign(loop, S2, N2, tol, min_sv)
            checks.append({"S": S2, "N": N2, "sign": s2, "index": k2})
            if s2 != sign or k2 != k:
                raise NumericalFailure(f"orientation sign not stable under mesh doubling: {checks}")
        mesh["doubling"] = checks
    return OrientationTransportResult(sign, "plain_loop", None, mesh)


def iterate_loop(loop: DataLoop, q: int) -> DataLoop:
    """Loop of q-fold iterates (twist A_s^q)."""
    from .formal_geodesic import iterate

    if int(q) != q or q < 1:
        raise InvalidInput(f"q must be a positive integer, got {q}")
    q = int(q)

    def family(s):
        return iterate(loop.family(s), q)

    return DataLoop(family, loop.S * q, f"{loop.label}^{q}")


def iterate_orientability_class(loop, q: int) -> SpinClass:
    """Class of the twist loop of the q-fold iterate: q times the base class."""
    if int(q) != q or q < 1:
        raise InvalidInput(f"q must be a positive integer, got {q}")
    base = loop if isinstance(loop, SpinClass) else spin_lift_sign(loop)
    w = None if base.winding is None else base.winding * int(q)
    return SpinClass(base.m, base.sign ** int(q), w)


# ---------------------------------------------------------------------------
# the deformation to a trivial loop


def smooth_step(x):
    """C-infinity step: 0 for x <= 0, 1 for x >= 1."""
    x = np.clip(np.asarray(x, dtype=float), 0.0, 1.0)

    def f(y):
        with np.errstate(divide="ignore", over="ignore"):
            return np.where(y > 0, np.exp(-1.0 / np.where(y > 0, y, 1.0)), 0.0)

    a, b = f(x), f(1.0 - x)
    out = a / (a + b)
    return float(out) if out.ndim == 0 else out


def _blend(rule, f: float):
    if f == 0.0:
        return rule
    I = np.eye(rule.m)
    if isinstance(rule, ConstantRule):
        return ConstantRule((1 - f) * rule.value + f * I)
    if isinstance(rule, PolynomialRule):
        C = (1 - f) * rule.coeffs.copy()
        C[0] = C[0] + f * I
        return PolynomialRule(C)
    if isinstance(rule, SampledRule):
        return SampledRule(rule.times, (1 - f) * rule.values + f * I)
    raise InvalidInput(f"cannot blend curvature rule {type(rule).__name__}")


def _middle_propagator(m: int, tau: float, T: float) -> np.ndarray:
    w = math.sqrt(4 - 3 * tau)
    th = w * T
    I = np.eye(m)
    c, s = math.cos(th), math.sin(th)
    return np.block([[c * I, s / w * I], [-w * s * I, c * I]])


@dataclass
class Deformation:
    """Data over the annulus (s, tau) in S^1 x [0, 1] on [0, 3T]:
    blend((1 - phi) R_s + phi Id) * (4 - 3 tau) Id * (Id + small pad),
    twisted by H(phi(tau), s)."""

    loop: DataLoop
    nullhomotopy: Callable
    margin: float = 0.1
    tau_edge: float = 1e-3
    perturbation: np.ndarray | None = None  # (pieces, 3, m, m): constant, cos, sin parts
    pert_scale: float = 0.0
    report: dict = field(default_factory=dict)
    mesh_N: int | None = None

    @property
    def m(self) -> int:
        return self.loop.family(0.0).m

    @property
    def T(self) -> float:
        return self.loop.family(0.0).T

    def phi(self, tau: float) -> float:
        return smooth_step((tau - self.margin) / (1 - 2 * self.margin))

    def twist(self, s: float, tau: float) -> np.ndarray:
        return self.nullhomotopy(self.phi(tau), s)

    def _pad_values(self, s: float, tau: float) -> list:
        m = self.m
        n = 4 if self.perturbation is None else self.perturbation.shape[0]
        if self.perturbation is None or self.pert_scale == 0.0:
            return [np.eye(m)] * n
        beta = math.sin(math.pi * tau) ** 2 * self.pert_scale
        f = np.array([1.0, math.cos(TWO_PI * s), math.sin(TWO_PI * s)])
        return [np.eye(m) + beta * np.tensordot(f, blk, axes=1) for blk in self.perturbation]

    def data(self, s: float, tau: float) -> FormalGeodesic:
        base = self.loop.family(s)
        T, m = base.T, base.m
        f = self.phi(tau)
        segs = [Segment(g.t0, g.t1, _blend(g.rule, f)) for g in base.R.segments]
        segs.append(Segment(T, 2 * T, ConstantRule((4 - 3 * tau) * np.eye(m))))
        pads = self._pad_values(s, tau)
        cuts = np.linspace(2 * T, 3 * T, len(pads) + 1)
        segs += [Segment(float(a), float(b), ConstantRule(v)) for a, b, v in zip(cuts, cuts[1:], pads)]
        A = self.nullhomotopy(f, s)
        return FormalGeodesic(m, CurvatureProfile(segs), A, f"deformation s={s:.4f} tau={tau:.4f}")

    def path(self, s: float) -> Callable:
        return lambda tau: self.data(s, tau)

    def poincare(self, s: float, tau: float) -> np.ndarray:
        return poincare_map(self.data(s, tau)).entries

    def closed_form_poincare(self, s: float, tau: float) -> np.ndarray:
        """Poincare map where phi is 0 or 1 and the pad is the identity:
        the scalar middle block commutes with the twist, so
        P = Phi_mid(tau) P_s (P_s the base map, or Id once phi = 1)."""
        f = self.phi(tau)
        if 0.0 < f < 1.0:
            raise InvalidInput("closed form only where phi is 0 or 1")
        mid = _middle_propagator(self.m, tau, self.T)
        if f == 1.0:
            return mid
        return mid @ poincare_map(self.loop.family(s)).entries

    def certify_boundary(self, s_count: int | None = None) -> dict:
        te = self.tau_edge
        svals = self.loop.s_values() if s_count is None else np.arange(s_count) / s_count
        worst_res, worst_gap = 0.0, math.inf
        for s in svals:
            for tau in (te, 1 - te):
                P = self.poincare(s, tau)
                Pc = self.closed_form_poincare(s, tau)
                worst_res = max(worst_res, float(np.max(np.abs(P - Pc))) / max(1.0, float(np.max(np.abs(P)))))
                worst_gap = min(worst_gap, float(np.min(np.abs(np.linalg.eigvals(P).imag))))
            P0 = self.poincare(s, 0.0)
            Pb = poincare_map(self.loop.family(s)).entries
            if _spectrum_distance(np.linalg.eigvals(P0), np.linalg.eigvals(Pb)) > 1e-6:
                raise NumericalFailure("tau = 0 slice does not reproduce the base Poincare spectrum")
        if worst_res > 1e-8:
            raise NumericalFailure(f"closed form and integrated Poincare maps differ by {worst_res:.2e}")
        if worst_gap < te:
            raise PreconditionViolation(
                f"near the boundary a Poincare eigenvalue is within {worst_gap:.2e} of the real axis; "
                "the base loop must have Poincare maps of finite order")
        self.report.update(boundary_residual=worst_res, boundary_gap=worst_gap)
        return {"residual": worst_res, "gap": worst_gap}

    def mesh(self, tol=None) -> int:
        if self.mesh_N is None:
            tol = _tol(tol)
            Ns = [_stable_mesh(self.data(s, tau), tol) for s in (0.0, 0.5) for tau in (0.0, 0.5, 1.0)]
            self.mesh_N = max(Ns)
        return self.mesh_N

    def to_json(self) -> dict:
        return {"loop": self.loop.to_json(), "margin": self.margin, "tau_edge": self.tau_edge,
                "pert_scale": self.pert_scale,
                "perturbation": None if self.perturbation is None else self.perturbation.tolist(),
                "report": {k: v for k, v in self.report.items() if isinstance(v, (int, float, str))}}


def build_variation(loop: DataLoop, nullhomotopy: Callable | None = None, margin: float = 0.1,
                    tau_edge: float = 1e-3, certify: bool = True) -> Deformation:
    cls = spin_lift_sign(loop)
    if not cls.trivial:
        raise NotApplicable(f"twist loop class is nontrivial ({cls.to_json()}); "
                            "the negative bundle is predicted non-orientable, use plain transport")
    H = nullhomotopy or loop.nullhomotopy or log_chart_nullhomotopy(loop)
    if H is None:
        raise NotApplicable("no nullhomotopy supplied and none could be synthesised")
    for s in np.linspace(0, 1, 9):
        if np.max(np.abs(H(0.0, s) - loop.family(s).A)) > 1e-9:
            raise InvalidInput("nullhomotopy does not start at the twist loop")
        if np.max(np.abs(H(1.0, s) - np.eye(cls.m if cls.m else 1))) > 1e-9:
            raise InvalidInput("nullhomotopy does not end at the identity")
    for u in np.linspace(0, 1, 7):
        if np.max(np.abs(H(u, 0.0) - H(u, 1.0))) > 1e-9:
            raise InvalidInput("nullhomotopy is not a homotopy of loops")
    defo = Deformation(loop, H, margin, tau_edge)
    if certify:
        defo.certify_boundary()
    return defo


# ---------------------------------------------------------------------------
# Poincare signature along paths and genericity


def _real_unit_interval(P: np.ndarray):
    """Real eigenvalues in (0, 1) with unit eigenvectors, ascending."""
    vals, vecs = np.linalg.eig(P)
    scale = max(1.0, float(np.max(np.abs(vals))))
    keep = [i for i, v in enumerate(vals) if abs(v.imag) <= 1e-9 * scale and 0.0 < v.real < 1.0 - 1e-13]
    keep.sort(key=lambda i: vals[i].real)
    lam = np.array([vals[i].real for i in keep])
    V = np.real(vecs[:, keep]) if keep else np.zeros((P.shape[0], 0))
    if V.shape[1]:
        V = V / np.linalg.norm(V, axis=0)
    return lam, V


def _p_signature(P: np.ndarray) -> tuple:
    lam, _ = _real_unit_interval(P)
    chi = np.linalg.det(P - np.eye(P.shape[0]))
    return (len(lam), 1 if chi > 0 else -1)


def _changes(f, lo, hi, flo, fhi, tol, out, depth=0):
    """Bracket the points where the piecewise constant f changes."""
    if flo == fhi:
        return
    if hi - lo <= tol or depth > 60:
        out.append((lo, hi, flo, fhi))
        return
    mid = 0.5 * (lo + hi)
    fm = f(mid)
    _changes(f, lo, mid, flo, fm, tol, out, depth + 1)
    _changes(f, mid, hi, fm, fhi, tol, out, depth + 1)


def _p_events(family, taus, tol_loc: float, merge: float = 1e-7) -> list:
    sig = lambda t: _p_signature(poincare_map(family(t)).entries)  # noqa: E731
    vals = [sig(t) for t in taus]
    out = []
    for a, b, fa, fb in zip(taus, taus[1:], vals, vals[1:]):
        _changes(sig, a, b, fa, fb, tol_loc, out)
    # rounding near a parabolic map can split one crossing into adjacent brackets
    merged = []
    for e in out:
        if merged and e[0] - merged[-1][1] <= merge:
            lo, _, fa, _ = merged.pop()
            e = (lo, e[1], fa, e[3])
        merged.append(e)
    return [e for e in merged if e[2] != e[3]]


def genericity_report(defo: Deformation, n_tau: int = 24, s_count: int | None = None,
                      tol_loc: float = 1e-10) -> dict:
    """Sp_1 membership on the interior grid and simplicity of the
    eigenvalue-1 crossings along the probe lines s = const."""
    te = defo.tau_edge
    taus = list(np.linspace(te, 1 - te, n_tau))
    svals = defo.loop.s_values() if s_count is None else np.arange(s_count) / s_count
    bad, crossings = [], []
    for s in svals:
        for t in taus[1:-1]:
            c = genericity_classify(defo.poincare(s, t), 1.0)
            if c.stratum == "not_in_Sp1":
                bad.append(("not_in_Sp1", float(s), float(t)))
        events = _p_events(defo.path(s), taus, tol_loc)
        locs = []
        for lo, hi, fa, fb in events:
            dE = fb[0] - fa[0]
            flip = fa[1] != fb[1]
            t = 0.5 * (lo + hi)
            locs.append(t)
            if flip:
                c = genericity_classify(defo.poincare(s, t), 1.0)
                crossings.append((float(s), t, c.stratum, c.kernel_dim))
                if abs(dE) != 1 or c.stratum != "G0" or c.kernel_dim != 1:
                    bad.append(("crossing", float(s), t))
            elif abs(dE) not in (0, 2):
                bad.append(("event", float(s), t))
        locs.sort()
        if any(b - a < 1e-8 for a, b in zip(locs, locs[1:])):
            bad.append(("double", float(s), locs[0]))
    return {"generic": not bad, "violations": bad, "crossings": crossings}


def make_generic(defo: Deformation, rng=None, n_tau: int = 24, s_count: int | None = None,
                 max_rounds: int = 100, scale: float = 1e-5, pieces: int = 4,
                 max_poincare_change: float = 1e-4) -> Deformation:
    """Accept the deformation if it is already generic; otherwise append a
    small random s-periodic curvature bump on the pad (vanishing at tau = 0
    and tau = 1) until it is."""
    rep = genericity_report(defo, n_tau, s_count)
    if rep["generic"]:
        defo.report.update(rounds=0, poincare_change=0.0)
        return defo
    rng = np.random.default_rng(rng)
    m = defo.m
    svals = defo.loop.s_values() if s_count is None else np.arange(s_count) / s_count
    probe = [(s, t) for s in svals[:: max(1, len(svals) // 4)] for t in (0.25, 0.5, 0.75)]
    base_P = {key: defo.poincare(*key) for key in probe}
    for r in range(1, max_rounds + 1):
        X = rng.normal(size=(pieces, 3, m, m))
        X = 0.5 * (X + np.swapaxes(X, 2, 3))
        cand = replace(defo, perturbation=X, pert_scale=scale, report=dict(defo.report), mesh_N=defo.mesh_N)
        change = max(float(np.max(np.abs(cand.poincare(*key) - P))) for key, P in base_P.items())
        if change > max_poincare_change:
            scale *= 0.5
            continue
        rep = genericity_report(cand, n_tau, s_count)
        if rep["generic"]:
            cand.report.update(rounds=r, poincare_change=change, crossings=len(rep["crossings"]))
            return cand
    raise GenericityFailed(f"no generic perturbation found in {max_rounds} rounds: {rep['violations'][:3]}")


# ---------------------------------------------------------------------------
# transport of the modified bundle N + E along a path


@dataclass
class TransitionEvent:
    """One cluster of transitions crossed in a single step.

    ``dN`` and ``dE`` are the total changes; ``multiplicity`` counts the
    elementary transitions (pairs for H/P events, colliding pairs for
    collisions) merged into the cluster.
    """

    kind: str
    tau: float
    tau_h: float | None
    dN: int
    dE: int
    multiplicity: int = 1
    p_distance: float | None = None
    pairing_cos: float | None = None
    dims_after: tuple = (0, 0)

    def to_json(self) -> dict:
        d = {}
        for k, v in self.__dict__.items():
            if k in ("kind",):
                d[k] = v
            elif k in ("dN", "dE", "multiplicity"):
                d[k] = int(v)
            elif k == "dims_after":
                d[k] = [int(x) for x in v]
            else:
                d[k] = None if v is None else float(v)
        return d


@dataclass
class TransitionLedger:
    path: dict
    events: list = field(default_factory=list)
    dims: list = field(default_factory=list)  # (tau, dim N, dim E)

    def parity_constant(self) -> bool:
        return len({(a + b) % 2 for _, a, b in self.dims}) <= 1

    def to_json(self) -> dict:
        return {"path": {k: (float(v) if isinstance(v, (float, np.floating)) else v) for k, v in self.path.items()},
                "events": [e.to_json() for e in self.events],
                "dims": [[float(t), int(a), int(b)] for t, a, b in self.dims]}


def _iota(form, x) -> np.ndarray:
    """(X(0), X'(0)) of nodal fields (columns), one-sided second order difference."""
    m = form.m
    X = np.asarray(x).reshape(form.N, m, -1)
    h = form.nodes[1] - form.nodes[0]
    d = (-3 * X[0] + 4 * X[1] - X[2]) / (2 * h)
    return np.concatenate([X[0], d]).reshape(2 * m, -1)


class _State:
    """Everything needed at one parameter value of a path."""

    def __init__(self, family, tau, N, eps, scale, shift=0):
        fg = family(tau)
        self.tau = tau
        self.form = assemble(fg, N)
        self.n = self.form.N * self.form.m
        self.m = fg.m
        self.a = self.form.negative_count(eps) + shift
        self.VN, self.mu = _negative_basis(self.form, self.a, scale, extra=0)
        self.M = self.form.M
        self.P = poincare_map(fg).entries
        self.lam, self.vE = _real_unit_interval(self.P)
        self.b = len(self.lam)
        self.E = np.linalg.qr(self.vE)[0] if self.b else np.zeros((2 * self.m, 0))

    def G(self, B):
        B = np.asarray(B)
        return np.concatenate([self.M @ B[: self.n], B[self.n:]])

    @property
    def U(self):
        out = np.zeros((self.n + 2 * self.m, self.a + self.b))
        out[: self.n, : self.a] = self.VN
        out[self.n:, self.a:] = self.E
        return out

    def coords(self, B):
        return self.U.T @ self.G(B)

    def project(self, B):
        return self.U @ self.coords(B)

    def wN(self, x):
        x = np.asarray(x).reshape(self.n, -1)
        return np.vstack([x, np.zeros((2 * self.m, x.shape[1]))])

    def wE(self, v):
        v = np.asarray(v).reshape(2 * self.m, -1)
        return np.vstack([np.zeros((self.n, v.shape[1])), v])

    def crossing_N(self, k):
        """The k negative directions nearest to zero."""
        return self.VN[:, self.a - k:]

    def crossing_E(self, k):
        """Eigenvectors for the k real eigenvalues in (0, 1) nearest to 1."""
        return self.vE[:, self.b - k:]


def _unit_fixed_distance(P) -> float:
    return float(np.linalg.svd(P - np.eye(P.shape[0]), compute_uv=False)[-1])


def _cluster(events, window):
    """Chain events (location, ...) closer than window."""
    out = []
    for ev in sorted(events, key=lambda e: e[0]):
        if out and ev[0] - out[-1][-1][0] <= window:
            out[-1].append(ev)
        else:
            out.append([ev])
    return out


def _hidden_hyperbolic(fam_p, lo, hi, loc, samples=201) -> list:
    """Points where det(P - Id) < 0 between samples at which it is positive.

    A pair of eigenvalues can leave the unit circle through 1 and return
    within a very short stretch; det(P - Id) dips below zero there.  Every
    local minimum of the sampled determinant is polished and returned if
    negative.
    """
    from scipy.optimize import minimize_scalar

    ps = np.linspace(lo, hi, samples)

    def g(p):
        return float(np.linalg.det(poincare_map(fam_p(p)).entries - np.eye(2 * fam_p(p).m)))

    vals = np.array([g(p) for p in ps])
    out = []
    for i in range(1, samples - 1):
        if vals[i] <= vals[i - 1] and vals[i] <= vals[i + 1] and vals[i] > 0:
            res = minimize_scalar(g, bounds=(ps[i - 1], ps[i + 1]), method="bounded",
                                  options={"xatol": max(loc, 1e-14)})
            if res.fun < 0:
                out.append(float(res.x))
    return out


def _pair_transitions(h_ev, s_ev, window, tau_of):
    """Match H-crossings with eigenvalue-1 crossings in order inside each
    cluster.  Returns [(p_sigma, p_h, dN, dE)]."""
    tagged = [(p, "H", d) for p, d in h_ev] + [(p, "S", d) for p, d in s_ev]
    pairs = []
    for group in _cluster(tagged, window):
        hs = [(p, d) for p, t, d in group if t == "H"]
        ss = [(p, d) for p, t, d in group if t == "S"]
        where = tau_of(group[0][0])
        if len(hs) != len(ss):
            raise ModelViolation(f"{len(hs)} index transitions but {len(ss)} eigenvalue-1 crossings "
                                 f"near tau = {where:.10f}")
        if len({d for _, d in hs}) > 1:
            raise GenericityFailed(f"index transitions of both directions too close near tau = {where:.10f}")
        pairs += [(ps, ph, dh, ds) for (ph, dh), (ps, ds) in zip(hs, ss)]
    return pairs


def modified_transport(target, s: float | None = None, taus=None, start_basis=None, end_basis=None,
                       N: int | None = None, n_grid: int = 24, tol=None,
                       window: float = 5e-3, min_sv: float = 0.3, min_pairing: float = 0.3,
                       scale: float | None = None) -> OrientationTransportResult:
    """Carry an oriented basis of N + E from taus[0] to taus[1].

    ``target`` is a Deformation (with ``s``) or any callable tau -> FormalGeodesic
    whose segment structure does not depend on tau.  The result's sign
    compares the carried basis with ``end_basis`` (default: the eigenbasis
    at the end); the carried basis is ``mesh['final_basis']``.

    Transitions are crossed where the Poincare map reaches eigenvalue 1.
    The discretised index form moves its zero crossing by the
    discretisation error; each H-crossing is located, paired with the
    eigenvalue-1 crossing within ``window`` (in tau), and between the two
    the number of discrete negative directions used is corrected to the
    index on the Poincare side.
    """
    tol = _tol(tol)
    if isinstance(target, Deformation):
        family = target.path(s)
        taus = taus or (1 - target.tau_edge, target.tau_edge)
        N = N or target.mesh(tol)
    else:
        family = target
        if taus is None:
            raise InvalidInput("a path family needs taus = (start, end)")
        N = N or max(_stable_mesh(family(t), tol) for t in (taus[0], 0.5 * sum(taus), taus[1]))
    t0, t1 = float(taus[0]), float(taus[1])
    span = t1 - t0
    if span == 0:
        raise InvalidInput("empty path")
    tau_of = lambda p: t0 + p * span  # noqa: E731
    fam_p = lambda p: family(tau_of(p))  # noqa: E731
    scale = scale or max(1.0, max(family(t).R.bound() for t in (t0, 0.5 * (t0 + t1), t1)))
    # generic paths have no kernel away from transitions, so H-crossings are
    # located at (nearly) zero rather than at the kernel band
    eps = ZERO_SHIFT * scale
    loc = tol.loc / abs(span)
    win = window / abs(span)

    grid = list(np.linspace(0.0, 1.0, n_grid + 1))

    def a_count(p):
        return assemble(fam_p(p), N).negative_count(eps)

    a_vals = [a_count(p) for p in grid]
    h_br = []
    for lo, hi, fa, fb in zip(grid, grid[1:], a_vals, a_vals[1:]):
        _changes(a_count, lo, hi, fa, fb, loc, h_br)
    h_ev = []
    for lo, hi, fa, fb in h_br:
        if abs(fb - fa) != 1:
            raise GenericityFailed(f"index jumps by {fb - fa} at tau = {tau_of(lo):.10f}")
        h_ev.append((0.5 * (lo + hi), fb - fa))
    # events that cancel inside one grid cell leave the signature unchanged,
    # so sample densely where a partner of an H-crossing must be
    p_grid = set(grid)
    for ph, _ in h_ev:
        p_grid.update(np.clip(np.linspace(ph - win, ph + win, 101), 0.0, 1.0).tolist())
    for ph, _ in h_ev:
        p_grid.update(_hidden_hyperbolic(fam_p, max(0.0, ph - win), min(1.0, ph + win), loc))
    s_ev, c_ev = [], []
    for lo, hi, fa, fb in _p_events(fam_p, sorted(p_grid), loc):
        dE = fb[0] - fa[0]
        mid = 0.5 * (lo + hi)
        if fa[1] != fb[1]:
            if abs(dE) != 1:
                raise GenericityFailed(f"eigenvalue-1 crossing changes dim E by {dE} at tau = {tau_of(mid):.10f}")
            s_ev.append((mid, dE))
        else:
            if abs(dE) != 2:
                raise GenericityFailed(f"dim E changes by {dE} away from eigenvalue 1 at tau = {tau_of(mid):.10f}")
            c_ev.append((mid, dE))
    pairs = _pair_transitions(h_ev, s_ev, win, tau_of)

    def correction(p):
        return sum(dN * (int(p > ps) - int(p > ph)) for ps, ph, dN, _ in pairs)

    events = sorted([(ps, ph, dN, dE) for ps, ph, dN, dE in pairs] + [(pc, None, 0, dE) for pc, dE in c_ev])
    locs = [e[0] for e in events]
    if any(b - a < 1e-8 / abs(span) for a, b in zip(locs, locs[1:])):
        raise GenericityFailed("two transitions closer than 1e-8; perturb the family further")

    ledger = TransitionLedger({"s": s, "tau_start": t0, "tau_end": t1, "N": N})
    states = {}

    def state(p):
        if p not in states:
            states[p] = _State(family, tau_of(p), N, eps, scale, shift=correction(p))
            st = states[p]
            ledger.dims.append((st.tau, st.a, st.b))
        return states[p]

    def carry(B, p_from, p_to, depth=0):
        """Plain projection transport, bisecting when badly conditioned."""
        b = state(p_to)
        C = b.coords(B)
        if C.shape[0] != C.shape[1]:
            raise ModelViolation(f"dimension of N + E changed without a located transition near tau = {b.tau:.10f}")
        if C.size == 0:
            return b.U
        if np.linalg.svd(C, compute_uv=False)[-1] >= min_sv:
            return b.U @ _polar(C)
        if depth > 12:
            raise RefineSampling(f"projection transport degenerate near tau = {b.tau:.10f}")
        mid = 0.5 * (p_from + p_to)
        return carry(carry(B, p_from, mid, depth + 1), mid, p_to, depth + 1)

    first = state(0.0)
    if start_basis is None:
        B = first.U
    else:
        C = first.coords(np.asarray(start_basis))
        if C.shape[0] != C.shape[1] or (C.size and np.linalg.svd(C, compute_uv=False)[-1] < 0.5):
            raise NumericalFailure("start basis is not close to N + E at the start of the path")
        B = first.U @ _polar(C) if C.size else first.U
    sigma_or = 1
    p_cur = 0.0
    kinds = {(1, 1): "pair_gain", (-1, -1): "pair_loss", (-1, 1): "swap_to_E", (1, -1): "swap_to_N",
             (0, 2): "collision_gain", (0, -2): "collision_loss"}
    for k, (p, ph, dN, dE) in enumerate(events):
        left = locs[k - 1] if k else 0.0
        right = locs[k + 1] if k + 1 < len(locs) else 1.0
        delta = min(1e-4 / abs(span), 0.3 * (p - left), 0.3 * (right - p))
        if delta <= 4 * loc:
            raise GenericityFailed(f"transition too close to the end of the path near tau = {tau_of(p):.10f}")
        pL, pR = p - delta, p + delta
        for g in grid:
            if p_cur < g < pL:
                B = carry(B, p_cur, g)
                p_cur = g
        B = carry(B, p_cur, pL)
        L, R = state(pL), state(pR)
        if (R.a - L.a, R.b - L.b) != (dN, dE):
            raise ModelViolation(f"counts across the transition near tau = {tau_of(p):.10f} do not match")
        kind = kinds[(dN, dE)]
        dist = _unit_fixed_distance(poincare_map(fam_p(p)).entries) if dN else None
        ev = TransitionEvent(kind, tau_of(p), None if ph is None else tau_of(ph), dN, dE, 1, dist)
        B, sgn = _cross(kind, 1, B, L, R, ev, min_pairing)
        sigma_or *= sgn
        ev.dims_after = (R.a, R.b)
        ledger.events.append(ev)
        p_cur = pR
    for g in grid:
        if g > p_cur:
            B = carry(B, p_cur, g)
            p_cur = g
    if not ledger.parity_constant():
        raise ModelViolation("parity of dim N + dim E changed along the path")
    last = state(1.0)
    ref = last.U if end_basis is None else np.asarray(end_basis)
    if ref.shape[1] != B.shape[1]:
        raise NumericalFailure("end basis has the wrong dimension")
    det = np.linalg.det(ref.T @ last.G(B)) if B.shape[1] else 1.0
    sign = sigma_or * (1 if det > 0 else -1)
    mesh = {"N": N, "elements": first.form.N, "grid": n_grid, "final_basis": B, "orientation_scalar": sigma_or,
            "dims_start": (first.a, first.b), "dims_end": (last.a, last.b)}
    return OrientationTransportResult(sign, "modified_bundle", ledger, mesh)


def _iota_pairing(form, X, E, min_pairing):
    """Images under X -> (X(0), X'(0)) of the crossing fields, projected on
    the crossing eigenvectors E.  Returns (coefficient matrix K with
    iota(X) ~ E K, smallest cosine between the two spans)."""
    J = _iota(form, X)
    Eo, _ = np.linalg.qr(E)
    Jo, _ = np.linalg.qr(J)
    cos = float(np.linalg.svd(Eo.T @ Jo, compute_uv=False)[-1])
    if cos < min_pairing:
        raise NumericalFailure(f"crossing fields and crossing eigenvectors are nearly transverse (cos {cos:.3f}); "
                               "refine the mesh")
    K = np.linalg.lstsq(E, J, rcond=None)[0]
    return K, cos


def _collision_vectors(st_new, st_old, j) -> np.ndarray:
    """Eigenvectors of the 2j eigenvalues present at st_new but not at
    st_old, as consecutive (smaller, larger) pairs with aligned signs."""
    lam_old = list(st_old.lam)
    new = []
    for i, x in enumerate(st_new.lam):
        if lam_old:
            d = [abs(x - y) for y in lam_old]
            k = int(np.argmin(d))
            if d[k] < 1e-2 * max(1e-3, x):
                lam_old.pop(k)
                continue
        new.append(i)
    if len(new) != 2 * j:
        raise NumericalFailure("could not identify the colliding eigenvalues")
    cols = []
    for a, b in zip(new[0::2], new[1::2]):
        v1, v2 = st_new.vE[:, a], st_new.vE[:, b]
        cols += [v1, v2 if v1 @ v2 > 0 else -v2]
    return np.column_stack(cols)


def _interleave(V, X):
    cols = []
    for i in range(V.shape[1]):
        cols += [V[:, i], X[:, i]]
    return np.column_stack(cols) if cols else V


def _cross(kind, k, B, L, R, ev, min_pairing):
    """Carry the oriented basis B at L across a cluster to R.

    Conventions: a line passing between N and E keeps its place in the
    basis and is matched by X -> (X(0), X'(0)); lines born together are
    appended as (E-line, N-line) pairs, or (smaller, larger) eigenvalue
    pairs for collisions, and lines dying together are removed in the
    same order.  Returns (basis at R, scalar sign).
    """
    if kind == "pair_gain":
        X = R.crossing_N(k)
        K, ev.pairing_cos = _iota_pairing(R.form, X, R.crossing_E(k), min_pairing)
        V = R.crossing_E(k) @ K
        raw = np.hstack([R.project(B), _interleave(R.wE(V), R.wN(X))])
        return _settle(raw, R), 1
    if kind == "pair_loss":
        X = L.crossing_N(k)
        K, ev.pairing_cos = _iota_pairing(L.form, X, L.crossing_E(k), min_pairing)
        V = L.crossing_E(k) @ K
        test = np.hstack([L.project(R.U), _interleave(L.wE(V), L.wN(X))])
        return R.U, _orient(B, test, L)
    if kind == "swap_to_E":
        X = L.crossing_N(k)
        K, ev.pairing_cos = _iota_pairing(L.form, X, R.crossing_E(k), min_pairing)
        V = R.crossing_E(k) @ K
        coef = X.T @ (L.M @ B[: L.n])
        rest = B - L.wN(X) @ coef
        raw = R.project(rest) + R.wE(V) @ coef
        return _settle(raw, R), 1
    if kind == "swap_to_N":
        Ev, _ = np.linalg.qr(L.crossing_E(k))
        X = R.crossing_N(k)
        K, ev.pairing_cos = _iota_pairing(R.form, X, Ev, min_pairing)
        coef = Ev.T @ B[L.n:]
        rest = B - L.wE(Ev) @ coef
        raw = R.project(rest) + R.wN(X) @ np.linalg.solve(K, coef)
        return _settle(raw, R), 1
    if kind == "collision_gain":
        V = _collision_vectors(R, L, k)
        raw = np.hstack([R.project(B), R.wE(V)])
        return _settle(raw, R), 1
    if kind == "collision_loss":
        V = _collision_vectors(L, R, k)
        test = np.hstack([L.project(R.U), L.wE(V)])
        return R.U, _orient(B, test, L)
    raise ModelViolation(f"unknown transition kind {kind}")


def _settle(raw, st):
    C = st.coords(raw)
    if C.shape[0] != C.shape[1]:
        raise ModelViolation("transition bookkeeping does not match the dimension of N + E")
    if C.size == 0:
        return raw[:, :0]
    sv = np.linalg.svd(C, compute_uv=False)
    if sv[-1] < 1e-3 * sv[0]:
        raise NumericalFailure("degenerate basis while crossing a transition")
    return st.U @ _polar(C)


def _orient(B, test, st) -> int:
    if B.shape[1] == 0 and test.shape[1] == 0:
        return 1
    C = B.T @ st.G(test)
    if C.shape[0] != C.shape[1]:
        raise ModelViolation("transition bookkeeping does not match the dimension of N + E")
    sv = np.linalg.svd(C, compute_uv=False)
    if sv[-1] < 1e-3 * sv[0]:
        raise NumericalFailure("degenerate basis while crossing a transition")
    return 1 if np.linalg.det(C) > 0 else -1


# ---------------------------------------------------------------------------
# orientation of the base loop through the deformation


def deformation_orientation(defo: Deformation, tol=None, n_grid: int = 24) -> OrientationTransportResult:
    """Carry the orientation of the trivial slice tau = 1 down every path
    s = s_j and compare neighbours along tau = 0.

    ``sign`` is the product of the neighbour comparisons (the monodromy
    of the resulting orientation around the base loop); ``mesh['path_signs']``
    lists them individually, all +1 when the carried orientations agree.
    """
    tol = _tol(tol)
    N = defo.mesh(tol)
    svals = defo.loop.s_values()
    te = defo.tau_edge
    scale = max(1.0, max(defo.data(s, t).R.bound() for s in svals[::max(1, len(svals) // 4)]
                         for t in (1 - te, 0.5, te)))
    eps = ZERO_SHIFT * scale
    top = _State(defo.path(0.0), 1 - te, N, eps, scale)
    ref0 = top.U
    results = []
    for s in svals:
        st = _State(defo.path(s), 1 - te, N, eps, scale)
        C = st.coords(ref0)
        if C.size and np.linalg.svd(C, compute_uv=False)[-1] < 0.9:
            raise NumericalFailure("the tau = 1 slice is not constant in s")
        start = st.U @ _polar(C) if C.size else st.U
        results.append(modified_transport(defo, s, (1 - te, te), start_basis=start, N=N, n_grid=n_grid, tol=tol,
                                          scale=scale))
    ends = [(_State(defo.path(s), te, N, eps, scale), r) for s, r in zip(svals, results)]
    signs = []
    for j in range(len(svals)):
        (sa, ra), (sb, rb) = ends[j], ends[(j + 1) % len(svals)]
        Ba = ra.mesh["final_basis"] * 1.0
        Bb = rb.mesh["final_basis"]
        if Ba.shape[1] == 0:
            signs.append(ra.mesh["orientation_scalar"] * rb.mesh["orientation_scalar"])
            continue
        C = sb.coords(Ba)
        if np.linalg.svd(C, compute_uv=False)[-1] < 0.3:
            raise RefineSampling("neighbouring paths end in nearly transverse negative spaces; increase S")
        moved = sb.U @ _polar(C)
        d = np.linalg.det(Bb.T @ sb.G(moved))
        signs.append(ra.mesh["orientation_scalar"] * rb.mesh["orientation_scalar"] * (1 if d > 0 else -1))
    sign = int(np.prod(signs)) if signs else 1
    events = sum(len(r.ledger.events) for r in results)
    mesh = {"N": N, "paths": len(svals), "path_signs": signs, "events": events,
            "ledgers": [r.ledger for r in results]}
    return OrientationTransportResult(sign, "modified_bundle", None, mesh)
