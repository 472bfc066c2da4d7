"""Graded bookkeeping for compact rank one symmetric spaces (CROSS).

Integral cohomology of the unit tangent bundle and of its quotient by the
geodesic circle action, equivariant Poincare series of the critical
manifolds of the round metric, and the perfectness identity
    sum_k t^{i_k} P(T^1M/S^1) = P_{S^1}(Lambda M, M; Q).
All arithmetic is exact (ints and Fractions).

CROSS tags: ``S_even`` (S^{2m}), ``S_odd`` (S^{2m+1}), ``CP`` (CP^m),
``HP`` (HP^m) and ``CaP2``; the parameter is m.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction

from .errors import InvalidInput

DEFAULT_CAP = 60
TAGS = ("S_even", "S_odd", "CP", "HP", "CaP2")


# ---------------------------------------------------------------------------
# graded objects


@dataclass(frozen=True)
class GradedGroup:
    """Per degree a free rank and a tuple of cyclic torsion orders, up to ``cap``."""

    cap: int
    ranks: tuple
    torsion: tuple
    flagged: tuple = ()
    label: str = ""

    def __post_init__(self):
        if len(self.ranks) != self.cap + 1 or len(self.torsion) != self.cap + 1:
            raise InvalidInput("ranks and torsion need one entry per degree 0..cap")
        if any(r < 0 for r in self.ranks) or any(t < 2 for ts in self.torsion for t in ts):
            raise InvalidInput("ranks must be >= 0 and torsion orders >= 2")

    @classmethod
    def from_entries(cls, entries, cap: int, label: str = "", flagged=()) -> "GradedGroup":
        """entries: {q: (rank, [orders])} or {q: "Z" | "Z^2" | "Z_3"}."""
        ranks = [0] * (cap + 1)
        tors = [[] for _ in range(cap + 1)]
        for q, v in entries.items():
            if q > cap:
                continue
            if isinstance(v, str):
                for part in v.split("+"):
                    part = part.strip()
                    if part.startswith("Z_"):
                        tors[q].append(int(part[2:]))
                    elif part.startswith("Z^"):
                        ranks[q] += int(part[2:])
                    elif part == "Z":
                        ranks[q] += 1
                    elif part != "0":
                        raise InvalidInput(f"cannot parse group {part!r}")
            else:
                ranks[q] += v[0]
                tors[q].extend(v[1])
        return cls(cap, tuple(ranks), tuple(tuple(sorted(t)) for t in tors), tuple(flagged), label)

    def rank(self, q: int) -> int:
        return self.ranks[q] if 0 <= q <= self.cap else 0

    def torsion_at(self, q: int) -> tuple:
        return self.torsion[q] if 0 <= q <= self.cap else ()

    def is_zero(self, q: int) -> bool:
        return self.rank(q) == 0 and not self.torsion_at(q)

    def nonzero_degrees(self) -> list:
        return [q for q in range(self.cap + 1) if not self.is_zero(q)]

    def describe(self, q: int) -> str:
        parts = []
        r = self.rank(q)
        if r:
            parts.append("Z" if r == 1 else f"Z^{r}")
        parts += [f"Z_{t}" for t in self.torsion_at(q)]
        return "+".join(parts) or "0"

    def entries(self) -> dict:
        return {q: self.describe(q) for q in self.nonzero_degrees()}

    def series(self) -> "PoincareSeries":
        return PoincareSeries(tuple(Fraction(r) for r in self.ranks))

    def to_json(self) -> dict:
        return {"label": self.label, "cap": self.cap, "groups": {str(q): g for q, g in self.entries().items()},
                "flagged": list(self.flagged)}

    def text(self) -> str:
        rows = [f"  q={q:<3d} {g}" for q, g in self.entries().items()]
        return "\n".join([self.label or "graded group", *rows])


@dataclass(frozen=True)
class PoincareSeries:
    """Truncated series sum a_q t^q, q = 0..cap, with exact coefficients."""

    coeffs: tuple
    period: tuple | None = None  # (period, offset) for display only

    def __post_init__(self):
        object.__setattr__(self, "coeffs", tuple(Fraction(c) for c in self.coeffs))

    @property
    def cap(self) -> int:
        return len(self.coeffs) - 1

    @classmethod
    def zero(cls, cap: int) -> "PoincareSeries":
        return cls((0,) * (cap + 1))

    @classmethod
    def from_terms(cls, terms: dict, cap: int) -> "PoincareSeries":
        c = [0] * (cap + 1)
        for q, a in terms.items():
            if 0 <= q <= cap:
                c[q] += a
        return cls(tuple(c))

    @classmethod
    def polynomial(cls, coeffs, cap: int | None = None) -> "PoincareSeries":
        coeffs = list(coeffs)
        cap = len(coeffs) - 1 if cap is None else cap
        coeffs = (coeffs + [0] * (cap + 1))[: cap + 1]
        return cls(tuple(coeffs))

    def __getitem__(self, q: int) -> Fraction:
        if q < 0:
            return Fraction(0)
        if q > self.cap:
            raise InvalidInput(f"degree {q} beyond the series cap {self.cap}")
        return self.coeffs[q]

    def truncate(self, cap: int) -> "PoincareSeries":
        if cap > self.cap:
            raise InvalidInput("cannot extend a truncated series")
        return PoincareSeries(self.coeffs[: cap + 1], self.period)

    def _pair(self, other):
        cap = min(self.cap, other.cap)
        return self.coeffs[: cap + 1], other.coeffs[: cap + 1]

    def __add__(self, other) -> "PoincareSeries":
        a, b = self._pair(other)
        return PoincareSeries(tuple(x + y for x, y in zip(a, b)))

    def __sub__(self, other) -> "PoincareSeries":
        a, b = self._pair(other)
        return PoincareSeries(tuple(x - y for x, y in zip(a, b)))

    def __mul__(self, other) -> "PoincareSeries":
        a, b = self._pair(other)
        cap = len(a) - 1
        out = [Fraction(0)] * (cap + 1)
        for i, x in enumerate(a):
            if x:
                for j in range(cap + 1 - i):
                    out[i + j] += x * b[j]
        return PoincareSeries(tuple(out))

    def shift(self, k: int, cap: int | None = None) -> "PoincareSeries":
        cap = self.cap if cap is None else cap
        out = [Fraction(0)] * (cap + 1)
        for q, a in enumerate(self.coeffs):
            if 0 <= q + k <= cap:
                out[q + k] = a
        return PoincareSeries(tuple(out))

    def lowest_degree(self) -> int | None:
        return next((q for q, a in enumerate(self.coeffs) if a), None)

    def is_cohomological(self) -> bool:
        return all(a >= 0 and a.denominator == 1 for a in self.coeffs)

    def terms(self) -> dict:
        return {q: a for q, a in enumerate(self.coeffs) if a}

    def to_json(self) -> dict:
        d = {"cap": self.cap, "coefficients": [int(a) if a.denominator == 1 else str(a) for a in self.coeffs]}
        if self.period:
            d["period"] = list(self.period)
        return d

    def __eq__(self, other):
        return isinstance(other, PoincareSeries) and self.coeffs == other.coeffs

    def __hash__(self):
        return hash(self.coeffs)


# ---------------------------------------------------------------------------
# the five families


@dataclass(frozen=True)
class Cross:
    tag: str
    m: int

    def __post_init__(self):
        if self.tag not in TAGS:
            raise InvalidInput(f"unknown CROSS tag {self.tag!r}; expected one of {TAGS}")
        if self.tag == "CaP2" and self.m != 2:
            raise InvalidInput("the Cayley plane has parameter 2")
        if int(self.m) != self.m or self.m < 1:
            raise InvalidInput("parameter must be a positive integer")

    @property
    def n(self) -> int:
        return {"S_even": 2 * self.m, "S_odd": 2 * self.m + 1, "CP": 2 * self.m, "HP": 4 * self.m,
                "CaP2": 16}[self.tag]

    @property
    def generator_degree(self) -> int:
        """Degree of the generator of H^*(M): n for spheres, 2, 4, 8 for projective planes."""
        return {"S_even": self.n, "S_odd": self.n, "CP": 2, "HP": 4, "CaP2": 8}[self.tag]

    @property
    def euler_characteristic(self) -> int:
        if self.tag == "S_even":
            return 2
        if self.tag == "S_odd":
            return 0
        return self.m + 1 if self.tag != "CaP2" else 3

    def base_ranks(self) -> list:
        """Free ranks of H^q(M; Z), q = 0..n (the cohomology is torsion free)."""
        r = [0] * (self.n + 1)
        a = self.generator_degree
        for q in range(0, self.n + 1, a):
            r[q] = 1
        return r

    @property
    def label(self) -> str:
        return {"S_even": f"S^{self.n}", "S_odd": f"S^{self.n}", "CP": f"CP^{self.m}", "HP": f"HP^{self.m}",
                "CaP2": "CaP^2"}[self.tag]


def as_cross(cross, param=None) -> Cross:
    if isinstance(cross, Cross):
        return cross
    if cross == "CaP2" and param is None:
        param = 2
    if param is None:
        raise InvalidInput(f"{cross} needs a size parameter")
    return Cross(cross, int(param))


def sphere(n: int) -> Cross:
    if n < 2:
        raise InvalidInput("spheres of dimension >= 2 only")
    return Cross("S_even", n // 2) if n % 2 == 0 else Cross("S_odd", n // 2)


# ---------------------------------------------------------------------------
# Gysin computations


def unit_tangent_cohomology(cross, param=None) -> GradedGroup:
    """H^*(T^1M; Z) from the Gysin sequence of the sphere bundle S^{n-1} -> T^1M -> M.

    The Euler class is chi(M) times the top class, so the only nonzero
    cup-with-Euler map is H^0(M) -> H^n(M), multiplication by chi.  Then
    0 -> coker(e: H^{q-n} -> H^q) -> H^q(T^1M) -> ker(e: H^{q-n+1} -> H^{q+1}) -> 0
    splits because the kernel is free.
    """
    c = as_cross(cross, param)
    n, chi = c.n, c.euler_characteristic
    b = c.base_ranks()
    cap = 2 * n - 1
    entries = {}

    def base(q):
        return b[q] if 0 <= q <= n else 0

    for q in range(cap + 1):
        rank, tors = 0, []
        # cokernel of e into degree q
        if q == n:
            if chi == 0:
                rank += 1
            elif abs(chi) > 1:
                tors.append(abs(chi))
        else:
            rank += base(q)
        # kernel of e out of degree q - n + 1
        src = q - n + 1
        if src == 0:
            rank += 1 if chi == 0 else 0
        elif src > 0:
            rank += base(src)
        if rank or tors:
            entries[q] = (rank, tors)
    return GradedGroup.from_entries(entries, cap, f"H^*(T^1 {c.label}; Z)")


@dataclass
class GysinAudit:
    ok: bool
    images: list  # rank of cup with the circle Euler class out of each degree
    failure: str = ""


def _circle_gysin_audit(E: GradedGroup, B: list) -> GysinAudit:
    """Check that ranks B of the base and E of the total space fit an exact
    Gysin sequence of a circle bundle, solving for the ranks y_q of
    c: H^q(B) -> H^{q+2}(B).

    Exactness at H^q(E): rank E_q = (B_q - y_{q-2}) + (B_{q-1} - y_{q-1}).
    """
    top = len(B) - 1

    def b(q):
        return B[q] if 0 <= q <= top else 0

    y = {-2: 0, -1: 0}
    for q in range(0, E.cap + 2):
        yq = b(q) + b(q - 1) - y[q - 2] - E.rank(q)
        y[q - 1] = yq
        if yq < 0 or yq > min(b(q - 1), b(q + 1)):
            return GysinAudit(False, [y[i] for i in range(-1, q)], f"no exact sequence at degree {q}")
    if any(y[q] for q in range(top - 1, E.cap + 1)):
        return GysinAudit(False, [y[i] for i in range(0, E.cap + 1)], "sequence does not terminate")
    return GysinAudit(True, [y[i] for i in range(0, top + 1)])


def quotient_cohomology(cross, param=None, audit: bool = True) -> GradedGroup:
    """H^*(T^1M / S^1; Z) for the geodesic circle action.

    Below the middle degree n - 1 the total space has free cohomology in even
    degrees only, so the Gysin sequence of S^1 -> T^1M -> B splits into
    0 -> H^{q-2}(B) -> H^q(B) -> H^q(T^1M) -> 0 (q even) and kills odd
    degrees.  Poincare duality of the (2n - 2)-dimensional quotient fills the
    upper half; the low groups being free, no torsion appears there either.
    """
    c = as_cross(cross, param)
    n = c.n
    E = unit_tangent_cohomology(c)
    dim = 2 * n - 2
    mid = n - 1
    for q in range(mid + 1):
        if E.torsion_at(q) or (q % 2 and E.rank(q)):
            raise InvalidInput(f"H^{q}(T^1M) is not free in even degree; the inductive scheme does not apply")
    r = [0] * (dim + 1)
    r[0] = 1
    for q in range(1, mid + 1):
        r[q] = 0 if q % 2 else r[q - 2] + E.rank(q)
    for q in range(mid + 1, dim + 1):
        r[q] = r[dim - q]
    G = GradedGroup.from_entries({q: (k, []) for q, k in enumerate(r) if k}, dim, f"H^*(T^1 {c.label}/S^1; Z)")
    if audit:
        a = _circle_gysin_audit(E, r)
        if not a.ok:
            raise InvalidInput(f"Gysin audit failed for {c.label}: {a.failure}")
    return G


def _cp_series(k: int, cap: int) -> PoincareSeries:
    return PoincareSeries.from_terms({2 * j: 1 for j in range(k + 1)}, cap)


def _hp_series(k: int, cap: int) -> PoincareSeries:
    return PoincareSeries.from_terms({4 * j: 1 for j in range(k + 1)}, cap)


def _sphere_series(k: int, cap: int) -> PoincareSeries:
    return PoincareSeries.from_terms({0: 1, k: 1}, cap)


def table_quotient_series(cross, param=None) -> PoincareSeries:
    """Poincare polynomial of the product manifold N with the same cohomology
    as T^1M / S^1 (all factors torsion free, so Kunneth gives the groups)."""
    c = as_cross(cross, param)
    m = c.m
    cap = 2 * c.n - 2
    if c.tag == "S_even":
        return _cp_series(2 * m - 1, cap)
    if c.tag == "S_odd":
        return _sphere_series(2 * m, cap) * _cp_series(m, cap)
    if c.tag == "CP":
        return _cp_series(m - 1, cap) * _cp_series(m, cap)
    if c.tag == "HP":
        return _hp_series(m - 1, cap) * _cp_series(2 * m + 1, cap)
    return _sphere_series(8, cap) * _cp_series(11, cap)


# ---------------------------------------------------------------------------
# critical manifolds of the round metric


def fiber_sphere_dimension(cross, param=None) -> int:
    """d such that geodesics of M through a point lie on a totally geodesic
    S^d of curvature 4 (S^n itself for spheres)."""
    c = as_cross(cross, param)
    return c.n if c.tag in ("S_even", "S_odd") else c.generator_degree


def iterate_index(cross, k: int, param=None) -> int:
    """Morse index of the k-th iterate family: (d - 1) + (k - 1)(n + d - 2)."""
    c = as_cross(cross, param)
    d = fiber_sphere_dimension(c)
    return (d - 1) + (k - 1) * (c.n + d - 2)


@dataclass(frozen=True)
class CriticalEntry:
    k: int
    index: int
    orientable: bool
    series: PoincareSeries
    anti_invariant: PoincareSeries | None = None

    def to_json(self) -> dict:
        d = {"k": self.k, "index": self.index, "orientable": self.orientable, "series": self.series.to_json()}
        if self.anti_invariant is not None:
            d["anti_invariant"] = self.anti_invariant.to_json()
        return d


@dataclass(frozen=True)
class CriticalModel:
    cross: Cross
    entries: tuple = field(default_factory=tuple)

    def __post_init__(self):
        idx = [e.index for e in self.entries]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise InvalidInput("indices must increase strictly along the energy order")
        par = (self.cross.n + 1) % 2
        bad = [e.index for e in self.entries if e.index % 2 != par]
        if bad:
            raise InvalidInput(f"indices {bad} violate the parity of n + 1 = {self.cross.n + 1}")

    def to_json(self) -> dict:
        return {"cross": self.cross.tag, "m": self.cross.m, "n": self.cross.n,
                "entries": [e.to_json() for e in self.entries]}


def equivariant_series(cross, k: int = 1, param=None, cap: int = DEFAULT_CAP) -> PoincareSeries:
    """Rational series of H^*_{S^1}(C^k; Q) = H^*(T^1M/S^1; Q); the finite
    isotropy Z_k is invisible rationally, so this is independent of k."""
    if k < 1:
        raise InvalidInput("iterates start at k = 1")
    q = quotient_cohomology(as_cross(cross, param))
    return PoincareSeries.polynomial(q.ranks, cap)


def round_model(cross, param=None, cap: int = DEFAULT_CAP) -> CriticalModel:
    """All iterate families whose index is at most ``cap``."""
    c = as_cross(cross, param)
    s = equivariant_series(c, 1, cap=cap)
    entries = []
    k = 1
    while iterate_index(c, k) <= cap:
        entries.append(CriticalEntry(k, iterate_index(c, k), True, s))
        k += 1
    return CriticalModel(c, tuple(entries))


def thom_shift(series: PoincareSeries, index: int, orientable: bool = True,
               anti_invariant: PoincareSeries | None = None) -> PoincareSeries:
    """Contribution t^index * series of one critical level; for a
    non-orientable negative bundle the anti-invariant part of the double
    cover's cohomology replaces the series."""
    if index < 0:
        raise InvalidInput("index must be nonnegative")
    if orientable:
        return series.shift(index)
    if anti_invariant is None:
        raise InvalidInput("a non-orientable level needs its anti-invariant series")
    return anti_invariant.shift(index)


def assemble(model: CriticalModel, cap: int = DEFAULT_CAP) -> PoincareSeries:
    total = PoincareSeries.zero(cap)
    for e in model.entries:
        if e.index <= cap:
            part = thom_shift(e.series, e.index, e.orientable, e.anti_invariant)
            total = total + PoincareSeries.polynomial(part.coeffs, cap)
    return total


# ---------------------------------------------------------------------------
# loop space tables


def sphere_rational_table(n: int, cap: int = DEFAULT_CAP) -> PoincareSeries:
    """dim H^q_{S^1}(Lambda S^n, S^n; Q) from the closed-form table."""
    if n < 2:
        raise InvalidInput("n >= 2")
    c = {}
    for q in range(n - 1, cap + 1):
        if n % 2 == 0 and q % 2 == 1:
            c[q] = 2 if (q % (n - 1) == 0 and (q // (n - 1)) % 2 == 1 and q >= 3 * (n - 1)) else 1
        elif n % 2 == 1 and q % 2 == 0:
            c[q] = 2 if (q % (n - 1) == 0 and q >= 2 * (n - 1)) else 1
    return PoincareSeries.from_terms(c, cap)


def loopspace_integral(n: int, cap: int = DEFAULT_CAP) -> GradedGroup:
    """H^q(Lambda S^n, S^n; Z) from the closed-form table."""
    if n < 2:
        raise InvalidInput("n >= 2")
    e = {}

    def put(q, g):
        if q <= cap:
            e.setdefault(q, []).append(g)

    k = 1
    while (k - 1) * (n - 1) <= cap:
        if n % 2 == 0:
            put((2 * k - 1) * (n - 1), "Z")
            put((2 * k + 1) * (n - 1) + 1, "Z")
            put(2 * k * (n - 1) + 1, "Z_2")
        else:
            put(k * (n - 1), "Z")
            put((k + 1) * (n - 1) + 1, "Z")
        k += 1
    return GradedGroup.from_entries({q: "+".join(v) for q, v in e.items()}, cap,
                                    f"H^*(Lambda S^{n}, S^{n}; Z)")


def loopspace_series(cross, param=None, cap: int = DEFAULT_CAP, source: str = "assembly") -> PoincareSeries:
    """Rational equivariant series of the pair (Lambda M, M).

    ``assembly`` sums the Thom-shifted critical levels of the round metric;
    ``table`` uses the closed form (spheres only); ``model`` runs the
    independent minimal-model computation.
    """
    c = as_cross(cross, param)
    if source == "assembly":
        return assemble(round_model(c, cap=cap), cap)
    if source == "table":
        if c.tag not in ("S_even", "S_odd"):
            raise InvalidInput("closed-form tables exist for spheres only")
        return sphere_rational_table(c.n, cap)
    if source == "model":
        from .loop_model import relative_loop_betti

        return PoincareSeries(tuple(relative_loop_betti(c.tag, c.m, cap)))
    raise InvalidInput(f"unknown source {source!r}")


def minimal_index(cross, param=None) -> int:
    c = as_cross(cross, param)
    return {"S_even": c.n - 1, "S_odd": c.n - 1, "CP": 1, "HP": 3, "CaP2": 7}[c.tag]


def lacunarity(series: PoincareSeries, n: int) -> list:
    """Degrees violating the parity vanishing (odd degrees for n odd, even for n even)."""
    return [q for q, a in enumerate(series.coeffs) if a and q % 2 == n % 2]


@dataclass
class PerfectnessReport:
    cross: str
    cap: int
    ok: bool
    first_failure: int | None
    assembled: PoincareSeries
    target: PoincareSeries
    lacunarity_violations: list

    def to_json(self) -> dict:
        return {"cross": self.cross, "cap": self.cap, "ok": self.ok, "first_failure": self.first_failure,
                "assembled": self.assembled.to_json(), "target": self.target.to_json(),
                "lacunarity_violations": self.lacunarity_violations}


def perfectness_check(model: CriticalModel, target: PoincareSeries, cap: int = DEFAULT_CAP) -> PerfectnessReport:
    if target.cap < cap:
        raise InvalidInput(f"target series only reaches degree {target.cap} < cap {cap}")
    nxt = iterate_index(model.cross, len(model.entries) + 1)
    if nxt <= cap and [e.k for e in model.entries] == list(range(1, len(model.entries) + 1)):
        raise InvalidInput(f"model stops at k = {len(model.entries)} but the next index {nxt} is below the cap")
    got = assemble(model, cap)
    tgt = target.truncate(cap)
    bad = next((q for q in range(cap + 1) if got[q] != tgt[q]), None)
    lac = lacunarity(tgt, model.cross.n)
    return PerfectnessReport(model.cross.label, cap, bad is None and not lac, bad, got, tgt, lac)


def ledger_tables(cap: int = DEFAULT_CAP, families=None) -> dict:
    """Everything the ``ledger`` subcommand reports, as plain JSON data."""
    families = families or [("S_even", 1), ("S_even", 2), ("S_odd", 1), ("S_odd", 2), ("CP", 2), ("CP", 3),
                            ("HP", 2), ("CaP2", 2)]
    out = {}
    for tag, m in families:
        c = as_cross(tag, m)
        rep = perfectness_check(round_model(c, cap=cap), loopspace_series(c, cap=cap, source="model"), cap)
        out[c.label] = {
            "unit_tangent": unit_tangent_cohomology(c).to_json(),
            "quotient": quotient_cohomology(c).to_json(),
            "minimal_index": minimal_index(c),
            "perfectness": rep.to_json(),
        }
    return json.loads(json.dumps(out, sort_keys=True))
