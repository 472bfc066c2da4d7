"""Rational S^1-equivariant cohomology of free loop spaces from minimal models.

Independent of the Morse side: the free loop space of a simply connected M
with minimal model (Lambda V, d) has model (Lambda(V + sV), d) and its
Borel construction (Q[u] (x) Lambda(V + sV), D = d + u s), where s is the
degree -1 derivation V -> sV.  Cohomology is computed degree by degree with
exact integer ranks (fraction free elimination).

Only truncated polynomial cohomology Q[x]/(x^(h+1)) and odd spheres are
needed here.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .errors import InvalidInput


@dataclass(frozen=True)
class Generator:
    name: str
    degree: int
    weight: int
    bars: int = 0

    @property
    def odd(self) -> bool:
        return self.degree % 2 == 1


class GradedAlgebra:
    """Free graded commutative algebra on a list of generators.

    Monomials are exponent tuples in generator order; odd exponents are 0 or 1.
    Polynomials are dicts {monomial: int}.
    """

    def __init__(self, gens):
        self.gens = list(gens)
        self.index = {g.name: i for i, g in enumerate(self.gens)}

    def gen(self, name, power=1) -> dict:
        e = [0] * len(self.gens)
        e[self.index[name]] = power
        return {tuple(e): 1}

    def degree(self, mono) -> int:
        return sum(e * g.degree for e, g in zip(mono, self.gens))

    def mono_mul(self, a, b):
        """(sign, monomial) of a*b, or (0, None)."""
        sign = 1
        out = list(a)
        # moving each odd factor of b left past the odd factors of a with a larger index
        for j, (eb, g) in enumerate(zip(b, self.gens)):
            if not eb:
                continue
            if g.odd:
                if a[j]:
                    return 0, None
                later = sum(a[i] for i in range(j + 1, len(a)) if self.gens[i].odd)
                if later % 2:
                    sign = -sign
            out[j] += eb
        return sign, tuple(out)

    def mul(self, p, q) -> dict:
        out = {}
        for ma, ca in p.items():
            for mb, cb in q.items():
                s, m = self.mono_mul(ma, mb)
                if s:
                    out[m] = out.get(m, 0) + s * ca * cb
        return {m: c for m, c in out.items() if c}

    def add(self, p, q, scale=1) -> dict:
        out = dict(p)
        for m, c in q.items():
            out[m] = out.get(m, 0) + scale * c
        return {m: c for m, c in out.items() if c}

    def derive(self, images: dict, parity: int, mono) -> dict:
        """Apply the derivation with generator images ``images`` (name ->
        polynomial) and degree parity ``parity`` to a monomial."""
        out = {}
        prefix = {tuple([0] * len(self.gens)): 1}
        prefix_deg = 0
        for i, (e, g) in enumerate(zip(mono, self.gens)):
            if e and g.name in images:
                img = images[g.name]
                rest = list(mono)
                rest[i] = 0
                for k in range(i):
                    rest[k] = 0
                suffix = {tuple(rest): 1}
                if g.odd:
                    core = img
                else:
                    low = list([0] * len(self.gens))
                    low[i] = e - 1
                    core = {m: c * e for m, c in self.mul({tuple(low): 1}, img).items()}
                sign = -1 if (parity and prefix_deg % 2) else 1
                term = self.mul(self.mul(prefix, core), suffix)
                out = self.add(out, term, sign)
            if e:
                piece = [0] * len(self.gens)
                piece[i] = e
                _, m = self.mono_mul(next(iter(prefix)), tuple(piece))
                prefix = {m: 1}
                prefix_deg += e * g.degree
        return out

    def apply(self, images, parity, poly) -> dict:
        out = {}
        for m, c in poly.items():
            out = self.add(out, self.derive(images, parity, m), c)
        return out

    def monomials(self, degree: int, extra_filter=None) -> list:
        """All monomials of the given total degree."""
        res = []

        def rec(i, left, acc):
            if i == len(self.gens):
                if left == 0:
                    res.append(tuple(acc))
                return
            g = self.gens[i]
            top = 1 if g.odd else left // g.degree
            for e in range(0, top + 1):
                if e * g.degree > left:
                    break
                rec(i + 1, left - e * g.degree, acc + [e])

        rec(0, degree, [])
        return res if extra_filter is None else [m for m in res if extra_filter(m)]


def _rank(rows) -> int:
    """Exact rank of an integer matrix given as a list of lists (Bareiss)."""
    A = [list(r) for r in rows if any(r)]
    if not A:
        return 0
    n_cols = len(A[0])
    rank = 0
    prev = 1
    for col in range(n_cols):
        piv = next((r for r in range(rank, len(A)) if A[r][col] != 0), None)
        if piv is None:
            continue
        A[rank], A[piv] = A[piv], A[rank]
        p = A[rank][col]
        for r in range(rank + 1, len(A)):
            a = A[r][col]
            A[r] = [(p * A[r][c] - a * A[rank][c]) // prev for c in range(n_cols)]
        prev = p
        rank += 1
        if rank == len(A):
            break
    return rank


class LoopModel:
    """Borel model of the free loop space of a space with minimal model
    generators ``gens`` and differential ``dmap`` (name -> polynomial in the
    base generators)."""

    def __init__(self, base_gens, dmap, label=""):
        self.label = label
        bars = [Generator("s" + g.name, g.degree - 1, g.weight, 1) for g in base_gens]
        self.u = Generator("u", 2, 0, 0)
        self.alg = GradedAlgebra([self.u, *base_gens, *bars])
        A = self.alg
        self.base = [g.name for g in base_gens]
        d_img = {}
        s_img = {g.name: A.gen("s" + g.name) for g in base_gens}
        for g in base_gens:
            d_img[g.name] = self._lift(dmap.get(g.name, {}))
        for g in base_gens:
            # d(s v) = -s(d v)
            d_img["s" + g.name] = {m: -c for m, c in A.apply(s_img, 1, d_img[g.name]).items()}
        self.d_img = {k: v for k, v in d_img.items() if v}
        self.s_img = s_img
        self._cache = {}

    def _lift(self, poly) -> dict:
        """Polynomial given as {tuple over base generators: coeff}."""
        out = {}
        for mono, c in poly.items():
            full = (0, *mono, *([0] * len(self.base)))
            out[full] = c
        return out

    def D(self, poly) -> dict:
        d_part = self.alg.apply(self.d_img, 1, poly)
        s_part = self.alg.apply(self.s_img, 1, poly)
        u_s = self.alg.mul(self.alg.gen("u"), s_part)
        return self.alg.add(d_part, u_s)

    def _key(self, mono):
        gens = self.alg.gens
        weight = sum(e * g.weight for e, g in zip(mono, gens))
        bar = sum(e * g.bars for e, g in zip(mono, gens)) - mono[0]
        return weight, bar

    def _blocks(self, degree: int, relative: bool = False) -> dict:
        key = (degree, relative)
        if key not in self._cache:
            blocks = {}
            n0 = 1 + len(self.base)
            for m in self.alg.monomials(degree) if degree >= 0 else []:
                if relative and not any(m[n0:]):
                    continue
                blocks.setdefault(self._key(m), []).append(m)
            self._cache[key] = blocks
        return self._cache[key]

    def _rank_D(self, degree: int, relative: bool = False) -> int:
        """Rank of D from degree q to q + 1, summed over the preserved gradings."""
        target = self._blocks(degree + 1, relative)
        total = 0
        for key, monos in self._blocks(degree, relative).items():
            cols = {m: i for i, m in enumerate(target.get(key, []))}
            if not cols:
                continue
            rows = []
            for m in monos:
                img = self.D({m: 1})
                row = [0] * len(cols)
                for mm, c in img.items():
                    row[cols[mm]] = c
                rows.append(row)
            total += _rank(rows)
        return total

    def betti(self, cap: int, relative: bool = False) -> list:
        """dim H^q of the Borel model for q = 0..cap.

        ``relative`` restricts to the ideal generated by the barred
        generators, the kernel of restriction to constant loops; its
        cohomology is that of the pair (Lambda M, M).
        """
        ranks = [self._rank_D(q, relative) for q in range(cap + 1)]
        out = []
        for q in range(cap + 1):
            dim = sum(len(v) for v in self._blocks(q, relative).values())
            out.append(dim - ranks[q] - (ranks[q - 1] if q > 0 else 0))
        return out


def truncated_model(a: int, h: int, label="") -> LoopModel:
    """Space with rational cohomology Q[x]/(x^(h+1)), |x| = a even."""
    if a % 2 or a <= 0 or h < 1:
        raise InvalidInput("need an even positive generator degree and height >= 1")
    x = Generator("x", a, 1)
    y = Generator("y", a * (h + 1) - 1, h + 1)
    return LoopModel([x, y], {"y": {(h + 1, 0): 1}}, label)


def odd_sphere_model(n: int) -> LoopModel:
    if n % 2 == 0:
        raise InvalidInput("odd spheres only")
    return LoopModel([Generator("x", n, 1)], {}, f"S^{n}")


def cross_model(cross: str, param: int) -> LoopModel:
    if cross == "S_even":
        return truncated_model(2 * param, 1, f"S^{2 * param}")
    if cross == "S_odd":
        return odd_sphere_model(2 * param + 1)
    if cross == "CP":
        return truncated_model(2, param, f"CP^{param}")
    if cross == "HP":
        return truncated_model(4, param, f"HP^{param}")
    if cross == "CaP2":
        return truncated_model(8, 2, "CaP^2")
    raise InvalidInput(f"unknown CROSS tag {cross!r}")


def equivariant_loop_betti(cross: str, param: int, cap: int) -> list:
    """dim H^q_{S^1}(Lambda M; Q), q = 0..cap."""
    return cross_model(cross, param).betti(cap)


def relative_loop_betti(cross: str, param: int, cap: int) -> list:
    """dim H^q_{S^1}(Lambda M, M; Q), q = 0..cap, as exact fractions."""
    return [Fraction(b) for b in cross_model(cross, param).betti(cap, relative=True)]
