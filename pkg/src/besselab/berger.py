"""Exact-arithmetic replay of the argument that a Besse metric on S^n (n >= 4)
whose shortest closed geodesics have length L/m with m >= 2 cannot exist.

A scenario fixes n, the iterate number m of the lowest critical family C and
dim C.  Each step records its inputs and a conclusion that ``replay`` can
recompute from those inputs alone.  The checker works with dimension counts
and Poincare series only.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import InvalidInput
from .morse_ledger import loopspace_integral, minimal_index, sphere, sphere_rational_table

CONTRADICTION = "CONTRADICTION"
CONSISTENT = "CONSISTENT"
TERMINAL_RULES = ("smith", "series_cap", "dimension_count")


@dataclass(frozen=True)
class BergerScenario:
    n: int
    m: int
    dim_C: int

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 4:
            raise InvalidInput("scenarios need n >= 4")
        if int(self.m) != self.m or self.m < 1:
            raise InvalidInput("m must be a positive integer")
        if self.dim_C < 1 or self.dim_C % 2 == 0:
            raise InvalidInput("dim C must be odd: fixed sets of Z_m in T^1 S^n have even codimension")
        if self.m >= 2 and self.dim_C > 2 * self.n - 3:
            raise InvalidInput(f"for m >= 2 the exceptional family has dim C <= {2 * self.n - 3}")
        if self.m == 1 and self.dim_C != 2 * self.n - 1:
            raise InvalidInput("for m = 1 the lowest family is all of T^1 S^n")

    @property
    def branch(self) -> str:
        return "even" if self.n % 2 == 0 else "odd"

    def to_json(self) -> dict:
        return {"n": self.n, "m": self.m, "dim_C": self.dim_C}


@dataclass
class TraceStep:
    rule: str
    inputs: dict
    conclusion: dict
    basis: str

    def to_json(self) -> dict:
        return {"rule": self.rule, "inputs": self.inputs, "conclusion": self.conclusion, "basis": self.basis}


@dataclass
class ContradictionTrace:
    scenario: BergerScenario
    steps: list = field(default_factory=list)
    status: str = ""
    terminal_rule: str | None = None
    notes: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {"scenario": self.scenario.to_json(), "status": self.status, "terminal_rule": self.terminal_rule,
                "steps": [s.to_json() for s in self.steps], "notes": list(self.notes)}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


# ---------------------------------------------------------------------------
# rules: each takes the recorded inputs and returns the conclusion


def _rational(n, cap):
    return [int(a) for a in sphere_rational_table(n, cap).coeffs]


def rule_minimality(inp):
    n = inp["n"]
    S = _rational(n, n)
    lowest = next(q for q, a in enumerate(S) if a)
    # a single family at the lowest index: no geodesic outside C has an iterate in C,
    # so S^1 / Z_m and hence O(2) / Z_m act freely
    return {"index_C": lowest, "components": S[lowest], "o2_free": S[lowest] == 1,
            "matches_minimal_index": lowest == minimal_index(sphere(n))}


def rule_symplectic_lower(inp):
    d = inp["dim_C"]
    return {"lower": [1 if q % 2 == 0 else 0 for q in range(d)]}


def rule_perfectness_caps(inp):
    n, d, rng = inp["n"], inp["dim_C"], inp["cap_range"]
    S = _rational(n, rng + n)
    upper = [S[q + n - 1] for q in range(min(d - 1, rng) + 1)]
    lower = inp["lower"][: len(upper)]
    bad = [q for q, (lo, up) in enumerate(zip(lower, upper)) if lo > up]
    return {"upper": upper, "violations": bad}


def rule_equality_gap(inp):
    """Equality of lower and upper bounds and the resulting index gap."""
    n, d, upper, lower = inp["n"], inp["dim_C"], inp["upper"], inp["lower"]
    filled = [q for q in range(len(upper)) if upper[q] == lower[q]]
    m0 = len(upper) - 1
    # Poincare duality of the (d - 1)-dimensional quotient closes the upper half
    duality = 2 * m0 >= d - 1
    if inp["branch"] == "even":
        gap = (n - 1) + d
    else:
        gap = (n - 1) + d - 1
    return {"filled": len(filled) == len(upper), "m0": m0, "duality_closes": duality,
            "quotient_cp_dim": (d - 1) // 2 if duality else None, "gap": gap}


def rule_second_family(inp):
    """Odd n with dim C/S^1 > n - 1: the next family sits at index 2(n - 1);
    test both shapes it can take against the residual series."""
    n, d = inp["n"], inp["dim_C"]
    top = 2 * n
    S = _rational(n, top)
    # C contributes t^{n-1} (1 + t^2 + ... + t^{d-1})
    C = [0] * (top + 1)
    for j in range(0, d, 2):
        if n - 1 + j <= top:
            C[n - 1 + j] = 1
    residual = [S[q] - C[q] for q in range(top + 1)]
    index = next((q for q in range(top + 1) if residual[q] > 0), None)
    # a 1-dimensional family holds a geodesic and its reverse: at least 2 at its index
    circle = index is not None and 2 > residual[index]
    # a larger family has a symplectic quotient: at least 1 two degrees higher
    bigger = index is not None and index + 2 <= top and 1 > residual[index + 2]
    return {"residual": residual, "index": index, "circle_violates": circle, "larger_violates": bigger,
            "both_violate": circle and bigger}


def rule_integral_transfer(inp):
    n, d = inp["n"], inp["dim_C"]
    top = inp["transfer_top"]
    I = loopspace_integral(n, n - 1 + top + 1)
    groups = [I.describe(q + n - 1) for q in range(top + 1)]
    zero_run = 0
    for q in range(1, top + 1):
        if groups[q] != "0":
            break
        zero_run = q
    # H^q = 0 for 1 <= q <= m0 gives, by duality and universal coefficients,
    # H^q = 0 for d - m0 + 1 <= q <= d - 1 as well
    covered = zero_run >= d - 1 or 2 * zero_run >= d
    if inp["branch"] == "even":
        stated = min(d - 1, n - 1)
        claim = stated >= d / 2 + 1
    else:
        stated = d - 1
        claim = stated > d / 2
    return {"groups": groups, "zero_run": zero_run, "sphere": covered and groups[0] == "Z",
            "stated_m0": stated, "stated_inequality": claim,
            "extra_nonzero": [q for q in range(1, top + 1) if groups[q] != "0" and covered]}


def rule_smith(inp):
    # a finite abelian group acting freely on an integral cohomology sphere is cyclic;
    # Z2 x Z2 inside O(2) / Z_m = O(2) acts freely on C
    return {"contradiction": bool(inp["sphere"]) and inp["m"] >= 2 and inp["o2_free"]}


def rule_regular(inp):
    return {"free_flow": inp["m"] == 1 and inp["dim_C"] == 2 * inp["n"] - 1}


RULES = {
    "minimality": rule_minimality,
    "symplectic_lower": rule_symplectic_lower,
    "perfectness_caps": rule_perfectness_caps,
    "equality_gap": rule_equality_gap,
    "second_family": rule_second_family,
    "integral_transfer": rule_integral_transfer,
    "smith": rule_smith,
    "regular": rule_regular,
}


# ---------------------------------------------------------------------------


def berger_scenario_check(sc: BergerScenario) -> ContradictionTrace:
    tr = ContradictionTrace(sc)
    n, d, m = sc.n, sc.dim_C, sc.m

    def step(rule, inputs, basis):
        s = TraceStep(rule, inputs, RULES[rule](inputs), basis)
        tr.steps.append(s)
        return s.conclusion

    def finish(status, rule=None):
        tr.status = status
        tr.terminal_rule = rule
        return tr

    if m == 1:
        step("regular", {"n": n, "m": m, "dim_C": d}, "all geodesics are prime: no exceptional family")
        return finish(CONSISTENT)

    mini = step("minimality", {"n": n, "m": m}, "lowest degree of the pair series; free O(2) action")
    if mini["components"] != 1:
        tr.notes.append("more than one family at the minimal index")
        return finish(CONTRADICTION, "series_cap")
    low = step("symplectic_lower", {"dim_C": d}, "even Betti numbers of a symplectic quotient are >= 1")["lower"]
    rng = 2 * n - 3 if sc.branch == "even" else n - 2
    caps = step("perfectness_caps", {"n": n, "dim_C": d, "cap_range": rng, "lower": low},
                "perfect equivariant Morse function: level <= total")
    if caps["violations"]:
        return finish(CONTRADICTION, "series_cap")
    eq = step("equality_gap", {"n": n, "dim_C": d, "branch": sc.branch, "upper": caps["upper"],
                               "lower": low[: len(caps["upper"])]},
              "bounds meet; other families start above the filled range")
    if not (eq["filled"] and eq["duality_closes"]):
        tr.notes.append("equivariant cohomology of C not determined by the bounds")
        return finish(CONSISTENT)
    if sc.branch == "odd" and d - 1 > n - 1:
        sf = step("second_family", {"n": n, "dim_C": d},
                  "next family at index 2(n-1): a circle family double counts, a larger one adds a degree 2n class")
        if sf["both_violate"]:
            return finish(CONTRADICTION, "series_cap")
        tr.notes.append("second family not excluded")
        return finish(CONSISTENT)
    top = d - 1
    it = step("integral_transfer", {"n": n, "dim_C": d, "branch": sc.branch, "transfer_top": top},
              "below the gap the integral pair cohomology is that of C, shifted by n - 1")
    if not it["stated_inequality"]:
        tr.notes.append(f"stated covering inequality fails (m0 = {it['stated_m0']}); "
                        f"duality covering with zero run {it['zero_run']} used instead")
    if it["extra_nonzero"]:
        tr.notes.append(f"transferred groups nonzero in degrees {it['extra_nonzero']} although duality forces zero")
    if not it["sphere"]:
        return finish(CONSISTENT)
    sm = step("smith", {"sphere": it["sphere"], "m": m, "o2_free": mini["o2_free"]},
              "free actions on cohomology spheres: finite abelian groups must be cyclic")
    if sm["contradiction"]:
        return finish(CONTRADICTION, "smith")
    return finish(CONSISTENT)


def replay(trace: ContradictionTrace) -> bool:
    """Recompute every conclusion from its recorded inputs."""
    for s in trace.steps:
        if s.rule not in RULES:
            return False
        if json.dumps(RULES[s.rule](s.inputs), sort_keys=True) != json.dumps(s.conclusion, sort_keys=True):
            return False
    if trace.status == CONTRADICTION and trace.terminal_rule not in TERMINAL_RULES:
        return False
    return True


def trace_from_json(d) -> ContradictionTrace:
    if isinstance(d, str):
        d = json.loads(d)
    sc = BergerScenario(**d["scenario"])
    steps = [TraceStep(s["rule"], s["inputs"], s["conclusion"], s["basis"]) for s in d["steps"]]
    return ContradictionTrace(sc, steps, d["status"], d["terminal_rule"], list(d.get("notes", [])))


def berger_sweep(n_values=range(4, 11), m_values=range(1, 7)) -> list:
    out = []
    for n in n_values:
        for m in m_values:
            dims = [2 * n - 1] if m == 1 else range(1, 2 * n - 2, 2)
            for d in dims:
                out.append(berger_scenario_check(BergerScenario(n, m, d)))
    return out
