"""Command line front end and report plumbing.

A run is described by a JSON config; every subcommand builds one and hands
it to ``run_pipeline``.  Reports are plain JSON (keys sorted, no timings) so
identical configs give byte-identical files.

Exit codes: 0 all requested checks pass, 1 an invariant check failed,
2 bad input, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import re
import sys
from pathlib import Path

import numpy as np

from .berger import CONSISTENT, CONTRADICTION, BergerScenario, berger_scenario_check, berger_sweep, replay
from .errors import BesseLabError, InvalidInput, InvariantFailure, NumericalFailure
from .formal_geodesic import index_report, iterate
from .geodesic_engine import MetricSpec, closed_geodesic, extract_formal, random_unit_initial
from .morse_ledger import (
    DEFAULT_CAP,
    as_cross,
    lacunarity,
    loopspace_series,
    minimal_index,
    perfectness_check,
    quotient_cohomology,
    round_model,
    unit_tangent_cohomology,
)
from .orientation import (
    elliptic_loop,
    exemplar_nonorientable,
    iterate_loop,
    iterate_orientability_class,
    random_elliptic_loop,
    spin_lift_sign,
    transport_negative_orientation,
)
from .tolerances import PROFILES, get_profile

log = logging.getLogger("besselab")

EXIT_OK, EXIT_INVARIANT, EXIT_INPUT, EXIT_NUMERICAL = 0, 1, 2, 3

CONFIG_KEYS = {"seed", "tol_profile", "cap", "metric", "iterates", "geodesics", "orientability", "ledger", "berger"}
LEDGER_CHECKS = ("perfectness", "lacunarity")


# ---------------------------------------------------------------------------
# config


def _fail(msg):
    raise InvalidInput(f"config: {msg}")


def _int_list(v, name):
    if isinstance(v, int) and not isinstance(v, bool):
        return list(range(1, v + 1))
    if isinstance(v, str) and re.fullmatch(r"\d+\.\.\d+", v):
        a, b = map(int, v.split(".."))
        return list(range(a, b + 1))
    if isinstance(v, list) and v and all(isinstance(x, int) and not isinstance(x, bool) and x >= 1 for x in v):
        return sorted(set(v))
    _fail(f"{name} must be a positive integer, a range 'a..b' or a list of positive integers")


def parse_cross(text):
    """'S^3', 'CP^2', 'HP^2', 'CaP^2', or 'TAG:m' with a tag from the ledger."""
    if isinstance(text, (list, tuple)):
        return as_cross(*text)
    t = str(text).strip()
    if ":" in t:
        tag, m = t.split(":", 1)
        return as_cross(tag, int(m))
    mo = re.fullmatch(r"(S|CP|HP|CaP)\^?(\d+)", t)
    if not mo:
        raise InvalidInput(f"cannot read CROSS {text!r}; use S^n, CP^m, HP^m, CaP^2 or TAG:m")
    kind, k = mo.group(1), int(mo.group(2))
    if kind == "S":
        if k < 2:
            raise InvalidInput("spheres of dimension >= 2 only")
        return as_cross("S_even", k // 2) if k % 2 == 0 else as_cross("S_odd", k // 2)
    if kind == "CaP":
        if k != 2:
            raise InvalidInput("only the Cayley plane CaP^2 exists")
        return as_cross("CaP2", 2)
    return as_cross(kind, k)


def _metric(spec):
    if isinstance(spec, str):
        mo = re.fullmatch(r"(\w+)\((.*)\)", spec.replace(" ", ""))
        if mo and mo.group(1) == "round_sphere":
            return MetricSpec.round_sphere(int(mo.group(2) or 2))
        if mo and mo.group(1) == "zoll":
            return MetricSpec.zoll_revolution([0.0, 0.3, 0.0, -0.3])
        _fail(f"unknown metric shorthand {spec!r}")
    if isinstance(spec, dict):
        return MetricSpec.from_json(spec)
    _fail("metric must be an object or a shorthand like 'round_sphere(3)'")


def validate_config(cfg) -> dict:
    """Normalised copy of a config, or InvalidInput listing what is wrong."""
    if not isinstance(cfg, dict):
        _fail("top level must be a JSON object")
    unknown = sorted(set(cfg) - CONFIG_KEYS)
    if unknown:
        _fail(f"unknown keys {unknown}; allowed {sorted(CONFIG_KEYS)}")
    out = {"seed": cfg.get("seed", 0), "tol_profile": cfg.get("tol_profile", "default"),
           "cap": cfg.get("cap", DEFAULT_CAP)}
    if not isinstance(out["seed"], int) or isinstance(out["seed"], bool):
        _fail("seed must be an integer")
    if out["tol_profile"] not in PROFILES:
        _fail(f"tol_profile must be one of {sorted(PROFILES)}")
    if not isinstance(out["cap"], int) or not 1 <= out["cap"] <= 200:
        _fail("cap must be an integer in 1..200")
    if "iterates" in cfg and "metric" not in cfg:
        _fail("iterates given without a metric")
    if "metric" in cfg:
        out["metric"] = _metric(cfg["metric"]).to_json()
        out["iterates"] = _int_list(cfg.get("iterates", 1), "iterates")
        g = cfg.get("geodesics", 1)
        if not isinstance(g, int) or g < 1:
            _fail("geodesics must be a positive integer")
        out["geodesics"] = g
    if "orientability" in cfg:
        o = cfg["orientability"]
        if isinstance(o, str):
            o = {"loop": o}
        if not isinstance(o, dict) or o.get("loop") not in ("exemplar", "random", "elliptic"):
            _fail("orientability.loop must be 'exemplar', 'random' or 'elliptic'")
        o = dict(o)
        o["iterates"] = _int_list(o.get("iterates", []), "orientability.iterates") if o.get("iterates") else []
        if o["loop"] == "elliptic" and ("m" not in o or "weights" not in o):
            _fail("an elliptic loop needs m and weights")
        if o["loop"] == "random":
            o.setdefault("m", 3)
            o.setdefault("count", 1)
        out["orientability"] = o
    if "ledger" in cfg:
        led = cfg["ledger"]
        if not isinstance(led, dict) or not led.get("cross"):
            _fail("ledger needs a non-empty 'cross' list")
        crosses = led["cross"] if isinstance(led["cross"], list) else [led["cross"]]
        checks = led.get("checks", list(LEDGER_CHECKS))
        if isinstance(checks, str):
            checks = [checks]
        bad = [c for c in checks if c not in LEDGER_CHECKS]
        if bad:
            _fail(f"unknown ledger checks {bad}")
        out["ledger"] = {"cross": [parse_cross(c).label for c in crosses],
                         "_parsed": [[parse_cross(c).tag, parse_cross(c).m] for c in crosses],
                         "checks": sorted(set(checks))}
    if "berger" in cfg:
        b = cfg["berger"]
        if b is True:
            b = {}
        if not isinstance(b, dict):
            _fail("berger must be true or an object")
        if "scenario" in b:
            s = b["scenario"]
            BergerScenario(int(s["n"]), int(s["m"]), int(s["dim_C"]))
            out["berger"] = {"scenario": {"n": int(s["n"]), "m": int(s["m"]), "dim_C": int(s["dim_C"])}}
        else:
            n = b.get("n", [4, 10])
            m = b.get("m", [1, 6])
            if not (isinstance(n, list) and len(n) == 2 and 4 <= n[0] <= n[1]):
                _fail("berger.n must be [n_min, n_max] with n_min >= 4")
            if not (isinstance(m, list) and len(m) == 2 and 1 <= m[0] <= m[1]):
                _fail("berger.m must be [m_min, m_max] with m_min >= 1")
            out["berger"] = {"n": list(n), "m": list(m)}
    return out


# ---------------------------------------------------------------------------
# analyses


def _index_analysis(cfg, rng, tol):
    metric = MetricSpec.from_json(cfg["metric"])
    n = metric.n
    geos = []
    checks = {"closed": True, "parity": True, "increasing": True}
    for _ in range(cfg["geodesics"]):
        rec = closed_geodesic(metric, random_unit_initial(metric, rng), tol=tol)
        checks["closed"] &= bool(rec.closed)
        fg = extract_formal(metric, rec)
        rows = []
        for k in cfg["iterates"]:
            r = index_report(iterate(fg, k), tol=tol)
            rows.append({"iterate": k, "index": r.ind, "nullity": r.nullity,
                         "conjugate_points": [[float(t), int(mu)] for t, mu in r.conjugate_points]})
            checks["parity"] &= r.ind % 2 == (n + 1) % 2
        idx = [r["index"] for r in rows]
        checks["increasing"] &= all(a < b for a, b in zip(idx, idx[1:]))
        geos.append({"p0": rec.p0.tolist(), "v0": rec.v0.tolist(), "period": rec.period,
                     "residual": rec.residual, "iterates": rows})
    return {"metric": cfg["metric"], "n": n, "geodesics": geos,
            "indices": [r["index"] for r in geos[0]["iterates"]], "checks": checks}


def _loop(o, rng):
    if o["loop"] == "exemplar":
        return [exemplar_nonorientable(S=int(o.get("S", 32)))]
    if o["loop"] == "elliptic":
        return [elliptic_loop(int(o["m"]), list(o["weights"]), S=o.get("S"))]
    return [random_elliptic_loop(int(o["m"]), rng) for _ in range(int(o["count"]))]


def _orientability_analysis(o, rng, tol):
    loops = []
    checks = {"transport_matches_spin": True, "iterate_rule": True}
    for L in _loop(o, rng):
        spin = spin_lift_sign(L)
        r = transport_negative_orientation(L, tol=tol)
        entry = {"sign": r.sign, "spin_sign": spin.sign, "winding": spin.winding,
                 "doubling": [c["sign"] for c in r.mesh.get("doubling", [])], "iterates": []}
        checks["transport_matches_spin"] &= r.sign == spin.sign and all(s == r.sign for s in entry["doubling"])
        for q in o["iterates"]:
            pred = iterate_orientability_class(L, q)
            got = transport_negative_orientation(iterate_loop(L, q), verify=False, tol=tol).sign
            entry["iterates"].append({"q": q, "predicted": pred.sign, "transported": got})
            checks["iterate_rule"] &= pred.sign == got
        loops.append(entry)
    return {"loop": o["loop"], "loops": loops, "sign": loops[0]["sign"], "checks": checks}


def _ledger_analysis(led, cap):
    out = {"families": {}, "checks": {}}
    ok_perf = ok_lac = True
    for tag, m in led["_parsed"]:
        c = as_cross(tag, m)
        model = round_model(c, cap=cap)
        target = loopspace_series(c, cap=cap, source="model")
        fam = {"unit_tangent": unit_tangent_cohomology(c).to_json(), "quotient": quotient_cohomology(c).to_json(),
               "minimal_index": minimal_index(c), "indices": [e.index for e in model.entries],
               "series": target.to_json()}
        if "perfectness" in led["checks"]:
            rep = perfectness_check(model, target, cap)
            fam["perfectness"] = {"ok": rep.ok, "first_failure": rep.first_failure}
            ok_perf &= rep.ok
        if "lacunarity" in led["checks"]:
            bad = lacunarity(target, c.n)
            fam["lacunarity_violations"] = bad
            ok_lac &= not bad
        out["families"][c.label] = fam
    if "perfectness" in led["checks"]:
        out["checks"]["perfectness"] = ok_perf
    if "lacunarity" in led["checks"]:
        out["checks"]["lacunarity"] = ok_lac
    return out


def _berger_analysis(b):
    if "scenario" in b:
        traces = [berger_scenario_check(BergerScenario(**b["scenario"]))]
    else:
        traces = berger_sweep(range(b["n"][0], b["n"][1] + 1), range(b["m"][0], b["m"][1] + 1))
    rows, replay_ok, status_ok = [], True, True
    for t in traces:
        sc = t.scenario
        want = CONSISTENT if sc.m == 1 else CONTRADICTION
        rows.append({"n": sc.n, "m": sc.m, "dim_C": sc.dim_C, "status": t.status, "terminal_rule": t.terminal_rule,
                     "notes": list(t.notes)})
        replay_ok &= replay(t)
        status_ok &= t.status == want
    checks = {"replay": replay_ok, "expected_status": status_ok}
    return {"scenarios": rows, "traces": [t.to_json() for t in traces], "checks": checks}


def run_pipeline(config) -> dict:
    """Run the analyses a config asks for and return the report dictionary.

    ``report['ok']`` is True iff every requested check passed.  Module errors
    propagate; ``main`` maps them to exit codes.
    """
    cfg = validate_config(config)
    rng = np.random.default_rng(cfg["seed"])
    tol = get_profile(cfg["tol_profile"])
    report = {"config": {k: v for k, v in cfg.items() if k != "ledger"}, "analyses": {}}
    if "ledger" in cfg:
        report["config"]["ledger"] = {k: v for k, v in cfg["ledger"].items() if not k.startswith("_")}
    if "metric" in cfg:
        log.info("index analysis on %s", cfg["metric"])
        report["analyses"]["index"] = _index_analysis(cfg, rng, tol)
    if "orientability" in cfg:
        log.info("orientability of %s loop", cfg["orientability"]["loop"])
        report["analyses"]["orientability"] = _orientability_analysis(cfg["orientability"], rng, tol)
    if "ledger" in cfg:
        report["analyses"]["ledger"] = _ledger_analysis(cfg["ledger"], cfg["cap"])
    if "berger" in cfg:
        report["analyses"]["berger"] = _berger_analysis(cfg["berger"])
    report["ok"] = all(all(a["checks"].values()) for a in report["analyses"].values())
    return json.loads(json.dumps(report, sort_keys=True))


def dumps_report(report) -> str:
    return json.dumps(report, sort_keys=True, indent=1) + "\n"


def summary(report) -> str:
    lines = []
    an = report.get("analyses", {})
    if "index" in an:
        a = an["index"]
        lines.append(f"index  {a['metric']['family']} n={a['n']}: indices {a['indices']}")
    if "orientability" in an:
        a = an["orientability"]
        lines.append(f"orient {a['loop']}: sign {a['sign']:+d}")
    if "ledger" in an:
        for lab, f in an["ledger"]["families"].items():
            bits = [f"min index {f['minimal_index']}"]
            if "perfectness" in f:
                bits.append("perfect" if f["perfectness"]["ok"] else f"NOT perfect at {f['perfectness']['first_failure']}")
            if "lacunarity_violations" in f:
                bits.append("lacunary" if not f["lacunarity_violations"] else "lacunarity fails")
            lines.append(f"ledger {lab}: " + ", ".join(bits))
    if "berger" in an:
        rows = an["berger"]["scenarios"]
        k = sum(r["status"] == CONTRADICTION for r in rows)
        lines.append(f"berger {len(rows)} scenarios: {k} contradiction, {len(rows) - k} consistent")
    for name, a in an.items():
        for c, ok in sorted(a["checks"].items()):
            lines.append(f"  [{'ok' if ok else 'FAIL'}] {name}.{c}")
    lines.append("PASS" if report.get("ok", True) else "FAIL")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# plot data

CSV_DOCS = {
    "index_vs_iterate.csv": "geodesic, iterate, Morse index, nullity",
    "conjugate_points.csv": "geodesic, iterate, conjugate time t, multiplicity",
    "orientability.csv": "loop, iterate q (1 = the loop itself), transported sign, predicted sign",
    "berger_sweep.csv": "n, m, dim C, terminal status, terminal rule",
}


def _safe(label):
    return re.sub(r"[^A-Za-z0-9]+", "", label)


def emit_plot_data(report, out_dir) -> list:
    """Write one CSV per analysis plus manifest.json; returns the paths written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    an = (report or {}).get("analyses", {})
    tables = {}
    if "index" in an:
        tables["index_vs_iterate.csv"] = (["geodesic", "iterate", "index", "nullity"],
                                          [[g, r["iterate"], r["index"], r["nullity"]]
                                           for g, geo in enumerate(an["index"]["geodesics"]) for r in geo["iterates"]])
        tables["conjugate_points.csv"] = (["geodesic", "iterate", "t", "multiplicity"],
                                          [[g, r["iterate"], t, mu] for g, geo in enumerate(an["index"]["geodesics"])
                                           for r in geo["iterates"] for t, mu in r["conjugate_points"]])
    if "orientability" in an:
        rows = []
        for j, L in enumerate(an["orientability"]["loops"]):
            rows.append([j, 1, L["sign"], L["spin_sign"]])
            rows += [[j, it["q"], it["transported"], it["predicted"]] for it in L["iterates"]]
        tables["orientability.csv"] = (["loop", "q", "sign", "predicted"], rows)
    if "ledger" in an:
        for lab, f in an["ledger"]["families"].items():
            name = f"series_{_safe(lab)}.csv"
            CSV_DOCS.setdefault(name, f"degree q, dim H^q_S1(Lambda {lab}, {lab}; Q)")
            coeffs = f["series"]["coefficients"]
            tables[name] = (["degree", "coefficient"], [[q, a] for q, a in enumerate(coeffs) if a != 0])
    if "berger" in an:
        tables["berger_sweep.csv"] = (["n", "m", "dim_C", "status", "terminal_rule"],
                                      [[r["n"], r["m"], r["dim_C"], r["status"], r["terminal_rule"] or ""]
                                       for r in an["berger"]["scenarios"]])
    written = []
    for name in sorted(tables):
        header, rows = tables[name]
        p = out / name
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
        written.append(p)
    manifest = {"files": [{"name": p.name, "columns": tables[p.name][0], "description": CSV_DOCS[p.name],
                           "rows": len(tables[p.name][1])} for p in written]}
    mp = out / "manifest.json"
    mp.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return written + [mp]


# ---------------------------------------------------------------------------
# command line


def _selftest_config():
    return {"metric": {"family": "round_sphere", "n": 3}, "iterates": [1, 2, 3],
            "orientability": {"loop": "exemplar", "S": 16, "iterates": [2]},
            "ledger": {"cross": ["S^3", "CP^2"], "checks": ["perfectness", "lacunarity"]},
            "berger": {"n": [4, 6], "m": [1, 3]}, "cap": 30}


def build_parser():
    def add_globals(q, default):
        q.add_argument("--config", default=default, help="JSON config file (analyze)")
        q.add_argument("--seed", type=int, default=default, help="random seed")
        q.add_argument("--out", default=default, help="directory for report.json, summary.txt and CSV files")
        q.add_argument("--cap", type=int, default=default, help="degree cap for series")
        q.add_argument("--tol-profile", choices=sorted(PROFILES), default=default, help="numerical tolerance profile")
        q.add_argument("-v", "--verbose", action="store_true", default=default or False)

    p = argparse.ArgumentParser(prog="besselab", description="Index, orientation and loop space ledger checks "
                                                             "for metrics whose geodesics all close up.")
    add_globals(p, None)
    # the same flags are accepted after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    add_globals(common, argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True)
    _add = sub.add_parser
    sub.add_parser = lambda *a, **k: _add(*a, parents=[common], **k)  # noqa: E731
    sub.add_parser("analyze", help="run the analyses listed in --config")
    ix = sub.add_parser("index", help="Morse indices of iterates of an extracted closed geodesic")
    ix.add_argument("--metric", default="round_sphere(2)", help="shorthand such as round_sphere(3), zoll(), "
                                                                "or a JSON metric object")
    ix.add_argument("--iterates", default="1..4")
    ix.add_argument("--geodesics", type=int, default=1)
    ori = sub.add_parser("orientability", help="orientability of the negative bundle along a loop")
    ori.add_argument("--loop", choices=("exemplar", "random", "elliptic"), default="exemplar")
    ori.add_argument("--m", type=int, default=3)
    ori.add_argument("--weights", default="2", help="comma separated rotation weights (elliptic)")
    ori.add_argument("--count", type=int, default=1)
    ori.add_argument("--iterates", default="", help="iterates to check, e.g. 2..3")
    led = sub.add_parser("ledger", help="cohomology tables and perfectness for CROSS families")
    led.add_argument("--cross", action="append", required=True, help="S^n, CP^m, HP^m, CaP^2 (repeatable)")
    led.add_argument("--check", action="append", choices=LEDGER_CHECKS)
    be = sub.add_parser("berger", help="replayable contradiction traces for exceptional families on S^n")
    be.add_argument("--n", default="4..10")
    be.add_argument("--m", default="1..6")
    be.add_argument("--dim-c", type=int, help="single scenario: dim C (needs a single n and m)")
    sub.add_parser("selftest", help="quick end-to-end run of every analysis")
    return p


def _range_arg(text):
    if ".." in text:
        a, b = text.split("..")
        return [int(a), int(b)]
    return [int(text), int(text)]


def config_from_args(args) -> dict:
    if args.command == "analyze":
        if not args.config:
            raise InvalidInput("analyze needs --config")
        try:
            cfg = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise InvalidInput(f"cannot read config: {exc}") from None
        except json.JSONDecodeError as exc:
            raise InvalidInput(f"config is not valid JSON: {exc}") from None
    elif args.config:
        raise InvalidInput("--config is only used by analyze")
    elif args.command == "index":
        metric = args.metric
        if metric.lstrip().startswith("{"):
            metric = json.loads(metric)
        cfg = {"metric": metric, "iterates": args.iterates, "geodesics": args.geodesics}
    elif args.command == "orientability":
        o = {"loop": args.loop, "m": args.m, "count": args.count,
             "weights": [int(w) for w in args.weights.split(",") if w]}
        if args.iterates:
            o["iterates"] = args.iterates
        cfg = {"orientability": o}
    elif args.command == "ledger":
        cfg = {"ledger": {"cross": args.cross, "checks": args.check or list(LEDGER_CHECKS)}}
    elif args.command == "berger":
        if args.dim_c is not None:
            n, m = _range_arg(args.n), _range_arg(args.m)
            if n[0] != n[1] or m[0] != m[1]:
                raise InvalidInput("--dim-c needs a single --n and --m")
            cfg = {"berger": {"scenario": {"n": n[0], "m": m[0], "dim_C": args.dim_c}}}
        else:
            cfg = {"berger": {"n": _range_arg(args.n), "m": _range_arg(args.m)}}
    else:
        cfg = _selftest_config()
    for key, val in (("seed", args.seed), ("cap", args.cap), ("tol_profile", args.tol_profile)):
        if val is not None:
            cfg[key] = val
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        report = run_pipeline(config_from_args(args))
    except (InvalidInput, ValueError, KeyError, TypeError) as exc:
        _error_report(args, "input", exc)
        return EXIT_INPUT
    except NumericalFailure as exc:
        _error_report(args, "numerical", exc)
        return EXIT_NUMERICAL
    except (InvariantFailure, BesseLabError) as exc:
        _error_report(args, "invariant", exc)
        return EXIT_INVARIANT
    text = summary(report)
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(dumps_report(report))
        (out / "summary.txt").write_text(text)
        emit_plot_data(report, out)
    return EXIT_OK if report["ok"] else EXIT_INVARIANT


def _error_report(args, kind, exc):
    err = {"error": {"kind": kind, "type": type(exc).__name__, "message": str(exc)}}
    sys.stderr.write(f"error ({kind}): {type(exc).__name__}: {exc}\n")
    if getattr(args, "out", None):
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "error.json").write_text(json.dumps(err, sort_keys=True, indent=1) + "\n")


if __name__ == "__main__":
    sys.exit(main())
