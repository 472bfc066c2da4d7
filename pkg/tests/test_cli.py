import csv
import json

import pytest

from besselab.cli import emit_plot_data, main, parse_cross, run_pipeline, validate_config
from besselab.errors import InvalidInput


def _rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_round_sphere_pipeline_indices():
    rep = run_pipeline({"metric": {"family": "round_sphere", "n": 3}, "iterates": "1..4"})
    assert rep["analyses"]["index"]["indices"] == [2, 6, 10, 14]
    assert rep["ok"]


def test_metric_shorthand_and_zoll():
    rep = run_pipeline({"metric": "zoll()", "iterates": [1, 2], "seed": 4})
    assert rep["analyses"]["index"]["indices"] == [1, 3]
    assert rep["analyses"]["index"]["checks"]["parity"]


def test_exemplar_orientability():
    rep = run_pipeline({"orientability": {"loop": "exemplar", "S": 16, "iterates": [2, 3]}})
    a = rep["analyses"]["orientability"]
    assert a["sign"] == -1
    assert [(i["q"], i["predicted"]) for i in a["loops"][0]["iterates"]] == [(2, 1), (3, -1)]
    assert rep["ok"]


def test_pipeline_is_deterministic():
    cfg = {"metric": "round_sphere(2)", "iterates": 2, "orientability": {"loop": "random", "count": 2},
           "seed": 11, "ledger": {"cross": "S^3"}, "cap": 12}
    a = json.dumps(run_pipeline(cfg), sort_keys=True)
    b = json.dumps(run_pipeline(cfg), sort_keys=True)
    assert a == b


@pytest.mark.parametrize("cfg", [
    [],
    {"metrc": "round_sphere(2)"},
    {"metric": 3},
    {"metric": "round_sphere(2)", "iterates": [0]},
    {"iterates": [1]},
    {"ledger": {"cross": ["RP^2"]}},
    {"ledger": {"cross": ["S^3"], "checks": ["beauty"]}},
    {"berger": {"n": [3, 5]}},
    {"berger": {"scenario": {"n": 4, "m": 2, "dim_C": 6}}},
    {"tol_profile": "loose"},
])
def test_malformed_configs_are_rejected(cfg):
    with pytest.raises(InvalidInput):
        validate_config(cfg)


def test_parse_cross():
    assert parse_cross("S^4").label == "S^4"
    assert parse_cross("S5").label == "S^5"
    assert parse_cross("CaP^2").tag == "CaP2"
    assert parse_cross("HP:3").label == "HP^3"
    with pytest.raises(InvalidInput):
        parse_cross("CaP^3")


def test_emit_plot_data(tmp_path):
    rep = run_pipeline({"metric": "round_sphere(3)", "iterates": 3, "ledger": {"cross": ["S^3"]}, "cap": 8,
                        "berger": {"n": [4, 4], "m": [1, 2]}})
    paths = emit_plot_data(rep, tmp_path)
    names = sorted(p.name for p in paths)
    assert names == ["berger_sweep.csv", "conjugate_points.csv", "index_vs_iterate.csv", "manifest.json",
                     "series_S3.csv"]
    assert _rows(tmp_path / "index_vs_iterate.csv")[:4] == [["geodesic", "iterate", "index", "nullity"],
                                                           ["0", "1", "2", "4"], ["0", "2", "6", "4"],
                                                           ["0", "3", "10", "4"]]
    assert _rows(tmp_path / "series_S3.csv")[:4] == [["degree", "coefficient"], ["2", "1"], ["4", "2"], ["6", "2"]]
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert {f["name"] for f in man["files"]} == set(names) - {"manifest.json"}
    b = _rows(tmp_path / "berger_sweep.csv")
    assert b[0] == ["n", "m", "dim_C", "status", "terminal_rule"]
    assert ["4", "1", "7", "CONSISTENT", ""] in b


def test_empty_report_gives_only_manifest(tmp_path):
    paths = emit_plot_data({}, tmp_path / "e")
    assert [p.name for p in paths] == ["manifest.json"]
    assert json.loads(paths[0].read_text()) == {"files": []}


def test_exit_codes(tmp_path, capsys):
    assert main(["berger", "--n", "4..5", "--m", "1..3"]) == 0
    assert main(["berger", "--n", "4", "--m", "2", "--dim-c", "5", "--out", str(tmp_path / "b")]) == 0
    trace = json.loads((tmp_path / "b" / "report.json").read_text())["analyses"]["berger"]["traces"][0]
    assert trace["terminal_rule"] == "smith"
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["analyze", "--config", str(bad)]) == 2
    bad.write_text(json.dumps({"metric": "round_sphere(3)", "colour": 1}))
    assert main(["analyze", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert json.loads((tmp_path / "x" / "error.json").read_text())["error"]["kind"] == "input"
    assert main(["ledger"]) == 2
    assert main(["berger", "--n", "4", "--m", "2", "--dim-c", "4"]) == 2
    capsys.readouterr()


def test_analyze_writes_byte_identical_reports(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"metric": {"family": "round_sphere", "n": 2}, "iterates": [1, 2, 3],
                               "ledger": {"cross": ["CP^2", "S^4"], "checks": "perfectness"}, "cap": 20}))
    assert main(["analyze", "--config", str(cfg), "--seed", "3", "--out", str(tmp_path / "a")]) == 0
    assert main(["--seed", "3", "--out", str(tmp_path / "b"), "analyze", "--config", str(cfg)]) == 0
    for name in ("report.json", "index_vs_iterate.csv", "series_CP2.csv", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_numerical_failure_exit_code(monkeypatch, tmp_path):
    import besselab.cli as cli
    from besselab.errors import NotClosed

    def boom(*a, **k):
        raise NotClosed("no return")

    monkeypatch.setattr(cli, "closed_geodesic", boom)
    assert main(["index", "--metric", "round_sphere(2)"]) == 3


def test_invariant_failure_exit_code(monkeypatch):
    import besselab.cli as cli

    monkeypatch.setattr(cli, "lacunarity", lambda s, n: [1])
    assert main(["ledger", "--cross", "S^3", "--check", "lacunarity", "--cap", "10"]) == 1


def test_selftest_passes(capsys):
    assert main(["selftest"]) == 0
    assert capsys.readouterr().out.strip().endswith("PASS")
