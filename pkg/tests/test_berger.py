import json

import pytest
from hypothesis import given, settings, strategies as st

from besselab.berger import (
    CONSISTENT,
    CONTRADICTION,
    TERMINAL_RULES,
    BergerScenario,
    berger_scenario_check,
    berger_sweep,
    replay,
    trace_from_json,
)
from besselab.errors import InvalidInput


def test_single_exceptional_scenario_reaches_smith():
    t = berger_scenario_check(BergerScenario(4, 2, 5))
    assert t.status == CONTRADICTION and t.terminal_rule == "smith"
    assert [s.rule for s in t.steps] == ["minimality", "symplectic_lower", "perfectness_caps", "equality_gap",
                                         "integral_transfer", "smith"]
    assert t.steps[0].conclusion["index_C"] == 3
    assert replay(t)


def test_odd_dimension_large_family_uses_second_family():
    t = berger_scenario_check(BergerScenario(5, 2, 7))
    assert t.status == CONTRADICTION and t.terminal_rule == "series_cap"
    assert t.steps[-1].rule == "second_family"
    assert t.steps[-1].conclusion["both_violate"]


def test_prime_case_is_consistent():
    for n in range(4, 11):
        t = berger_scenario_check(BergerScenario(n, 1, 2 * n - 1))
        assert t.status == CONSISTENT and t.terminal_rule is None
        assert replay(t)


def test_sweep():
    traces = berger_sweep()
    for t in traces:
        sc = t.scenario
        if sc.m == 1:
            assert t.status == CONSISTENT
        else:
            assert sc.dim_C % 2 == 1 and sc.dim_C <= 2 * sc.n - 3
            assert t.status == CONTRADICTION and t.terminal_rule in TERMINAL_RULES
        assert replay(t)
        assert replay(trace_from_json(t.dumps()))


def test_sweep_size():
    traces = berger_sweep(range(4, 11), range(1, 7))
    # one prime scenario per n, plus (n - 1) odd dimensions for each m = 2..6
    assert len(traces) == sum(1 + 5 * (n - 1) for n in range(4, 11))


def test_replay_detects_tampering():
    t = berger_scenario_check(BergerScenario(6, 3, 7))
    d = t.to_json()
    d["steps"][2]["conclusion"]["upper"][0] = 7
    assert not replay(trace_from_json(d))
    d = t.to_json()
    d["steps"][1]["rule"] = "wishful"
    assert not replay(trace_from_json(d))
    d = t.to_json()
    d["terminal_rule"] = "hand_waving"
    assert not replay(trace_from_json(d))


def test_trace_json_is_deterministic():
    a = berger_scenario_check(BergerScenario(7, 2, 5)).dumps()
    b = berger_scenario_check(BergerScenario(7, 2, 5)).dumps()
    assert a == b
    assert json.loads(a)["scenario"] == {"n": 7, "m": 2, "dim_C": 5}


@pytest.mark.parametrize("args", [(3, 2, 1), (4, 2, 2), (4, 2, 7), (4, 1, 5), (4, 0, 7), (4, 2, -1)])
def test_invalid_scenarios(args):
    with pytest.raises(InvalidInput):
        BergerScenario(*args)


def test_covering_notes_are_recorded():
    # the even branch at d = 2n - 3 needs the duality covering and sees a
    # nonzero transferred group in degree n
    t = berger_scenario_check(BergerScenario(4, 2, 5))
    assert any("covering" in s for s in t.notes)
    assert any("[4]" in s for s in t.notes)
    assert berger_scenario_check(BergerScenario(5, 3, 3)).notes == []


@settings(max_examples=40, deadline=None)
@given(st.integers(4, 12), st.integers(2, 8), st.data())
def test_exceptional_scenarios_always_contradict(n, m, data):
    d = data.draw(st.sampled_from(range(1, 2 * n - 2, 2)))
    t = berger_scenario_check(BergerScenario(n, m, d))
    assert t.status == CONTRADICTION
    assert replay(t)
