import copy
import json
from importlib import resources

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cardiopulm.errors import SchemaError, ValidationError, VersionMismatchError
from cardiopulm.perception import FINDINGS, filter_findings
from cardiopulm.reasoning import (ELEVATED, EMPTY_RATIONALE, NOT_ELEVATED, ReasoningTrace, default_knowledge_base,
                                  encode_indicators, fetch_reasoning_remote, load_knowledge_base,
                                  parse_knowledge_base, reason, render_rationale)


def kb_json():
    return json.loads(resources.files("cardiopulm").joinpath("data/default_kb.json").read_text())


def findings(**scores):
    return filter_findings(list(scores.items()))


EXAMPLE = dict(opacity=0.9, pleural_effusion=0.8, fibrosis=0.7)


# --- knowledge base ------------------------------------------------------------------


def test_default_kb():
    kb = default_knowledge_base()
    assert sorted(n for n, lv in kb.levels.items() if lv == 0) == sorted(FINDINGS)
    assert kb.d_reason == len(kb.indicator_nodes) == 9
    assert {"hypoxemia", "pulmonary_hypertension", "right_ventricular_overload",
            "right_ventricular_strain"} <= set(kb.levels)
    for e in kb.edges:
        assert kb.levels[e.dst] == kb.levels[e.src] + 1
        assert 0 < e.weight <= 1


def test_load_from_file(tmp_path):
    (tmp_path / "kb.json").write_text(json.dumps(kb_json()))
    assert load_knowledge_base(tmp_path / "kb.json") == default_knowledge_base()


def test_level_order_violation():
    obj = kb_json()
    obj["edges"].append({"from": "hypoxemia", "to": "nodule", "weight": 0.5})
    with pytest.raises(ValidationError, match="level order"):
        parse_knowledge_base(obj)


def test_level_skip_rejected():
    obj = kb_json()
    obj["edges"].append({"from": "nodule", "to": "pulmonary_hypertension", "weight": 0.5})
    with pytest.raises(ValidationError, match="level order"):
        parse_knowledge_base(obj)


def test_cycle_rejected():
    obj = kb_json()
    obj["edges"].append({"from": "pulmonary_hypertension", "to": "hypoxemia", "weight": 0.5})
    with pytest.raises(ValidationError, match="cycle"):
        parse_knowledge_base(obj)


@pytest.mark.parametrize("w", [0.0, -0.2, 1.5])
def test_bad_weight(w):
    obj = kb_json()
    obj["edges"][0]["weight"] = w
    with pytest.raises(ValidationError):
        parse_knowledge_base(obj)


def test_unknown_finding_node():
    obj = kb_json()
    obj["nodes"].append({"name": "pneumothorax", "level": 0})
    with pytest.raises(ValidationError, match="unknown finding"):
        parse_knowledge_base(obj)


# --- inference ------------------------------------------------------------------------


def test_example_case():
    t = reason(findings(**EXAMPLE))
    assert t.judgment == ELEVATED
    assert t.activation("right_ventricular_strain") >= 0.5
    for word in ("hypoxemia", "venous return", "right ventricular strain"):
        assert word in t.rationale.lower()


def test_empty_trace():
    t = reason(findings(opacity=0.2))
    assert t.chains == ()
    assert not any(t.indicator_vector)
    assert t.judgment == NOT_ELEVATED
    assert t.rationale == EMPTY_RATIONALE == ""
    assert np.array_equal(encode_indicators(t), np.zeros(default_knowledge_base().d_reason))


def test_unit_weights_propagate_exactly():
    obj = kb_json()
    for e in obj["edges"]:
        e["weight"] = 1.0
    t = reason(findings(emphysema=1.0), parse_knowledge_base(obj))
    assert t.activation("hypoxemia") == 1.0
    assert t.activation("pulmonary_hypertension") == 1.0


def tiny_kb(edges):
    return parse_knowledge_base({
        "version": "tiny",
        "nodes": [{"name": "opacity", "level": 0}, {"name": "emphysema", "level": 0},
                  {"name": "m", "level": 1}, {"name": "e", "level": 2}],
        "edges": edges,
    })


def test_product_rule():
    kb = tiny_kb([{"from": "opacity", "to": "m", "weight": 0.9}, {"from": "m", "to": "e", "weight": 0.9}])
    t = reason(findings(opacity=0.8), kb)
    assert encode_indicators(t)[1] == pytest.approx(0.648, abs=1e-12)


def test_max_rule():
    kb = tiny_kb([{"from": "opacity", "to": "m", "weight": 0.5}, {"from": "emphysema", "to": "m", "weight": 1.0},
                  {"from": "m", "to": "e", "weight": 1.0}])
    t = reason(findings(opacity=0.6, emphysema=0.6), kb)
    assert encode_indicators(t)[0] == pytest.approx(0.6)


def test_and_group_is_min():
    t = reason(findings(pleural_effusion=1.0, emphysema=0.6))
    kb = default_knowledge_base()
    w = {(e.src, e.dst): e.weight for e in kb.edges}
    rvr = 1.0 * w[("pleural_effusion", "reduced_venous_return")]
    hyp = 0.6 * w[("emphysema", "hypoxemia")]
    want = min(rvr * w[("reduced_venous_return", "right_ventricular_overload")],
               hyp * w[("hypoxemia", "right_ventricular_overload")])
    assert t.activation("right_ventricular_overload") == pytest.approx(want)
    # one arm alone does not fire the junction
    assert reason(findings(pleural_effusion=1.0)).activation("right_ventricular_overload") == 0.0


def test_chains_sorted_and_rooted():
    t = reason(findings(**EXAMPLE, emphysema=0.6))
    acts = [c.activation for c in t.chains]
    assert acts == sorted(acts, reverse=True)
    kb = default_knowledge_base()
    for c in t.chains:
        assert kb.levels[c.nodes[0]] == 0 and kb.levels[c.nodes[-1]] == 3
        assert [kb.levels[n] for n in c.nodes] == [0, 1, 2, 3]


def test_encode_version_checks():
    t = reason(findings(**EXAMPLE))
    with pytest.raises(VersionMismatchError):
        encode_indicators(t, expected_version="other")
    with pytest.raises(VersionMismatchError):
        encode_indicators(t, expected_dim=11)


def test_rationale_deterministic_and_rerenderable():
    t = reason(findings(**EXAMPLE))
    assert reason(findings(**EXAMPLE)).rationale == t.rationale
    assert render_rationale(t, seed=dict(EXAMPLE)) == t.rationale
    assert render_rationale(reason(findings())) == EMPTY_RATIONALE


def test_trace_json_round_trip():
    t = reason(findings(**EXAMPLE))
    assert ReasoningTrace.from_json(json.loads(json.dumps(t.to_json()))) == t


def test_trace_requires_rationale_with_chains():
    obj = reason(findings(**EXAMPLE)).to_json()
    obj["rationale"] = ""
    with pytest.raises(ValidationError):
        ReasoningTrace.from_json(obj)


def test_trace_rejects_rationale_without_chains():
    obj = reason(findings()).to_json()
    obj["rationale"] = "text with nothing behind it"
    with pytest.raises(ValidationError):
        ReasoningTrace.from_json(obj)


# --- properties --------------------------------------------------------------------------

score = st.floats(0, 1)
finding_maps = st.fixed_dictionaries({}, optional={f: score for f in FINDINGS})


@given(finding_maps, finding_maps)
@settings(max_examples=1000)
def test_monotone_under_inclusion(a, b):
    small = a
    large = {**a, **{k: v for k, v in b.items() if k not in a}}
    for k in a:  # larger set may also raise scores
        large[k] = max(a[k], b.get(k, 0.0))
    lo = reason(findings(**small)).indicator_vector
    hi = reason(findings(**large)).indicator_vector
    assert all(x <= y for x, y in zip(lo, hi))


@given(finding_maps)
@settings(max_examples=300)
def test_soundness_and_judgment(scores):
    t = reason(findings(**scores))
    kb = default_knowledge_base()
    reachable = set(findings(**scores).retained)
    for _ in range(3):
        reachable |= {e.dst for e in kb.edges if e.src in reachable}
    for name, value in zip(t.indicator_names, t.indicator_vector):
        assert 0.0 <= value <= 1.0
        if value > 0:
            assert name in reachable
    assert {n for c in t.chains for n in c.nodes} <= reachable
    top = max(v for n, v in zip(t.indicator_names, t.indicator_vector) if kb.levels[n] == 3)
    assert (t.judgment == ELEVATED) == (top >= 0.5)
    for node in (n for n in t.indicator_names if kb.levels[n] == 3):
        ending = [c.activation for c in t.chains if c.nodes[-1] == node]
        assert t.activation(node) == (max(ending) if ending else 0.0)
    assert bool(t.chains) == bool(t.rationale)


@given(finding_maps)
def test_deterministic_bitwise(scores):
    a, b = reason(findings(**scores)), reason(findings(**scores))
    assert json.dumps(a.to_json()) == json.dumps(b.to_json())


# --- remote ---------------------------------------------------------------------------------


def test_remote_accepts_valid_trace(stub_server):
    reply, url, state = stub_server
    local = reason(findings(**EXAMPLE))
    reply(local.to_json())
    t = fetch_reasoning_remote(findings(**EXAMPLE), url)
    assert t.source == "external_service"
    assert t.indicator_vector == local.indicator_vector
    assert state["requests"][0]["kb_version"] == default_knowledge_base().version
    assert {f["name"] for f in state["requests"][0]["findings"]} == set(EXAMPLE)


def test_remote_dimension_mismatch(stub_server):
    reply, url, _ = stub_server
    body = reason(findings(**EXAMPLE)).to_json()
    body["indicator_vector"] = body["indicator_vector"][:-1]
    reply(body)
    with pytest.raises(SchemaError, match="dimension"):
        fetch_reasoning_remote(findings(**EXAMPLE), url)


def test_remote_missing_rationale(stub_server):
    reply, url, _ = stub_server
    body = copy.deepcopy(reason(findings(**EXAMPLE)).to_json())
    del body["rationale"]
    reply(body)
    with pytest.raises(SchemaError, match="rationale"):
        fetch_reasoning_remote(findings(**EXAMPLE), url)


def test_remote_rationale_without_chains(stub_server):
    reply, url, _ = stub_server
    body = reason(findings(opacity=0.2)).to_json()
    body["rationale"] = "unsupported claim"
    reply(body)
    with pytest.raises(SchemaError, match="rationale"):
        fetch_reasoning_remote(findings(opacity=0.2), url)
