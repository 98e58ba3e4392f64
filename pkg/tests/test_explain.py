import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cardiopulm.cardiac import CHANNELS, extract_cardiac_features
from cardiopulm.errors import ValidationError, VersionMismatchError
from cardiopulm.explain import attribute_indicators, attribute_input, project_cardiac_attribution
from cardiopulm.fusion import ModelParams, init_params, logits
from cardiopulm.perception import filter_findings
from cardiopulm.reasoning import default_knowledge_base, reason
from cardiopulm.volume import CtVolume, IntensityState

KB = default_knowledge_base()
BLOCKS = [("cardiac", 32), ("reasoning", KB.d_reason), ("lung", 6)]
D_IN = sum(d for _, d in BLOCKS)


def head(seed, hidden=16, linear=False):
    rng = np.random.default_rng(seed)
    sizes = [D_IN, 1] if linear else [D_IN, hidden, 1]
    p = init_params(sizes, seed, rng.normal(size=D_IN), rng.uniform(0.5, 2, D_IN), blocks=BLOCKS,
                    kb_version=KB.version)
    p.biases = [rng.normal(scale=0.2, size=b.shape) for b in p.biases]
    return p


@given(st.integers(0, 2 ** 31), st.lists(st.floats(-3, 3), min_size=D_IN, max_size=D_IN))
@settings(max_examples=50)
def test_linear_completeness(seed, x):
    a = attribute_input(head(seed, linear=True), np.array(x))
    assert a.exact
    assert a.values.sum() + a.baseline_logit == pytest.approx(a.logit, abs=1e-9)
    assert sum(a.block_sums().values()) == pytest.approx(a.values.sum(), abs=1e-12)


def test_zero_input_and_zero_dims():
    p = head(1)
    assert not np.any(attribute_input(p, np.zeros(D_IN)).values)
    x = np.random.default_rng(2).normal(size=D_IN)
    x[[3, 40, 45]] = 0.0
    a = attribute_input(p, x)
    assert a.values[[3, 40, 45]].tolist() == [0.0, 0.0, 0.0]
    assert not a.exact and a.to_json()["first_order_only"]


def test_dimension_mismatch():
    with pytest.raises(ValidationError):
        attribute_input(head(0), np.zeros(D_IN - 1))


@pytest.mark.parametrize("seed", range(5))
def test_ablate_and_compare(seed):
    p = head(seed)
    rng = np.random.default_rng(seed + 100)
    x = rng.normal(size=D_IN)
    i = 32 + seed  # a reasoning indicator
    x[i] = 1e-3
    a = attribute_input(p, x)
    x0 = x.copy()
    x0[i] = 0.0
    assert attribute_input(p, x0).values[i] == 0.0
    change = logits(p, x)[0] - logits(p, x0)[0]
    assert abs(change - a.values[i]) <= 1e-3


def toy_roi():
    a = np.full((10, 10, 10), 40.0, dtype=np.float32)
    a[2:4, 2:4, 2:4] = 500.0  # calcified block
    a[7:9, 7:9, 7:9] = -100.0  # fat block
    return CtVolume(a, (1.5, 1.5, 1.5), IntensityState.CLIPPED_HU)


def test_heat_on_calcification_only():
    roi = toy_roi()
    fv = extract_cardiac_features(roi)
    attr = np.zeros(32)
    attr[CHANNELS.index("calc_volume_fraction")] = 2.0
    heat = project_cardiac_attribution(attr, fv, roi).voxels
    assert np.array_equal(heat != 0, roi.voxels >= 130)
    assert heat.sum() == pytest.approx(2.0, abs=1e-9)


@given(st.lists(st.floats(-5, 5), min_size=32, max_size=32))
@settings(max_examples=30, deadline=None)
def test_heat_conserves_mass(attr):
    roi = toy_roi()
    fv = extract_cardiac_features(roi)
    attr = np.array(attr)
    nonempty = np.array([s.size > 0 for s in fv.voxel_support])
    heat = project_cardiac_attribution(attr, fv, roi).voxels
    assert abs(heat.sum() - attr[nonempty].sum()) <= 1e-9


def test_heat_zero_and_errors():
    roi = toy_roi()
    fv = extract_cardiac_features(roi)
    assert not project_cardiac_attribution(np.zeros(32), fv, roi).voxels.any()
    with pytest.raises(ValidationError):
        project_cardiac_attribution(np.zeros(32), extract_cardiac_features(roi, with_support=False), roi)
    with pytest.raises(ValidationError):
        project_cardiac_attribution(np.zeros(31), fv, roi)


def example_trace():
    return reason(filter_findings([("opacity", 0.9), ("pleural_effusion", 0.8), ("fibrosis", 0.7)]))


def fused(trace, seed=0):
    rng = np.random.default_rng(seed)
    return np.concatenate([rng.normal(size=32), trace.indicator_vector, rng.uniform(0, 0.2, 6)])


@pytest.mark.parametrize("seed", range(4))
def test_top_mechanisms_from_active_chains(seed):
    trace = example_trace()
    p = head(seed)
    out = attribute_indicators(attribute_input(p, fused(trace, seed)), trace, p, top_k=3)
    on_chain = {n for c in trace.chains for n in c.nodes}
    assert out["top"] and all(m["name"] in on_chain for m in out["top"])
    assert "[" in out["annotated_rationale"]


def test_inactive_indicator_zero_attribution():
    trace = reason(filter_findings([("fibrosis", 0.9)]))
    p = head(3)
    out = attribute_indicators(attribute_input(p, fused(trace)), trace, p)
    for m in out["mechanisms"]:
        if m["activation"] == 0.0:
            assert m["attribution"] == 0.0


def test_indicator_annotation_deterministic_and_versioned():
    trace = example_trace()
    p = head(1)
    a = attribute_indicators(attribute_input(p, fused(trace)), trace, p)
    assert a == attribute_indicators(attribute_input(p, fused(trace)), trace, p)
    p.kb_version = "other-kb"
    with pytest.raises(VersionMismatchError):
        attribute_indicators(attribute_input(p, fused(trace)), trace, p)
