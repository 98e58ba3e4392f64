import numpy as np
import pytest
from hypothesis import given, strategies as st

from cardiopulm.calibration import LEVELS
from cardiopulm.errors import RemoteError, SchemaError, ValidationError
from cardiopulm.locator import body_mask, lung_mask
from cardiopulm.perception import (FINDINGS, FindingSet, FindingSource, calibrated_score, fetch_findings_remote,
                                   filter_findings, load_calibration, score_findings, signature_statistics)
from cardiopulm.phantom import generate_phantom
from cardiopulm.volume import standardize

from conftest import make_spec


def scored(spec):
    v = standardize(generate_phantom(spec))
    return score_findings(v, lung_mask(v, body_mask(v)))


def test_clean_phantom_retains_nothing(clean_phantom, clean_masks):
    fs = score_findings(clean_phantom, clean_masks[1])
    assert all(s < 0.5 for _, s in fs.findings)
    assert fs.retained == ()


def test_emphysema_calibration():
    hi = scored(make_spec(seed=6, emphysema=0.8)).score("emphysema")
    lo = scored(make_spec(seed=6, emphysema=0.2)).score("emphysema")
    assert hi >= 0.5 and hi > lo


def test_effusion_retained():
    assert "pleural_effusion" in scored(make_spec(seed=8, pleural_effusion=1.0)).retained


def test_scoring_deterministic(clean_phantom, clean_masks):
    assert score_findings(clean_phantom, clean_masks[1]) == score_findings(clean_phantom, clean_masks[1])


def test_missing_lungs(clean_phantom):
    with pytest.raises(ValidationError):
        score_findings(clean_phantom, None)


def test_calibration_constants_shipped():
    cal = load_calibration()
    assert set(cal["findings"]) == set(FINDINGS)
    assert all(c["slope"] > 0 for c in cal["findings"].values())
    assert calibrated_score("emphysema", cal["findings"]["emphysema"]["midpoint"]) == pytest.approx(0.5)


@pytest.fixture(scope="module")
def severity_grid():
    """Signature statistics and scores per finding over 5 severity levels x 10 seeds."""
    out = {}
    for f in FINDINGS:
        stats = np.zeros((10, len(LEVELS)))
        scores = np.zeros_like(stats)
        for k in range(10):
            for j, level in enumerate(LEVELS):
                v = standardize(generate_phantom(make_spec(seed=100 + k, **{f: level})))
                lungs = lung_mask(v, body_mask(v))
                stats[k, j] = signature_statistics(v, lungs)[f]
                scores[k, j] = score_findings(v, lungs).score(f)
        out[f] = stats, scores
    return out


@pytest.mark.slow
@pytest.mark.parametrize("finding", FINDINGS)
def test_signature_monotone_in_severity(severity_grid, finding):
    stats, _ = severity_grid[finding]
    assert np.all(np.diff(stats, axis=1) >= 0)
    assert np.all(np.diff(stats.mean(axis=0)) > 0)


@pytest.mark.slow
@pytest.mark.parametrize("finding", FINDINGS)
def test_score_monotone_in_severity(severity_grid, finding):
    _, scores = severity_grid[finding]
    assert np.all(np.diff(scores, axis=1) >= 0)


# --- filtering ----------------------------------------------------------------------


def test_filter_examples():
    assert filter_findings([("opacity", 0.7), ("nodule", 0.4)]).retained == ("opacity",)
    assert filter_findings([("fibrosis", 0.5)]).retained == ("fibrosis",)
    with pytest.raises(ValidationError):
        filter_findings([("emphysema", 1.2)])
    with pytest.raises(ValidationError):
        filter_findings([("opacity", 0.2), ("opacity", 0.3)])
    with pytest.raises(ValidationError):
        filter_findings([("pneumothorax", 0.3)])


def test_findingset_rejects_inconsistent_retained():
    with pytest.raises(ValidationError):
        FindingSet((("opacity", 0.7),), retained=())


score_lists = st.lists(st.tuples(st.sampled_from(FINDINGS), st.floats(0, 1)), max_size=5,
                       unique_by=lambda p: p[0])


@given(score_lists)
def test_filter_idempotent(pairs):
    once = filter_findings(pairs)
    twice = filter_findings(once.findings)
    assert twice.retained == once.retained
    assert [n for n, _ in once.findings] == [n for n, _ in pairs]
    assert set(once.retained) == {n for n, s in pairs if s >= 0.5}


def test_json_round_trip():
    fs = filter_findings([("opacity", 0.9), ("nodule", 0.2)])
    back = FindingSet.from_json(fs.to_json())
    assert back == fs


# --- remote client --------------------------------------------------------------------


def test_remote_pass_through(stub_server):
    reply, url, state = stub_server
    reply({"findings": [{"name": "opacity", "score": 0.9}]})
    fs = fetch_findings_remote("scan-1", url, "vol/scan-1.nii")
    assert fs.retained == ("opacity",)
    assert fs.source is FindingSource.EXTERNAL_SERVICE
    assert state["requests"] == [{"scan_id": "scan-1", "volume_ref": "vol/scan-1.nii"}]


def test_remote_out_of_range(stub_server):
    reply, url, _ = stub_server
    reply({"findings": [{"name": "opacity", "score": 1.3}]})
    with pytest.raises(SchemaError):
        fetch_findings_remote("scan-1", url)


def test_remote_bad_schema(stub_server):
    reply, url, _ = stub_server
    reply({"items": []})
    with pytest.raises(SchemaError):
        fetch_findings_remote("scan-1", url)
    reply(b"not json")
    with pytest.raises(SchemaError):
        fetch_findings_remote("scan-1", url)


def test_remote_http_error(stub_server):
    reply, url, _ = stub_server
    reply({}, status=503)
    with pytest.raises(RemoteError, match="scan-9"):
        fetch_findings_remote("scan-9", url)


def test_remote_timeout_carries_scan_ref():
    import socket

    srv = socket.socket()
    srv.bind(("127.0.0.1", 0))
    srv.listen(1)  # accepts the connection but never answers
    try:
        with pytest.raises(RemoteError) as info:
            fetch_findings_remote("scan-7", f"http://127.0.0.1:{srv.getsockname()[1]}/", timeout=0.3)
        assert info.value.scan_ref == "scan-7"
    finally:
        srv.close()
