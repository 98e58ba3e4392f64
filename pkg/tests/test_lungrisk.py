import math

import pytest
from hypothesis import given, strategies as st

from cardiopulm.errors import SchemaError, ValidationError
from cardiopulm.lungrisk import (T, RiskTrajectory, SurrogateParams, default_surrogate, estimate_trajectory,
                                 load_trajectory_file)
from cardiopulm.perception import FINDINGS, filter_findings


def sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


def test_baseline_curve():
    p = default_surrogate()
    tr = estimate_trajectory(filter_findings([]))
    want = [sigmoid(p.intercept + p.slope_per_year * (t - 1)) for t in range(1, 7)]
    assert tr.values == pytest.approx(want, abs=1e-15)
    assert all(b > a for a, b in zip(tr.values, tr.values[1:]))
    assert tr.source == "surrogate"
    assert tr.horizon_years == (1, 2, 3, 4, 5, 6)


def test_nodule_raises_every_year():
    lo = estimate_trajectory(filter_findings([("nodule", 0.0), ("opacity", 0.3)]))
    hi = estimate_trajectory(filter_findings([("nodule", 1.0), ("opacity", 0.3)]))
    assert len(hi.values) == T == 6
    assert all(h > l for h, l in zip(hi.values, lo.values))


def test_frozen_constants_positive():
    p = default_surrogate()
    assert p.slope_per_year > 0
    assert set(p.coefficients) == {"nodule", "opacity", "fibrosis", "emphysema"}
    assert all(c > 0 for c in p.coefficients.values())
    with pytest.raises(ValidationError):
        SurrogateParams(-4.0, 0.0, {})
    with pytest.raises(SchemaError):
        SurrogateParams.from_json({"intercept": 1.0})


def test_trajectory_invariants():
    with pytest.raises(ValidationError):
        RiskTrajectory((0.1,) * 5)
    with pytest.raises(ValidationError):
        RiskTrajectory((0.1, 0.2, 0.3, 0.2, 0.4, 0.5))
    with pytest.raises(ValidationError):
        RiskTrajectory((0.1, 0.2, 0.3, 0.4, 0.5, 1.2))


def write_csv(tmp_path, rows):
    path = tmp_path / "traj.csv"
    path.write_text("scan_id,y1,y2,y3,y4,y5,y6\n" + "".join(",".join(map(str, r)) + "\n" for r in rows))
    return path


def test_file_row_as_given(tmp_path):
    path = write_csv(tmp_path, [("s1", 0.01, 0.02, 0.03, 0.05, 0.07, 0.10)])
    tr = load_trajectory_file(path, "s1")
    assert tr.values == (0.01, 0.02, 0.03, 0.05, 0.07, 0.10)
    assert tr.source == "file"


def test_file_non_monotone_and_repair(tmp_path):
    path = write_csv(tmp_path, [("s2", 0.01, 0.02, 0.06, 0.05, 0.07, 0.10)])
    with pytest.raises(ValidationError, match="non-monotone"):
        load_trajectory_file(path, "s2")
    assert load_trajectory_file(path, "s2", repair=True).values == (0.01, 0.02, 0.06, 0.06, 0.07, 0.10)


def test_file_errors(tmp_path):
    path = write_csv(tmp_path, [("s3", 0.01, 1.5, 1.5, 1.5, 1.5, 1.5)])
    with pytest.raises(ValidationError):
        load_trajectory_file(path, "s3")
    with pytest.raises(ValidationError, match="no trajectory"):
        load_trajectory_file(path, "missing")
    (tmp_path / "bad.csv").write_text("scan_id,y1\ns1,0.1\n")
    with pytest.raises(SchemaError):
        load_trajectory_file(tmp_path / "bad.csv", "s1")


scores = st.fixed_dictionaries({f: st.floats(0, 1) for f in FINDINGS})


@given(scores, st.sampled_from(["nodule", "opacity", "fibrosis", "emphysema"]), st.floats(0, 1))
def test_surrogate_monotone_in_scores(base, which, bump):
    raised = dict(base, **{which: max(base[which], bump)})
    lo = estimate_trajectory(filter_findings(list(base.items())))
    hi = estimate_trajectory(filter_findings(list(raised.items())))
    assert all(h >= l for h, l in zip(hi.values, lo.values))
    assert all(0.0 <= v <= 1.0 for v in hi.values)
    assert all(b >= a for a, b in zip(hi.values, hi.values[1:]))
    assert estimate_trajectory(filter_findings(list(base.items()))) == lo
