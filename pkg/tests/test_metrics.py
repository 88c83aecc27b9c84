import json
import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from demoprog.errors import EmptyInput
from demoprog.metrics import MetricReport, MetricSample, aggregate, fnr, report_from_dict


def samples(ds, area=100.0, eps=0.5):
    return [MetricSample(d, area, eps) for d in ds]


def test_hand_example_all_inliers():
    r = aggregate(samples([0, 0, 3, 4]))
    assert r.mae == 1.75
    assert r.pckh == 1.0
    assert r.maec == 1.75


def test_hand_example_one_outlier():
    s = samples([0, 12])
    assert [x.c for x in s] == [True, False]
    r = aggregate(s)
    assert (r.mae, r.pckh, r.maec) == (6.0, 0.5, 0.0)


def test_perfect_detection():
    r = aggregate(samples([0.0] * 7))
    assert (r.mae, r.pckh, r.maec) == (0.0, 1.0, 0.0)


def test_threshold_boundary_inclusive():
    assert MetricSample(5.0, 100.0, 0.5).c
    assert not MetricSample(5.0 + 1e-9, 100.0, 0.5).c


def test_maec_absent_without_inliers():
    r = aggregate(samples([50, 60]))
    assert r.maec is None and r.pckh == 0.0
    assert "n/a" in r.format_row()


def test_empty_input():
    with pytest.raises(EmptyInput):
        aggregate([])
    with pytest.raises(EmptyInput):
        fnr([])


def test_fnr_counts():
    assert fnr([True, True, False]) == (1, 3)
    assert fnr([True] * 5) == (0, 5)
    assert fnr([True] * 216 + [False] * 3) == (3, 219)


def test_from_points_and_report_json():
    s = MetricSample.from_points((3, 4), (0, 0), 100)
    assert s.d == 5.0
    r = aggregate([s, MetricSample(0, 100)], detections=[True, False])
    d = json.loads(r.to_json())
    assert set(d) == {"mae", "pckh", "maec", "fnrMissed", "fnrTotal", "epsilon", "n"}
    assert (d["fnrMissed"], d["fnrTotal"], d["n"]) == (1, 2, 2)
    assert report_from_dict(d) == r


def test_report_row_shape():
    r = MetricReport(5.8, 0.9, 3.8, 3, 219, 0.5, 1000)
    assert r.format_row() == "         all  MAE 5.8 px  PCKh@0.5 90.0%  MAEc@0.5 3.8 px  FNR 3/219"


dists = st.lists(st.floats(0, 200, allow_nan=False), min_size=1, max_size=40)
areas = st.floats(1.0, 1e4)


@given(dists, areas, st.floats(0.01, 100))
def test_scale_consistency(ds, area, k):
    base = aggregate(samples(ds, area))
    scaled = aggregate(samples([k * d for d in ds], area * k * k))
    assert scaled.pckh == base.pckh
    assert scaled.mae == pytest.approx(k * base.mae, rel=1e-9, abs=1e-9)
    if base.maec is None:
        assert scaled.maec is None
    else:
        assert scaled.maec == pytest.approx(k * base.maec, rel=1e-9, abs=1e-9)


@given(dists, areas, st.floats(0.01, 2.0), st.floats(0.01, 2.0))
def test_pckh_monotone_in_epsilon(ds, area, e1, e2):
    lo, hi = sorted((e1, e2))
    assert aggregate(samples(ds, area, lo)).pckh <= aggregate(samples(ds, area, hi)).pckh


@given(dists, areas, st.floats(0.01, 2.0))
def test_maec_bounded_and_not_above_mae_when_all_in(ds, area, eps):
    r = aggregate(samples(ds, area, eps))
    assert 0 <= r.pckh <= 1
    if r.maec is not None:
        assert r.maec <= eps * math.sqrt(area) + 1e-9
    if r.pckh == 1.0:
        assert r.maec == pytest.approx(r.mae)
