import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cmprop.metrics import (MetricError, adjusted_r2, mae, mape, metric_report, r2,
                            rape_fractions, relative_errors, rmse)


def test_r2_half():
    # SS_tot = 2, SS_res = 1
    assert r2([1, 2, 3], [1, 2, 4]) == pytest.approx(0.5)


def test_r2_perfect_and_constant():
    assert r2([1, 2, 3], [1, 2, 3]) == 1.0
    with pytest.raises(MetricError):
        r2([2, 2, 2], [1, 2, 3])


def test_adjusted_r2():
    # 1 - 0.1 * 99 / 89
    assert adjusted_r2(0.9, 100, 10) == pytest.approx(0.888764, abs=1e-6)
    with pytest.raises(MetricError):
        adjusted_r2(0.9, 11, 10)


def test_error_metrics():
    y = [30, 30, 40, 40]
    yhat = [33, 27, 44, 36]  # errors 3, 3, 4, 4; each 10 % of its target
    assert rmse(y, yhat) == pytest.approx(math.sqrt(12.5))
    assert mae(y, yhat) == pytest.approx(3.5)
    assert mape(y, yhat) == pytest.approx(0.10)


def test_rae_fractions_strict_thresholds():
    fr = rape_fractions([100, 100], [103, 150])  # 3 % and 50 %
    assert fr == {1.0: 0.0, 5.0: 0.5, 10.0: 0.5, 15.0: 0.5}
    # exactly on the threshold is not "within"
    assert rape_fractions([100], [105], (5,)) == {5.0: 0.0}


def test_relative_errors_needs_positive_targets():
    assert relative_errors([50], [55]).tolist() == pytest.approx([10.0])
    with pytest.raises(MetricError):
        relative_errors([0, 1], [1, 1])


def test_mape_zero_target():
    with pytest.raises(MetricError):
        mape([0, 1], [1, 1])


def test_length_mismatch():
    with pytest.raises(MetricError):
        rmse([1, 2], [1])


def test_metric_report_nan_for_undefined():
    rep = metric_report([1, 1, 1], [1, 2, 3], k=5)
    assert math.isnan(rep.r2) and math.isnan(rep.adjusted_r2)
    assert rep.rmse == pytest.approx(math.sqrt(5 / 3))
    rep = metric_report([30, 30, 40, 40], [33, 27, 44, 36], k=1)
    assert rep.csv_header().split(",")[:3] == ["n", "k", "r2"]
    assert len(rep.csv_row().split(",")) == len(rep.csv_header().split(","))
    assert "mape=0.1" in rep.to_text()


pairs = st.integers(2, 40).flatmap(lambda n: st.tuples(
    st.lists(st.floats(1, 1000), min_size=n, max_size=n),
    st.lists(st.floats(1, 1000), min_size=n, max_size=n)))


@settings(max_examples=80, deadline=None)
@given(pairs)
def test_rmse_at_least_mae(p):
    y, yhat = p
    assert rmse(y, yhat) >= mae(y, yhat) - 1e-9


@settings(max_examples=80, deadline=None)
@given(st.floats(-5, 1), st.integers(3, 200), st.integers(0, 50))
def test_adjusted_never_exceeds_r2(r, n, k):
    if n <= k + 1:
        return
    assert adjusted_r2(r, n, k) <= r + 1e-12
