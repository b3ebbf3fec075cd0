import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gafield.metrics import (
    METRICS,
    MetricReport,
    UndefinedMetricError,
    evaluate,
    mae,
    maxae,
    mse,
    r2,
    rel_l1,
    rel_l2,
    reports_table,
)

Y, P = [1.0, 2.0, 3.0], [1.0, 2.0, 5.0]


def test_fixture_values():
    assert mse(P, Y) == 4 / 3
    assert mae(P, Y) == 2 / 3
    assert maxae(P, Y) == 2.0
    assert rel_l2(P, Y) == 2 / math.sqrt(14)
    assert rel_l1(P, Y) == 2 / 6
    assert r2(P, Y) == -1.0


def test_perfect_and_mean_predictors():
    y = np.random.default_rng(0).normal(size=200)
    for name, f in METRICS.items():
        expected = 1.0 if name == "r2" else 0.0
        assert abs(f(y, y) - expected) <= 1e-12
    assert abs(r2(np.full_like(y, y.mean()), y)) <= 1e-12


def test_zero_denominators_are_distinct_errors():
    with pytest.raises(UndefinedMetricError):
        rel_l2([1.0, 2.0], [0.0, 0.0])
    with pytest.raises(UndefinedMetricError):
        rel_l1([1.0], [0.0])
    with pytest.raises(UndefinedMetricError):
        r2([1.0, 2.0], [3.0, 3.0])
    with pytest.raises(ValueError):
        mse([1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        mae([], [])


def test_mse_vs_mae_squared_is_not_an_inequality():
    # equal residuals: mse == mae^2; spread residuals: mse > mae^2; so neither bound holds in reverse
    assert mse([2.0, 3.0], [1.0, 2.0]) == mae([2.0, 3.0], [1.0, 2.0]) ** 2
    assert mse([0.0, 0.0, 0.0, 4.0], [0.0] * 4) > mae([0.0, 0.0, 0.0, 4.0], [0.0] * 4) ** 2


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), c=st.floats(0.1, 100.0), neg=st.booleans())
def test_relative_scale_and_permutation_invariance(seed, c, neg):
    rng = np.random.default_rng(seed)
    y, p = rng.normal(size=30), rng.normal(size=30)
    c = -c if neg else c
    assert rel_l2(c * p, c * y) == pytest.approx(rel_l2(p, y), rel=1e-12)
    assert rel_l1(c * p, c * y) == pytest.approx(rel_l1(p, y), rel=1e-12)
    perm = rng.permutation(30)
    for f in METRICS.values():
        assert f(p[perm], y[perm]) == pytest.approx(f(p, y), rel=1e-12)
    assert maxae(p, y) >= mae(p, y) and r2(p, y) <= 1.0


def test_evaluate_averages_over_samples():
    a = (np.array([1.0, 2.0, 5.0]), np.array([1.0, 2.0, 3.0]))
    b = (np.array([1.0, 2.0, 3.0]), np.array([1.0, 2.0, 3.0]))
    (rep,) = evaluate([a[0], b[0]], [a[1], b[1]])
    assert rep.sample_count == 2
    assert rep.mse == (4 / 3) / 2 and rep.r2 == 0.0


def test_vector_modes():
    rng = np.random.default_rng(1)
    y, p = rng.normal(size=(20, 3)), rng.normal(size=(20, 3))
    (mag,) = evaluate([p], [y], "magnitude")
    assert mag.channel == "magnitude"
    assert mag.rel_l2 == rel_l2(np.linalg.norm(p, axis=1), np.linalg.norm(y, axis=1))
    comps = evaluate([p], [y], "components")
    assert [r.channel for r in comps] == ["cx", "cy", "cz"]
    assert comps[1].mae == mae(p[:, 1], y[:, 1])


def test_report_outputs():
    rep = MetricReport(4 / 3, 2 / 3, 2.0, -1.0, 2 / math.sqrt(14), 1 / 3, 1)
    text = rep.to_csv().splitlines()
    assert text[0] == "mse,mae,maxae,r2,rel_l2,rel_l1,sample_count,channel"
    assert float(text[1].split(",")[0]) == 4 / 3
    table = reports_table([rep])
    assert "53.45%" in table and "33.33%" in table
