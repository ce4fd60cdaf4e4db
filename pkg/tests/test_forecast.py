import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hwsupply.data_model import GP, SP, PopulationProjection, Params
from hwsupply.engine import InflowPlan, run
from hwsupply.errors import EmptyValidationWindow, MissingYear, ZeroInflow, ZeroSD
from hwsupply.forecast import (
    FieldGap,
    combine_sd,
    density_gap,
    forecast_sd,
    gap_report,
    gap_significance,
    isodensity,
    stars,
    validation_rmse,
)
from synth import make_instance, stock_table

YEARS = list(range(2016, 2041))


def _pop(label, growth_to_2040):
    vals = {y: 1e6 * (1 + (growth_to_2040 - 1) * (y - 2016) / 24) for y in YEARS}
    return PopulationProjection("AT", label, vals)


def test_constant_population():
    line = isodensity(1000.0, {"baseline": _pop("baseline", 1.0)})
    assert all(v == 1000.0 for v in line.values.values())


def test_population_doubles():
    line = isodensity(1000.0, _pop("baseline", 2.0))
    assert line.values[2040] == pytest.approx(2000.0, rel=1e-12)
    assert line.values[2016] == 1000.0


def test_envelope_brackets_baseline():
    pops = {"low": _pop("low", 0.9), "baseline": _pop("baseline", 1.0), "high": _pop("high", 1.1)}
    line = isodensity(1000.0, pops)
    assert line.envelope[2040] == (pytest.approx(900.0), pytest.approx(1100.0))
    for y in YEARS:
        lo, hi = line.envelope[y]
        assert lo <= line.values[y] <= hi


def test_missing_year():
    pop = _pop("baseline", 1.0)
    del pop.values[2030]
    with pytest.raises(MissingYear):
        isodensity(1000.0, pop)


@given(st.floats(1e-3, 1e6), st.lists(st.floats(0.5, 2.0), min_size=2, max_size=4))
def test_isodensity_homogeneity(c, growth):
    pops = {f"s{k}": _pop(f"s{k}", g) for k, g in enumerate(growth)}
    pops["baseline"] = pops.pop("s0")
    a = isodensity(1234.0, pops)
    scaled = {k: PopulationProjection("AT", k, {y: v * c for y, v in p.values.items()}) for k, p in pops.items()}
    b = isodensity(1234.0, scaled)
    for y in YEARS:
        assert b.values[y] == pytest.approx(a.values[y], rel=1e-12)
        lo, hi = b.envelope[y]
        assert lo <= b.values[y] <= hi
    assert b.values[2016] == 1234.0


def test_rmse_perfect_fit():
    p = Params.minimal(0.75, 0.32)
    stocks, _, _, traj = make_instance(p)
    assert validation_rmse(traj, stocks) == {GP: 0.0, SP: 0.0}


def test_rmse_plus_minus_ten():
    p = Params.minimal(0.75, 0.32)
    _, _, _, traj = make_instance(p, last=2002)
    delta = np.zeros_like(traj.stocks)
    delta[1, 0, 0, 30] = 10.0  # GP in 2001: model exceeds data by 10
    delta[2, 0, 0, 30] = -10.0  # GP in 2002: model below data by 10
    data = stock_table(dataclasses.replace(traj, stocks=traj.stocks - delta))
    rmse = validation_rmse(traj, data)
    assert rmse[GP] == pytest.approx(10.0, rel=1e-9)
    assert rmse[SP] == pytest.approx(0.0, abs=1e-9)


def test_rmse_needs_validation_years():
    p = Params.minimal(0.75, 0.32)
    stocks, rates, plan, _ = make_instance(p, last=2003)
    one = run(stocks, p, rates, plan, 2000, 2000)
    with pytest.raises(EmptyValidationWindow):
        validation_rmse(one, stocks)


def test_forecast_sd_rule():
    assert forecast_sd(5.0, 16, 16) == 5.0
    assert forecast_sd(5.0, 32, 16) == 10.0
    with pytest.raises(ValueError):
        forecast_sd(5.0, 0, 16)


def test_density_gap_examples():
    assert density_gap(1000, 1000, 24, 500) == 0.0
    assert density_gap(1000, 1100, 24, 500) == pytest.approx(-100 / 12000, abs=1e-9)
    assert density_gap(1000, 1100, 24, 500) == pytest.approx(-0.00833, abs=1e-5)
    with pytest.raises(ZeroInflow):
        density_gap(1000, 1100, 24, 0)


@given(st.floats(0, 1e6), st.floats(0, 1e6), st.integers(1, 40), st.floats(1, 1e4))
def test_density_gap_antisymmetry(m, c, t, y):
    assert density_gap(m, c, t, y) == -density_gap(c, m, t, y)


def test_significance_zero_gap():
    s = gap_significance(0.0, 0.1)
    assert s.p == 1.0 and s.stars == ""


def test_significance_boundary():
    # 2.5758293035489 is the two-sided 1% quantile of the standard normal.
    s = gap_significance(2.5758293035489004, 1.0)
    assert s.p == pytest.approx(0.01, rel=1e-9)
    assert stars(0.01) == ""
    assert stars(0.0099) == "*"


def test_significance_example():
    s = gap_significance(-0.11, 0.03)
    assert s.z == pytest.approx(-3.6667, abs=1e-4)
    assert s.p == pytest.approx(2.4e-4, rel=0.05)
    assert s.stars == "**"


def test_zero_sd():
    with pytest.raises(ZeroSD):
        gap_significance(0.1, 0.0)
    g = FieldGap.build("GP", 0.1, 0.0)
    assert g.z is None and g.p is None


def test_quadrature():
    assert combine_sd([3.0, 4.0]) == 5.0
    assert combine_sd([3.0, 12.0]) == pytest.approx(math.sqrt(153), rel=1e-15)


def _report(p=Params.minimal(0.75, 0.32)):
    stocks, rates, plan, _ = make_instance(Params.minimal(0.7, 0.35), seed=3)
    fplan = InflowPlan({**plan.base, **{y: 950.0 for y in range(2017, 2041)}}, plan.entrants, {}, 2016)
    traj = run(stocks, p, rates, fplan, 2000, 2040)
    lines = {f: isodensity(stocks.field_total(f, 2016), _pop("baseline", 1.1), fld=f) for f in traj.fields}
    return gap_report("AT", "minimal", traj, stocks, lines, fplan, 2040), traj, lines


def test_gap_report_consistency():
    rep, traj, lines = _report()
    assert rep.T == 24 and rep.inflow == 950.0
    for g, f in zip(rep.fields, traj.fields):
        assert g.dg == pytest.approx(density_gap(g.model, lines[f].values[2040], 24, 950.0), rel=1e-15)
        assert g.sd == pytest.approx(forecast_sd(g.rmse, 24, 16) / (24 * 950.0), rel=1e-12)
        assert 0 < g.p <= 1
    agg = rep.aggregate
    assert agg.dg == pytest.approx(sum(g.dg for g in rep.fields), rel=1e-12)
    assert agg.sd**2 == pytest.approx(sum(g.sd**2 for g in rep.fields), rel=1e-12)
    js = rep.to_json()
    assert {"country", "model", "fields", "aggregate", "horizon", "gof"} <= set(js)
    assert {"field", "dg", "sd", "z", "p", "stars"} <= set(js["fields"][0])


def test_gap_report_perfect_fit_has_no_p_value():
    truth = Params.minimal(0.7, 0.35)
    rep, _, _ = _report(truth)
    assert all(g.sd == 0.0 and g.p is None for g in rep.fields)


def test_aggregate_gap_is_linear():
    m = np.array([1000.0, 3000.0])
    c = np.array([1100.0, 2900.0])
    parts = [density_gap(mi, ci, 24, 500) for mi, ci in zip(m, c)]
    assert sum(parts) == pytest.approx(density_gap(m.sum(), c.sum(), 24, 500), rel=1e-12)


def test_tiny_p_value_stays_positive():
    s = gap_significance(-50.0, 1.0)
    assert 0 < s.p <= 1e-300
    assert s.stars == "***"
