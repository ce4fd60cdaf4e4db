import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hwsupply.calibrate import (
    ALL_YEARS,
    Objective,
    calibrate_extended,
    chi2_from_totals,
    fit_extended,
    gof_chi2,
    grid_points,
    grid_search,
    project_simplex,
)
from hwsupply.data_model import EXTENDED_FIELDS, GP, SP, Params, StockTable
from hwsupply.engine import run
from hwsupply.errors import ZeroObservedTotal
from synth import make_instance, stock_table


def test_chi2_perfect_fit():
    z = np.array([[100.0, 300.0]])
    assert chi2_from_totals(z, z) == 0.0


def test_chi2_hand_example():
    # w = (0.25, 0.75); 0.25 * 0.1^2 + 0.75 * (10/300)^2
    z = np.array([[100.0, 300.0]])
    m = np.array([[90.0, 310.0]])
    oracle = 0.25 * 0.1**2 + 0.75 * (10 / 300) ** 2
    assert chi2_from_totals(m, z) == pytest.approx(0.0033333333333, abs=1e-6)
    assert chi2_from_totals(m, z) == pytest.approx(oracle, rel=1e-12)


def test_chi2_single_field():
    assert chi2_from_totals(np.array([[80.0]]), np.array([[100.0]])) == pytest.approx(0.04, rel=1e-12)


def test_gof_uses_final_year_by_default():
    p = Params.minimal(0.75, 0.32)
    stocks, rates, plan, traj = make_instance(p)
    assert gof_chi2(traj, stocks) == 0.0
    off = run(stocks, Params.minimal(0.5, 0.32), rates, plan, 2000, 2016)
    final = gof_chi2(off, stocks)
    assert final > 0
    assert gof_chi2(off, stocks, [2016]) == final
    assert gof_chi2(off, stocks, list(range(2001, 2017))) > final


def test_zero_observed_total():
    p = Params.minimal(0.75, 0.32)
    stocks, rates, plan, traj = make_instance(p, last=2003)
    entries = {k: (0.0 if k[0] == SP and k[3] == 2003 else v) for k, v in stocks.entries.items()}
    with pytest.raises(ZeroObservedTotal):
        gof_chi2(traj, StockTable("XX", entries))


def test_grid_points():
    assert grid_points(0.01)[37] == 0.37
    assert len(grid_points(0.25)) == 5
    with pytest.raises(ValueError):
        grid_points(0.03)


def test_grid_recovers_generator():
    truth = Params.minimal(0.75, 0.32)
    stocks, rates, plan, _ = make_instance(truth)
    surface = grid_search(stocks, rates, plan, 2000)
    assert surface.argmin == truth
    assert surface.chi2_min == 0.0
    assert surface.chi2.shape == (101, 101)


def test_surface_matches_single_runs_bit_exactly():
    truth = Params.minimal(0.61, 0.47)
    stocks, rates, plan, _ = make_instance(truth, seed=5)
    surface = grid_search(stocks, rates, plan, 2000, step=0.05)
    for i, j in [(3, 17), (20, 0), (0, 20), (12, 9)]:
        p = Params.minimal(float(surface.p_enter[i]), float(surface.p_gp[j]))
        traj = run(stocks, p, rates, plan, 2000, 2016)
        assert gof_chi2(traj, stocks) == surface.chi2[i, j]


def test_zero_inflow_ties_break_to_origin():
    truth = Params.minimal(0.75, 0.32)
    stocks, rates, plan, _ = make_instance(truth)
    zero = plan.scaled(0.0)
    data = run(stocks, truth, rates, zero, 2000, 2016)
    surface = grid_search(stock_table(data), rates, zero, 2000, step=0.1)
    assert np.all(surface.chi2 == surface.chi2[0, 0])
    assert (surface.argmin.p_enter, surface.argmin.p_gp) == (0.0, 0.0)


@given(st.permutations(list(range(11))))
def test_argmin_independent_of_evaluation_order(order):
    truth = Params.minimal(0.3, 0.7)
    stocks, rates, plan, _ = make_instance(truth, last=2006, seed=2)
    obj = Objective(stocks, rates, plan, 2000, (GP, SP))
    pts = grid_points(0.1)
    best = None
    for i in order:
        for j in reversed(range(11)):
            c = obj(Params.minimal(pts[i], pts[j]))
            key = (c, pts[i], pts[j])
            best = key if best is None or key < best else best
    assert (best[1], best[2]) == (0.3, 0.7)


def test_all_years_mode():
    truth = Params.minimal(0.4, 0.55)
    stocks, rates, plan, _ = make_instance(truth, seed=9)
    surface = grid_search(stocks, rates, plan, 2000, step=0.05, mode=ALL_YEARS)
    assert surface.argmin == truth
    assert surface.chi2_min == 0.0


def test_surface_csv(tmp_path):
    truth = Params.minimal(0.5, 0.5)
    stocks, rates, plan, _ = make_instance(truth, last=2004)
    surface = grid_search(stocks, rates, plan, 2000, step=0.25)
    surface.write_csv(tmp_path / "s.csv")
    rows = list(csv.DictReader(open(tmp_path / "s.csv")))
    assert len(rows) == 25
    assert set(rows[0]) == {"p_enter", "p_GP", "chi2"}


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=8))
def test_simplex_projection(v):
    x = project_simplex(np.array(v))
    assert np.all(x >= 0)
    assert abs(x.sum() - 1.0) <= 1e-9
    # Projection is idempotent.
    np.testing.assert_allclose(project_simplex(x), x, atol=1e-12)


def test_simplex_projection_closest_point():
    x = project_simplex(np.array([0.5, 0.5, 0.5]))
    np.testing.assert_allclose(x, [1 / 3] * 3, atol=1e-15)
    np.testing.assert_allclose(project_simplex(np.array([2.0, 0.0])), [1.0, 0.0])


def _extended_truth(rng):
    return Params(float(rng.uniform(0.4, 0.95)), dict(zip(EXTENDED_FIELDS, rng.dirichlet(np.ones(6) * 2).tolist())))


def test_extended_recovery():
    rng = np.random.default_rng(11)
    truth = _extended_truth(rng)
    stocks, rates, plan, _ = make_instance(truth, seed=11)
    init = Params(0.5, {f: 1 / 6 for f in EXTENDED_FIELDS})
    fit = calibrate_extended(stocks, rates, plan, 2000, init)
    err = max([abs(fit.p_enter - truth.p_enter)] + [abs(fit.field_choice[f] - truth.field_choice[f]) for f in EXTENDED_FIELDS])
    assert err <= 0.02
    assert abs(sum(fit.field_choice.values()) - 1.0) <= 1e-9
    assert all(v >= 0 for v in fit.field_choice.values())


def test_extended_optimal_init_returned_unchanged():
    truth = _extended_truth(np.random.default_rng(2))
    stocks, rates, plan, _ = make_instance(truth, seed=2)
    assert calibrate_extended(stocks, rates, plan, 2000, truth) is truth


@given(st.integers(0, 10_000))
def test_extended_never_worse_than_start(seed):
    rng = np.random.default_rng(seed)
    truth = _extended_truth(rng)
    stocks, rates, plan, _ = make_instance(truth, last=2006, seed=seed % 50)
    init = _extended_truth(rng)
    obj = Objective(stocks, rates, plan, 2000, init.fields)
    res = fit_extended(stocks, rates, plan, 2000, init, seeds=(0,), max_iter=50)
    assert res.chi2 <= obj(init)
    assert obj(res.params) == res.chi2
    assert abs(sum(res.params.field_choice.values()) - 1.0) <= 1e-9
