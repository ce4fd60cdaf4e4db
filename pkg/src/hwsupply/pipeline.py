"""End-to-end runs for one country: set-up, calibration and forecast."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import __version__
from .calibrate import FINAL_YEAR, GofSurface, Objective, fit_extended, grid_search, observed_totals
from .data_model import BASELINE, EXTENDED_FIELDS, CountryBundle, ExitRates, Params, StockTable
from .demography import (
    ReferenceDistribution,
    aggregate_table,
    age_axis,
    entrant_distribution,
    exit_rates,
    net_change_rates,
    reference_rates,
)
from .engine import FORECAST, InflowPlan, Trajectory, project_inflow, run
from .errors import DataError, NoCompleteCountry
from .forecast import GapReport, IsodensityLine, forecast_sd, gap_report, gap_series, isodensity, validation_rmse
from .ingest import select_calibration_year
from .scenario import Intervention, combined_additions, sector_share_trend, split_fields

log = logging.getLogger(__name__)

MINIMAL = "minimal"
EXTENDED = "extended"


@dataclass
class Setup:
    bundle: CountryBundle
    model: str
    stocks: StockTable
    ages: np.ndarray
    rates: ExitRates
    reference: ReferenceDistribution | None
    t0: int
    last: int
    plan: InflowPlan
    horizon: int
    interventions: list = field(default_factory=list)

    @property
    def fields(self):
        return self.stocks.fields

    @property
    def ref_year(self) -> int:
        return 2016 if 2016 in self.stocks.years else self.last


def country_rates(stocks: StockTable, ages: np.ndarray, reference: ExitRates | None) -> ExitRates:
    """Own exit rates where estimable, reference rates for the remaining cohorts."""
    table = aggregate_table(stocks, ages)
    if np.isnan(table.values).all():
        if reference is None:
            raise DataError(f"{stocks.country}: no age/sex detail and no reference country")
        log.info("%s: no age/sex detail, using reference exit rates", stocks.country)
        return reference
    return exit_rates(net_change_rates(table), fallback=reference, strict=False)


def prepare(
    bundle: CountryBundle,
    model: str = MINIMAL,
    horizon: int = 2040,
    interventions: Iterable[Intervention] = (),
    others: Iterable[CountryBundle] = (),
) -> Setup:
    others = [b for b in others if b.country != bundle.country]
    pool = [bundle.stocks] + [b.stocks for b in others]
    ages = age_axis(pool)
    try:
        ref_rates, ref_dist = reference_rates(pool, ages)
    except NoCompleteCountry:
        ref_rates, ref_dist = None, None

    stocks = bundle.stocks
    last = stocks.years[-1]
    if model == EXTENDED and not stocks.is_extended:
        if bundle.sector_split is None:
            raise DataError(f"{bundle.country}: extended model needs sector_split.csv")
        window = range(stocks.years[0], max(horizon, last) + 1)
        stocks = split_fields(stocks, sector_share_trend(bundle.sector_split, window))
    elif model == MINIMAL and stocks.is_extended:
        raise DataError(f"{bundle.country}: stock table is sector-resolved; use the extended model")
    if model == EXTENDED and tuple(stocks.fields) != EXTENDED_FIELDS:
        raise DataError(f"{bundle.country}: extended model needs all six fields, got {stocks.fields}")

    rates = country_rates(bundle.stocks, ages, ref_rates)
    t0 = select_calibration_year(stocks)
    ref_year = 2016 if 2016 in stocks.years else last
    entrants = entrant_distribution(
        bundle.stocks, ref_year, bundle.inflow.entry_age_range, ref_dist, ages
    )
    interventions = list(interventions)
    fyears = range(last + 1, horizon + 1)
    plan = project_inflow(
        bundle.inflow, fyears, combined_additions(interventions, fyears), entrants, start_year=t0
    )
    return Setup(bundle, model, stocks, ages, rates, ref_dist, t0, last, plan, horizon, interventions)


@dataclass
class Calibration:
    params: Params
    chi2: float
    surface: GofSurface | None = None
    iterations: int = 0


def calibrate(
    setup: Setup, grid_step: float = 0.01, gof_mode: str = FINAL_YEAR, init: Params | None = None
) -> Calibration:
    if setup.model == MINIMAL:
        surface = grid_search(
            setup.stocks, setup.rates, setup.plan, setup.t0, grid_step, setup.last, gof_mode, setup.reference
        )
        return Calibration(surface.argmin, surface.chi2_min, surface)
    if init is None:
        init = Params(0.5, {f: 1.0 / len(setup.fields) for f in setup.fields})
    fit = fit_extended(setup.stocks, setup.rates, setup.plan, setup.t0, init, setup.last, gof_mode, setup.reference)
    return Calibration(fit.params, fit.chi2, None, fit.iterations)


def chi2_of(setup: Setup, params: Params, gof_mode: str = FINAL_YEAR) -> float:
    obj = Objective(setup.stocks, setup.rates, setup.plan, setup.t0, params.fields, setup.last, gof_mode, setup.reference)
    return obj(params)


@dataclass
class Forecast:
    trajectory: Trajectory
    lines: dict
    report: GapReport
    rmse: dict
    series: dict


def run_forecast(setup: Setup, params: Params, scenario: str = BASELINE, gof: dict | None = None) -> Forecast:
    if tuple(params.fields) != tuple(setup.fields):
        raise DataError(f"parameters cover fields {params.fields}, data has {setup.fields}")
    traj = run(setup.stocks, params, setup.rates, setup.plan, setup.t0, setup.horizon, setup.reference, setup.last)
    ref = setup.ref_year
    years = list(range(ref, setup.horizon + 1))
    lines: dict = {}
    for f in setup.fields:
        z = setup.stocks.field_total(f, ref)
        if z is None:
            raise DataError(f"{setup.bundle.country}: no {f} total for {ref}")
        lines[f] = isodensity(z, setup.bundle.populations, years, ref, scenario, f)
    report = gap_report(setup.bundle.country, setup.model, traj, setup.stocks, lines, setup.plan, setup.horizon, gof)
    rmse = validation_rmse(traj, setup.stocks)
    series = plot_series(setup, traj, lines, rmse)
    return Forecast(traj, lines, report, rmse, series)


def plot_series(setup: Setup, traj: Trajectory, lines: dict, rmse: dict) -> dict:
    """Per-field rows (year, model, sd, iso_baseline, env_min, env_max, observed)."""
    out = {}
    totals = traj.totals()
    observed = set(setup.stocks.years)
    h_val = setup.last - setup.t0
    for i, f in enumerate(traj.fields):
        rows = []
        line: IsodensityLine = lines[f]
        for k, y in enumerate(traj.years.tolist()):
            w = traj.window(y)
            if w == FORECAST:
                sd = forecast_sd(rmse[f], y - setup.last, h_val)
            elif y == setup.t0:
                sd = 0.0
            else:
                sd = rmse[f]
            obs = None
            if y in observed:
                obs = float(observed_totals(setup.stocks, (f,), y, setup.ages)[0])
            env = line.envelope.get(y)
            rows.append({
                "year": y,
                "model": float(totals[k, i]),
                "sd": sd,
                "iso_baseline": line.values.get(y),
                "env_min": None if env is None else env[0],
                "env_max": None if env is None else env[1],
                "observed": obs,
            })
        out[f] = rows
    return out


def gaps_by_year(fc: Forecast, setup: Setup) -> dict:
    return gap_series(fc.trajectory, fc.lines, setup.plan)


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def provenance(files: Iterable, params: Params | None = None, **options) -> dict:
    out = {
        "tool": "hwsupply",
        "version": __version__,
        "inputs": {Path(p).name: file_digest(p) for p in sorted(files, key=lambda p: Path(p).name)},
    }
    if params is not None:
        out["params"] = params.to_json()
    if options:
        out["options"] = options
    return out
