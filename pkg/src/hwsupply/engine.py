"""Yearly age / exit / enter dynamics.

One step advances every field from year t to t+1::

    N_i(s, a+1, t+1) = (1 - gamma(s, a)) * N_i(s, a, t) + p_enter * p_i * Y(s, a+1, t+1)

The oldest age on the axis leaves the system entirely each year and nobody
ages into the youngest age, which only receives entrants.  Stocks are
expected values, not integers.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .data_model import SEXES, ExitRates, FieldId, InflowSeries, ModelState, Params, StockTable
from .demography import EntrantDistribution, ReferenceDistribution, age_axis, cohort_array
from .errors import DataError, MissingField, MissingYear

log = logging.getLogger(__name__)

CALIBRATION = "calibration"
VALIDATION = "validation"
FORECAST = "forecast"


class InsufficientHistory(UserWarning):
    pass


@dataclass(frozen=True)
class InflowPlan:
    """Total yearly inflow Y(t) and its split over (sex, age).

    ``base`` holds observed (or projected) totals, ``additions`` the
    intervention amounts layered on top.
    """

    base: dict
    entrants: EntrantDistribution
    additions: dict = field(default_factory=dict)
    last_observed: int | None = None

    @property
    def years(self) -> list[int]:
        return sorted(self.base)

    def total(self, year: int) -> float:
        if year not in self.base:
            raise MissingYear(f"no inflow for {year}")
        return max(0.0, self.base[year] + self.additions.get(year, 0.0))

    def array(self, year: int, ages: np.ndarray) -> np.ndarray:
        return self.total(year) * self.entrants.weights(ages)

    def scaled(self, factor: float) -> "InflowPlan":
        return InflowPlan(
            {y: v * factor for y, v in self.base.items()},
            self.entrants,
            {y: v * factor for y, v in self.additions.items()},
            self.last_observed,
        )


def project_inflow(
    history: InflowSeries,
    forecast_years: Iterable[int],
    interventions: Mapping[int, float] | None = None,
    entrants: EntrantDistribution | None = None,
    start_year: int | None = None,
) -> InflowPlan:
    """Observed inflow up to the last data year, then the mean of the last three.

    Observed years between ``start_year`` and the last observation are filled
    by linear interpolation (flat before the first observation).  Intervention
    amounts are added on top of the projected forecast years only.
    """
    observed = history.totals()
    if not observed:
        raise DataError(f"{history.country}: no graduate or migrant counts")
    years = sorted(observed)
    last = years[-1]
    recent = [observed[y] for y in years[-3:]]
    if len(recent) < 3:
        warnings.warn(
            f"{history.country}: only {len(recent)} year(s) of inflow history, projecting their mean",
            InsufficientHistory,
            stacklevel=2,
        )
    projected = float(np.mean(recent))

    if entrants is None:
        if history.entrant_sex_share is None:
            raise DataError(f"{history.country}: entrant sex shares not set")
        entrants = EntrantDistribution(dict(history.entrant_sex_share), history.entry_age_range)

    first = years[0] if start_year is None else min(start_year, years[0])
    span = np.arange(first, last + 1)
    filled = np.interp(span, years, [observed[y] for y in years])
    base = {int(y): float(v) for y, v in zip(span, filled)}
    for y in years:
        base[y] = float(observed[y])
    fyears = [int(y) for y in forecast_years if int(y) > last]
    for y in fyears:
        base[y] = projected
    additions = {}
    for y, v in (interventions or {}).items():
        if int(y) in fyears and v:
            additions[int(y)] = float(v)
    return InflowPlan(base, entrants, additions, last)


@dataclass(frozen=True)
class Trajectory:
    """Model stocks for consecutive years, shape ``(year, field, sex, age)``.

    ``entered`` and ``exited`` hold the per-field flows into each year (zero
    for the first year).
    """

    years: np.ndarray
    fields: tuple
    ages: np.ndarray
    stocks: np.ndarray
    entered: np.ndarray
    exited: np.ndarray
    windows: tuple

    def __len__(self):
        return len(self.years)

    def state(self, year: int) -> ModelState:
        t = int(year) - int(self.years[0])
        if not 0 <= t < len(self.years):
            raise MissingYear(f"{year} outside trajectory {self.years[0]}..{self.years[-1]}")
        return ModelState(int(year), self.fields, self.ages, self.stocks[t])

    @property
    def states(self) -> list[ModelState]:
        return [self.state(y) for y in self.years.tolist()]

    def totals(self) -> np.ndarray:
        """Field totals, shape ``(year, field)``."""
        return _field_totals(self.stocks)

    def total_series(self, fld: FieldId) -> dict[int, float]:
        i = self.fields.index(fld)
        return dict(zip(self.years.tolist(), self.totals()[:, i].tolist()))

    def window(self, year: int) -> str:
        return self.windows[int(year) - int(self.years[0])]


def _field_totals(stocks: np.ndarray) -> np.ndarray:
    # Sum over (sex, age) as one contiguous axis; batched and single runs use
    # this same reduction so their totals agree bit for bit.
    shp = stocks.shape
    return np.ascontiguousarray(stocks).reshape(shp[:-2] + (shp[-2] * shp[-1],)).sum(axis=-1)


def survival(rates: ExitRates) -> np.ndarray:
    """``1 - gamma`` with undefined rates treated as zero attrition."""
    return 1.0 - np.nan_to_num(rates.rates, nan=0.0)


def _advance(n: np.ndarray, surv: np.ndarray, inflow: np.ndarray, coef: np.ndarray):
    """One step on ``(..., field, sex, age)`` stocks; returns (new, entered, exited)."""
    new = np.empty_like(n)
    new[..., 0] = 0.0
    np.multiply(n[..., :-1], surv[:, :-1], out=new[..., 1:])
    add = coef[..., :, None, None] * inflow
    new += add
    exited = _field_totals(n[..., :-1] * (1.0 - surv[:, :-1])) + n[..., :, :, -1].sum(axis=-1)
    entered = _field_totals(add)
    return new, entered, exited


def step(state: ModelState, params: Params, rates: ExitRates, inflow: np.ndarray) -> ModelState:
    """Advance one year.  ``inflow`` is Y(s, a, t+1) on the state's age axis."""
    _check_rates(rates, state.ages, state.stocks, inflow)
    coef = params.p_enter * params.vector(state.fields)
    new, _, _ = _advance(state.stocks, survival(rates), np.asarray(inflow, dtype=float), coef)
    return ModelState(state.year + 1, state.fields, state.ages, new)


def _check_rates(rates: ExitRates, ages: np.ndarray, stocks: np.ndarray, inflow: np.ndarray | None = None):
    if not np.array_equal(rates.ages, ages):
        raise ValueError("exit rates and state use different age axes")
    missing = np.isnan(rates.rates[:, :-1])
    if not missing.any():
        return
    occupied = stocks.reshape(-1, *stocks.shape[-2:]).sum(axis=0)[:, :-1] > 0
    if inflow is not None:
        occupied |= np.asarray(inflow).reshape(-1, *stocks.shape[-2:]).sum(axis=0)[:, :-1] > 0
    hit = missing & occupied
    if hit.any():
        cohorts = [f"{SEXES[j].value}{int(ages[k])}" for j, k in np.argwhere(hit)]
        log.warning("no exit rate for occupied cohort(s) %s; using 0", ", ".join(cohorts))


def init_state(
    stocks: StockTable,
    t0: int,
    fields: tuple | None = None,
    ages: np.ndarray | None = None,
    reference: ReferenceDistribution | None = None,
) -> ModelState:
    """Copy the (interpolated) observed stocks of year ``t0``.

    A field reported only as a total is spread over sex and age using the
    country's own all-physician profile for ``t0`` if present, else the
    reference profile.
    """
    fields = stocks.fields if fields is None else tuple(fields)
    ages = age_axis([stocks]) if ages is None else ages
    out = np.zeros((len(fields), len(SEXES), len(ages)))
    profile = None
    for i, f in enumerate(fields):
        arr = cohort_array(stocks, f, t0, ages)
        if arr is None:
            total = stocks.stored_total(f, t0)
            if total is None:
                raise MissingField(f"{stocks.country}: no data for field {f} in {t0}")
            if profile is None:
                profile = _profile(stocks, t0, ages, reference)
            arr = total * profile
        out[i] = arr
    return ModelState(int(t0), fields, ages, out)


def _profile(stocks, t0, ages, reference):
    own = cohort_array(stocks, None, t0, ages)
    if own is not None and own.sum() > 0:
        return own / own.sum()
    if reference is None:
        raise MissingField(f"{stocks.country}: no age/sex detail for {t0} and no reference profile")
    ref = reference.at(t0)
    if not np.array_equal(reference.ages, ages):
        raise ValueError("reference profile uses a different age axis")
    return ref


def inflow_steps(plan: InflowPlan, years: Iterable[int], ages: np.ndarray) -> np.ndarray:
    """Stack of Y(s, a, t) arrays for each listed year, shape ``(year, sex, age)``."""
    ys = list(years)
    if not ys:
        return np.zeros((0, len(SEXES), len(ages)))
    return np.stack([plan.array(y, ages) for y in ys])


def simulate_totals(
    init: np.ndarray, surv: np.ndarray, inflows: np.ndarray, coef: np.ndarray
) -> np.ndarray:
    """Field totals for a batch of entry coefficients.

    ``init`` is ``(field, sex, age)``, ``inflows`` one ``(sex, age)`` slice per
    step and ``coef`` ``(batch, field)`` = p_enter * p_i.  Returns
    ``(batch, year, field)`` with the initial year first.
    """
    coef = np.asarray(coef, dtype=float)
    n = np.broadcast_to(init, coef.shape[:-1] + init.shape).copy()
    out = np.empty(coef.shape[:-1] + (len(inflows) + 1, init.shape[0]))
    out[..., 0, :] = _field_totals(n)
    for k in range(len(inflows)):
        n, _, _ = _advance(n, surv, inflows[k], coef)
        out[..., k + 1, :] = _field_totals(n)
    return out


def run_from_state(
    state: ModelState,
    params: Params,
    rates: ExitRates,
    plan: InflowPlan,
    t_end: int,
    last_observed: int | None = None,
) -> Trajectory:
    t0 = state.year
    if t_end < t0:
        raise ValueError(f"t_end={t_end} precedes t0={t0}")
    years = np.arange(t0, t_end + 1)
    flows = inflow_steps(plan, years[1:].tolist(), state.ages)
    _check_rates(rates, state.ages, state.stocks, flows)
    surv = survival(rates)
    coef = params.p_enter * params.vector(state.fields)

    nf = len(state.fields)
    stocks = np.empty((len(years),) + state.stocks.shape)
    entered = np.zeros((len(years), nf))
    exited = np.zeros((len(years), nf))
    stocks[0] = state.stocks
    for k in range(1, len(years)):
        stocks[k], entered[k], exited[k] = _advance(stocks[k - 1], surv, flows[k - 1], coef)

    last = plan.last_observed if last_observed is None else last_observed
    last = t0 if last is None else last
    windows = tuple(
        CALIBRATION if y == t0 else VALIDATION if y <= last else FORECAST for y in years.tolist()
    )
    return Trajectory(years, state.fields, state.ages, stocks, entered, exited, windows)


def run(
    stocks: StockTable,
    params: Params,
    rates: ExitRates,
    plan: InflowPlan,
    t0: int,
    t_end: int,
    reference: ReferenceDistribution | None = None,
    last_observed: int | None = None,
) -> Trajectory:
    """Initialise from the data at ``t0`` and iterate to ``t_end`` inclusive."""
    state = init_state(stocks, t0, params.fields, rates.ages, reference)
    if last_observed is None and stocks.years:
        last_observed = stocks.years[-1]
    return run_from_state(state, params, rates, plan, t_end, last_observed)
