"""Per-age-year stocks, net rates of change, exit rates and entrant mix.

Everything here works on the all-field aggregate: the source tables report
age and sex only for physicians as a whole, so exit rates are shared by every
field.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .data_model import (
    AGE_CEILING,
    AGE_FLOOR,
    SEXES,
    AgeGroup,
    ExitRates,
    FieldId,
    Sex,
    StockTable,
)
from .errors import EmptyCohort, EmptyEntryBand, NegativeInput, NoCompleteCountry, OverlappingGroups

log = logging.getLogger(__name__)

DEFAULT_AGES = np.arange(AGE_FLOOR, AGE_CEILING)


def _as_groups(grouped: Mapping) -> list[tuple[AgeGroup, float]]:
    items = []
    for g, v in grouped.items():
        grp = g if isinstance(g, AgeGroup) else AgeGroup.parse(str(g))
        if v < 0:
            raise NegativeInput(f"negative count {v!r} in age group {grp}")
        items.append((grp, float(v)))
    items.sort(key=lambda gv: gv[0].lo)
    for (a, _), (b, _) in zip(items, items[1:]):
        if a.overlaps(b):
            raise OverlappingGroups(f"{a} overlaps {b}")
    return items


def interpolate_age_groups(grouped: Mapping) -> dict[int, float]:
    """Spread grouped counts over single years of age.

    Each group's per-year density (count / width) is placed at the group
    midpoint and joined linearly to its neighbours, flat beyond the outermost
    midpoints.  The values inside each group are then rescaled so that they
    add back up to the group count.
    """
    items = _as_groups(grouped)
    if not items:
        return {}
    mids = np.array([(g.lo + g.hi - 1) / 2.0 for g, _ in items])
    dens = np.array([v / g.width for g, v in items])
    out: dict[int, float] = {}
    for g, v in items:
        ages = np.arange(g.lo, g.hi, dtype=float)
        if v == 0.0:
            vals = np.zeros(g.width)
        else:
            raw = np.interp(ages, mids, dens)
            s = raw.sum()
            vals = raw * (v / s) if s > 0 else np.full(g.width, v / g.width)
        out.update(zip(range(g.lo, g.hi), vals.tolist()))
    return out


def age_axis(tables: Iterable[StockTable] = ()) -> np.ndarray:
    """Age axis spanning every age group present, or 20..79 if there are none."""
    lo, hi = None, None
    for t in tables:
        for (_, sex, grp, _), _v in t.entries.items():
            if grp is None or sex is None:
                continue
            lo = grp.lo if lo is None else min(lo, grp.lo)
            hi = grp.hi if hi is None else max(hi, grp.hi)
    if lo is None:
        return DEFAULT_AGES.copy()
    return np.arange(lo, hi)


def cohort_array(stocks: StockTable, fld: FieldId | None, year: int, ages: np.ndarray) -> np.ndarray | None:
    """Interpolated ``(sex, age)`` array for one field and year, or None."""
    rows = stocks.cohorts(fld, year)
    if not rows:
        return None
    out = np.zeros((len(SEXES), len(ages)))
    a0 = int(ages[0])
    for j, sex in enumerate(SEXES):
        grouped = {g: v for (s, g), v in rows.items() if s is sex}
        for age, v in interpolate_age_groups(grouped).items():
            k = age - a0
            if not 0 <= k < len(ages):
                raise ValueError(f"age {age} outside model axis {a0}..{int(ages[-1])}")
            out[j, k] = v
    return out


@dataclass(frozen=True)
class CohortTable:
    """All-field stocks per (sex, age, year); NaN columns mark missing years."""

    ages: np.ndarray
    years: np.ndarray
    values: np.ndarray

    def at(self, year: int) -> np.ndarray | None:
        idx = int(year) - int(self.years[0])
        if not 0 <= idx < len(self.years):
            return None
        col = self.values[:, :, idx]
        return None if np.isnan(col).any() else col

    @property
    def complete(self) -> bool:
        return not np.isnan(self.values).any()


def aggregate_table(stocks: StockTable, ages: np.ndarray | None = None) -> CohortTable:
    """Sum the per-age-year stocks over fields, one slice per year.

    Rows with field ``ALL`` take precedence; otherwise the field cohorts are
    summed when every field reports them for that year.
    """
    ages = age_axis([stocks]) if ages is None else ages
    years = stocks.years
    if not years:
        return CohortTable(ages, np.array([], dtype=int), np.zeros((len(SEXES), len(ages), 0)))
    years = np.arange(years[0], years[-1] + 1)
    values = np.full((len(SEXES), len(ages), len(years)), np.nan)
    fields = stocks.fields
    for t, y in enumerate(years.tolist()):
        arr = cohort_array(stocks, None, y, ages)
        if arr is None and fields:
            parts = [cohort_array(stocks, f, y, ages) for f in fields]
            if all(p is not None for p in parts):
                arr = np.sum(parts, axis=0)
        if arr is not None:
            values[:, :, t] = arr
    return CohortTable(ages, years, values)


@dataclass(frozen=True)
class NetRateTable:
    """Net relative change ``alpha`` of cohort (sex, age) from year t to t+1.

    NaN where undefined (empty source cohort, or no next-year data).
    """

    ages: np.ndarray
    years: np.ndarray
    rates: np.ndarray

    def get(self, sex: Sex, age: int, year: int) -> float | None:
        k = int(age) - int(self.ages[0])
        t = int(year) - int(self.years[0])
        if not (0 <= k < len(self.ages) and 0 <= t < len(self.years)):
            return None
        v = self.rates[SEXES.index(sex), k, t]
        return None if math.isnan(v) else float(v)


def net_change_rates(table: CohortTable) -> NetRateTable:
    x = table.values
    rates = np.full_like(x, np.nan)
    if x.shape[2] >= 2 and x.shape[1] >= 2:
        now = x[:, :-1, :-1]
        nxt = x[:, 1:, 1:]
        with np.errstate(divide="ignore", invalid="ignore"):
            alpha = (nxt - now) / now
        ok = (now > 0) & np.isfinite(nxt)
        rates[:, :-1, :-1] = np.where(ok, alpha, np.nan)
    return NetRateTable(table.ages, table.years, rates)


def exit_rates(net: NetRateTable, fallback: ExitRates | None = None, strict: bool = True) -> ExitRates:
    """Average attrition per cohort over all years with a defined net rate.

    Each year contributes ``max(0, -alpha)`` clipped to 1.  Cohorts with no
    defined rate take the ``fallback`` value if given; otherwise they raise
    :class:`EmptyCohort` (``strict``) or are left as NaN.
    """
    loss = np.clip(-net.rates, 0.0, 1.0)
    loss = np.where(np.isnan(net.rates), np.nan, loss)
    counts = np.sum(~np.isnan(loss), axis=2)
    sums = np.nansum(loss, axis=2)
    with np.errstate(invalid="ignore", divide="ignore"):
        gamma = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    if fallback is not None:
        if not np.array_equal(fallback.ages, net.ages):
            raise ValueError("fallback rates use a different age axis")
        gamma = np.where(np.isnan(gamma), fallback.rates, gamma)
    rates = ExitRates(net.ages.copy(), gamma)
    empty = rates.missing()
    if empty and strict:
        raise EmptyCohort(empty, partial=rates)
    return rates


@dataclass(frozen=True)
class ReferenceDistribution:
    """Sex/age shares of pooled stocks, one ``(sex, age)`` slice per year."""

    ages: np.ndarray
    years: np.ndarray
    shares: np.ndarray

    def at(self, year: int) -> np.ndarray:
        t = int(np.argmin(np.abs(self.years - int(year))))
        return self.shares[:, :, t]

    def entrant_shares(self, year: int, band: tuple[int, int] = (25, 34)) -> dict[Sex, float]:
        s = self.at(year)
        sel = (self.ages >= band[0]) & (self.ages <= band[1])
        mass = s[:, sel].sum(axis=1)
        return {sex: float(mass[j] / mass.sum()) for j, sex in enumerate(SEXES)}


def reference_rates(tables: Iterable[StockTable], ages: np.ndarray | None = None):
    """Exit rates and sex/age shares of the pooled complete countries.

    Countries count as complete when they report per-age stocks for every
    observed year.  Pooling uses the years common to all of them; the rates
    are those of the summed table, not an average of per-country rates.

    Returns ``(ExitRates, ReferenceDistribution)``.
    """
    tables = list(tables)
    ages = age_axis(tables) if ages is None else ages
    complete = []
    for t in tables:
        agg = aggregate_table(t, ages)
        if len(agg.years) and agg.complete:
            complete.append(agg)
    if not complete:
        raise NoCompleteCountry("no country reports age and sex detail for every year")
    common = set(complete[0].years.tolist())
    for agg in complete[1:]:
        common &= set(agg.years.tolist())
    if not common:
        raise NoCompleteCountry("complete countries share no common year")
    years = np.arange(min(common), max(common) + 1)
    pooled = np.zeros((len(SEXES), len(ages), len(years)))
    for agg in complete:
        t0 = int(years[0]) - int(agg.years[0])
        pooled += agg.values[:, :, t0 : t0 + len(years)]
    table = CohortTable(ages, years, pooled)
    rates = exit_rates(net_change_rates(table), strict=False)
    tot = pooled.sum(axis=(0, 1))
    shares = pooled / np.where(tot > 0, tot, 1.0)
    return rates, ReferenceDistribution(ages, years, shares)


@dataclass(frozen=True)
class EntrantDistribution:
    sex_share: dict
    ages: tuple[int, int] = (25, 34)

    def weights(self, axis: np.ndarray) -> np.ndarray:
        """``(sex, age)`` weights summing to one: uniform over the entry ages."""
        sel = (axis >= self.ages[0]) & (axis <= self.ages[1])
        n = int(sel.sum())
        if n == 0:
            raise ValueError(f"entry ages {self.ages} outside the model age axis")
        w = np.zeros((len(SEXES), len(axis)))
        for j, sex in enumerate(SEXES):
            w[j, sel] = self.sex_share.get(sex, 0.0) / n
        return w


def entrant_distribution(
    stocks: StockTable,
    ref_year: int = 2016,
    band: tuple[int, int] = (25, 34),
    reference: ReferenceDistribution | None = None,
    ages: np.ndarray | None = None,
) -> EntrantDistribution:
    """Sex mix of new physicians, taken from the stocks aged ``band`` in ``ref_year``."""
    table = aggregate_table(stocks, ages)
    col = table.at(ref_year)
    if col is not None:
        sel = (table.ages >= band[0]) & (table.ages <= band[1])
        mass = col[:, sel].sum(axis=1)
        total = mass.sum()
        if total > 0:
            return EntrantDistribution({s: float(mass[j] / total) for j, s in enumerate(SEXES)}, band)
    if reference is None:
        raise EmptyEntryBand(f"{stocks.country}: no stock aged {band[0]}-{band[1]} in {ref_year}")
    log.info("%s: entry band empty in %s, using reference sex shares", stocks.country, ref_year)
    return EntrantDistribution(reference.entrant_shares(ref_year, band), band)
