"""Constant-density reference lines, forecast uncertainty and density gaps."""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .calibrate import observed_totals
from .data_model import BASELINE, FieldId, PopulationProjection, StockTable
from .engine import VALIDATION, InflowPlan, Trajectory
from .errors import EmptyValidationWindow, MissingYear, ZeroInflow, ZeroSD

STAR_LEVELS = ((1e-4, "***"), (1e-3, "**"), (1e-2, "*"))


@dataclass(frozen=True)
class IsodensityLine:
    """Physicians needed to hold the reference-year density constant.

    ``envelope`` spans every scenario supplied, including the one the line is
    drawn for, so it always contains the line.
    """

    field: FieldId | None
    scenario: str
    values: dict
    envelope: dict
    ref_year: int = 2016


def _scaled(z_ref, proj: PopulationProjection, years, ref_year):
    if ref_year not in proj.values:
        raise MissingYear(f"scenario {proj.scenario!r} has no population for {ref_year}")
    base = proj.values[ref_year]
    out = {}
    for y in years:
        if y not in proj.values:
            raise MissingYear(f"scenario {proj.scenario!r} has no population for {y}")
        out[y] = z_ref * (proj.values[y] / base)
    return out


def isodensity(
    z_ref: float,
    populations,
    years=None,
    ref_year: int = 2016,
    scenario: str = BASELINE,
    fld: FieldId | None = None,
) -> IsodensityLine:
    """C(t) = Z(ref_year) * Pop(t) / Pop(ref_year) for each scenario."""
    if isinstance(populations, PopulationProjection):
        populations = {populations.scenario: populations}
    if scenario not in populations:
        raise MissingYear(f"no population scenario {scenario!r}")
    main = populations[scenario]
    if years is None:
        years = range(ref_year, max(main.values) + 1)
    years = [int(y) for y in years]
    values = _scaled(z_ref, main, years, ref_year)
    lo = dict(values)
    hi = dict(values)
    for label, proj in populations.items():
        if label == scenario:
            continue
        for y, v in _scaled(z_ref, proj, years, ref_year).items():
            lo[y] = min(lo[y], v)
            hi[y] = max(hi[y], v)
    envelope = {y: (lo[y], hi[y]) for y in years}
    return IsodensityLine(fld, scenario, values, envelope, ref_year)


def validation_rmse(trajectory: Trajectory, stocks: StockTable) -> dict[FieldId, float]:
    """Root-mean-square model error per field over the validation years."""
    years = [
        y for y in trajectory.years.tolist()
        if trajectory.window(y) == VALIDATION and y in set(stocks.years)
    ]
    if not years:
        raise EmptyValidationWindow("no observed years after the calibration year")
    model = trajectory.totals()
    idx = [y - int(trajectory.years[0]) for y in years]
    obs = np.stack([observed_totals(stocks, trajectory.fields, y, trajectory.ages) for y in years])
    resid = model[idx] - obs
    rmse = np.sqrt(np.nanmean(resid**2, axis=0))
    return dict(zip(trajectory.fields, rmse.tolist()))


def forecast_sd(rmse: float, h: float, h_val: float) -> float:
    """Standard deviation h years into the forecast: RMSE grows linearly with h."""
    if h <= 0 or h_val <= 0:
        raise ValueError("forecast and validation horizons must be positive")
    return rmse * h / h_val


def density_gap(m: float, c: float, T: float, y: float) -> float:
    """(M - C) / (T * Y): excess supply per year per yearly inflow."""
    if T <= 0:
        raise ValueError(f"T must be positive, got {T}")
    if not y > 0:
        raise ZeroInflow(f"inflow at the horizon is {y!r}")
    return (m - c) / (T * y)


def stars(p: float) -> str:
    for level, mark in STAR_LEVELS:
        if p < level:
            return mark
    return ""


@dataclass(frozen=True)
class Significance:
    z: float
    p: float
    stars: str


def gap_significance(dg: float, sd: float) -> Significance:
    """Two-sided z-test of the gap against zero.

    p-values too small for a double are reported as the smallest normal
    double rather than 0.
    """
    if not sd > 0:
        raise ZeroSD(f"standard deviation is {sd!r}")
    z = dg / sd
    p = max(math.erfc(abs(z) / math.sqrt(2.0)), sys.float_info.min)
    return Significance(z, p, stars(p))


def combine_sd(sds) -> float:
    """Quadrature sum, assuming independent errors."""
    return math.sqrt(math.fsum(s * s for s in sds))


@dataclass(frozen=True)
class FieldGap:
    label: str
    dg: float
    sd: float
    z: float | None
    p: float | None
    stars: str
    model: float | None = None
    required: float | None = None
    rmse: float | None = None

    @classmethod
    def build(cls, label, dg, sd, **extra) -> "FieldGap":
        try:
            sig = gap_significance(dg, sd)
            return cls(label, dg, sd, sig.z, sig.p, sig.stars, **extra)
        except ZeroSD:
            return cls(label, dg, sd, None, None, "", **extra)

    def to_json(self) -> dict:
        out = {"field": self.label, "dg": self.dg, "sd": self.sd, "z": self.z, "p": self.p, "stars": self.stars}
        if self.model is not None:
            out.update(model=self.model, required=self.required, rmse=self.rmse)
        return out


@dataclass(frozen=True)
class GapReport:
    country: str
    model: str
    horizon: int
    ref_year: int
    T: int
    inflow: float
    fields: list
    aggregate: FieldGap
    groups: list = field(default_factory=list)
    gof: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {
            "country": self.country,
            "model": self.model,
            "fields": [f.to_json() for f in self.fields],
            "aggregate": self.aggregate.to_json(),
            "horizon": self.horizon,
            "ref_year": self.ref_year,
            "T": self.T,
            "inflow_at_horizon": self.inflow,
            "gof": self.gof,
        }
        if self.groups:
            out["groups"] = [g.to_json() for g in self.groups]
        if self.provenance:
            out["provenance"] = self.provenance
        return out


def _aggregate(label, gaps) -> FieldGap:
    return FieldGap.build(
        label,
        math.fsum(g.dg for g in gaps),
        combine_sd(g.sd for g in gaps),
        model=math.fsum(g.model for g in gaps),
        required=math.fsum(g.required for g in gaps),
        rmse=combine_sd(g.rmse for g in gaps),
    )


def gap_report(
    country: str,
    model: str,
    trajectory: Trajectory,
    stocks: StockTable,
    lines: Mapping[FieldId, IsodensityLine],
    plan: InflowPlan,
    horizon: int,
    gof: dict | None = None,
) -> GapReport:
    """Density gaps at the horizon for every field and for their sum.

    The reference year is the isodensity lines' base year; forecast error
    grows from the validation RMSE linearly in the years past the last
    observation.
    """
    t0 = int(trajectory.years[0])
    last = max(y for y in trajectory.years.tolist() if trajectory.window(y) != "forecast")
    ref_year = next(iter(lines.values())).ref_year
    T = horizon - ref_year
    y_h = plan.total(horizon)
    rmse = validation_rmse(trajectory, stocks)
    m_h = trajectory.totals()[horizon - t0]
    gaps = []
    for i, f in enumerate(trajectory.fields):
        c = lines[f].values[horizon]
        sd_m = forecast_sd(rmse[f], horizon - last, last - t0)
        dg = density_gap(float(m_h[i]), c, T, y_h)
        gaps.append(
            FieldGap.build(f.code, dg, sd_m / (T * y_h), model=float(m_h[i]), required=c, rmse=rmse[f])
        )
    groups = []
    if any(f.sector is not None for f in trajectory.fields):
        profs = sorted({f.profession for f in trajectory.fields}, key=lambda p: p.value)
        for prof in profs:
            members = [g for g, f in zip(gaps, trajectory.fields) if f.profession is prof]
            groups.append(_aggregate(prof.value, members))
    return GapReport(
        country, model, horizon, ref_year, T, y_h, gaps, _aggregate("ALL", gaps), groups, dict(gof or {})
    )


def gap_series(trajectory: Trajectory, lines: Mapping[FieldId, IsodensityLine], plan: InflowPlan) -> dict:
    """Per-year gap DG(T) for every forecast year, keyed by (field, year)."""
    out = {}
    t0 = int(trajectory.years[0])
    totals = trajectory.totals()
    for i, f in enumerate(trajectory.fields):
        line = lines[f]
        for y in trajectory.years.tolist():
            if y <= line.ref_year or y not in line.values:
                continue
            out[(f, y)] = density_gap(float(totals[y - t0, i]), line.values[y], y - line.ref_year, plan.total(y))
    return out
