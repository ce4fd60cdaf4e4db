"""Sector shares, six-field splitting and inflow interventions."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .data_model import PROFESSIONS, SECTORS, FieldId, SectorAnchors, StockTable
from .errors import DataError, DegenerateAnchors, MissingShare


def sector_share_trend(anchors, window: Iterable[int]) -> dict:
    """Extrapolate sector shares linearly through two anchor years.

    ``anchors`` is a :class:`SectorAnchors` or ``{year: {(sector, profession):
    share}}``.  Per profession and year the three shares are clipped to
    [0, 1] and renormalised to sum to one.  Returns
    ``{(year, sector, profession): share}``.
    """
    shares = anchors.shares if isinstance(anchors, SectorAnchors) else anchors
    years = sorted(shares)
    if len(years) != 2:
        raise DegenerateAnchors(f"need exactly two anchor years, got {years}")
    y1, y2 = years
    if y1 == y2:
        raise DegenerateAnchors(f"anchor years coincide ({y1})")
    out = {}
    window = [int(y) for y in window]
    for prof in PROFESSIONS:
        s1 = np.array([shares[y1].get((s, prof), 0.0) for s in SECTORS])
        s2 = np.array([shares[y2].get((s, prof), 0.0) for s in SECTORS])
        slope = (s2 - s1) / (y2 - y1)
        for y in window:
            raw = np.clip(s1 + slope * (y - y1), 0.0, 1.0)
            total = raw.sum()
            vals = raw / total if total > 0 else np.full(len(SECTORS), 1.0 / len(SECTORS))
            for s, v in zip(SECTORS, vals.tolist()):
                out[(y, s, prof)] = v
    return out


def split_fields(stocks: StockTable, shares: Mapping) -> StockTable:
    """Split each profession into three sector fields using year-specific shares.

    Rows for all physicians (field ``None``) are carried over unchanged.
    """
    if stocks.is_extended:
        raise DataError("stock table is already split into sectors")
    entries = {}
    for (fld, sex, grp, year), v in stocks.entries.items():
        if fld is None:
            entries[(fld, sex, grp, year)] = v
            continue
        for sector in SECTORS:
            key = (year, sector, fld.profession)
            if key not in shares:
                raise MissingShare(f"no {sector.value} share for {fld.profession.value} in {year}")
            entries[(FieldId(fld.profession, sector), sex, grp, year)] = shares[key] * v
    return StockTable(stocks.country, entries, dict(stocks.flags))


def ramp(year: int, start_year: int, end_year: int, peak: float) -> float:
    """Linear growth from zero in ``start_year`` to ``peak`` in ``end_year``, flat after."""
    if year <= start_year:
        return 0.0
    if year >= end_year:
        return float(peak)
    return peak * (year - start_year) / (end_year - start_year)


def new_faculty_inflow(year: int) -> float:
    """Graduates added by a new medical faculty: 0 up to 2019, 300 from 2029."""
    return ramp(year, 2019, 2029, 300.0)


@dataclass(frozen=True)
class Intervention:
    """Additive change to the yearly inflow.

    Declared in JSON either as explicit additions::

        {"name": "...", "inflow_additions": [{"year": 2024, "amount": 150}]}

    or as a ramp::

        {"name": "...", "ramp": {"start_year": 2019, "end_year": 2029, "peak": 300}}
    """

    name: str
    additions: dict = field(default_factory=dict)
    ramp: tuple | None = None

    def amount(self, year: int) -> float:
        v = self.additions.get(int(year), 0.0)
        if self.ramp is not None:
            v += ramp(int(year), *self.ramp)
        return v

    def amounts(self, years: Iterable[int]) -> dict[int, float]:
        return {int(y): self.amount(y) for y in years}

    @classmethod
    def from_json(cls, obj: dict) -> "Intervention":
        try:
            return cls._from_json(obj)
        except (KeyError, TypeError, ValueError, AttributeError) as e:
            if isinstance(e, DataError):
                raise
            raise DataError(f"malformed intervention: {e!r}") from e

    @classmethod
    def _from_json(cls, obj: dict) -> "Intervention":
        name = str(obj.get("name", "intervention"))
        additions = {}
        for item in obj.get("inflow_additions", []) or []:
            y = int(item["year"])
            additions[y] = additions.get(y, 0.0) + float(item["amount"])
        r = obj.get("ramp")
        ramp_spec = None
        if r is not None:
            ramp_spec = (int(r["start_year"]), int(r["end_year"]), float(r["peak"]))
            if ramp_spec[1] <= ramp_spec[0]:
                raise DataError(f"ramp end_year must follow start_year in {name!r}")
        if not additions and ramp_spec is None:
            raise DataError(f"intervention {name!r} declares neither inflow_additions nor ramp")
        return cls(name, additions, ramp_spec)

    @classmethod
    def load(cls, path) -> "Intervention":
        with open(path, encoding="utf-8") as fh:
            try:
                obj = json.load(fh)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}: {e}") from e
        return cls.from_json(obj)


NEW_FACULTY = Intervention("new_faculty", {}, (2019, 2029, 300.0))


def combined_additions(interventions: Iterable[Intervention], years: Iterable[int]) -> dict[int, float]:
    years = [int(y) for y in years]
    out = {y: 0.0 for y in years}
    for iv in interventions:
        for y in years:
            out[y] += iv.amount(y)
    return {y: v for y, v in out.items() if v}
