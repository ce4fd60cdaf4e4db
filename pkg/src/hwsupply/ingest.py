"""Canonical CSV ingestion and export.

Four table layouts are recognised by their header row (column order is free):

* ``stocks.csv``       country,year,field,sector,sex,age_group,count,flags
* ``inflow.csv``       country,year,source,count
* ``population.csv``   country,scenario,year,population
* ``sector_split.csv`` country,year,profession,sector,count

``field`` is ``GP``, ``SP`` or ``ALL`` (all physicians, used for age/sex
detail that is not broken down by field).  Empty ``sex``/``age_group`` mark
aggregate rows; ``flags`` is a ``;``-joined list where ``b`` flags a break in
series.
"""

from __future__ import annotations

import csv
import enum
import logging
import math
import os
from pathlib import Path
from typing import Iterable

from .data_model import (
    AgeGroup,
    CountryBundle,
    FieldId,
    InflowSeries,
    PopulationProjection,
    Profession,
    SectorAnchors,
    Sector,
    Sex,
    StockTable,
    ensure_valid,
)
from .errors import AnchorYearMissing, DataError, DuplicateKey, EmptyEntryBand, NoValidCalibrationYear, SchemaError, ShareSumViolation

log = logging.getLogger(__name__)


class SourceTableKind(enum.Enum):
    PHYSICIANS_BY_AGE_SEX = "PhysiciansByAgeSex"
    PHYSICIANS_BY_SPECIALTY = "PhysiciansBySpecialty"
    GRADUATES = "Graduates"
    WORKFORCE_MIGRATION = "WorkforceMigration"
    POPULATION_PROJECTION = "PopulationProjection"
    SECTOR_SPLIT = "SectorSplit"


STOCK_COLUMNS = ("country", "year", "field", "sector", "sex", "age_group", "count", "flags")
INFLOW_COLUMNS = ("country", "year", "source", "count")
POPULATION_COLUMNS = ("country", "scenario", "year", "population")
SECTOR_COLUMNS = ("country", "year", "profession", "sector", "count")

_LAYOUTS = {
    frozenset(STOCK_COLUMNS): "stocks",
    frozenset(INFLOW_COLUMNS): "inflow",
    frozenset(POPULATION_COLUMNS): "population",
    frozenset(SECTOR_COLUMNS): "sector_split",
}

CANONICAL_FILES = ("stocks.csv", "inflow.csv", "population.csv", "sector_split.csv")


def table_kind(layout: str, row: dict | None = None) -> SourceTableKind:
    """Source-table kind of a canonical layout (and row, for mixed tables)."""
    if layout == "stocks":
        if row is not None and row.get("field", "").strip() == "ALL":
            return SourceTableKind.PHYSICIANS_BY_AGE_SEX
        return SourceTableKind.PHYSICIANS_BY_SPECIALTY
    if layout == "inflow":
        if row is not None and row.get("source", "").strip() == "MIGR":
            return SourceTableKind.WORKFORCE_MIGRATION
        return SourceTableKind.GRADUATES
    if layout == "population":
        return SourceTableKind.POPULATION_PROJECTION
    return SourceTableKind.SECTOR_SPLIT


def _number(text: str) -> float:
    v = float(text)
    if not math.isfinite(v):
        raise ValueError(f"non-finite number {text!r}")
    return v


def _year(text: str) -> int:
    return int(text.strip())


def _read(path) -> tuple[str, list[tuple[int, dict]]]:
    with open(path, newline="", encoding="utf-8-sig") as fh:
        reader = csv.DictReader(fh)
        header = frozenset(h.strip() for h in reader.fieldnames or ())
        layout = _LAYOUTS.get(header)
        if layout is None:
            raise SchemaError([(str(path), 1, f"unrecognised header {sorted(header)}")])
        rows = [
            (reader.line_num, {k.strip(): (v or "").strip() for k, v in row.items()})
            for row in reader
        ]
    return layout, rows


class _Collector:
    def __init__(self):
        self.issues = []
        self.duplicates = []

    def bad(self, path, line, msg):
        self.issues.append((str(path), line, msg))

    def dup(self, path, line, msg):
        self.duplicates.append((str(path), line, msg))

    def raise_if_any(self):
        if self.issues:
            raise SchemaError(self.issues + self.duplicates)
        if self.duplicates:
            raise DuplicateKey(self.duplicates)


def _parse_stock_row(row):
    fld = row["field"]
    sector = row["sector"]
    if fld == "ALL":
        if sector:
            raise ValueError("ALL rows cannot carry a sector")
        field_id = None
    else:
        field_id = FieldId(Profession(fld), Sector(sector) if sector else None)
    sex = Sex(row["sex"]) if row["sex"] else None
    grp = AgeGroup.parse(row["age_group"]) if row["age_group"] else None
    flags = frozenset(f.strip() for f in row["flags"].split(";") if f.strip())
    return (field_id, sex, grp, _year(row["year"])), _number(row["count"]), flags


def read_tables(files: Iterable) -> dict:
    """Parse canonical CSV files into per-country raw tables."""
    out: dict = {}
    col = _Collector()
    seen: dict = {}
    for path in sorted(Path(f) for f in files):
        try:
            layout, rows = _read(path)
        except SchemaError as exc:
            col.issues.extend(exc.issues)
            continue
        for line, row in rows:
            country = row.get("country", "")
            if not country:
                col.bad(path, line, "empty country")
                continue
            c = out.setdefault(
                country,
                {"stocks": {}, "flags": {}, "grad": {}, "migr": {}, "population": {}, "sector": {}},
            )
            try:
                if layout == "stocks":
                    key, count, flags = _parse_stock_row(row)
                    dkey = ("stocks", country, key)
                    if dkey in seen:
                        col.dup(path, line, f"duplicate stock key (first at line {seen[dkey]})")
                        continue
                    seen[dkey] = line
                    c["stocks"][key] = count
                    if flags:
                        c["flags"][key[3]] = c["flags"].get(key[3], frozenset()) | flags
                elif layout == "inflow":
                    src = row["source"]
                    if src not in ("GRAD", "MIGR"):
                        raise ValueError(f"unknown source {src!r}")
                    y = _year(row["year"])
                    dkey = ("inflow", country, src, y)
                    if dkey in seen:
                        col.dup(path, line, f"duplicate inflow key (first at line {seen[dkey]})")
                        continue
                    seen[dkey] = line
                    c["grad" if src == "GRAD" else "migr"][y] = _number(row["count"])
                elif layout == "population":
                    scen = row["scenario"]
                    if not scen:
                        raise ValueError("empty scenario")
                    y = _year(row["year"])
                    dkey = ("population", country, scen, y)
                    if dkey in seen:
                        col.dup(path, line, f"duplicate population key (first at line {seen[dkey]})")
                        continue
                    seen[dkey] = line
                    c["population"].setdefault(scen, {})[y] = _number(row["population"])
                else:
                    y = _year(row["year"])
                    key = (y, Sector(row["sector"]), Profession(row["profession"]))
                    dkey = ("sector", country, key)
                    if dkey in seen:
                        col.dup(path, line, f"duplicate sector key (first at line {seen[dkey]})")
                        continue
                    seen[dkey] = line
                    c["sector"][key] = _number(row["count"])
            except (ValueError, KeyError) as exc:
                col.bad(path, line, str(exc))
    col.raise_if_any()
    return out


def _sector_anchors(country: str, counts: dict) -> SectorAnchors:
    years = sorted({y for (y, _, _) in counts})
    if len(years) < 2:
        raise AnchorYearMissing(f"{country}: sector split needs two anchor years, found {years}")
    if len(years) > 2:
        raise DataError(f"{country}: sector split needs exactly two anchor years, found {years}")
    shares = {}
    for y in years:
        shares[y] = {}
        for prof in Profession:
            items = {(s, p): v for (yy, s, p), v in counts.items() if yy == y and p is prof}
            total = math.fsum(items.values())
            if not items:
                continue
            if total <= 0 or any(v < 0 for v in items.values()):
                raise ShareSumViolation(f"sector split {prof.value} {y}", total)
            # Already-normalised shares are kept verbatim so exports round-trip.
            exact = abs(total - 1.0) < 1e-12
            for k, v in items.items():
                shares[y][k] = v if exact else v / total
    return SectorAnchors(country, shares)


def _default_sex_share(stocks: StockTable, entry_ages=(25, 34)):
    from .demography import entrant_distribution

    years = stocks.years
    if not years:
        return None
    ref = 2016 if 2016 in years else years[-1]
    try:
        return entrant_distribution(stocks, ref, entry_ages).sex_share
    except EmptyEntryBand:
        return None


def _bundle(country: str, raw: dict) -> CountryBundle:
    stocks = StockTable(country, raw["stocks"], raw["flags"])
    inflow = InflowSeries(country, raw["grad"], raw["migr"], _default_sex_share(stocks))
    pops = {s: PopulationProjection(country, s, v) for s, v in raw["population"].items()}
    split = _sector_anchors(country, raw["sector"]) if raw["sector"] else None
    return CountryBundle(country, stocks, inflow, pops, split)


def read_bundles(files: Iterable) -> dict[str, CountryBundle]:
    """Parse and validate every country found in the files."""
    raw = read_tables(files)
    return {c: ensure_valid(_bundle(c, r)) for c, r in sorted(raw.items())}


def parse_canonical(files: Iterable, country: str | None = None) -> CountryBundle:
    """Parse canonical CSVs into one validated country bundle."""
    raw = read_tables(files)
    if country is None:
        if len(raw) != 1:
            raise DataError(f"files hold {len(raw)} countries ({', '.join(sorted(raw))}); pick one")
        country = next(iter(raw))
    if country not in raw:
        raise DataError(f"no rows for country {country!r}")
    return ensure_valid(_bundle(country, raw[country]))


def data_files(data_dir) -> list[Path]:
    d = Path(data_dir)
    return [d / name for name in CANONICAL_FILES if (d / name).exists()]


def parse_sector_split(path, country: str | None = None) -> SectorAnchors:
    raw = read_tables([path])
    if country is None:
        if len(raw) != 1:
            raise DataError(f"{path}: expected one country, found {sorted(raw)}")
        country = next(iter(raw))
    counts = raw.get(country, {}).get("sector", {})
    return _sector_anchors(country, counts)


def select_calibration_year(stocks: StockTable, fields=None) -> int:
    """First year after the last break in series with data for every field.

    A break flag on year ``b`` means the series is comparable from ``b``
    onwards, so ``b`` itself may start the window.  The window must contain at
    least one transition.
    """
    years = stocks.years
    if not years:
        raise NoValidCalibrationYear(f"{stocks.country}: no stock data")
    fields = stocks.fields if fields is None else fields
    last = years[-1]
    breaks = [y for y in stocks.break_years if y <= last]
    start = max([years[0]] + breaks)
    for y in range(start, last):
        if all(stocks.field_total(f, y) is not None for f in fields):
            return y
    raise NoValidCalibrationYear(f"{stocks.country}: no break-free window with data for every field")


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() and abs(v) < 2**53 else repr(float(v))


def write_canonical(bundle: CountryBundle, out_dir) -> list[Path]:
    """Write a bundle as canonical CSVs; returns the paths written."""
    out = Path(out_dir)
    os.makedirs(out, exist_ok=True)
    c = bundle.country
    written = []

    def key(item):
        (fld, sex, grp, year), _ = item
        return (
            year,
            (-1, -1) if fld is None else fld._key,
            "" if sex is None else sex.value,
            (-1, -1) if grp is None else (grp.lo, grp.hi),
        )

    path = out / "stocks.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STOCK_COLUMNS)
        flagged = set()
        for (fld, sex, grp, year), v in sorted(bundle.stocks.entries.items(), key=key):
            flags = ""
            if year not in flagged and year in bundle.stocks.flags:
                flags = ";".join(sorted(bundle.stocks.flags[year]))
                flagged.add(year)
            w.writerow([
                c,
                year,
                "ALL" if fld is None else fld.profession.value,
                "" if fld is None or fld.sector is None else fld.sector.value,
                "" if sex is None else sex.value,
                "" if grp is None else grp.label,
                _fmt(v),
                flags,
            ])
    written.append(path)

    path = out / "inflow.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INFLOW_COLUMNS)
        for y in bundle.inflow.years:
            if y in bundle.inflow.graduates:
                w.writerow([c, y, "GRAD", _fmt(bundle.inflow.graduates[y])])
            if y in bundle.inflow.migrants:
                w.writerow([c, y, "MIGR", _fmt(bundle.inflow.migrants[y])])
    written.append(path)

    path = out / "population.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(POPULATION_COLUMNS)
        for label in sorted(bundle.populations):
            for y, v in sorted(bundle.populations[label].values.items()):
                w.writerow([c, label, y, _fmt(v)])
    written.append(path)

    if bundle.sector_split is not None:
        path = out / "sector_split.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SECTOR_COLUMNS)
            for y in bundle.sector_split.years:
                for (s, p), v in sorted(bundle.sector_split.shares[y].items(), key=lambda kv: (kv[0][1].value, kv[0][0].value)):
                    w.writerow([c, y, p.value, s.value, repr(float(v))])
        written.append(path)
    return written


def read_eurostat_tsv(path) -> list[dict]:
    """Long records from a EUROSTAT bulk-download TSV.

    The first column joins the dimension codes (``unit,sex,age,geo\\time``);
    the remaining columns are years.  Values look like ``812``, ``812 b`` or
    ``:`` (missing, skipped).  Each record carries the dimensions plus
    ``year``, ``value`` and ``flags``.
    """
    records = []
    with open(path, encoding="utf-8-sig") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        dims = [d.split("\\")[0].strip() for d in header[0].split(",")]
        years = [int(h.strip()[:4]) for h in header[1:]]
        for line in fh:
            if not line.strip():
                continue
            cells = line.rstrip("\n").split("\t")
            codes = [c.strip() for c in cells[0].split(",")]
            base = dict(zip(dims, codes))
            for y, cell in zip(years, cells[1:]):
                parts = cell.strip().split()
                if not parts or parts[0] == ":":
                    continue
                rec = dict(base)
                rec.update(year=y, value=float(parts[0]), flags="".join(parts[1:]))
                records.append(rec)
    return records
