"""Domain types shared by every module, plus dataset validation.

Stocks are keyed by ``(field, sex, age_group, year)``.  ``field`` is a
:class:`FieldId` or ``None`` for all-physician rows; ``sex`` and
``age_group`` may be ``None`` for aggregate rows (a field total has both
unset).  Field totals are derived from cohort rows whenever those exist, so a
stored total is only a cross-check.
"""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable

import numpy as np

from .errors import ShareSumViolation, ValidationFailed

SHARE_TOL = 1e-9
TOTAL_RTOL = 1e-9

# Bounds used for open-ended age groups such as "<35" and "75+".
AGE_FLOOR = 20
AGE_CEILING = 80
OPEN_GROUP_WIDTH = 5

BREAK_FLAG = "b"
BASELINE = "baseline"


class Profession(enum.Enum):
    GP = "GP"
    SP = "SP"


class Sector(enum.Enum):
    CON = "CON"
    EMP = "EMP"
    NON = "NON"


class Sex(enum.Enum):
    MALE = "M"
    FEMALE = "F"


# Axis order of the sex dimension in every array.
SEXES = (Sex.MALE, Sex.FEMALE)
PROFESSIONS = (Profession.GP, Profession.SP)
SECTORS = (Sector.CON, Sector.EMP, Sector.NON)


@dataclass(frozen=True, order=True)
class FieldId:
    profession: Profession = field(compare=False)
    sector: Sector | None = field(default=None, compare=False)
    # Sort key so that fields order as GP before SP, sectors CON, EMP, NON.
    _key: tuple = field(init=False, repr=False, compare=True)

    def __post_init__(self):
        s = -1 if self.sector is None else SECTORS.index(self.sector)
        object.__setattr__(self, "_key", (PROFESSIONS.index(self.profession), s))

    @property
    def code(self) -> str:
        if self.sector is None:
            return self.profession.value
        return f"{self.profession.value}-{self.sector.value}"

    @classmethod
    def parse(cls, code: str) -> "FieldId":
        prof, _, sector = code.partition("-")
        return cls(Profession(prof), Sector(sector) if sector else None)

    def __str__(self):
        return self.code


GP = FieldId(Profession.GP)
SP = FieldId(Profession.SP)
MINIMAL_FIELDS = (GP, SP)
EXTENDED_FIELDS = tuple(FieldId(p, s) for p in PROFESSIONS for s in SECTORS)


@dataclass(frozen=True, order=True)
class AgeGroup:
    """Half-open age range ``[lo, hi)`` in whole years.

    ``open_end`` records whether the group came from a ``<X`` ("lower") or
    ``X+`` ("upper") label so the label survives a round trip.
    """

    lo: int
    hi: int
    open_end: str | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.lo < 0 or self.hi <= self.lo:
            raise ValueError(f"invalid age group [{self.lo}, {self.hi})")

    @property
    def width(self) -> int:
        return self.hi - self.lo

    @property
    def ages(self) -> range:
        return range(self.lo, self.hi)

    @property
    def label(self) -> str:
        if self.open_end == "lower":
            return f"<{self.hi}"
        if self.open_end == "upper":
            return f"{self.lo}+"
        if self.width == 1:
            return str(self.lo)
        return f"{self.lo}-{self.hi - 1}"

    def overlaps(self, other: "AgeGroup") -> bool:
        return self.lo < other.hi and other.lo < self.hi

    @classmethod
    def parse(cls, label: str) -> "AgeGroup":
        text = label.strip()
        if m := re.fullmatch(r"<\s*(\d+)", text):
            hi = int(m.group(1))
            lo = AGE_FLOOR if hi > AGE_FLOOR else max(0, hi - OPEN_GROUP_WIDTH)
            return cls(lo, hi, "lower")
        if m := re.fullmatch(r"(\d+)\s*\+", text):
            lo = int(m.group(1))
            hi = AGE_CEILING if lo < AGE_CEILING else lo + OPEN_GROUP_WIDTH
            return cls(lo, hi, "upper")
        if m := re.fullmatch(r"(\d+)\s*-\s*(\d+)", text):
            return cls(int(m.group(1)), int(m.group(2)) + 1)
        if m := re.fullmatch(r"\d+", text):
            return cls(int(text), int(text) + 1)
        raise ValueError(f"unrecognised age group {label!r}")

    def __str__(self):
        return self.label


@dataclass(frozen=True)
class StockTable:
    country: str
    entries: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)

    @property
    def years(self) -> list[int]:
        return sorted({k[3] for k in self.entries})

    @property
    def fields(self) -> tuple[FieldId, ...]:
        return tuple(sorted({k[0] for k in self.entries if k[0] is not None}))

    @property
    def is_extended(self) -> bool:
        fs = self.fields
        return bool(fs) and all(f.sector is not None for f in fs)

    @property
    def break_years(self) -> list[int]:
        return sorted(y for y, fl in self.flags.items() if BREAK_FLAG in fl)

    @cached_property
    def _cohort_index(self) -> dict:
        index: dict = {}
        for (fld, sex, grp, year), v in self.entries.items():
            if sex is not None and grp is not None:
                index.setdefault((fld, year), {})[(sex, grp)] = v
        return index

    def cohorts(self, fld: FieldId | None, year: int) -> dict:
        """Cohort rows ``(sex, age_group) -> count`` for one field and year."""
        return dict(self._cohort_index.get((fld, year), {}))

    def has_cohorts(self, fld: FieldId | None, year: int) -> bool:
        return (fld, year) in self._cohort_index

    def stored_total(self, fld: FieldId | None, year: int) -> float | None:
        return self.entries.get((fld, None, None, year))

    def field_total(self, fld: FieldId | None, year: int) -> float | None:
        rows = self.cohorts(fld, year)
        if rows:
            return math.fsum(rows.values())
        return self.stored_total(fld, year)


@dataclass(frozen=True)
class InflowSeries:
    country: str
    graduates: dict = field(default_factory=dict)
    migrants: dict = field(default_factory=dict)
    # None until derived from the stock table (see demography.entrant_distribution).
    entrant_sex_share: dict | None = None
    entry_age_range: tuple[int, int] = (25, 34)

    @property
    def years(self) -> list[int]:
        return sorted(set(self.graduates) | set(self.migrants))

    def totals(self) -> dict[int, float]:
        return {
            y: self.graduates.get(y, 0.0) + self.migrants.get(y, 0.0) for y in self.years
        }


@dataclass(frozen=True)
class PopulationProjection:
    country: str
    scenario: str
    values: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SectorAnchors:
    """Sector shares per profession at (ideally two) anchor years.

    ``shares[year][(sector, profession)]`` is a fraction; per profession and
    year the three sectors sum to one.
    """

    country: str
    shares: dict = field(default_factory=dict)

    @property
    def years(self) -> list[int]:
        return sorted(self.shares)


@dataclass(frozen=True)
class CountryBundle:
    country: str
    stocks: StockTable
    inflow: InflowSeries
    populations: dict = field(default_factory=dict)
    sector_split: SectorAnchors | None = None

    @property
    def baseline(self) -> PopulationProjection:
        return self.populations[BASELINE]


@dataclass(frozen=True)
class Params:
    p_enter: float
    field_choice: dict

    def __post_init__(self):
        if not (0.0 <= self.p_enter <= 1.0) or not math.isfinite(self.p_enter):
            raise ValueError(f"p_enter={self.p_enter!r} outside [0, 1]")
        for f, p in self.field_choice.items():
            if not (0.0 <= p <= 1.0):
                raise ValueError(f"field_choice[{f}]={p!r} outside [0, 1]")
        total = math.fsum(self.field_choice.values())
        if abs(total - 1.0) > SHARE_TOL:
            raise ShareSumViolation("field_choice", total)

    @classmethod
    def minimal(cls, p_enter: float, p_gp: float) -> "Params":
        return cls(p_enter, {GP: p_gp, SP: 1.0 - p_gp})

    @property
    def fields(self) -> tuple[FieldId, ...]:
        return tuple(sorted(self.field_choice))

    @property
    def p_gp(self) -> float:
        """Total probability of entering as a GP, summed over sectors."""
        return math.fsum(
            p for f, p in self.field_choice.items() if f.profession is Profession.GP
        )

    def vector(self, fields: Iterable[FieldId]) -> np.ndarray:
        return np.array([self.field_choice.get(f, 0.0) for f in fields], dtype=float)

    def to_json(self) -> dict:
        return {
            "p_enter": self.p_enter,
            "field_choice": {f.code: p for f, p in sorted(self.field_choice.items())},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Params":
        choice = {FieldId.parse(k): float(v) for k, v in obj["field_choice"].items()}
        return cls(float(obj["p_enter"]), choice)


@dataclass(frozen=True)
class ModelState:
    """Expected physician counts for one year, shape ``(field, sex, age)``."""

    year: int
    fields: tuple
    ages: np.ndarray
    stocks: np.ndarray

    def get(self, fld: FieldId, sex: Sex, age: int) -> float:
        a = int(age) - int(self.ages[0])
        return float(self.stocks[self.fields.index(fld), SEXES.index(sex), a])

    def totals(self) -> dict[FieldId, float]:
        sums = self.stocks.reshape(len(self.fields), -1).sum(axis=-1)
        return dict(zip(self.fields, sums.tolist()))

    def as_dict(self) -> dict:
        out = {}
        for i, f in enumerate(self.fields):
            for j, s in enumerate(SEXES):
                for k, a in enumerate(self.ages.tolist()):
                    out[(f, s, a)] = float(self.stocks[i, j, k])
        return out


@dataclass(frozen=True)
class ExitRates:
    """Field-independent exit probabilities, shape ``(sex, age)``.

    NaN marks cohorts for which no rate could be estimated.
    """

    ages: np.ndarray
    rates: np.ndarray

    def get(self, sex: Sex, age: int) -> float:
        return float(self.rates[SEXES.index(sex), int(age) - int(self.ages[0])])

    def missing(self) -> list[tuple[Sex, int]]:
        idx = np.argwhere(np.isnan(self.rates))
        return [(SEXES[i], int(self.ages[k])) for i, k in idx]


@dataclass(frozen=True)
class Violation:
    kind: str
    location: str
    detail: str = ""

    def __str__(self):
        tail = f": {self.detail}" if self.detail else ""
        return f"{self.kind}({self.location}){tail}"


def _check_stocks(stocks: StockTable) -> list[Violation]:
    out = []
    for (fld, sex, grp, year), v in stocks.entries.items():
        if not (v >= 0) or not math.isfinite(v):
            loc = f"{fld or 'ALL'},{sex.value if sex else ''},{grp or ''},{year}"
            out.append(Violation("NegativeCount", loc, repr(v)))

    years = stocks.years
    if years and years != list(range(years[0], years[-1] + 1)):
        out.append(Violation("NonContiguousYears", "stocks", str(years)))

    fields = stocks.fields
    if fields and len({f.sector is None for f in fields}) > 1:
        out.append(Violation("MixedSectors", "stocks", ", ".join(map(str, fields))))

    groups: dict = {}
    for (fld, sex, grp, year), v in stocks.entries.items():
        if sex is not None and grp is not None:
            groups.setdefault((fld, sex, year), []).append(grp)
    for (fld, sex, year), gs in groups.items():
        gs = sorted(gs)
        for a, b in zip(gs, gs[1:]):
            if a.overlaps(b):
                out.append(Violation("OverlappingGroups", f"{fld or 'ALL'},{sex.value},{year}", f"{a} / {b}"))

    # Aggregate rows must match the cohort detail they summarise.
    for (fld, sex, grp, year), v in stocks.entries.items():
        if sex is not None and grp is not None:
            continue
        rows = stocks.cohorts(fld, year)
        if not rows:
            continue
        parts = [c for (s, g), c in rows.items() if (sex is None or s == sex) and (grp is None or g == grp)]
        total = math.fsum(parts)
        if abs(total - v) > TOTAL_RTOL * max(abs(v), abs(total), 1e-300):
            loc = f"{fld or 'ALL'},{sex.value if sex else ''},{grp or ''},{year}"
            out.append(Violation("TotalMismatch", loc, f"stored {v!r}, cohorts sum to {total!r}"))
    return out


def validate_dataset(bundle: CountryBundle) -> list[Violation]:
    """Check every type invariant of a country bundle.

    Returns the complete list of violations; an empty list means the bundle is
    valid.  Never raises for data problems.
    """
    out: list[Violation] = []
    c = bundle.country
    parts = [("stocks", bundle.stocks.country), ("inflow", bundle.inflow.country)]
    parts += [(f"population:{k}", p.country) for k, p in bundle.populations.items()]
    if bundle.sector_split is not None:
        parts.append(("sector_split", bundle.sector_split.country))
    for name, country in parts:
        if country != c:
            out.append(Violation("CountryMismatch", name, f"{country!r} != {c!r}"))

    out += _check_stocks(bundle.stocks)

    inflow = bundle.inflow
    for src, series in (("GRAD", inflow.graduates), ("MIGR", inflow.migrants)):
        for y, v in series.items():
            if not (v >= 0) or not math.isfinite(v):
                out.append(Violation("NegativeCount", f"inflow,{src},{y}", repr(v)))
    if inflow.entrant_sex_share is not None:
        total = math.fsum(inflow.entrant_sex_share.values())
        if abs(total - 1.0) > SHARE_TOL or any(v < 0 for v in inflow.entrant_sex_share.values()):
            out.append(Violation("ShareSumViolation", "entrant_sex_share", f"sum={total!r}"))

    if BASELINE not in bundle.populations:
        out.append(Violation("MissingBaselineScenario", c))
    for label, proj in bundle.populations.items():
        if proj.scenario != label:
            out.append(Violation("ScenarioLabelMismatch", label, proj.scenario))
        for y, v in proj.values.items():
            if not (v > 0) or not math.isfinite(v):
                out.append(Violation("NonPositivePopulation", f"{label},{y}", repr(v)))

    if bundle.sector_split is not None:
        for y, shares in bundle.sector_split.shares.items():
            for prof in PROFESSIONS:
                vals = [v for (s, p), v in shares.items() if p is prof]
                total = math.fsum(vals)
                if vals and abs(total - 1.0) > SHARE_TOL:
                    out.append(Violation("ShareSumViolation", f"sector_split,{prof.value},{y}", f"sum={total!r}"))
    return out


def ensure_valid(bundle: CountryBundle) -> CountryBundle:
    """Return ``bundle`` unchanged, or raise :class:`ValidationFailed`."""
    violations = validate_dataset(bundle)
    if violations:
        raise ValidationFailed(violations)
    return bundle
