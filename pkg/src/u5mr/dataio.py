"""CSV ingestion and emission for survey datasets and reference tables.

Ingestion maps reported month/year dates onto the yearly grid through the
survey calendar, applies the record invariants, and reports rejected rows
with their line numbers instead of failing wholesale. Emission writes a
canonical form: fixed column order, rows sorted by (survey_id, woman_id),
children ordered within each woman, months resolved to the identity
calendar (survey month 6). Ingesting a canonical file and emitting it again
reproduces the bytes exactly.

FBH files carry one row per child plus a single row with blank child fields
for childless women. SBH files carry one row per woman.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, TextIO, Union

from .calendars import SurveyCalendar
from .core import (
    AgeGridConfig,
    Child,
    CovariateProfile,
    FullBirthHistory,
    InvalidRecord,
    SummaryBirthHistory,
)
from .posterior import HivFactors

__all__ = [
    "SchemaError",
    "RejectedRow",
    "FbhIngest",
    "SbhIngest",
    "read_fbh",
    "read_sbh",
    "read_hiv_factors",
    "emit_fbh",
    "emit_sbh",
    "FBH_COLUMNS",
    "SBH_COLUMNS",
]

FBH_COLUMNS = ("woman_id", "survey_id", "cluster_id", "weight", "mother_age",
               "survey_year", "survey_month", "child_index", "birth_month",
               "birth_year", "death_month", "death_year", "district",
               "strata")
SBH_COLUMNS = ("woman_id", "survey_id", "mother_age", "survey_year", "ceb",
               "cd", "district", "strata")
HIV_COLUMNS = ("survey_id", "year", "factor")

# Reported dates sometimes lack the month; the midpoint keeps the yearly
# labels unbiased and makes a June-survey file month-free.
DEFAULT_MONTH = 6


class SchemaError(ValueError):
    """The file itself is unusable (missing columns, empty, etc.)."""


@dataclass(frozen=True)
class RejectedRow:
    line: int
    woman_id: str
    reason: str


@dataclass
class FbhIngest:
    records: list[FullBirthHistory]
    rejects: list[RejectedRow] = field(default_factory=list)
    n_rows: int = 0


@dataclass
class SbhIngest:
    records: list[SummaryBirthHistory]
    rejects: list[RejectedRow] = field(default_factory=list)
    n_rows: int = 0


def _open(path_or_handle, mode: str):
    if hasattr(path_or_handle, "read") or hasattr(path_or_handle, "write"):
        return path_or_handle, False
    return open(path_or_handle, mode, newline=""), True


def _check_header(reader: csv.DictReader, required: Sequence[str],
                  what: str) -> None:
    if reader.fieldnames is None:
        raise SchemaError(f"{what}: empty file")
    missing = [c for c in required if c not in reader.fieldnames]
    if missing:
        raise SchemaError(f"{what}: missing columns {missing}")


def _int(row: dict, col: str) -> int:
    raw = (row.get(col) or "").strip()
    if raw == "":
        raise ValueError(f"{col} is blank")
    return int(raw)


def _opt_int(row: dict, col: str) -> Optional[int]:
    raw = (row.get(col) or "").strip()
    return None if raw == "" else int(raw)


def _float(row: dict, col: str) -> float:
    raw = (row.get(col) or "").strip()
    if raw == "":
        raise ValueError(f"{col} is blank")
    return float(raw)


# ---------------------------------------------------------------------------
# FBH

@dataclass
class _WomanRows:
    first_line: int
    header: dict
    child_rows: list[tuple[int, dict]] = field(default_factory=list)


def _header_fields(row: dict) -> dict:
    return {
        "woman_id": (row.get("woman_id") or "").strip(),
        "survey_id": (row.get("survey_id") or "").strip(),
        "cluster_id": (row.get("cluster_id") or "").strip(),
        "weight": (row.get("weight") or "").strip(),
        "mother_age": (row.get("mother_age") or "").strip(),
        "survey_year": (row.get("survey_year") or "").strip(),
        "survey_month": (row.get("survey_month") or "").strip(),
        "district": (row.get("district") or "").strip(),
        "strata": (row.get("strata") or "").strip(),
    }


def _convert_child(row: dict, cal: SurveyCalendar) -> Child:
    birth_year = _int(row, "birth_year")
    birth_month = _opt_int(row, "birth_month") or DEFAULT_MONTH
    birth_label = cal.assign_interval(birth_month, birth_year)
    death_year = _opt_int(row, "death_year")
    if death_year is None:
        return Child(birth_label, None)
    death_month = _opt_int(row, "death_month") or DEFAULT_MONTH
    death_label = cal.assign_interval(death_month, death_year)
    if death_label < birth_label:
        raise ValueError("death interval precedes birth interval")
    if death_label == birth_label and birth_label != cal.survey_year:
        # A completed-interval death folds into the first year of life.
        death_label = birth_label + 1
    return Child(birth_label, death_label)


def read_fbh(source: Union[str, TextIO], *,
             ages: AgeGridConfig = AgeGridConfig(),
             allow_survey_year_births: bool = True) -> FbhIngest:
    """Parse and validate an FBH file.

    Rows that fail to parse or records that violate the invariants land in
    ``rejects`` with the first offending line number; one bad child row
    rejects the whole woman (partial histories would bias the counts).
    """
    fh, owned = _open(source, "r")
    try:
        reader = csv.DictReader(fh)
        _check_header(reader, FBH_COLUMNS, "FBH file")
        women: dict[tuple[str, str], _WomanRows] = {}
        n_rows = 0
        for line, row in enumerate(reader, start=2):
            n_rows += 1
            key = ((row.get("survey_id") or "").strip(),
                   (row.get("woman_id") or "").strip())
            if key not in women:
                women[key] = _WomanRows(line, _header_fields(row))
            if ((row.get("child_index") or "").strip()
                    or (row.get("birth_year") or "").strip()):
                women[key].child_rows.append((line, row))
    finally:
        if owned:
            fh.close()
    if n_rows == 0:
        raise SchemaError("FBH file: no records")

    out = FbhIngest(records=[], n_rows=n_rows)
    for (survey_id, woman_id), bundle in women.items():
        line = bundle.first_line
        try:
            record = _build_fbh(survey_id, woman_id, bundle)
            record.validate(ages,
                            allow_survey_year_births=allow_survey_year_births)
        except (ValueError, InvalidRecord) as exc:
            out.rejects.append(RejectedRow(line, woman_id, str(exc)))
            continue
        out.records.append(record)
    return out


def _build_fbh(survey_id: str, woman_id: str,
               bundle: _WomanRows) -> FullBirthHistory:
    head = bundle.header
    if not woman_id:
        raise ValueError("woman_id is blank")
    for line, row in bundle.child_rows:
        if _header_fields(row) != head:
            raise ValueError(
                f"line {line}: woman-level fields differ between rows")
    if head["weight"] == "":
        raise ValueError("weight is blank")
    weight = float(head["weight"])
    if not weight > 0:
        raise ValueError("weight must be positive")
    survey_year = int(head["survey_year"])
    survey_month = int(head["survey_month"] or DEFAULT_MONTH)
    cal = SurveyCalendar(survey_month, survey_year)
    children = []
    for line, row in sorted(bundle.child_rows):
        try:
            children.append(_convert_child(row, cal))
        except ValueError as exc:
            raise ValueError(f"line {line}: {exc}") from None
    children.sort(key=lambda c: (c.birth_year,
                                 c.death_year if c.death_year is not None
                                 else 10 ** 9))
    return FullBirthHistory(
        mother_age_at_survey=int(head["mother_age"]),
        survey_year=survey_year,
        children=tuple(children),
        covariates=CovariateProfile(district=head["district"],
                                    strata=head["strata"],
                                    survey_id=survey_id,
                                    is_sbh=False),
        woman_id=woman_id,
        cluster_id=head["cluster_id"],
        weight=weight,
    )


def emit_fbh(records: Iterable[FullBirthHistory],
             target: Union[str, TextIO]) -> None:
    """Write records in canonical form (see module docstring)."""
    fh, owned = _open(target, "w")
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(FBH_COLUMNS)
        ordered = sorted(records,
                         key=lambda r: (r.covariates.survey_id, r.woman_id))
        for rec in ordered:
            head = [rec.woman_id, rec.covariates.survey_id, rec.cluster_id,
                    repr(rec.weight), rec.mother_age_at_survey,
                    rec.survey_year, DEFAULT_MONTH]
            tail = [rec.covariates.district, rec.covariates.strata]
            if not rec.children:
                writer.writerow(head + ["", "", "", "", ""] + tail)
                continue
            children = sorted(
                rec.children,
                key=lambda c: (c.birth_year,
                               c.death_year if c.death_year is not None
                               else 10 ** 9))
            for i, child in enumerate(children, start=1):
                dead = child.death_year is not None
                writer.writerow(
                    head + [i, DEFAULT_MONTH, child.birth_year,
                            DEFAULT_MONTH if dead else "",
                            child.death_year if dead else ""] + tail)
    finally:
        if owned:
            fh.close()


# ---------------------------------------------------------------------------
# SBH

def read_sbh(source: Union[str, TextIO], *,
             ages: AgeGridConfig = AgeGridConfig(),
             allow_survey_year_births: bool = False) -> SbhIngest:
    """Parse and validate an SBH file (one row per woman)."""
    fh, owned = _open(source, "r")
    try:
        reader = csv.DictReader(fh)
        _check_header(reader, SBH_COLUMNS, "SBH file")
        out = SbhIngest(records=[])
        for line, row in enumerate(reader, start=2):
            out.n_rows += 1
            woman_id = (row.get("woman_id") or "").strip()
            try:
                record = SummaryBirthHistory(
                    mother_age_at_survey=_int(row, "mother_age"),
                    survey_year=_int(row, "survey_year"),
                    births=_int(row, "ceb"),
                    deaths=_int(row, "cd"),
                    covariates=CovariateProfile(
                        district=(row.get("district") or "").strip(),
                        strata=(row.get("strata") or "").strip(),
                        survey_id=(row.get("survey_id") or "").strip(),
                        is_sbh=True),
                    woman_id=woman_id,
                )
                record.validate(
                    ages, allow_survey_year_births=allow_survey_year_births)
            except (ValueError, InvalidRecord) as exc:
                out.rejects.append(RejectedRow(line, woman_id, str(exc)))
                continue
            out.records.append(record)
    finally:
        if owned:
            fh.close()
    if out.n_rows == 0:
        raise SchemaError("SBH file: no records")
    return out


def emit_sbh(records: Iterable[SummaryBirthHistory],
             target: Union[str, TextIO]) -> None:
    fh, owned = _open(target, "w")
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SBH_COLUMNS)
        ordered = sorted(records,
                         key=lambda r: (r.covariates.survey_id, r.woman_id))
        for rec in ordered:
            writer.writerow([rec.woman_id, rec.covariates.survey_id,
                             rec.mother_age_at_survey, rec.survey_year,
                             rec.births, rec.deaths,
                             rec.covariates.district, rec.covariates.strata])
    finally:
        if owned:
            fh.close()


# ---------------------------------------------------------------------------
# Reference tables

def read_hiv_factors(source: Union[str, TextIO]) -> HivFactors:
    """Parse the HIV correction-factor table (survey_id, year, factor)."""
    fh, owned = _open(source, "r")
    try:
        reader = csv.DictReader(fh)
        _check_header(reader, HIV_COLUMNS, "HIV factor file")
        table: dict[tuple[str, int], float] = {}
        for line, row in enumerate(reader, start=2):
            try:
                key = ((row.get("survey_id") or "").strip(),
                       _int(row, "year"))
                factor = _float(row, "factor")
            except ValueError as exc:
                raise SchemaError(
                    f"HIV factor file line {line}: {exc}") from None
            if not factor > 0:
                raise SchemaError(
                    f"HIV factor file line {line}: factor must be positive")
            if key in table:
                raise SchemaError(
                    f"HIV factor file line {line}: duplicate {key}")
            table[key] = factor
    finally:
        if owned:
            fh.close()
    return HivFactors(table)
