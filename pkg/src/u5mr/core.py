"""Domain records for birth-history data and elementary survival probabilities.

Everything downstream (simulation, augmentation, estimation) works on a
discrete yearly time grid: a woman of age ``m_surv`` surveyed in year
``t_surv`` was age ``m_surv - (t_surv - t_b)`` in calendar year ``t_b``, a
child born in year ``t_b`` faces the age-``a`` hazard during calendar year
``t_b + a``, and a death at age ``a`` is recorded in year ``t_b + a + 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Protocol

import numpy as np

__all__ = [
    "AgeGridConfig",
    "CovariateProfile",
    "Child",
    "FullBirthHistory",
    "SummaryBirthHistory",
    "FertilitySchedule",
    "HazardSchedule",
    "TableFertility",
    "TableHazard",
    "survival_probability",
    "under_five_mortality",
    "summarize",
    "InvalidRecord",
]


class InvalidRecord(ValueError):
    """A birth-history record violates a structural invariant."""


@dataclass(frozen=True)
class AgeGridConfig:
    """Fertile age range on the yearly grid.

    ``min_fertile_age`` defaults to 15; analyses of real data where younger
    births are observed can lower it (the Malawi preset uses 9).
    """

    min_fertile_age: int = 15
    max_fertile_age: int = 49

    def __post_init__(self):
        if not 0 < self.min_fertile_age <= self.max_fertile_age:
            raise ValueError("invalid fertile age range")

    def fertile(self, age: int) -> bool:
        return self.min_fertile_age <= age <= self.max_fertile_age


DEFAULT_AGES = AgeGridConfig()


@dataclass(frozen=True)
class CovariateProfile:
    """Covariates attached to a woman's record.

    ``is_sbh`` is True iff the record comes from a summary-only source; the
    hazard model's reporting-bias columns key off it.
    """

    district: str = ""
    strata: str = "rural"
    survey_id: str = ""
    is_sbh: bool = False

    def __post_init__(self):
        if self.strata not in ("urban", "rural"):
            raise InvalidRecord(f"unknown strata {self.strata!r}")


@dataclass(frozen=True)
class Child:
    birth_year: int
    death_year: Optional[int] = None  # None = alive at survey

    @property
    def died(self) -> bool:
        return self.death_year is not None


@dataclass(frozen=True)
class FullBirthHistory:
    """One woman's complete record on the discretized yearly grid."""

    mother_age_at_survey: int
    survey_year: int
    children: tuple[Child, ...]
    covariates: CovariateProfile = field(default_factory=CovariateProfile)
    woman_id: str = ""
    cluster_id: str = ""
    weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))

    def validate(self, ages: AgeGridConfig = DEFAULT_AGES, *,
                 allow_survey_year_births: bool = False) -> None:
        """Raise InvalidRecord on any structural violation.

        ``allow_survey_year_births`` admits births labeled with the survey
        year itself (calendar-discretized data); the one-birth-per-year rule
        and the fertile-age bounds always apply.
        """
        last = self.survey_year if allow_survey_year_births else self.survey_year - 1
        seen: set[int] = set()
        for ch in self.children:
            if ch.birth_year in seen:
                raise InvalidRecord(
                    f"woman {self.woman_id!r}: multiple births in year {ch.birth_year}")
            seen.add(ch.birth_year)
            if ch.birth_year > last:
                raise InvalidRecord(
                    f"woman {self.woman_id!r}: birth year {ch.birth_year} too late")
            m_b = self.mother_age_at_survey - (self.survey_year - ch.birth_year)
            if m_b < ages.min_fertile_age:
                raise InvalidRecord(
                    f"woman {self.woman_id!r}: age at birth {m_b} below fertile minimum")
            if ch.death_year is not None:
                if ch.death_year > self.survey_year:
                    raise InvalidRecord(
                        f"woman {self.woman_id!r}: death year {ch.death_year} after survey")
                # Same-interval (folded) deaths may carry death_year == birth_year
                # only when the birth sits in the survey-year interval.
                if ch.death_year < ch.birth_year or (
                        ch.death_year == ch.birth_year and ch.birth_year != self.survey_year):
                    raise InvalidRecord(
                        f"woman {self.woman_id!r}: death year {ch.death_year} "
                        f"before birth year {ch.birth_year}")


@dataclass(frozen=True)
class SummaryBirthHistory:
    """One woman's totals: children ever born and children dead."""

    mother_age_at_survey: int
    survey_year: int
    births: int
    deaths: int
    covariates: CovariateProfile = field(default_factory=CovariateProfile)
    woman_id: str = ""

    def validate(self, ages: AgeGridConfig = DEFAULT_AGES, *,
                 allow_survey_year_births: bool = False) -> None:
        if self.births < 0 or self.deaths < 0:
            raise InvalidRecord(f"woman {self.woman_id!r}: negative counts")
        if self.deaths > self.births:
            raise InvalidRecord(
                f"woman {self.woman_id!r}: deaths {self.deaths} exceed births {self.births}")
        last_age = self.mother_age_at_survey - (0 if allow_survey_year_births else 1)
        n_years = max(0, min(last_age, ages.max_fertile_age) - ages.min_fertile_age + 1)
        if self.births > n_years:
            raise InvalidRecord(
                f"woman {self.woman_id!r}: {self.births} births but only "
                f"{n_years} fertile years under the one-birth-per-year grid")


class FertilitySchedule(Protocol):
    """Probability a woman of age ``m`` gives birth during calendar year ``t``.

    Implementations must broadcast over numpy arrays of ages and years.
    """

    def __call__(self, age, year, cov: CovariateProfile): ...


class HazardSchedule(Protocol):
    """Probability a child of completed age ``a`` dies during calendar year ``t``.

    Implementations must broadcast over numpy arrays of ages and years.
    """

    def __call__(self, age, year, cov: CovariateProfile): ...


@dataclass(frozen=True)
class TableFertility:
    """Fertility lookup by 5-year maternal age band, constant in time.

    ``rates`` maps band index (0: 15-19, ..., 4: 35-49 by default bands) to a
    probability; ages outside the fertile range return 0.
    """

    rates: tuple[float, ...]
    ages: AgeGridConfig = DEFAULT_AGES

    def band(self, age: int) -> int:
        return min(max((age - 15) // 5, 0), len(self.rates) - 1)

    def __call__(self, age, year, cov: CovariateProfile):
        age = np.asarray(age)
        rates = np.asarray(self.rates)
        band = np.clip((age - 15) // 5, 0, rates.size - 1)
        fertile = ((age >= self.ages.min_fertile_age)
                   & (age <= self.ages.max_fertile_age))
        out = np.where(fertile, rates[band], 0.0)
        return out if out.shape else float(out)


@dataclass(frozen=True)
class TableHazard:
    """Hazard lookup with three child-age bands (0, 1-4, 5+) per 5-year period.

    ``rates[p][b]`` is the yearly death probability in period ``p`` for band
    ``b``; years outside the configured period range clamp to the ends. Ages
    5 and older share one band, matching the constant-above-five assumption.
    """

    period_start: int
    rates: tuple[tuple[float, float, float], ...]

    @staticmethod
    def band(age: int) -> int:
        return 0 if age == 0 else (1 if age <= 4 else 2)

    def period(self, year: int) -> int:
        p = (year - self.period_start) // 5
        return min(max(p, 0), len(self.rates) - 1)

    def __call__(self, age, year, cov: CovariateProfile):
        age = np.asarray(age)
        year = np.asarray(year)
        rates = np.asarray(self.rates)
        band = np.where(age == 0, 0, np.where(age <= 4, 1, 2))
        period = np.clip((year - self.period_start) // 5, 0,
                         rates.shape[0] - 1)
        out = rates[period, band]
        return out if out.shape else float(out)


def survival_probability(t_b: int, t_end: int, cov: CovariateProfile,
                         q: HazardSchedule) -> float:
    """Probability a child born in year ``t_b`` is still alive entering ``t_end``.

    The product runs over ages 0..(t_end - t_b - 1), each hazard evaluated in
    the calendar year the child spends at that age.
    """
    if t_b >= t_end:
        raise ValueError(f"birth year {t_b} must precede end year {t_end}")
    s = 1.0
    for a in range(t_end - t_b):
        s *= 1.0 - q(a, t_b + a, cov)
    return s


def under_five_mortality(t: int, cov: CovariateProfile, q: HazardSchedule) -> float:
    """Period probability of death before age 5, all hazards taken at year ``t``."""
    s = 1.0
    for a in range(5):
        s *= 1.0 - q(a, t, cov)
    return 1.0 - s


def summarize(fbh: FullBirthHistory) -> SummaryBirthHistory:
    """Collapse a full history to its summary totals."""
    return SummaryBirthHistory(
        mother_age_at_survey=fbh.mother_age_at_survey,
        survey_year=fbh.survey_year,
        births=len(fbh.children),
        deaths=sum(1 for c in fbh.children if c.died),
        covariates=fbh.covariates,
        woman_id=fbh.woman_id,
    )
