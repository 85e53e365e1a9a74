"""Discretization of reported month/year dates onto the yearly model grid.

Survey interviews rarely fall in mid-year, so time is cut into one 6-month
interval ending at the survey month and 12-month intervals before that.
Interval k (k = 0 most recent) gets the calendar label ``survey_year - k``.
The short final interval is compensated by multiplying the survey-year
fertility by 0.5 and the survey-year-birth infant hazard by an empirical
0.65 factor.
"""

from __future__ import annotations

from dataclasses import dataclass

__all__ = [
    "SurveyCalendar",
    "SURVEY_YEAR_FERTILITY_FACTOR",
    "DEFAULT_SURVEY_YEAR_HAZARD_FACTOR",
]

SURVEY_YEAR_FERTILITY_FACTOR = 0.5
# Ratio of a roughly-3-month death probability to the full first-year one,
# estimated from observed full birth histories. Overridable per calendar.
DEFAULT_SURVEY_YEAR_HAZARD_FACTOR = 0.65


@dataclass(frozen=True)
class SurveyCalendar:
    survey_month: int
    survey_year: int
    survey_year_hazard_factor: float = DEFAULT_SURVEY_YEAR_HAZARD_FACTOR

    def __post_init__(self):
        if not 1 <= self.survey_month <= 12:
            raise ValueError(f"survey month {self.survey_month} not in 1..12")
        if not 0.0 < self.survey_year_hazard_factor <= 1.0:
            raise ValueError("survey-year hazard factor must be in (0, 1]")

    def months_before_survey(self, event_month: int, event_year: int) -> int:
        if not 1 <= event_month <= 12:
            raise ValueError(f"event month {event_month} not in 1..12")
        return (self.survey_year - event_year) * 12 + self.survey_month - event_month

    def interval_index(self, event_month: int, event_year: int) -> int:
        """0 for the 6-month interval ending at the survey, 1, 2, ... earlier."""
        mb = self.months_before_survey(event_month, event_year)
        if mb < 0:
            raise ValueError(
                f"event {event_year}-{event_month:02d} falls after the survey")
        return 0 if mb <= 5 else 1 + (mb - 6) // 12

    def assign_interval(self, event_month: int, event_year: int) -> int:
        """Discretized year label of the interval containing the event."""
        return self.survey_year - self.interval_index(event_month, event_year)

    def mother_age_in_interval(self, reported_age: int, k: int) -> int:
        """Woman's age during interval k, anchored at reported age + 6 months."""
        if k < 0:
            raise ValueError("interval index must be nonnegative")
        age = reported_age - k
        if age < 0:
            raise ValueError(
                f"reported age {reported_age} gives negative age in interval {k}")
        return age

    def fertility_correction(self, year_label: int) -> float:
        """Short-exposure multiplier on the birth probability for a year label."""
        return SURVEY_YEAR_FERTILITY_FACTOR if year_label == self.survey_year else 1.0

    def hazard_correction(self, birth_year_label: int, exposure_year_label: int) -> float:
        """Short-exposure multiplier on the infant hazard.

        Applies only to children born in the survey-year interval; their
        single exposure year is the survey year itself. Deaths that the
        discretization would push past the survey are folded into the first
        year of life upstream, so exposure never exceeds the survey year.
        """
        if exposure_year_label < birth_year_label:
            raise ValueError("exposure year precedes birth year")
        if birth_year_label == self.survey_year:
            return self.survey_year_hazard_factor
        return 1.0

    def fold_death_age(self, birth_year_label: int, death_year_label: int) -> int:
        """Completed age at death implied by two interval labels.

        A death labeled with the birth interval itself is counted as a death
        within the first year of life (age 0).
        """
        return max(death_year_label - birth_year_label - 1, 0)
