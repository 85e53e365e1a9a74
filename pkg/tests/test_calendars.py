"""Month/year to interval-label discretization."""

import pytest

from u5mr.calendars import SurveyCalendar


def test_june_survey_reproduces_calendar_years():
    cal = SurveyCalendar(6, 2010)
    for year in range(1990, 2011):
        assert cal.assign_interval(6, year) == year
        assert cal.assign_interval(1, year) == year


def test_first_interval_spans_six_months():
    cal = SurveyCalendar(6, 2010)
    assert cal.interval_index(6, 2010) == 0
    assert cal.interval_index(1, 2010) == 0   # 5 months before
    assert cal.interval_index(12, 2009) == 1  # 6 months before
    assert cal.interval_index(1, 2009) == 1   # 17 months before
    assert cal.interval_index(12, 2008) == 2  # 18 months before


def test_february_survey_example():
    cal = SurveyCalendar(2, 2009)
    assert cal.assign_interval(1, 2009) == 2009
    # October 2007 is 16 months before February 2009: interval 1.
    assert cal.assign_interval(10, 2007) == 2008
    assert cal.assign_interval(11, 2007) == 2008


def test_events_after_the_survey_are_rejected():
    cal = SurveyCalendar(2, 2009)
    with pytest.raises(ValueError, match="after the survey"):
        cal.interval_index(3, 2009)


def test_mother_age_anchoring():
    cal = SurveyCalendar(6, 2010)
    assert cal.mother_age_in_interval(30, 0) == 30
    assert cal.mother_age_in_interval(30, 4) == 26
    with pytest.raises(ValueError):
        cal.mother_age_in_interval(3, 7)


def test_short_interval_corrections():
    cal = SurveyCalendar(6, 2010)
    assert cal.fertility_correction(2010) == 0.5
    assert cal.fertility_correction(2009) == 1.0
    assert cal.hazard_correction(2010, 2010) == pytest.approx(0.65)
    assert cal.hazard_correction(2008, 2009) == 1.0
    with pytest.raises(ValueError):
        cal.hazard_correction(2009, 2008)


def test_fold_death_age():
    cal = SurveyCalendar(6, 2010)
    assert cal.fold_death_age(2005, 2006) == 0
    assert cal.fold_death_age(2005, 2008) == 2
    # Same-interval death folds onto age zero.
    assert cal.fold_death_age(2010, 2010) == 0


def test_bad_months_are_rejected():
    with pytest.raises(ValueError):
        SurveyCalendar(0, 2010)
    cal = SurveyCalendar(6, 2010)
    with pytest.raises(ValueError):
        cal.months_before_survey(13, 2009)
