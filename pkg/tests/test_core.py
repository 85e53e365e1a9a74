"""Record invariants and the elementary survival identities."""

import numpy as np
import pytest

from u5mr.core import (
    AgeGridConfig,
    Child,
    CovariateProfile,
    FullBirthHistory,
    InvalidRecord,
    SummaryBirthHistory,
    TableFertility,
    TableHazard,
    summarize,
    survival_probability,
    under_five_mortality,
)


def test_survival_probability_is_the_hazard_product(cov):
    q = TableHazard(2000, ((0.1, 0.05, 0.01), (0.2, 0.02, 0.01)))
    # Born 2004: age 0 in 2004 (period 0), age 1 in 2005 (period 1),
    # age 2 in 2006 (period 1).
    got = survival_probability(2004, 2007, cov, q)
    assert got == pytest.approx((1 - 0.1) * (1 - 0.02) * (1 - 0.02),
                                rel=1e-14)


def test_survival_requires_time_to_pass(cov):
    q = TableHazard(2000, ((0.1, 0.05, 0.01),))
    with pytest.raises(ValueError):
        survival_probability(2005, 2005, cov, q)


def test_under_five_mortality_holds_the_year_fixed(cov):
    q = TableHazard(2000, ((0.1, 0.05, 0.01), (0.2, 0.02, 0.01)))
    # Period measure: all five age hazards evaluated in 2006 (period 1).
    expected = 1 - (1 - 0.2) * (1 - 0.02) ** 4
    assert under_five_mortality(2006, cov, q) == pytest.approx(expected,
                                                               rel=1e-14)


def test_hazard_clamps_years_outside_the_period_range(cov):
    q = TableHazard(2000, ((0.1, 0.05, 0.01), (0.2, 0.02, 0.01)))
    assert q(0, 1950, cov) == 0.1
    assert q(0, 2050, cov) == 0.2
    assert q(7, 2003, cov) == 0.01  # 5+ band


def test_schedules_broadcast_over_arrays(cov):
    f = TableFertility((0.1, 0.2, 0.3, 0.2, 0.1))
    ages = np.array([14, 15, 22, 49, 50])
    vals = f(ages, np.full(5, 2000), cov)
    assert vals.shape == (5,)
    assert vals[0] == 0.0 and vals[-1] == 0.0  # outside fertile range
    assert vals[1] == 0.1 and vals[2] == 0.2 and vals[3] == 0.1


def test_validate_rejects_two_births_in_one_year():
    rec = FullBirthHistory(30, 2010, (Child(2001), Child(2001)))
    with pytest.raises(InvalidRecord, match="multiple births"):
        rec.validate()


def test_validate_rejects_survey_year_birth_unless_allowed():
    rec = FullBirthHistory(30, 2010, (Child(2010),))
    with pytest.raises(InvalidRecord, match="too late"):
        rec.validate()
    rec.validate(allow_survey_year_births=True)


def test_validate_rejects_birth_below_fertile_minimum():
    # Age at birth would be 30 - (2010 - 1990) = 10.
    rec = FullBirthHistory(30, 2010, (Child(1990),))
    with pytest.raises(InvalidRecord, match="fertile minimum"):
        rec.validate()
    rec.validate(ages=AgeGridConfig(min_fertile_age=9))


def test_validate_same_year_death_only_in_the_survey_interval():
    bad = FullBirthHistory(30, 2010, (Child(2005, 2005),))
    with pytest.raises(InvalidRecord):
        bad.validate()
    folded = FullBirthHistory(30, 2010, (Child(2010, 2010),))
    folded.validate(allow_survey_year_births=True)


def test_sbh_validate_checks_count_feasibility():
    with pytest.raises(InvalidRecord, match="exceed births"):
        SummaryBirthHistory(30, 2010, 2, 3).validate()
    # Age 16 at a 2010 survey leaves one pre-survey fertile year.
    with pytest.raises(InvalidRecord, match="fertile years"):
        SummaryBirthHistory(16, 2010, 2, 0).validate()
    SummaryBirthHistory(16, 2010, 2, 0).validate(
        allow_survey_year_births=True)


def test_summarize_counts_births_and_deaths():
    rec = FullBirthHistory(
        33, 2010, (Child(1999), Child(2002, 2004), Child(2006)),
        CovariateProfile(district="d1"), woman_id="w9")
    s = summarize(rec)
    assert (s.births, s.deaths) == (3, 1)
    assert s.woman_id == "w9"
    assert s.covariates.district == "d1"
    assert s.mother_age_at_survey == 33


def test_strata_must_be_urban_or_rural():
    with pytest.raises(InvalidRecord):
        CovariateProfile(strata="peri-urban")
