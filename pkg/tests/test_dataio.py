"""CSV ingestion, calendar conversion at the file boundary, and emission.

The canonical emitted form labels every date with June, so a write-read
cycle is lossless and a second write reproduces the bytes exactly.
"""

import io

import numpy as np
import pytest

from u5mr.core import Child, CovariateProfile, FullBirthHistory, SummaryBirthHistory
from u5mr.dataio import (
    FBH_COLUMNS,
    SBH_COLUMNS,
    SchemaError,
    emit_fbh,
    emit_sbh,
    read_fbh,
    read_hiv_factors,
    read_sbh,
)


def fbh_csv(rows):
    buf = io.StringIO()
    buf.write(",".join(FBH_COLUMNS) + "\n")
    for row in rows:
        buf.write(",".join(str(v) for v in row) + "\n")
    buf.seek(0)
    return buf


def sbh_csv(rows):
    buf = io.StringIO()
    buf.write(",".join(SBH_COLUMNS) + "\n")
    for row in rows:
        buf.write(",".join(str(v) for v in row) + "\n")
    buf.seek(0)
    return buf


# (woman_id, survey_id, cluster_id, weight, mother_age, survey_year,
#  survey_month, child_index, birth_month, birth_year, death_month,
#  death_year, district, strata)
def woman_row(woman="w1", child=("", "", "", "", ""), month=6, weight="1.0",
              age=30, year=2010, cluster="c1", district="d1", strata="rural"):
    return (woman, "dhs1", cluster, weight, age, year, month, *child,
            district, strata)


# ---------------------------------------------------------------------------
# FBH reading

def test_read_fbh_groups_children_and_sorts():
    src = fbh_csv([
        woman_row(child=(1, 6, 2006, "", "")),
        woman_row(child=(2, 6, 2003, 6, 2005)),
        woman_row(woman="w2"),
    ])
    ingest = read_fbh(src)
    assert ingest.n_rows == 3
    assert not ingest.rejects
    rec = {r.woman_id: r for r in ingest.records}
    assert rec["w1"].children == (Child(2003, 2005), Child(2006, None))
    assert rec["w2"].children == ()
    assert rec["w1"].cluster_id == "c1"
    assert rec["w1"].weight == 1.0
    assert rec["w1"].covariates == CovariateProfile(
        district="d1", strata="rural", survey_id="dhs1", is_sbh=False)


def test_read_fbh_non_june_survey_shifts_labels():
    # survey Feb 2009: Oct 2007 sits 16 months back, one full yearly
    # interval before the short one, so it labels as 2008
    src = fbh_csv([
        woman_row(month=2, year=2009, child=(1, 10, 2007, "", "")),
        woman_row(woman="w2", month=2, year=2009, child=(1, 1, 2009, "", "")),
    ])
    ingest = read_fbh(src)
    rec = {r.woman_id: r for r in ingest.records}
    assert rec["w1"].children[0].birth_year == 2008
    # January 2009 falls inside the short interval: survey-year label
    assert rec["w2"].children[0].birth_year == 2009


def test_read_fbh_missing_month_defaults_to_june():
    src = fbh_csv([woman_row(child=(1, "", 2006, "", 2008))])
    rec = read_fbh(src).records[0]
    assert rec.children[0] == Child(2006, 2008)


def test_read_fbh_same_interval_death_folds_forward():
    # death labeled with the birth interval counts as an age-0 death in the
    # following label, except inside the survey year itself
    src = fbh_csv([
        woman_row(child=(1, 6, 2007, 8, 2007)),
        woman_row(woman="w2", child=(1, 1, 2010, 3, 2010)),
    ])
    rec = {r.woman_id: r for r in read_fbh(src).records}
    assert rec["w1"].children[0] == Child(2007, 2008)
    assert rec["w2"].children[0] == Child(2010, 2010)


def test_read_fbh_rejects_with_line_numbers():
    src = fbh_csv([
        woman_row(child=(1, 6, 2006, "", "")),            # line 2, fine
        woman_row(woman="w2", child=(1, 6, 2005, 6, 2003)),  # line 3
        woman_row(woman="w3", weight="-2.0"),             # line 4
        woman_row(woman="w4", child=(1, 6, 2011, "", "")),   # line 5
    ])
    ingest = read_fbh(src)
    assert [r.woman_id for r in ingest.records] == ["w1"]
    rejects = {r.woman_id: r for r in ingest.rejects}
    assert rejects["w2"].line == 3
    assert "precedes" in rejects["w2"].reason
    assert rejects["w3"].line == 4
    assert "weight" in rejects["w3"].reason
    assert rejects["w4"].line == 5
    assert "after the survey" in rejects["w4"].reason


def test_read_fbh_rejects_inconsistent_woman_fields():
    src = fbh_csv([
        woman_row(child=(1, 6, 2006, "", "")),
        woman_row(child=(2, 6, 2004, "", ""), cluster="c9"),
    ])
    ingest = read_fbh(src)
    assert not ingest.records
    assert ingest.rejects[0].line == 2
    assert "differ" in ingest.rejects[0].reason


def test_read_fbh_header_and_empty_checks():
    with pytest.raises(SchemaError, match="birth_year"):
        read_fbh(io.StringIO("woman_id,survey_id\nw1,s1\n"))
    with pytest.raises(SchemaError, match="no records"):
        read_fbh(fbh_csv([]))


# ---------------------------------------------------------------------------
# FBH round trip

def roundtrip_records():
    cov = CovariateProfile(district="d2", strata="urban", survey_id="dhs1")
    return [
        FullBirthHistory(34, 2010, children=(Child(2001), Child(2004, 2006),
                                             Child(2010, 2010)),
                         covariates=cov, woman_id="a01", cluster_id="c3",
                         weight=1.25),
        FullBirthHistory(19, 2010, children=(), covariates=cov,
                         woman_id="a02", cluster_id="c4",
                         weight=0.8414709848078965),
    ]


def test_fbh_emit_read_emit_is_stable():
    records = roundtrip_records()
    first = io.StringIO()
    emit_fbh(records, first)
    ingest = read_fbh(io.StringIO(first.getvalue()))
    assert not ingest.rejects
    assert ingest.records == records

    second = io.StringIO()
    emit_fbh(ingest.records, second)
    assert second.getvalue() == first.getvalue()


def test_fbh_emit_orders_women_and_children():
    records = list(reversed(roundtrip_records()))
    out = io.StringIO()
    emit_fbh(records, out)
    lines = out.getvalue().splitlines()
    assert lines[0] == ",".join(FBH_COLUMNS)
    ids = [line.split(",")[0] for line in lines[1:]]
    assert ids == ["a01", "a01", "a01", "a02"]
    birth_years = [line.split(",")[9] for line in lines[1:4]]
    assert birth_years == ["2001", "2004", "2010"]


# ---------------------------------------------------------------------------
# SBH

def test_read_sbh_records_and_rejects():
    src = sbh_csv([
        ("s1", "dhs1", 27, 2010, 3, 1, "d1", "rural"),   # line 2
        ("s2", "dhs1", 25, 2010, 2, 3, "d1", "rural"),   # line 3: cd > ceb
        ("s3", "dhs1", 16, 2010, 2, 0, "d1", "rural"),   # line 4: too many
        ("s4", "dhs1", 16, 2010, 1, 0, "d1", "urban"),   # line 5, fine
    ])
    ingest = read_sbh(src)
    assert ingest.n_rows == 4
    assert [r.woman_id for r in ingest.records] == ["s1", "s4"]
    rec = ingest.records[0]
    assert (rec.births, rec.deaths) == (3, 1)
    assert rec.covariates.is_sbh is True
    rejects = {r.woman_id: r for r in ingest.rejects}
    assert rejects["s2"].line == 3 and "exceed" in rejects["s2"].reason
    assert rejects["s3"].line == 4 and "fertile" in rejects["s3"].reason


def test_read_sbh_header_and_empty_checks():
    with pytest.raises(SchemaError, match="cd"):
        read_sbh(io.StringIO("woman_id,ceb\nw,1\n"))
    with pytest.raises(SchemaError, match="no records"):
        read_sbh(sbh_csv([]))


def test_sbh_emit_read_emit_is_stable():
    records = [
        SummaryBirthHistory(42, 2010, births=5, deaths=2,
                            covariates=CovariateProfile(
                                district="d1", strata="rural",
                                survey_id="dhs1", is_sbh=True),
                            woman_id="b2"),
        SummaryBirthHistory(18, 2010, births=0, deaths=0,
                            covariates=CovariateProfile(
                                district="d1", strata="urban",
                                survey_id="dhs1", is_sbh=True),
                            woman_id="b1"),
    ]
    first = io.StringIO()
    emit_sbh(records, first)
    ingest = read_sbh(io.StringIO(first.getvalue()))
    assert not ingest.rejects
    assert ingest.records == sorted(records, key=lambda r: r.woman_id)

    second = io.StringIO()
    emit_sbh(ingest.records, second)
    assert second.getvalue() == first.getvalue()


# ---------------------------------------------------------------------------
# HIV factor table

def test_read_hiv_factors():
    src = io.StringIO("survey_id,year,factor\n"
                      "dhs1,2004,1.13\n"
                      "dhs1,2005,1.2\n"
                      "dhs2,2004,0.97\n")
    factors = read_hiv_factors(src)
    assert factors.factor("dhs1", 2004) == 1.13
    assert factors.factor("dhs2", 2004) == 0.97
    assert factors.factor("dhs1", 1999) == 1.0
    assert factors.vector("dhs1", np.arange(2004, 2007)).tolist() == \
        [1.13, 1.2, 1.0]


def test_read_hiv_factors_validation():
    with pytest.raises(SchemaError, match="duplicate"):
        read_hiv_factors(io.StringIO(
            "survey_id,year,factor\ns,2004,1.1\ns,2004,1.2\n"))
    with pytest.raises(SchemaError, match="positive"):
        read_hiv_factors(io.StringIO("survey_id,year,factor\ns,2004,0\n"))
    with pytest.raises(SchemaError, match="line 2"):
        read_hiv_factors(io.StringIO("survey_id,year,factor\ns,abc,1.1\n"))
    with pytest.raises(SchemaError, match="factor"):
        read_hiv_factors(io.StringIO("survey_id,year\ns,2004\n"))
