"""Direct estimation from full histories, HIV correction, and fusion.

Cluster-jackknife oracle: delete each cluster and recompute the estimate
from scratch through the public tabulation path. Weights are quarters
(exact binary fractions), so the incremental downdating inside
direct_estimate and the brute-force re-accumulation must agree bitwise.
"""

import math

import numpy as np
import pytest

from u5mr.brass import IndirectEstimate
from u5mr.core import Child, CovariateProfile, FullBirthHistory
from u5mr.direct import (
    DirectEstimate,
    adjust_direct,
    adjust_indirect,
    direct_estimate,
    fuse,
    hiv_adjust,
    make_periods,
    period_containing,
    period_label,
    weighted_hazards,
    weighted_q5,
)


def fbh(children, survey_year=2010, weight=1.0, cluster="c0", survey="dhs1",
        woman_id="w", age=30):
    return FullBirthHistory(
        mother_age_at_survey=age, survey_year=survey_year,
        children=tuple(children), woman_id=woman_id, cluster_id=cluster,
        weight=weight,
        covariates=CovariateProfile(survey_id=survey))


# ---------------------------------------------------------------------------
# Period helpers

def test_make_periods_and_labels():
    periods = make_periods(1975, 2009, 5)
    assert len(periods) == 7
    assert periods[0] == (1975, 1979)
    assert periods[-1] == (2005, 2009)
    assert period_label(periods[3]) == "1990-1994"
    assert make_periods(2000, 2008, 5) == [(2000, 2004), (2005, 2008)]
    with pytest.raises(ValueError):
        make_periods(2010, 2009)


def test_period_containing_uses_floor():
    periods = make_periods(1990, 2009, 5)
    assert period_containing(1994.7, periods) == (1990, 1994)
    assert period_containing(1995.0, periods) == (1995, 1999)
    assert period_containing(2009.99, periods) == (2005, 2009)
    assert period_containing(2010.01, periods) is None
    assert period_containing(1989.2, periods) is None


# ---------------------------------------------------------------------------
# Weighted exposure/event tabulation

def test_weighted_hazards_by_hand():
    rec = fbh([
        Child(2003),          # alive: ages 0..4 over 2003..2007
        Child(2005, 2007),    # died at age 1 during 2006
        Child(2010),          # survey-year birth: no completed exposure
    ], weight=2.0)
    exposure, events = weighted_hazards([rec], (2005, 2009))
    assert exposure.tolist() == [2.0, 2.0, 2.0, 2.0, 2.0]
    assert events.tolist() == [0.0, 2.0, 0.0, 0.0, 0.0]

    exposure, events = weighted_hazards([rec], (2000, 2004))
    assert exposure.tolist() == [2.0, 2.0, 0.0, 0.0, 0.0]
    assert events.tolist() == [0.0, 0.0, 0.0, 0.0, 0.0]


def test_weighted_hazards_death_attribution_boundary():
    # death recorded in 2005 happened at age 1 during 2004, so it belongs
    # to the earlier period
    rec = fbh([Child(2003, 2005)])
    _, events_early = weighted_hazards([rec], (2000, 2004))
    _, events_late = weighted_hazards([rec], (2005, 2009))
    assert events_early[1] == 1.0
    assert events_late.sum() == 0.0


def test_weighted_hazards_censors_at_survey():
    # survey 2010: the child born 2008 has completed ages 0 and 1 only
    rec = fbh([Child(2008)])
    exposure, _ = weighted_hazards([rec], (2005, 2012))
    assert exposure.tolist() == [1.0, 1.0, 0.0, 0.0, 0.0]


def test_weighted_q5_closed_form():
    # 4 children at every age, one death at age 0 and one at age 2
    recs = [fbh([Child(2000), Child(2001)], woman_id="a"),
            fbh([Child(2000, 2001), Child(2002)], woman_id="b"),
            fbh([Child(2001, 2004), Child(2002)], woman_id="c"),
            fbh([Child(2000), Child(2003)], woman_id="d")]
    period = (2000, 2009)
    exposure, events = weighted_hazards(recs, period)
    qa = events / exposure
    expected = 1.0 - float(np.prod(1.0 - qa))
    assert weighted_q5(recs, period) == pytest.approx(expected, rel=1e-12)
    assert events[0] == 1.0 and events[2] == 1.0


def test_weighted_q5_degenerate_returns_none():
    # no deaths at all
    assert weighted_q5([fbh([Child(2000)])], (2000, 2009)) is None
    # no exposure at age 4 inside the window
    assert weighted_q5([fbh([Child(2007, 2008)])], (2005, 2009)) is None


# ---------------------------------------------------------------------------
# Direct estimate with cluster jackknife

def survey_records():
    """Six clusters, quarter-unit weights, deaths spread over ages."""
    records = []
    for k in range(6):
        for w in range(10):
            weight = 0.75 + 0.25 * ((w + k) % 4)
            records.append(fbh([Child(2000 + (w % 6))],
                               weight=weight, cluster=f"c{k}",
                               woman_id=f"k{k}w{w}"))
        a = k % 5
        records.append(fbh([Child(2002, 2002 + a + 1), Child(2003)],
                           weight=1.25, cluster=f"c{k}", woman_id=f"k{k}d0"))
        records.append(fbh([Child(2001, 2001 + a + 1)],
                           weight=0.5, cluster=f"c{k}", woman_id=f"k{k}d1"))
    return records


def theta_oracle(records, period):
    exposure, events = weighted_hazards(records, period)
    if np.any(exposure <= 0):
        return None
    qa = events / exposure
    q5 = 1.0 - float(np.prod(1.0 - qa))
    if not 0.0 < q5 < 1.0:
        return None
    return math.log(q5 / (1.0 - q5))


def test_direct_estimate_point_and_jackknife_match_brute_force():
    records = survey_records()
    period = (2000, 2009)
    est = direct_estimate(records, period)
    assert est is not None
    assert est.survey_id == "dhs1"
    assert est.n_clusters == 6
    assert est.period == period

    assert est.theta == theta_oracle(records, period)

    clusters = sorted({r.cluster_id for r in records})
    thetas = []
    for drop in clusters:
        kept = [r for r in records if r.cluster_id != drop]
        t = theta_oracle(kept, period)
        assert t is not None
        thetas.append(t)
    t = np.array(thetas)
    centered = t - np.mean(t)
    oracle = float((t.size - 1) / t.size * np.sum(centered * centered))
    assert est.variance == oracle


def test_direct_estimate_degenerate_cases():
    period = (2000, 2009)
    # no deaths anywhere
    alive = [fbh([Child(2002)], cluster="c0"),
             fbh([Child(2003)], cluster="c1")]
    with pytest.warns(UserWarning, match="degenerate"):
        assert direct_estimate(alive, period) is None
    # single cluster: no jackknife possible
    one = [fbh([Child(2000 + i)], cluster="c0", woman_id=f"w{i}")
           for i in range(6)] + [fbh([Child(2001, 2002)], cluster="c0")]
    with pytest.warns(UserWarning, match="clusters"):
        assert direct_estimate(one, period) is None
    assert direct_estimate([], period) is None


def test_direct_estimate_rejects_mixed_surveys():
    records = [fbh([Child(2001, 2002)], survey="dhs1", cluster="c0"),
               fbh([Child(2002)], survey="dhs2", cluster="c1")]
    with pytest.raises(ValueError, match="survey"):
        direct_estimate(records, (2000, 2009))


def test_direct_estimate_requires_positive_variance():
    with pytest.raises(ValueError, match="variance"):
        DirectEstimate("s", (2000, 2004), theta=-1.0, variance=0.0,
                       n_clusters=3)


# ---------------------------------------------------------------------------
# HIV correction

def test_hiv_adjust_identity_at_k_one():
    theta, variance = -1.3, 0.04
    mean, var = hiv_adjust(theta, variance, k=1.0, n_draws=200_000,
                           rng=np.random.default_rng(11))
    assert mean == pytest.approx(theta, abs=3 * math.sqrt(variance / 2e5))
    assert var == pytest.approx(variance, rel=0.03)


def test_hiv_adjust_direction_and_determinism():
    theta, variance = -1.3, 0.04
    out = {}
    for k in (0.9, 1.0, 1.1):
        out[k] = hiv_adjust(theta, variance, k, n_draws=50_000,
                            rng=np.random.default_rng(7))
    # same normal draws for each k, so the ordering is exact: dividing a
    # negative logit by a larger k moves it toward zero (higher mortality)
    assert out[0.9][0] < out[1.0][0] < out[1.1][0]

    again = hiv_adjust(theta, variance, 0.9, n_draws=50_000,
                       rng=np.random.default_rng(7))
    assert again == out[0.9]


def test_hiv_adjust_zero_variance_scales_logit():
    mean, var = hiv_adjust(-1.2, 0.0, k=0.8, n_draws=10_000,
                           rng=np.random.default_rng(3))
    assert mean == pytest.approx(-1.2 / 0.8, rel=1e-12)
    assert var == pytest.approx(0.0, abs=1e-20)


def test_hiv_adjust_validation():
    with pytest.raises(ValueError, match="positive"):
        hiv_adjust(-1.0, 0.1, k=0.0)
    with pytest.raises(ValueError, match="n_draws"):
        hiv_adjust(-1.0, 0.1, k=1.0, n_draws=100)
    with pytest.raises(ValueError, match="variance"):
        hiv_adjust(-1.0, -0.1, k=1.0)


def test_adjust_wrappers():
    d = DirectEstimate("s", (2000, 2004), theta=-1.5, variance=0.05,
                       n_clusters=8)
    adj = adjust_direct(d, k=1.1, rng=np.random.default_rng(1))
    assert adj.hiv_adjusted is True
    assert adj.theta > d.theta
    assert adj.period == d.period and adj.n_clusters == d.n_clusters

    ind = IndirectEstimate(age_group="30-34", x=5, q_x=0.12,
                           reference_time=2002.5, q5=0.12,
                           logit_q5=math.log(0.12 / 0.88), variance=0.02,
                           n_replicates=40)
    adj2 = adjust_indirect(ind, k=1.1, rng=np.random.default_rng(2))
    assert adj2.logit_q5 > ind.logit_q5
    assert adj2.q5 == pytest.approx(1 / (1 + math.exp(-adj2.logit_q5)))

    bare = IndirectEstimate(age_group="30-34", x=5, q_x=0.12,
                            reference_time=2002.5, q5=0.12,
                            logit_q5=math.log(0.12 / 0.88), variance=None)
    with pytest.raises(ValueError, match="variance"):
        adjust_indirect(bare, k=1.1)


# ---------------------------------------------------------------------------
# Fusion

def indirect(theta, variance, ref_time, group="30-34", discouraged=False):
    return IndirectEstimate(age_group=group, x=5, q_x=0.1,
                            reference_time=ref_time,
                            q5=1 / (1 + math.exp(-theta)), logit_q5=theta,
                            variance=variance, n_replicates=25,
                            discouraged=discouraged)


def test_fuse_equal_variance_pair_is_exact_mean():
    # dyadic variances keep the arithmetic exact
    d1 = DirectEstimate("a", (2000, 2004), theta=-1.0, variance=0.25,
                        n_clusters=5)
    d2 = DirectEstimate("b", (2000, 2004), theta=-2.0, variance=0.25,
                        n_clusters=5)
    fused = fuse([d1, d2], [], (2000, 2004))
    assert fused.theta == -1.5
    assert fused.variance == 0.125
    assert fused.sources == ("direct:a", "direct:b")


def test_fuse_inverse_variance_weights():
    # variances (1, 2, 2) give weights (1/2, 1/4, 1/4) and V = 1/2
    d = DirectEstimate("a", (2000, 2004), theta=-1.0, variance=1.0,
                       n_clusters=5)
    i1 = indirect(-2.0, 2.0, 2002.4)
    i2 = indirect(-3.0, 2.0, 2004.9, group="35-39")
    fused = fuse([d], [i1, i2], (2000, 2004))
    assert fused.variance == 0.5
    assert fused.theta == 0.5 * -1.0 + 0.25 * -2.0 + 0.25 * -3.0
    assert set(fused.sources) == {"direct:a", "indirect:30-34",
                                  "indirect:35-39"}


def test_fuse_period_assignment_by_floor():
    i_edge = indirect(-2.0, 1.0, 1999.9)
    assert fuse([], [i_edge], (1995, 1999)) is not None
    assert fuse([], [i_edge], (2000, 2004)) is None
    i_exact = indirect(-2.0, 1.0, 2000.0)
    assert fuse([], [i_exact], (2000, 2004)) is not None


def test_fuse_direct_requires_exact_period_match():
    d = DirectEstimate("a", (1995, 1999), theta=-1.0, variance=0.5,
                       n_clusters=4)
    assert fuse([d], [], (2000, 2004)) is None
    assert fuse([d], [], (1995, 1999)).theta == -1.0


def test_fuse_excludes_discouraged_and_unusable():
    young = indirect(-1.0, 1.0, 2002.0, group="15-19", discouraged=True)
    assert fuse([], [young], (2000, 2004)) is None
    fused = fuse([], [young], (2000, 2004), include_discouraged=True)
    assert fused is not None and fused.sources == ("indirect:15-19",)

    no_var = IndirectEstimate(age_group="30-34", x=5, q_x=0.1,
                              reference_time=2002.0, q5=0.1,
                              logit_q5=-2.2, variance=None)
    assert fuse([], [no_var], (2000, 2004)) is None


def test_fused_variance_never_exceeds_any_source():
    rng = np.random.default_rng(99)
    for _ in range(200):
        n_d = int(rng.integers(0, 4))
        n_i = int(rng.integers(0, 4))
        if n_d + n_i == 0:
            continue
        directs = [DirectEstimate(f"s{j}", (2000, 2004),
                                  theta=float(rng.normal(-1.5, 1.0)),
                                  variance=float(rng.uniform(0.01, 2.0)),
                                  n_clusters=5)
                   for j in range(n_d)]
        indirects = [indirect(float(rng.normal(-1.5, 1.0)),
                              float(rng.uniform(0.01, 2.0)),
                              float(rng.uniform(2000, 2004.99)),
                              group="30-34")
                     for _ in range(n_i)]
        fused = fuse(directs, indirects, (2000, 2004))
        smallest = min([d.variance for d in directs]
                       + [i.variance for i in indirects])
        assert fused.variance <= smallest * (1 + 1e-12)
        lo = min([d.theta for d in directs] + [i.logit_q5 for i in indirects])
        hi = max([d.theta for d in directs] + [i.logit_q5 for i in indirects])
        assert lo - 1e-12 <= fused.theta <= hi + 1e-12
