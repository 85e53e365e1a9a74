"""Indirect (summary birth history) estimation chain.

The accuracy oracle is a purpose-built synthetic cohort whose per-age death
risks follow the North column of the bundled life table exactly, so the
method's own model assumptions hold and the 30-34 estimate must recover the
true q5. The jackknife oracle is the brute-force delete-one loop over fully
re-tabulated datasets.
"""

import math
import warnings

import numpy as np
import pytest

from u5mr.brass import (
    AGE_GROUPS,
    FAMILIES,
    X_FOR_GROUP,
    LifeTableRatios,
    TrussellCoefficients,
    age_group_index,
    brass_qx,
    convert_to_q5,
    indirect_estimates,
    jackknife_variance,
    load_life_table_ratios,
    load_trussell_coefficients,
    reference_time,
    select_life_table,
    tabulate,
)
from u5mr.core import SummaryBirthHistory


@pytest.fixture(scope="module")
def coeffs():
    return load_trussell_coefficients()


@pytest.fixture(scope="module")
def ratios():
    return load_life_table_ratios()


def unit_multiplier_coeffs():
    """Coefficients with a = (1, 0, 0) so q(x) must equal d_i exactly."""
    a = {("North", g): (1.0, 0.0, 0.0) for g in AGE_GROUPS}
    b = {("North", g): (1.0, 1.0, 1.0) for g in AGE_GROUPS}
    return TrussellCoefficients(a=a, b=b)


def small_dataset():
    """Hand-countable dataset covering five age bands."""
    mk = SummaryBirthHistory
    return [
        mk(17, 2010, births=0, deaths=0, woman_id="a"),
        mk(19, 2010, births=1, deaths=0, woman_id="b"),
        mk(22, 2010, births=2, deaths=1, woman_id="c"),
        mk(23, 2010, births=1, deaths=0, woman_id="d"),
        mk(27, 2010, births=3, deaths=1, woman_id="e"),
        mk(28, 2010, births=2, deaths=0, woman_id="f"),
        mk(33, 2010, births=4, deaths=2, woman_id="g"),
        mk(41, 2010, births=5, deaths=1, woman_id="h"),
    ]


# ---------------------------------------------------------------------------
# Tabulation

def test_tabulate_counts_by_hand():
    tab = tabulate(small_dataset())
    by_group = {row.age_group: row for row in tab}
    assert [row.age_group for row in tab] == list(AGE_GROUPS)

    assert by_group["15-19"].women == 2
    assert by_group["15-19"].births == 1
    assert by_group["15-19"].deaths == 0
    assert by_group["20-24"].women == 2
    assert by_group["20-24"].births == 3
    assert by_group["20-24"].deaths == 1
    assert by_group["25-29"].births == 5
    assert by_group["30-34"].deaths == 2
    assert by_group["40-44"].births == 5
    # empty bands still appear
    assert by_group["35-39"].women == 0

    # parities ride along on every row
    for row in tab:
        assert row.parity1 == 1 / 2
        assert row.parity2 == 3 / 2
        assert row.parity3 == 5 / 2


def test_age_group_index_boundaries():
    assert age_group_index(15) == 0
    assert age_group_index(19) == 0
    assert age_group_index(20) == 1
    assert age_group_index(49) == 6
    with pytest.raises(ValueError):
        age_group_index(14)
    with pytest.raises(ValueError):
        age_group_index(50)


def test_tabulate_rejects_empty():
    with pytest.raises(ValueError):
        tabulate([])


# ---------------------------------------------------------------------------
# Multiplier identity and the q(x) chain

def test_unit_multiplier_returns_died_fraction_exactly():
    tab = tabulate(small_dataset())
    qx = brass_qx(tab, unit_multiplier_coeffs(), "North")
    expected = {
        "15-19": 0 / 1,
        "20-24": 1 / 3,
        "25-29": 1 / 5,
        "30-34": 2 / 4,
        "40-44": 1 / 5,
    }
    assert qx == expected
    for grp, row in zip(AGE_GROUPS, tab):
        if row.births:
            assert qx[grp] == row.died_fraction


def test_brass_qx_multiplier_formula(coeffs):
    tab = tabulate(small_dataset())
    qx = brass_qx(tab, coeffs, "North")
    r12 = (1 / 2) / (3 / 2)
    r23 = (3 / 2) / (5 / 2)
    a1, a2, a3 = coeffs.a[("North", "30-34")]
    assert qx["30-34"] == (2 / 4) * (a1 + a2 * r12 + a3 * r23)


def test_brass_qx_warns_when_parities_undefined(coeffs):
    women = [SummaryBirthHistory(33, 2010, births=2, deaths=1)]
    with pytest.warns(UserWarning, match="parity"):
        assert brass_qx(tabulate(women), coeffs, "North") == {}


def test_reference_time_hand_formula(coeffs):
    tab = tabulate(small_dataset())
    times = reference_time(tab, coeffs, "North", survey_year=2010)
    r12 = (1 / 2) / (3 / 2)
    r23 = (3 / 2) / (5 / 2)
    b1, b2, b3 = coeffs.b[("North", "20-24")]
    assert times["20-24"] == 2010 - (b1 + b2 * r12 + b3 * r23)
    # deeper maternal ages refer further back in time
    ordered = [times[g] for g in AGE_GROUPS]
    assert all(t2 < t1 for t1, t2 in zip(ordered, ordered[1:]))


def test_convert_identity_at_x5(ratios):
    assert convert_to_q5(0.137, 5, "North", ratios) == 0.137
    assert convert_to_q5(0.137, 5, "East", ratios) == 0.137


def test_convert_divides_by_family_ratio(ratios):
    assert convert_to_q5(0.126, 1, "North", ratios) == 0.126 / 0.63
    assert convert_to_q5(0.2244, 20, "North", ratios) == 0.2244 / 1.122


def test_convert_clamps_and_validates(ratios):
    with pytest.warns(UserWarning, match="clamp"):
        q5 = convert_to_q5(0.9, 1, "North", ratios)
    assert 0.0 < q5 < 1.0
    with pytest.raises(ValueError):
        convert_to_q5(0.0, 5, "North", ratios)
    with pytest.raises(ValueError):
        convert_to_q5(1.0, 5, "North", ratios)


# ---------------------------------------------------------------------------
# Reference tables

def test_bundled_tables_load(coeffs, ratios):
    assert coeffs.families() == FAMILIES
    assert ratios.families() == FAMILIES
    assert coeffs.a[("North", "30-34")] == (1.2046, 0.3037, -0.5656)
    assert coeffs.b[("North", "15-19")] == (1.0921, 5.4732, -1.9672)
    for fam in FAMILIES:
        assert ratios.ratio(fam, 5) == 1.0


def test_ratio_table_validation():
    good = {("North", x): r for x, r in
            zip(X_FOR_GROUP, (0.63, 0.795, 0.897, 1.0, 1.051, 1.083, 1.122))}
    LifeTableRatios(ratios=good)

    off_anchor = dict(good)
    off_anchor[("North", 5)] = 1.0001
    with pytest.raises(ValueError, match="exactly 1"):
        LifeTableRatios(ratios=off_anchor)

    decreasing = dict(good)
    decreasing[("North", 20)] = 1.05
    with pytest.raises(ValueError, match="decrease"):
        LifeTableRatios(ratios=decreasing)

    incomplete = dict(good)
    del incomplete[("North", 10)]
    with pytest.raises(ValueError, match="incomplete"):
        LifeTableRatios(ratios=incomplete)


def test_coefficient_table_requires_all_groups():
    a = {("North", g): (1.0, 0.0, 0.0) for g in AGE_GROUPS[:-1]}
    b = {("North", g): (1.0, 0.0, 0.0) for g in AGE_GROUPS}
    with pytest.raises(ValueError, match="missing"):
        TrussellCoefficients(a=a, b=b)


# ---------------------------------------------------------------------------
# Life-table family selection

def north_curve_hazards(ratios, q5, max_age=35):
    """Per-age death risks whose cumulative q(x) sits exactly on the North
    column at level q5. Ages within a bracketed interval share a constant
    risk; ages past the last anchor reuse the 15-20 rate."""
    anchors = [(x, ratios.ratio("North", x) * q5) for x in X_FOR_GROUP]
    h = np.empty(max_age)
    prev_x, prev_q = 0, 0.0
    for x, qx in anchors:
        per_year = 1.0 - ((1.0 - qx) / (1.0 - prev_q)) ** (1.0 / (x - prev_x))
        h[prev_x:x] = per_year
        prev_x, prev_q = x, qx
    h[prev_x:] = h[prev_x - 1]
    return h


def on_curve_pair(ratios, family, level):
    q0 = ratios.ratio(family, 1) * level
    q1 = 1.0 - (1.0 - level) / (1.0 - q0)
    return (q0, q1)


@pytest.mark.parametrize("family", FAMILIES)
def test_select_recovers_family_from_on_curve_points(ratios, family):
    pairs = [on_curve_pair(ratios, family, lev) for lev in (0.08, 0.15, 0.22)]
    assert select_life_table(pairs, ratios) == family


def test_select_tie_breaks_in_declared_order(ratios):
    # two family names sharing one column: every pair is an exact tie, so
    # the declared preference order decides
    twin = LifeTableRatios(ratios={
        (fam, x): ratios.ratio("West", x)
        for fam in ("North", "West") for x in X_FOR_GROUP})
    pair = on_curve_pair(twin, "West", 0.2)
    assert select_life_table([pair], twin) == "North"
    assert select_life_table([(0.083, 0.041)], twin) == "North"


def test_select_requires_pairs(ratios):
    with pytest.raises(ValueError):
        select_life_table([], ratios)


# ---------------------------------------------------------------------------
# Synthetic North cohort: the 30-34 estimate must recover truth

FERTILITY_BANDS = ((15, 0.11), (20, 0.27), (25, 0.23), (30, 0.16), (35, 0.07))


def simulate_north_sbh(ratios, n_women, q5, seed, survey_year=2010):
    """Summary histories from a stationary population whose child mortality
    follows the North schedule at level q5 and whose fertility is constant
    in time. One birth per woman-year at the band rate; a child born when
    the mother was age a has been exposed for (age_now - a) whole years."""
    rng = np.random.default_rng(seed)
    ages = rng.integers(15, 50, size=n_women)
    birth_ages = np.arange(15, 49)
    f = np.empty(birth_ages.size)
    for lo, rate in FERTILITY_BANDS:
        f[birth_ages >= lo] = rate
    eligible = birth_ages[None, :] < ages[:, None]
    births = (rng.random((n_women, birth_ages.size)) < f[None, :]) & eligible

    h = north_curve_hazards(ratios, q5)
    cum_q = 1.0 - np.cumprod(1.0 - h)
    span = np.clip(ages[:, None] - birth_ages[None, :], 1, h.size)
    dead = births & (rng.random(births.shape) < cum_q[span - 1])

    return [
        SummaryBirthHistory(int(ages[i]), survey_year,
                            births=int(births[i].sum()),
                            deaths=int(dead[i].sum()),
                            woman_id=f"w{i}")
        for i in range(n_women)
    ]


def test_north_cohort_recovers_q5_within_ten_percent(coeffs, ratios):
    truth = 0.2
    dataset = simulate_north_sbh(ratios, n_women=30000, q5=truth, seed=77)
    estimates = indirect_estimates(dataset, coeffs, ratios, family="North",
                                   jackknife=False)
    by_group = {e.age_group: e for e in estimates}
    est = by_group["30-34"]
    assert est.x == 5
    assert abs(est.q5 - truth) / truth < 0.10
    # neighbouring groups should also be in the right neighbourhood
    assert abs(by_group["25-29"].q5 - truth) / truth < 0.15
    assert abs(by_group["35-39"].q5 - truth) / truth < 0.15
    # reference times precede the survey by a plausible margin
    assert 1990 < est.reference_time < 2009
    assert by_group["45-49"].reference_time < est.reference_time


def test_discouraged_flag_and_fields(coeffs, ratios):
    dataset = simulate_north_sbh(ratios, n_women=4000, q5=0.15, seed=5)
    estimates = indirect_estimates(dataset, coeffs, ratios, jackknife=True)
    flags = {e.age_group: e.discouraged for e in estimates}
    assert flags["15-19"] is True
    assert not any(flags[g] for g in AGE_GROUPS[1:] if g in flags)
    for e in estimates:
        assert e.logit_q5 == pytest.approx(math.log(e.q5 / (1 - e.q5)))
        assert e.variance is not None and e.variance > 0
        assert e.n_replicates > 0


def test_multiple_survey_years_rejected(coeffs, ratios):
    women = [SummaryBirthHistory(25, 2010, births=1, deaths=0),
             SummaryBirthHistory(25, 2011, births=1, deaths=0)]
    with pytest.raises(ValueError, match="survey year"):
        indirect_estimates(women, coeffs, ratios)
    with pytest.raises(ValueError):
        indirect_estimates([], coeffs, ratios)


# ---------------------------------------------------------------------------
# Jackknife: incremental downdating must bit-match brute force

def jackknife_dataset(rng, n):
    """Random dataset with every band populated and one singleton group so
    the undefined-replicate path gets exercised."""
    women = []
    for i in range(n - 1):
        age = int(rng.integers(15, 45))
        fertile = max(0, age - 15)
        births = int(rng.integers(0, min(fertile, 6) + 1))
        deaths = int(rng.binomial(births, 0.25)) if births else 0
        women.append(SummaryBirthHistory(age, 2010, births=births,
                                         deaths=deaths, woman_id=f"j{i}"))
    # exactly one woman aged 45-49: deleting her empties the group
    women.append(SummaryBirthHistory(47, 2010, births=3, deaths=1,
                                     woman_id="solo"))
    # guarantee defined parity ratios in every replicate
    women[0] = SummaryBirthHistory(21, 2010, births=2, deaths=0, woman_id="j0")
    women[1] = SummaryBirthHistory(22, 2010, births=2, deaths=1, woman_id="j1")
    women[2] = SummaryBirthHistory(26, 2010, births=3, deaths=0, woman_id="j2")
    women[3] = SummaryBirthHistory(27, 2010, births=2, deaths=1, woman_id="j3")
    return women


def brute_force_thetas(dataset, coeffs, ratios, family, delete_sets):
    """Re-tabulate from scratch for each deletion; public chain only."""
    thetas = {g: [] for g in AGE_GROUPS}
    for drop in delete_sets:
        subset = [w for i, w in enumerate(dataset) if i not in drop]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            qx = brass_qx(tabulate(subset), coeffs, family)
            for g, grp in enumerate(AGE_GROUPS):
                if grp not in qx or not 0.0 < qx[grp] < 1.0:
                    continue
                q5 = convert_to_q5(qx[grp], X_FOR_GROUP[g], family, ratios)
                thetas[grp].append(math.log(q5 / (1.0 - q5)))
    return thetas


def reduce_oracle(theta_list):
    t = np.asarray(theta_list)
    n = t.size
    centered = t - np.mean(t)
    return float((n - 1) / n * np.sum(centered * centered))


def test_jackknife_bit_matches_brute_force(coeffs, ratios):
    rng = np.random.default_rng(42)
    dataset = jackknife_dataset(rng, 50)
    result = jackknife_variance(dataset, coeffs, "North", ratios)

    deletions = [{j} for j in range(len(dataset))]
    thetas = brute_force_thetas(dataset, coeffs, ratios, "North", deletions)

    assert set(result) == {g for g, t in thetas.items() if len(t) >= 2}
    for grp, jk in result.items():
        assert jk.variance == reduce_oracle(thetas[grp])
        assert jk.n_used == len(thetas[grp])
        assert jk.n_used + jk.n_skipped == len(dataset)
    # the singleton group lost exactly its own replicate
    assert result["45-49"].n_skipped == 1
    assert result["30-34"].n_skipped == 0


def test_cluster_jackknife_bit_matches_brute_force(coeffs, ratios):
    rng = np.random.default_rng(43)
    dataset = jackknife_dataset(rng, 50)
    labels = [f"c{i % 6}" for i in range(len(dataset))]
    result = jackknife_variance(dataset, coeffs, "North", ratios,
                                groups=labels)

    unique = sorted(set(labels))
    deletions = [{i for i, lab in enumerate(labels) if lab == u}
                 for u in unique]
    thetas = brute_force_thetas(dataset, coeffs, ratios, "North", deletions)

    for grp, jk in result.items():
        assert jk.variance == reduce_oracle(thetas[grp])
        assert jk.n_used == len(thetas[grp])
        assert jk.n_used + jk.n_skipped == len(unique)


def test_jackknife_variance_shrinks_with_sample_size(coeffs, ratios):
    small = simulate_north_sbh(ratios, n_women=800, q5=0.2, seed=301)
    large = simulate_north_sbh(ratios, n_women=3200, q5=0.2, seed=302)
    v_small = jackknife_variance(small, coeffs, "North", ratios)
    v_large = jackknife_variance(large, coeffs, "North", ratios)
    ratio = v_small["30-34"].variance / v_large["30-34"].variance
    # fourfold sample should cut the variance roughly fourfold
    assert 2.0 < ratio < 8.0
