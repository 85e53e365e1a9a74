"""Indirect child-mortality estimation from summary birth histories.

The classical workflow: tabulate children ever born and children dead by
five-year maternal age group, scale each group's died fraction into a
cumulative probability q(x) with parity-ratio multipliers, date the estimate
with a reference time, and convert q(x) to q(5) through a model life table.
Uncertainty comes from a delete-one jackknife over women; removing any woman
perturbs the parity ratios, so every age group's estimate changes with every
replicate. The jackknife downdates the integer tabulation sums instead of
re-tabulating, which gives bit-identical results to a full recomputation.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from importlib import resources
from typing import Mapping, Optional, Sequence

import numpy as np

from .core import SummaryBirthHistory

__all__ = [
    "AGE_GROUPS",
    "FAMILIES",
    "X_FOR_GROUP",
    "AgeGroupTabulation",
    "TrussellCoefficients",
    "LifeTableRatios",
    "IndirectEstimate",
    "JackknifeVariance",
    "load_trussell_coefficients",
    "load_life_table_ratios",
    "tabulate",
    "brass_qx",
    "reference_time",
    "convert_to_q5",
    "select_life_table",
    "jackknife_variance",
    "jackknife_reduce",
    "indirect_estimates",
]

AGE_GROUPS = ("15-19", "20-24", "25-29", "30-34", "35-39", "40-44", "45-49")
# Index age x whose cumulative mortality each maternal age group informs.
X_FOR_GROUP = (1, 2, 3, 5, 10, 15, 20)
# Also the deterministic tie-break preference order.
FAMILIES = ("North", "West", "South", "East")


def age_group_index(age: int) -> int:
    if not 15 <= age <= 49:
        raise ValueError(f"maternal age {age} outside 15-49")
    return (age - 15) // 5


# ---------------------------------------------------------------------------
# Reference data

@dataclass(frozen=True)
class TrussellCoefficients:
    """Multiplier (a) and reference-time (b) coefficients keyed by
    (family, age group)."""

    a: Mapping[tuple[str, str], tuple[float, float, float]]
    b: Mapping[tuple[str, str], tuple[float, float, float]]

    def __post_init__(self) -> None:
        for fam in self.families():
            for grp in AGE_GROUPS:
                if (fam, grp) not in self.a or (fam, grp) not in self.b:
                    raise ValueError(
                        f"incomplete coefficient table: missing {fam}/{grp}")

    def families(self) -> tuple[str, ...]:
        return tuple(sorted({fam for fam, _ in self.a},
                            key=lambda f: (FAMILIES.index(f)
                                           if f in FAMILIES else 99, f)))


@dataclass(frozen=True)
class LifeTableRatios:
    """q(x)/q(5) conversion ratios keyed by (family, x)."""

    ratios: Mapping[tuple[str, int], float]

    def __post_init__(self) -> None:
        for fam in self.families():
            col = [self.ratios.get((fam, x)) for x in X_FOR_GROUP]
            if any(v is None or v <= 0 for v in col):
                raise ValueError(f"life-table column incomplete for {fam}")
            if abs(self.ratios[(fam, 5)] - 1.0) > 1e-12:
                raise ValueError(f"{fam}: ratio at x=5 must be exactly 1")
            if any(b < a for a, b in zip(col, col[1:])):
                raise ValueError(f"{fam}: ratios must not decrease with x")

    def families(self) -> tuple[str, ...]:
        return tuple(sorted({fam for fam, _ in self.ratios},
                            key=lambda f: (FAMILIES.index(f)
                                           if f in FAMILIES else 99, f)))

    def ratio(self, family: str, x: int) -> float:
        try:
            return self.ratios[(family, x)]
        except KeyError:
            raise KeyError(f"no life-table ratio for {family}/x={x}") from None


def _open_reference(path, default_name: str):
    if path is not None:
        return open(path, newline="")
    return resources.files("u5mr.data").joinpath(default_name).open(
        "r", newline="")


def load_trussell_coefficients(path=None) -> TrussellCoefficients:
    """Read the coefficient CSV (columns family, age_group, a1..a3, b1..b3).

    With no path, the packaged reference file is used.
    """
    a: dict[tuple[str, str], tuple[float, float, float]] = {}
    b: dict[tuple[str, str], tuple[float, float, float]] = {}
    with _open_reference(path, "trussell_coefficients.csv") as fh:
        for i, row in enumerate(csv.DictReader(fh), start=2):
            try:
                key = (row["family"].strip(), row["age_group"].strip())
                a[key] = tuple(float(row[c]) for c in ("a1", "a2", "a3"))
                b[key] = tuple(float(row[c]) for c in ("b1", "b2", "b3"))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"coefficient file line {i}: {exc}") from None
    return TrussellCoefficients(a, b)


def load_life_table_ratios(path=None) -> LifeTableRatios:
    """Read the conversion-ratio CSV (columns family, x, q_x_over_q5)."""
    ratios: dict[tuple[str, int], float] = {}
    with _open_reference(path, "model_life_tables.csv") as fh:
        for i, row in enumerate(csv.DictReader(fh), start=2):
            try:
                ratios[(row["family"].strip(), int(row["x"]))] = float(
                    row["q_x_over_q5"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"life-table file line {i}: {exc}") from None
    return LifeTableRatios(ratios)


# ---------------------------------------------------------------------------
# Tabulation

@dataclass(frozen=True)
class AgeGroupTabulation:
    """Counts for one maternal age group, with the cohort parities attached.

    The parities are shared across groups (mean children ever born to all
    women aged 15-19, 20-24, 25-29); they ride along on every row so a row
    is self-contained.
    """

    age_group: str
    women: int
    births: int
    deaths: int
    parity1: float
    parity2: float
    parity3: float

    def __post_init__(self) -> None:
        if self.deaths > self.births:
            raise ValueError(f"{self.age_group}: deaths exceed births")

    @property
    def died_fraction(self) -> float:
        if self.births == 0:
            raise ValueError(f"{self.age_group}: no births, d undefined")
        return self.deaths / self.births


class _Sums:
    """Integer tabulation sums; the jackknife downdates these in place."""

    __slots__ = ("women", "births", "deaths", "ceb")

    def __init__(self) -> None:
        self.women = np.zeros(7, dtype=np.int64)
        self.births = np.zeros(7, dtype=np.int64)
        self.deaths = np.zeros(7, dtype=np.int64)
        self.ceb = np.zeros(7, dtype=np.int64)

    def parities(self) -> tuple[float, float, float]:
        out = []
        for g in range(3):
            if self.women[g] == 0:
                out.append(math.nan)
            else:
                out.append(self.ceb[g] / self.women[g])
        return tuple(out)


def _sums_from_dataset(dataset: Sequence[SummaryBirthHistory]) -> _Sums:
    s = _Sums()
    for woman in dataset:
        g = age_group_index(woman.mother_age_at_survey)
        s.women[g] += 1
        s.births[g] += woman.births
        s.deaths[g] += woman.deaths
        s.ceb[g] += woman.births
    return s


def tabulate(dataset: Sequence[SummaryBirthHistory]
             ) -> tuple[AgeGroupTabulation, ...]:
    """Group the dataset into the seven five-year maternal age bands.

    All women count toward the parity denominators, childless ones included.
    Empty bands still appear (with zero counts); downstream estimation skips
    them.
    """
    if not dataset:
        raise ValueError("empty dataset")
    s = _sums_from_dataset(dataset)
    p1, p2, p3 = s.parities()
    return tuple(
        AgeGroupTabulation(AGE_GROUPS[g], int(s.women[g]), int(s.births[g]),
                           int(s.deaths[g]), p1, p2, p3)
        for g in range(7))


def _parity_ratios(p1: float, p2: float, p3: float
                   ) -> Optional[tuple[float, float]]:
    if not (p2 > 0 and p3 > 0) or math.isnan(p1):
        return None
    return p1 / p2, p2 / p3


# ---------------------------------------------------------------------------
# The estimation chain

def brass_qx(tab: Sequence[AgeGroupTabulation], coeffs: TrussellCoefficients,
             family: str) -> dict[str, float]:
    """q(x) = d_i * (a1 + a2 P1/P2 + a3 P2/P3) per nonempty age group."""
    out: dict[str, float] = {}
    if not tab:
        return out
    ratios = _parity_ratios(tab[0].parity1, tab[0].parity2, tab[0].parity3)
    if ratios is None:
        warnings.warn("parity ratios undefined (P2 or P3 is zero); "
                      "no indirect estimates possible")
        return out
    r12, r23 = ratios
    for row in tab:
        if row.births == 0:
            warnings.warn(f"age group {row.age_group} has no births; skipped")
            continue
        a1, a2, a3 = coeffs.a[(family, row.age_group)]
        out[row.age_group] = row.died_fraction * (a1 + a2 * r12 + a3 * r23)
    return out


def reference_time(tab: Sequence[AgeGroupTabulation],
                   coeffs: TrussellCoefficients, family: str,
                   survey_year: int) -> dict[str, float]:
    """Calendar time each estimate refers to: survey_year - t(x), where
    t(x) = b1 + b2 P1/P2 + b3 P2/P3 years before the survey."""
    out: dict[str, float] = {}
    if not tab:
        return out
    ratios = _parity_ratios(tab[0].parity1, tab[0].parity2, tab[0].parity3)
    if ratios is None:
        warnings.warn("parity ratios undefined; no reference times")
        return out
    r12, r23 = ratios
    for row in tab:
        b1, b2, b3 = coeffs.b[(family, row.age_group)]
        out[row.age_group] = survey_year - (b1 + b2 * r12 + b3 * r23)
    return out


_CLAMP = 1e-9


def convert_to_q5(q_x: float, x: int, family: str,
                  ratios: LifeTableRatios) -> float:
    """Map q(x) to q(5) by the family's conversion ratio; identity at x=5.

    Results are clamped into (0, 1) with a warning so the logit stays
    finite.
    """
    if not 0.0 < q_x < 1.0:
        raise ValueError(f"q({x}) = {q_x} outside (0, 1)")
    q5 = q_x / ratios.ratio(family, x)
    if q5 >= 1.0:
        warnings.warn(f"q5 from q({x})={q_x} exceeds 1; clamped")
        return 1.0 - _CLAMP
    return q5


def select_life_table(pairs: Sequence[tuple[float, float]],
                      ratios: LifeTableRatios,
                      levels: Optional[np.ndarray] = None) -> str:
    """Pick the family whose (1q0, 4q1) age pattern best matches the data.

    Each family traces a one-parameter curve as overall mortality varies:
    at level q5, 1q0 = r1*q5 and 4q1 = 1 - (1-q5)/(1-1q0). The selected
    family minimizes the summed squared distance from the observed pairs to
    its curve; ties break in declared preference order (North first).
    """
    if not pairs:
        raise ValueError("need at least one (1q0, 4q1) pair")
    if levels is None:
        levels = np.arange(5e-4, 0.6, 5e-4)
    best: Optional[tuple[str, float]] = None
    for fam in FAMILIES:
        if fam not in ratios.families():
            continue
        r1 = ratios.ratio(fam, 1)
        q0 = r1 * levels
        q1 = 1.0 - (1.0 - levels) / (1.0 - q0)
        total = 0.0
        for obs0, obs1 in pairs:
            total += float(np.min((obs0 - q0) ** 2 + (obs1 - q1) ** 2))
        if best is None or total < best[1]:
            best = (fam, total)
    assert best is not None
    return best[0]


# ---------------------------------------------------------------------------
# Full pipeline and jackknife

@dataclass(frozen=True)
class IndirectEstimate:
    age_group: str
    x: int
    q_x: float
    reference_time: float
    q5: float
    logit_q5: float
    variance: Optional[float] = None
    n_replicates: int = 0
    discouraged: bool = False


@dataclass(frozen=True)
class JackknifeVariance:
    variance: float
    n_used: int
    n_skipped: int


def _theta_by_group(sums: _Sums, coeffs: TrussellCoefficients, family: str,
                    ratios: LifeTableRatios) -> dict[str, float]:
    """logit q5 per age group from integer sums; silently skips groups with
    no births, undefined parities, or q values outside (0, 1).

    Both the headline estimates and every jackknife replicate go through
    this function, so downdated sums and re-tabulated sums agree exactly.
    """
    p1, p2, p3 = sums.parities()
    pr = _parity_ratios(p1, p2, p3)
    if pr is None:
        return {}
    r12, r23 = pr
    out: dict[str, float] = {}
    for g, grp in enumerate(AGE_GROUPS):
        if sums.births[g] == 0:
            continue
        d = sums.deaths[g] / sums.births[g]
        a1, a2, a3 = coeffs.a[(family, grp)]
        qx = d * (a1 + a2 * r12 + a3 * r23)
        if not 0.0 < qx < 1.0:
            continue
        q5 = qx / ratios.ratio(family, X_FOR_GROUP[g])
        if q5 >= 1.0:
            q5 = 1.0 - _CLAMP
        out[grp] = math.log(q5 / (1.0 - q5))
    return out


def jackknife_reduce(thetas: np.ndarray) -> float:
    """(n-1)/n * sum((theta_j - mean)^2) over the replicate estimates."""
    n = thetas.size
    centered = thetas - np.mean(thetas)
    return float((n - 1) / n * np.sum(centered * centered))


def jackknife_variance(dataset: Sequence[SummaryBirthHistory],
                       coeffs: TrussellCoefficients, family: str,
                       ratios: LifeTableRatios,
                       groups: Optional[Sequence[str]] = None,
                       ) -> dict[str, JackknifeVariance]:
    """Delete-one jackknife variance of logit q5, per age group.

    ``groups`` switches the deletion unit: by default each woman is her own
    unit; passing a label per woman deletes whole labels at a time (the
    cluster variant). Replicates where a group's estimate is undefined are
    dropped from that group's variance with the replicate count adjusted.
    """
    if len(dataset) < 2:
        raise ValueError("jackknife needs at least 2 women")
    if groups is not None and len(groups) != len(dataset):
        raise ValueError("one group label per woman required")
    sums = _sums_from_dataset(dataset)
    units: dict[str, list[SummaryBirthHistory]] = {}
    if groups is None:
        for j, woman in enumerate(dataset):
            units[str(j)] = [woman]
    else:
        for label, woman in zip(groups, dataset):
            units.setdefault(str(label), []).append(woman)
    if len(units) < 2:
        raise ValueError("jackknife needs at least 2 deletion units")

    thetas: dict[str, list[float]] = {grp: [] for grp in AGE_GROUPS}
    skipped: dict[str, int] = {grp: 0 for grp in AGE_GROUPS}
    for label in units:
        members = units[label]
        idx = [age_group_index(w.mother_age_at_survey) for w in members]
        for g, w in zip(idx, members):
            sums.women[g] -= 1
            sums.births[g] -= w.births
            sums.deaths[g] -= w.deaths
            sums.ceb[g] -= w.births
        replicate = _theta_by_group(sums, coeffs, family, ratios)
        for g, w in zip(idx, members):
            sums.women[g] += 1
            sums.births[g] += w.births
            sums.deaths[g] += w.deaths
            sums.ceb[g] += w.births
        for grp in AGE_GROUPS:
            if grp in replicate:
                thetas[grp].append(replicate[grp])
            else:
                skipped[grp] += 1

    out: dict[str, JackknifeVariance] = {}
    for grp in AGE_GROUPS:
        vals = thetas[grp]
        if skipped[grp]:
            warnings.warn(f"{grp}: {skipped[grp]} jackknife replicates "
                          "undefined and skipped")
        if len(vals) < 2:
            continue
        out[grp] = JackknifeVariance(jackknife_reduce(np.array(vals)),
                                     len(vals), skipped[grp])
    return out


def indirect_estimates(dataset: Sequence[SummaryBirthHistory],
                       coeffs: Optional[TrussellCoefficients] = None,
                       ratios: Optional[LifeTableRatios] = None,
                       family: str = "North",
                       jackknife: bool = True,
                       groups: Optional[Sequence[str]] = None,
                       ) -> list[IndirectEstimate]:
    """Run the whole chain on one survey's SBH records.

    Returns at most one estimate per age group (empty or degenerate groups
    are dropped). The 15-19 group is flagged ``discouraged``; combination
    steps exclude it by default. Reference times come from the full dataset
    and stay fixed across jackknife replicates.
    """
    if not dataset:
        raise ValueError("empty dataset")
    survey_years = {w.survey_year for w in dataset}
    if len(survey_years) != 1:
        raise ValueError("records span multiple survey years; estimate one "
                         "survey at a time")
    survey_year = survey_years.pop()
    if coeffs is None:
        coeffs = load_trussell_coefficients()
    if ratios is None:
        ratios = load_life_table_ratios()

    sums = _sums_from_dataset(dataset)
    tab = tabulate(dataset)
    qx = brass_qx(tab, coeffs, family)
    times = reference_time(tab, coeffs, family, survey_year)
    theta = _theta_by_group(sums, coeffs, family, ratios)
    variances = (jackknife_variance(dataset, coeffs, family, ratios, groups)
                 if jackknife and len(dataset) >= 2 else {})

    out: list[IndirectEstimate] = []
    for g, grp in enumerate(AGE_GROUPS):
        if grp not in theta:
            continue
        th = theta[grp]
        q5 = 1.0 / (1.0 + math.exp(-th))
        jk = variances.get(grp)
        out.append(IndirectEstimate(
            age_group=grp,
            x=X_FOR_GROUP[g],
            q_x=qx[grp],
            reference_time=times[grp],
            q5=q5,
            logit_q5=th,
            variance=None if jk is None else jk.variance,
            n_replicates=0 if jk is None else jk.n_used,
            discouraged=(grp == "15-19"),
        ))
    return out
