"""Design-based (weighted) mortality estimates from full birth histories,
HIV bias adjustment by simulation, and inverse-variance fusion with the
indirect estimates.

A direct estimate for a 5-year period is built from weighted single-age
hazards: within the period, each age a in 0..4 gets a weighted event /
exposure ratio, and the hazards combine into q5 = 1 - prod(1 - q_a). The
variance engine is a delete-one-cluster jackknife on the logit scale,
matching the machinery used for the indirect estimates.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.special import expit, logit

from .brass import IndirectEstimate, jackknife_reduce
from .core import FullBirthHistory

__all__ = [
    "Period",
    "make_periods",
    "period_containing",
    "period_label",
    "DirectEstimate",
    "FusedEstimate",
    "weighted_hazards",
    "weighted_q5",
    "direct_estimate",
    "hiv_adjust",
    "adjust_direct",
    "adjust_indirect",
    "fuse",
]

Period = tuple[int, int]

DEFAULT_HIV_DRAWS = 100_000


def make_periods(start: int, end: int, width: int = 5) -> list[Period]:
    """Consecutive [start, start+width-1] periods covering start..end."""
    if end < start:
        raise ValueError("end before start")
    return [(lo, min(lo + width - 1, end))
            for lo in range(start, end + 1, width)]


def period_containing(time: float, periods: Sequence[Period]
                      ) -> Optional[Period]:
    """The period holding a (possibly fractional) reference time.

    Non-integer times are assigned by their floor, so 1994.7 lands in
    1990-1994.
    """
    year = math.floor(time)
    for p in periods:
        if p[0] <= year <= p[1]:
            return p
    return None


def period_label(period: Period) -> str:
    return f"{period[0]}-{period[1]}"


# ---------------------------------------------------------------------------
# Direct estimates

@dataclass(frozen=True)
class DirectEstimate:
    survey_id: str
    period: Period
    theta: float               # logit q5
    variance: float
    n_clusters: int
    hiv_adjusted: bool = False

    def __post_init__(self) -> None:
        if not self.variance > 0:
            raise ValueError("variance must be positive")

    @property
    def q5(self) -> float:
        return float(expit(self.theta))


@dataclass(frozen=True)
class FusedEstimate:
    period: Period
    theta: float
    variance: float
    sources: tuple[str, ...]

    @property
    def q5(self) -> float:
        return float(expit(self.theta))


def _child_contributions(rec: FullBirthHistory, lo: int, hi: int,
                         exposure: np.ndarray, events: np.ndarray) -> None:
    """Add one record's weighted age-0..4 trials inside [lo, hi].

    A child born in t_b is at risk at age a during year t_b + a; deaths in
    year t_d happened at age t_d - t_b - 1 during the preceding calendar
    year. Survey-year births have no completed exposure and are skipped.
    """
    w = rec.weight
    last_obs = rec.survey_year - 1
    for child in rec.children:
        tb = child.birth_year
        if tb >= rec.survey_year:
            continue
        if child.death_year is None:
            top = min(4, last_obs - tb)
            a_event = None
        else:
            a_event = child.death_year - tb - 1
            if a_event < 0:
                continue
            top = min(4, a_event)
        for a in range(top + 1):
            year = tb + a
            if lo <= year <= hi:
                exposure[a] += w
                if a_event is not None and a == a_event:
                    events[a] += w


def weighted_hazards(records: Iterable[FullBirthHistory], period: Period
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Weighted exposure and event totals by single age 0..4."""
    lo, hi = period
    exposure = np.zeros(5)
    events = np.zeros(5)
    for rec in records:
        _child_contributions(rec, lo, hi, exposure, events)
    return exposure, events


def _theta_from_sums(exposure: np.ndarray, events: np.ndarray
                     ) -> Optional[float]:
    """logit q5 from hazard sums; None when undefined (no exposure at some
    age, no deaths, or all children dying at some age)."""
    if np.any(exposure <= 0):
        return None
    qa = events / exposure
    q5 = 1.0 - float(np.prod(1.0 - qa))
    if not 0.0 < q5 < 1.0:
        return None
    return math.log(q5 / (1.0 - q5))


def weighted_q5(records: Sequence[FullBirthHistory], period: Period
                ) -> Optional[float]:
    """Point estimate of q5 for the period, or None when degenerate."""
    exposure, events = weighted_hazards(records, period)
    theta = _theta_from_sums(exposure, events)
    return None if theta is None else float(expit(theta))


def direct_estimate(records: Sequence[FullBirthHistory], period: Period
                    ) -> Optional[DirectEstimate]:
    """Point estimate plus cluster-jackknife variance for one survey/period.

    Returns None (with a diagnostic) when the point estimate is degenerate
    (no exposure at some age, zero deaths) or fewer than two clusters are
    available for the variance.
    """
    if not records:
        return None
    survey_ids = {rec.covariates.survey_id for rec in records}
    if len(survey_ids) != 1:
        raise ValueError("records span multiple surveys; estimate one "
                         "survey at a time")
    survey_id = survey_ids.pop()

    cluster_sums: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for rec in records:
        key = rec.cluster_id
        if key not in cluster_sums:
            cluster_sums[key] = (np.zeros(5), np.zeros(5))
        _child_contributions(rec, period[0], period[1], *cluster_sums[key])
    exposure = sum(e for e, _ in cluster_sums.values())
    events = sum(v for _, v in cluster_sums.values())

    theta = _theta_from_sums(exposure, events)
    if theta is None:
        warnings.warn(f"{survey_id} {period_label(period)}: degenerate "
                      "hazard sums (no exposure or no deaths); omitted")
        return None
    if len(cluster_sums) < 2:
        warnings.warn(f"{survey_id} {period_label(period)}: need at least "
                      "2 clusters for a jackknife variance; omitted")
        return None

    thetas = []
    n_skipped = 0
    for key in sorted(cluster_sums):
        e, v = cluster_sums[key]
        t_j = _theta_from_sums(exposure - e, events - v)
        if t_j is None:
            n_skipped += 1
        else:
            thetas.append(t_j)
    if n_skipped:
        warnings.warn(f"{survey_id} {period_label(period)}: {n_skipped} "
                      "degenerate jackknife replicates skipped")
    if len(thetas) < 2:
        warnings.warn(f"{survey_id} {period_label(period)}: too few usable "
                      "replicates; omitted")
        return None
    variance = jackknife_reduce(np.array(thetas))
    if variance <= 0:
        warnings.warn(f"{survey_id} {period_label(period)}: zero jackknife "
                      "variance; omitted")
        return None
    return DirectEstimate(survey_id, period, theta, variance, len(thetas))


# ---------------------------------------------------------------------------
# HIV adjustment

def hiv_adjust(theta: float, variance: float, k: float,
               n_draws: int = DEFAULT_HIV_DRAWS,
               rng=None) -> tuple[float, float]:
    """Push an estimate through the HIV selection-bias correction.

    Draw phi ~ N(theta, variance), transform each draw to the probability
    scale as expit(phi / k), and summarize the transformed draws back on the
    logit scale by their sample mean and variance. k = 1 is an identity up
    to Monte Carlo noise; for the usual negative theta, k > 1 raises the
    mortality level and k < 1 lowers it.
    """
    if k <= 0:
        raise ValueError("correction factor k must be positive")
    if n_draws < 10_000:
        raise ValueError("n_draws too small for a stable adjustment")
    if variance < 0:
        raise ValueError("variance must be nonnegative")
    rng = np.random.default_rng(rng)
    phi = rng.normal(theta, math.sqrt(variance), size=n_draws)
    adjusted = expit(phi / k)
    adjusted_logit = logit(adjusted)
    return (float(np.mean(adjusted_logit)),
            float(np.var(adjusted_logit, ddof=1)))


def adjust_direct(est: DirectEstimate, k: float,
                  n_draws: int = DEFAULT_HIV_DRAWS,
                  rng=None) -> DirectEstimate:
    mean, var = hiv_adjust(est.theta, est.variance, k, n_draws, rng)
    return replace(est, theta=mean, variance=var, hiv_adjusted=True)


def adjust_indirect(est: IndirectEstimate, k: float,
                    n_draws: int = DEFAULT_HIV_DRAWS,
                    rng=None) -> IndirectEstimate:
    if est.variance is None:
        raise ValueError("indirect estimate has no variance to adjust")
    mean, var = hiv_adjust(est.logit_q5, est.variance, k, n_draws, rng)
    return replace(est, logit_q5=mean, q5=float(expit(mean)), variance=var)


# ---------------------------------------------------------------------------
# Fusion

def fuse(direct: Sequence[DirectEstimate],
         indirect: Sequence[IndirectEstimate],
         period: Period,
         include_discouraged: bool = False) -> Optional[FusedEstimate]:
    """Inverse-variance combination of every estimate landing in a period.

    Direct estimates contribute when their period matches; indirect
    estimates contribute when their reference time falls inside the period
    (by its floor). The 15-19 group stays out unless explicitly included.
    Returns None when nothing contributes.
    """
    thetas: list[float] = []
    variances: list[float] = []
    sources: list[str] = []
    for est in direct:
        if tuple(est.period) == tuple(period):
            thetas.append(est.theta)
            variances.append(est.variance)
            sources.append(f"direct:{est.survey_id}")
    for est in indirect:
        if est.discouraged and not include_discouraged:
            continue
        if est.variance is None or est.variance <= 0:
            continue
        if period[0] <= math.floor(est.reference_time) <= period[1]:
            thetas.append(est.logit_q5)
            variances.append(est.variance)
            sources.append(f"indirect:{est.age_group}")
    if not thetas:
        return None
    precision = 1.0 / np.asarray(variances)
    variance = float(1.0 / precision.sum())
    theta = float(variance * np.sum(precision * np.asarray(thetas)))
    return FusedEstimate(tuple(period), theta, variance, tuple(sources))
