"""Posterior aggregation to district-period summaries and holdout accuracy
metrics.

Aggregation turns year/strata-level q5 posterior draws into period/district
draws by weighting with simulated children-ever-born counts: for each
posterior sample, CEB counts are drawn binomially from the female population
and the q5 values are averaged with CEB shares as weights. The metrics are
a variance-weighted MSE on the logit scale (bias and spread reported
separately) and a weighted percentage absolute relative error on the q5
scale.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .core import FullBirthHistory, SummaryBirthHistory
from .direct import Period

__all__ = [
    "PopulationCounts",
    "EvaluationInput",
    "MseResult",
    "aggregate_q5",
    "weighted_mse",
    "pare",
    "split_clusters",
    "metrics_table",
]


@dataclass
class PopulationCounts:
    """Women by age and year for each (district, strata) cell."""

    ages: np.ndarray
    years: np.ndarray
    cells: dict[tuple[str, str], np.ndarray]

    def __post_init__(self) -> None:
        for key, grid in self.cells.items():
            if grid.shape != (self.ages.size, self.years.size):
                raise ValueError(f"population grid {key} has shape "
                                 f"{grid.shape}, expected "
                                 f"{(self.ages.size, self.years.size)}")
            if np.any(grid < 0):
                raise ValueError(f"negative population count in {key}")

    @classmethod
    def from_records(cls, records: Iterable, years: np.ndarray,
                     min_age: int = 15, max_age: int = 49
                     ) -> "PopulationCounts":
        """Back-project surveyed women over the year grid.

        A woman aged A at her survey was aged A - (survey_year - t) in year
        t; she counts wherever that age lands inside [min_age, max_age].
        Works for both record types since only age, survey year, district,
        and strata are read.
        """
        ages = np.arange(min_age, max_age + 1)
        cells: dict[tuple[str, str], np.ndarray] = {}
        for rec in records:
            cov = rec.covariates
            key = (cov.district, cov.strata)
            if key not in cells:
                cells[key] = np.zeros((ages.size, years.size), dtype=np.int64)
            m = rec.mother_age_at_survey - (rec.survey_year - years)
            valid = (m >= min_age) & (m <= max_age)
            cells[key][m[valid] - min_age, np.nonzero(valid)[0]] += 1
        return cls(ages, years, cells)


def aggregate_q5(q5_samples: Mapping[tuple[str, str], np.ndarray],
                 fertility_samples: Mapping[tuple[str, str], np.ndarray],
                 population: PopulationCounts,
                 periods: Sequence[Period],
                 rng=None) -> dict[tuple[Period, str], np.ndarray]:
    """Children-ever-born weighted aggregation of q5 draws.

    ``q5_samples[(district, strata)]`` has shape (J, n_years) and
    ``fertility_samples[(district, strata)]`` (J, n_ages, n_years), both on
    the population grid. Per sample j and period p: draw
    CEB(m, t) ~ Binomial(FP(m, t), f_j(m, t)) for every stratum, then
    average q5_j(t, s) over (t in p, s) with CEB shares as weights. Samples
    whose CEB total is zero for a (period, district) are dropped with a
    diagnostic.
    """
    rng = np.random.default_rng(rng)
    keys = sorted(q5_samples)
    if sorted(fertility_samples) != keys:
        raise ValueError("q5 and fertility sample keys differ")
    n_draws = {q5_samples[k].shape[0] for k in keys}
    n_draws |= {fertility_samples[k].shape[0] for k in keys}
    if len(n_draws) != 1:
        raise ValueError("sample counts differ across inputs")
    J = n_draws.pop()

    districts = sorted({d for d, _ in keys})
    year_index = {int(t): i for i, t in enumerate(population.years)}
    # CEB totals per (key, j, t): one binomial draw per woman-age cell.
    ceb: dict[tuple[str, str], np.ndarray] = {}
    for key in keys:
        fp = population.cells.get(key)
        if fp is None:
            raise ValueError(f"no population counts for {key}")
        f = np.asarray(fertility_samples[key])
        if f.shape != (J, fp.shape[0], fp.shape[1]):
            raise ValueError(f"fertility samples for {key} have shape "
                             f"{f.shape}, expected {(J, *fp.shape)}")
        draws = rng.binomial(fp[None, :, :], np.clip(f, 0.0, 1.0))
        ceb[key] = draws.sum(axis=1)  # (J, n_years)

    out: dict[tuple[Period, str], np.ndarray] = {}
    for period in periods:
        t_idx = [year_index[t] for t in range(period[0], period[1] + 1)
                 if t in year_index]
        if not t_idx:
            continue
        for d in districts:
            strata = [key for key in keys if key[0] == d]
            weights = np.zeros((J, len(strata), len(t_idx)))
            values = np.zeros_like(weights)
            for si, key in enumerate(strata):
                weights[:, si, :] = ceb[key][:, t_idx]
                values[:, si, :] = np.asarray(q5_samples[key])[:, t_idx]
            totals = weights.sum(axis=(1, 2))
            usable = totals > 0
            if not np.all(usable):
                warnings.warn(
                    f"{period}/{d}: {int((~usable).sum())} samples had zero "
                    "children ever born and were dropped")
            if not np.any(usable):
                continue
            shares = weights[usable] / totals[usable, None, None]
            out[(tuple(period), d)] = (values[usable] * shares).sum(
                axis=(1, 2))
    return out


# ---------------------------------------------------------------------------
# Accuracy metrics

@dataclass(frozen=True)
class EvaluationInput:
    """Model summaries vs holdout direct estimates, keyed (district, period).

    ``model`` maps to (posterior mean, posterior variance) of logit q5;
    ``holdout`` maps to (estimate, variance) of the holdout logit q5.
    """

    model: Mapping[tuple[str, Period], tuple[float, float]]
    holdout: Mapping[tuple[str, Period], tuple[float, float]]


@dataclass(frozen=True)
class MseResult:
    total: float
    bias_term: float
    variance_term: float
    n_districts: int


def _holdout_weights(pairs: Sequence[tuple[float, float]]) -> np.ndarray:
    inv = np.array([1.0 / v for _, v in pairs])
    return inv / inv.sum()


def weighted_mse(ev: EvaluationInput, period: Period) -> Optional[MseResult]:
    """Holdout-precision-weighted MSE of the model's logit q5 in a period.

    Districts missing from either side are dropped and the weights
    renormalized over the rest. Returns None when no district overlaps.
    """
    period = tuple(period)
    rows = []
    for (d, p), (y, v) in sorted(ev.holdout.items()):
        if tuple(p) != period or not v > 0:
            continue
        got = ev.model.get((d, p))
        if got is None:
            warnings.warn(f"{d}/{p}: no model estimate; dropped from MSE")
            continue
        rows.append((got[0], got[1], y, v))
    if not rows:
        return None
    w = _holdout_weights([(y, v) for _, _, y, v in rows])
    bias = float(np.sum(w * np.array([(m - y) ** 2
                                      for m, _, y, _ in rows])))
    spread = float(np.sum(w * np.array([mv for _, mv, _, _ in rows])))
    return MseResult(bias + spread, bias, spread, len(rows))


def pare(q5_model: Mapping[tuple[str, Period], float],
         q5_holdout: Mapping[tuple[str, Period], float],
         holdout_variance: Mapping[tuple[str, Period], float],
         period: Period,
         literal_ninth: bool = False) -> Optional[float]:
    """Weighted percentage absolute relative error of q5 in a period.

    The printed formula carries both normalized weights and a 1/9 factor
    (for the nine districts of the motivating analysis), which
    double-normalizes. By default the leading factor is 1/n_districts so
    the metric generalizes; ``literal_ninth=True`` pins it to 1/9
    regardless of how many districts contribute. Returned in percent.
    """
    period = tuple(period)
    rows = []
    for (d, p), q in sorted(q5_holdout.items()):
        if tuple(p) != period:
            continue
        if not q > 0:
            warnings.warn(f"{d}/{p}: holdout q5 is zero; dropped from PARE")
            continue
        v = holdout_variance.get((d, p))
        est = q5_model.get((d, p))
        if v is None or not v > 0 or est is None:
            continue
        rows.append((est, q, v))
    if not rows:
        return None
    w = _holdout_weights([(q, v) for _, q, v in rows])
    lead = (1.0 / 9.0) if literal_ninth else (1.0 / len(rows))
    total = float(np.sum(w * np.array([abs(est - q) / q
                                       for est, q, _ in rows])))
    return 100.0 * lead * total


def split_clusters(records: Sequence[FullBirthHistory],
                   fraction: float = 0.5,
                   rng=None) -> tuple[list[FullBirthHistory],
                                      list[FullBirthHistory]]:
    """Random cluster half-split into (training, holdout).

    Clusters are keyed (survey_id, cluster_id) so multi-survey inputs split
    within each survey. The holdout gets ceil(fraction * n) clusters of
    each survey, chosen by the seeded generator.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be in (0, 1)")
    rng = np.random.default_rng(rng)
    by_survey: dict[str, list[str]] = {}
    for rec in records:
        key = rec.covariates.survey_id
        if rec.cluster_id not in by_survey.setdefault(key, []):
            by_survey[key].append(rec.cluster_id)
    holdout_keys = set()
    for survey in sorted(by_survey):
        clusters = sorted(by_survey[survey])
        n_hold = math.ceil(fraction * len(clusters))
        chosen = rng.choice(len(clusters), size=n_hold, replace=False)
        holdout_keys.update((survey, clusters[i]) for i in chosen)
    train, hold = [], []
    for rec in records:
        key = (rec.covariates.survey_id, rec.cluster_id)
        (hold if key in holdout_keys else train).append(rec)
    return train, hold


def metrics_table(metric_by_model: Mapping[str, Mapping[Period, float]],
                  periods: Sequence[Period],
                  scale: float = 1.0) -> list[list[str]]:
    """Rows of a period-by-model table with a trailing average row.

    Missing cells print empty; the average covers the periods a model
    actually has. ``scale`` multiplies values (e.g. 100 for an MSE x 100
    table).
    """
    models = sorted(metric_by_model)
    rows = [["period", *models]]
    for p in periods:
        row = [f"{p[0]}-{p[1]}"]
        for m in models:
            val = metric_by_model[m].get(tuple(p))
            row.append("" if val is None else f"{scale * val:.3f}")
        rows.append(row)
    avg_row = ["average"]
    for m in models:
        vals = [metric_by_model[m][tuple(p)] for p in periods
                if metric_by_model[m].get(tuple(p)) is not None]
        avg_row.append("" if not vals
                       else f"{scale * sum(vals) / len(vals):.3f}")
    rows.append(avg_row)
    return rows
