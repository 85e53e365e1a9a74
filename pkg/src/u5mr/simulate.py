"""Synthetic cohorts with known fertility and mortality truth.

The generator walks each woman forward one year at a time from age 15 up to
the year before the survey, drawing at most one birth per year, then walks
each child through its yearly death hazards. The year before the survey is
fully observed and no births occur during the survey year, so no calendar
corrections apply to simulated data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .core import (
    AgeGridConfig,
    Child,
    CovariateProfile,
    FullBirthHistory,
    SummaryBirthHistory,
    TableFertility,
    TableHazard,
    summarize,
)

__all__ = [
    "SimulationConfig",
    "SimulationTruth",
    "default_truth",
    "simulate_woman",
    "simulate_cohort",
]


@dataclass(frozen=True)
class SimulationTruth:
    """Ground-truth schedules plus the grid they live on."""

    fertility: TableFertility
    hazard: TableHazard
    fertility_bands: tuple[str, ...]
    hazard_periods: tuple[str, ...]

    def q5(self, period: int) -> float:
        q0, q1, _ = self.hazard.rates[period]
        return 1.0 - (1.0 - q0) * (1.0 - q1) ** 4

    def q5_by_year(self, year: int) -> float:
        period = (int(year) - self.hazard.period_start) // 5
        period = min(max(period, 0), len(self.hazard.rates) - 1)
        return self.q5(period)

    def to_record(self) -> dict:
        return {
            "fertility_bands": list(self.fertility_bands),
            "fertility": list(self.fertility.rates),
            "hazard_period_start": self.hazard.period_start,
            "hazard_periods": list(self.hazard_periods),
            "hazard": [list(r) for r in self.hazard.rates],
            "q5_by_period": [self.q5(p) for p in range(len(self.hazard.rates))],
        }

    @classmethod
    def from_record(cls, rec: dict, ages: AgeGridConfig = AgeGridConfig()) -> "SimulationTruth":
        start = int(rec["hazard_period_start"])
        rates = tuple(tuple(float(v) for v in row) for row in rec["hazard"])
        periods = tuple(
            f"{start + 5 * p}-{start + 5 * p + 4}" for p in range(len(rates)))
        return cls(
            fertility=TableFertility(tuple(float(v) for v in rec["fertility"]), ages),
            hazard=TableHazard(start, rates),
            fertility_bands=tuple(rec["fertility_bands"]),
            hazard_periods=periods,
        )


def default_truth(ages: AgeGridConfig = AgeGridConfig()) -> SimulationTruth:
    text = resources.files("u5mr.data").joinpath("simulation_truth.json").read_text()
    return SimulationTruth.from_record(json.loads(text), ages)


def _uniform_age_distribution() -> np.ndarray:
    return np.full(35, 1.0 / 35.0)


@dataclass(frozen=True)
class SimulationConfig:
    n_women: int = 5000
    n_fbh: int = 1000
    survey_year: int = 2010
    rng_seed: int = 0
    age_distribution: np.ndarray = field(default_factory=_uniform_age_distribution)
    truth: SimulationTruth | None = None
    ages: AgeGridConfig = AgeGridConfig()

    def __post_init__(self):
        if self.n_fbh > self.n_women:
            raise ValueError("n_fbh exceeds n_women")
        dist = np.asarray(self.age_distribution, dtype=float)
        if dist.shape != (35,):
            raise ValueError("age distribution must cover ages 15-49 (35 entries)")
        if abs(dist.sum() - 1.0) > 1e-12 or (dist < 0).any():
            raise ValueError("age distribution must be a probability vector")
        object.__setattr__(self, "age_distribution", dist)
        if self.truth is None:
            object.__setattr__(self, "truth", default_truth(self.ages))


def simulate_woman(age_at_survey: int, config: SimulationConfig,
                   rng: np.random.Generator,
                   cov: CovariateProfile = CovariateProfile(),
                   woman_id: str = "") -> FullBirthHistory:
    """Draw one woman's full history under the configured truth."""
    ages = config.ages
    if age_at_survey < ages.min_fertile_age:
        raise ValueError(f"age {age_at_survey} below minimum fertile age")
    truth = config.truth
    t_surv = config.survey_year
    children = []
    for m in range(ages.min_fertile_age, age_at_survey):
        if not ages.fertile(m):
            continue
        t = t_surv - (age_at_survey - m)
        if rng.random() < truth.fertility(m, t, cov):
            death_year = None
            for a in range(t_surv - t):
                if rng.random() < truth.hazard(a, t + a, cov):
                    death_year = t + a + 1
                    break
            children.append(Child(birth_year=t, death_year=death_year))
    return FullBirthHistory(
        mother_age_at_survey=age_at_survey,
        survey_year=t_surv,
        children=tuple(children),
        covariates=cov,
        woman_id=woman_id,
    )


def simulate_cohort(config: SimulationConfig) -> tuple[
        list[FullBirthHistory], list[SummaryBirthHistory], dict]:
    """Simulate a cohort and split it into FBH and SBH datasets.

    The first ``n_fbh`` women keep their full histories; the rest are
    collapsed to summary totals. Each woman consumes an independent random
    stream spawned from (seed, woman index), so any parallel execution that
    respects the stream assignment reproduces the serial output bit for bit.
    """
    root = np.random.SeedSequence(config.rng_seed)
    streams = root.spawn(config.n_women + 1)
    age_rng = np.random.default_rng(streams[0])
    ages_at_survey = 15 + age_rng.choice(35, size=config.n_women,
                                         p=config.age_distribution)
    woman_streams = streams[1:]

    fbh: list[FullBirthHistory] = []
    sbh: list[SummaryBirthHistory] = []
    n_clusters = max(1, config.n_fbh // 40)
    for i in range(config.n_women):
        is_sbh = i >= config.n_fbh
        cov = CovariateProfile(
            survey_id="sim_sbh" if is_sbh else "sim_fbh", is_sbh=is_sbh)
        hist = simulate_woman(int(ages_at_survey[i]), config,
                              np.random.default_rng(woman_streams[i]),
                              cov=cov, woman_id=f"w{i:06d}")
        if is_sbh:
            sbh.append(summarize(hist))
        else:
            hist = FullBirthHistory(
                mother_age_at_survey=hist.mother_age_at_survey,
                survey_year=hist.survey_year,
                children=hist.children,
                covariates=cov,
                woman_id=hist.woman_id,
                cluster_id=f"c{i % n_clusters:04d}",
                weight=1.0,
            )
            fbh.append(hist)

    truth_record = config.truth.to_record()
    truth_record["n_women"] = config.n_women
    truth_record["n_fbh"] = config.n_fbh
    truth_record["survey_year"] = config.survey_year
    truth_record["rng_seed"] = config.rng_seed
    return fbh, sbh, truth_record
