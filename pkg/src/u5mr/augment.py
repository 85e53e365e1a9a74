"""Sampling of unobserved birth histories for summary-only (SBH) records.

Given current fertility and hazard schedules, each SBH woman's B birth years,
D death indicators, and death years are latent. This module draws them from
their full conditional: a configuration (which fertile years hold births and
which children died) is weighted by the product of fertility terms at birth
years, survival-or-death brackets per child, and no-birth terms at the
remaining fertile years. Death years are then drawn child by child, with
probability proportional to surviving a years and dying in year t_b + a + 1.

Small configuration spaces are enumerated exactly; large ones use a
Metropolis-Hastings independence sampler that proposes birth years one child
at a time without replacement, deaths first. The MH chain runs on ordered
tuples (the target is exchangeable over child labels, so a uniform ordering
factor cancels in the acceptance ratio) because the sequential proposal has a
tractable density only for a specific order.

Women sharing (age at survey, B, D, covariates, survey year) share one weight
table per sweep. Schedules must broadcast over numpy arrays of ages/years.

Survey-year handling: in simulation mode (``allow_survey_year_births=False``)
the survey year holds no births and needs no corrections. Otherwise the survey
year label is a candidate birth year with fertility scaled by 0.5, and a child
born then can only die in that same year, with its age-0 hazard scaled by the
partial-exposure factor (0.65 by default).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Optional, Sequence

import numpy as np

from .calendars import (
    DEFAULT_SURVEY_YEAR_HAZARD_FACTOR,
    SURVEY_YEAR_FERTILITY_FACTOR,
)
from .core import (
    AgeGridConfig,
    CovariateProfile,
    FertilitySchedule,
    HazardSchedule,
    SummaryBirthHistory,
)

DEFAULT_ENUMERATION_CAP = 10_000


class EnumerationCapExceeded(RuntimeError):
    """Configuration count is above the exact-enumeration cap."""


class InfeasibleAugmentation(RuntimeError):
    """No configuration has positive probability for the given records."""

    def __init__(self, message: str, woman_ids: Sequence[object] = ()):
        super().__init__(message)
        self.woman_ids = list(woman_ids)


@dataclass(frozen=True)
class DaSettings:
    """Knobs for the augmentation step."""

    ages: AgeGridConfig = field(default_factory=AgeGridConfig)
    allow_survey_year_births: bool = False
    survey_year_fertility_factor: float = SURVEY_YEAR_FERTILITY_FACTOR
    survey_year_hazard_factor: float = DEFAULT_SURVEY_YEAR_HAZARD_FACTOR
    enumeration_cap: int = DEFAULT_ENUMERATION_CAP
    mh_steps_per_sweep: int = 1


@dataclass(frozen=True)
class Configuration:
    """Birth years (sorted, distinct) with aligned 0/1 death indicators."""

    birth_years: tuple[int, ...]
    death_indicators: tuple[int, ...]

    def __post_init__(self):
        if len(self.birth_years) != len(self.death_indicators):
            raise ValueError("birth_years and death_indicators lengths differ")
        if any(b not in (0, 1) for b in self.death_indicators):
            raise ValueError("death indicators must be 0 or 1")
        if list(self.birth_years) != sorted(set(self.birth_years)):
            raise ValueError("birth years must be sorted and distinct")

    @property
    def n_deaths(self) -> int:
        return sum(self.death_indicators)

    def death_birth_years(self) -> tuple[int, ...]:
        return tuple(b for b, d in zip(self.birth_years, self.death_indicators) if d)


@dataclass(frozen=True)
class AugmentedRecord:
    """A configuration completed with one death year per dying child."""

    configuration: Configuration
    death_years: tuple[int, ...]

    def children(self) -> list[tuple[int, Optional[int]]]:
        """(birth_year, death_year or None) pairs, death years attached to
        the death-flagged births in birth-year order."""
        out = []
        it = iter(self.death_years)
        for b, d in zip(self.configuration.birth_years,
                        self.configuration.death_indicators):
            out.append((b, next(it) if d else None))
        return out


@dataclass(frozen=True)
class WomanGroupKey:
    mother_age_at_survey: int
    births: int
    deaths: int
    covariates: CovariateProfile
    survey_year: int

    def sort_key(self) -> tuple:
        c = self.covariates
        return (self.survey_year, str(c.survey_id), str(c.district),
                c.strata, c.is_sbh, self.mother_age_at_survey,
                self.births, self.deaths)


def group_key(woman: SummaryBirthHistory) -> WomanGroupKey:
    return WomanGroupKey(woman.mother_age_at_survey, woman.births,
                         woman.deaths, woman.covariates, woman.survey_year)


# ---------------------------------------------------------------------------
# Per-woman numeric tables

@dataclass
class WomanTarget:
    """Log-scale weight tables over a woman's candidate birth years.

    ``log_fert``/``log_no_birth`` include the survey-year fertility factor;
    ``log_surv``/``log_death`` are child survival/death-by-survey
    probabilities by birth year, including the survey-year hazard factor for
    a birth in the survey year itself.
    """

    key: WomanGroupKey
    years: np.ndarray            # candidate birth years, ascending
    mother_ages: np.ndarray      # aligned mother ages
    log_fert: np.ndarray
    log_no_birth: np.ndarray
    log_surv: np.ndarray
    log_death: np.ndarray

    @property
    def n_years(self) -> int:
        return self.years.size

    @property
    def births(self) -> int:
        return self.key.births

    @property
    def deaths(self) -> int:
        return self.key.deaths

    def enumeration_count(self) -> int:
        return (math.comb(self.n_years, self.births)
                * math.comb(self.births, self.deaths))

    def log_birth_odds(self) -> np.ndarray:
        return self.log_fert - self.log_no_birth

    def config_log_weight_by_position(self, positions, died) -> float:
        positions = np.asarray(positions)
        died = np.asarray(died, dtype=bool)
        bracket = np.where(died, self.log_death[positions],
                           self.log_surv[positions])
        rest = self.log_no_birth.sum() - self.log_no_birth[positions].sum()
        return float(self.log_fert[positions].sum() + bracket.sum() + rest)


def candidate_years(woman: SummaryBirthHistory,
                    settings: DaSettings) -> tuple[np.ndarray, np.ndarray]:
    """Ascending candidate birth years and aligned mother ages."""
    cfg = settings.ages
    top = woman.mother_age_at_survey
    if not settings.allow_survey_year_births:
        top -= 1
    top = min(top, cfg.max_fertile_age)
    ages = np.arange(cfg.min_fertile_age, top + 1)
    years = woman.survey_year - (woman.mother_age_at_survey - ages)
    return years, ages


def _child_log_survival(years: np.ndarray, survey_year: int,
                        cov: CovariateProfile, q: HazardSchedule,
                        hazard_factor: float) -> tuple[np.ndarray, np.ndarray]:
    """log P(child born in year t survives to the survey) and log of its
    complement, per candidate birth year."""
    log_surv = np.empty(years.size)
    log_death = np.empty(years.size)
    with np.errstate(divide="ignore"):
        for i, t_b in enumerate(years):
            span = survey_year - t_b
            if span == 0:
                p_die = hazard_factor * float(q(0, survey_year, cov))
                log_surv[i] = np.log1p(-p_die) if p_die < 1 else -np.inf
                log_death[i] = np.log(p_die) if p_die > 0 else -np.inf
                continue
            a = np.arange(span)
            qa = np.asarray(q(a, t_b + a, cov), dtype=float)
            ls = np.log1p(-qa).sum()
            log_surv[i] = ls
            s = np.exp(ls)
            log_death[i] = np.log1p(-s) if s < 1 else -np.inf
    return log_surv, log_death


def build_woman_target(woman: SummaryBirthHistory, f: FertilitySchedule,
                       q: HazardSchedule,
                       settings: DaSettings = DaSettings()) -> WomanTarget:
    years, ages = candidate_years(woman, settings)
    if woman.births > years.size:
        raise InfeasibleAugmentation(
            f"{woman.births} births cannot fit in {years.size} candidate "
            f"years", [woman.woman_id])
    cov = woman.covariates
    fert = np.asarray(f(ages, years, cov), dtype=float).copy()
    if settings.allow_survey_year_births:
        fert[years == woman.survey_year] *= settings.survey_year_fertility_factor
    with np.errstate(divide="ignore"):
        log_fert = np.log(fert)
        log_no_birth = np.log1p(-fert)
    log_surv, log_death = _child_log_survival(
        years, woman.survey_year, cov, q, settings.survey_year_hazard_factor)
    return WomanTarget(group_key(woman), years, ages, log_fert,
                       log_no_birth, log_surv, log_death)


# ---------------------------------------------------------------------------
# Exact enumeration

def _combination_matrices(n_years: int, births: int,
                          deaths: int) -> tuple[np.ndarray, np.ndarray]:
    """All configurations as (positions, death-mask) matrices.

    Rows enumerate year-subsets (lexicographic) crossed with death patterns;
    row count is C(n_years, births) * C(births, deaths).
    """
    if births == 0:
        return np.zeros((1, 0), dtype=np.uint8), np.zeros((1, 0), dtype=bool)
    year_sets = np.array(list(combinations(range(n_years), births)),
                         dtype=np.uint8).reshape(-1, births)
    patterns = np.zeros((math.comb(births, deaths), births), dtype=bool)
    for r, pos in enumerate(combinations(range(births), deaths)):
        patterns[r, list(pos)] = True
    n_sets, n_pat = year_sets.shape[0], patterns.shape[0]
    positions = np.repeat(year_sets, n_pat, axis=0)
    died = np.tile(patterns, (n_sets, 1))
    return positions, died


def enumerate_configurations(
        woman: SummaryBirthHistory,
        settings: DaSettings = DaSettings()) -> list[Configuration]:
    """Every (birth-year, death-indicator) configuration, duplicate-free."""
    years, _ = candidate_years(woman, settings)
    count = (math.comb(years.size, woman.births)
             * math.comb(woman.births, woman.deaths))
    if count > settings.enumeration_cap:
        raise EnumerationCapExceeded(
            f"{count} configurations exceed cap {settings.enumeration_cap}")
    positions, died = _combination_matrices(years.size, woman.births,
                                            woman.deaths)
    return [Configuration(tuple(int(years[p]) for p in pos),
                          tuple(int(x) for x in flags))
            for pos, flags in zip(positions, died)]


def config_log_weight(config: Configuration, woman: SummaryBirthHistory,
                      f: FertilitySchedule, q: HazardSchedule,
                      settings: DaSettings = DaSettings(),
                      target: Optional[WomanTarget] = None) -> float:
    """Log of the unnormalized joint weight of one configuration,
    including the no-birth factors over unused candidate years."""
    if target is None:
        target = build_woman_target(woman, f, q, settings)
    year_to_pos = {int(t): i for i, t in enumerate(target.years)}
    try:
        positions = [year_to_pos[b] for b in config.birth_years]
    except KeyError:
        return -np.inf
    return target.config_log_weight_by_position(
        positions, list(config.death_indicators))


def _categorical(stream: np.random.Generator, log_weights: np.ndarray,
                 size: int) -> np.ndarray:
    finite = np.isfinite(log_weights)
    if not finite.any():
        raise InfeasibleAugmentation("all configuration weights are zero")
    w = np.exp(log_weights - log_weights[finite].max())
    c = np.cumsum(w)
    u = stream.random(size) * c[-1]
    return np.minimum(np.searchsorted(c, u, side="right"), w.size - 1)


def exact_sample_batch(woman: SummaryBirthHistory, f: FertilitySchedule,
                       q: HazardSchedule, rng: np.random.Generator,
                       settings: DaSettings = DaSettings(),
                       size: int = 1) -> list[Configuration]:
    """Independent draws proportional to exp(config_log_weight).

    The enumeration is done once and shared across the batch, so large
    validation draws stay cheap.
    """
    target = build_woman_target(woman, f, q, settings)
    if target.enumeration_count() > settings.enumeration_cap:
        raise EnumerationCapExceeded(
            f"{target.enumeration_count()} configurations exceed cap")
    positions, died = _combination_matrices(target.n_years, target.births,
                                            target.deaths)
    log_w = _enumerated_log_weights(target, positions, died)
    idx = _categorical(rng, log_w, size)
    return [Configuration(tuple(int(target.years[p]) for p in positions[i]),
                          tuple(int(x) for x in died[i]))
            for i in idx]


def exact_sample(woman: SummaryBirthHistory, f: FertilitySchedule,
                 q: HazardSchedule, rng: np.random.Generator,
                 settings: DaSettings = DaSettings()) -> Configuration:
    """One draw proportional to exp(config_log_weight), by full enumeration."""
    return exact_sample_batch(woman, f, q, rng, settings, size=1)[0]


def _enumerated_log_weights(target: WomanTarget, positions: np.ndarray,
                            died: np.ndarray) -> np.ndarray:
    """Weights up to the shared no-birth constant, factored per birth year."""
    odds = target.log_birth_odds()
    w_alive = odds + target.log_surv
    w_dead = odds + target.log_death
    if positions.shape[1] == 0:
        return np.zeros(positions.shape[0])
    alphabet = np.where(died, w_dead[positions], w_alive[positions])
    return alphabet.sum(axis=1)


# ---------------------------------------------------------------------------
# Metropolis-Hastings on the ordered configuration space

@dataclass(frozen=True)
class MhState:
    """Current ordered draw: death years first, then survivor years,
    each in the order the proposal selected them."""

    ordered_positions: tuple[int, ...]
    log_target: float          # shared no-birth constant omitted
    log_proposal: float

    def to_configuration(self, years: np.ndarray, deaths: int) -> Configuration:
        flags = {}
        for slot, pos in enumerate(self.ordered_positions):
            flags[pos] = 1 if slot < deaths else 0
        ordered = sorted(flags)
        return Configuration(tuple(int(years[p]) for p in ordered),
                             tuple(flags[p] for p in ordered))


def propose_independence(woman: SummaryBirthHistory, f: FertilitySchedule,
                         q: HazardSchedule, rng: np.random.Generator,
                         settings: DaSettings = DaSettings(),
                         target: Optional[WomanTarget] = None,
                         ) -> Optional[tuple[Configuration, float, MhState]]:
    """Draw children one at a time without replacement, deaths first.

    Returns (configuration, proposal log-density, ordered state), or None if
    some step had no feasible year left (callers count that as a rejection).
    """
    if target is None:
        target = build_woman_target(woman, f, q, settings)
    state = _propose_rows(target, rng, 1)
    if state is None:
        return None
    positions, log_q = state
    mh = MhState(tuple(int(p) for p in positions[0]),
                 _target_log_weight_rows(target, positions)[0],
                 float(log_q[0]))
    return mh.to_configuration(target.years, target.deaths), mh.log_proposal, mh


def _proposal_tables(target: WomanTarget) -> tuple[np.ndarray, np.ndarray]:
    # Proposal weights f * (1 - S) and f * S, not the odds form the target
    # uses; support is identical and the MH ratio corrects the difference.
    w_dead = np.exp(target.log_fert + target.log_death)
    w_alive = np.exp(target.log_fert + target.log_surv)
    return w_dead, w_alive


def _propose_rows(target: WomanTarget, stream: np.random.Generator,
                  n_rows: int) -> Optional[tuple[np.ndarray, np.ndarray]]:
    """Vectorized sequential proposal for n_rows independent draws.

    Returns (positions (n_rows, B) with deaths in the first D slots,
    proposal log-densities (n_rows,)), or None if any row starved.
    """
    B, D, Y = target.births, target.deaths, target.n_years
    w_dead, w_alive = _proposal_tables(target)
    positions = np.empty((n_rows, B), dtype=np.int64)
    log_q = np.zeros(n_rows)
    available = np.ones((n_rows, Y), dtype=bool)
    rows = np.arange(n_rows)
    for slot in range(B):
        base = w_dead if slot < D else w_alive
        w = available * base
        totals = w.sum(axis=1)
        if not (totals > 0).all():
            return None
        c = np.cumsum(w, axis=1)
        u = stream.random(n_rows) * totals
        picked = np.minimum((c < u[:, None]).sum(axis=1), Y - 1)
        log_q += np.log(base[picked] / totals)
        positions[rows, slot] = picked
        available[rows, picked] = False
    return positions, log_q


def _target_log_weight_rows(target: WomanTarget,
                            positions: np.ndarray) -> np.ndarray:
    """Target log-weights (constant omitted) for ordered position rows."""
    D = target.deaths
    odds = target.log_birth_odds()
    w_dead = odds + target.log_death
    w_alive = odds + target.log_surv
    if positions.shape[1] == 0:
        return np.zeros(positions.shape[0])
    dead_part = w_dead[positions[:, :D]].sum(axis=1)
    alive_part = w_alive[positions[:, D:]].sum(axis=1)
    return dead_part + alive_part


def mh_step(state: MhState, woman: SummaryBirthHistory, f: FertilitySchedule,
            q: HazardSchedule, rng: np.random.Generator,
            settings: DaSettings = DaSettings(),
            target: Optional[WomanTarget] = None) -> tuple[MhState, bool]:
    """One accept/reject step of the independence chain."""
    if target is None:
        target = build_woman_target(woman, f, q, settings)
    proposal = _propose_rows(target, rng, 1)
    u = rng.random()
    if proposal is None:
        return state, False
    positions, log_q = proposal
    log_pi = float(_target_log_weight_rows(target, positions)[0])
    log_alpha = (log_pi + state.log_proposal) - (state.log_target + log_q[0])
    if np.log(u) < log_alpha:
        return MhState(tuple(int(p) for p in positions[0]), log_pi,
                       float(log_q[0])), True
    return state, False


# ---------------------------------------------------------------------------
# Death-year imputation

def death_year_log_pmf(t_b: int, survey_year: int, cov: CovariateProfile,
                       q: HazardSchedule,
                       settings: DaSettings = DaSettings()) -> tuple[np.ndarray, np.ndarray]:
    """Candidate death years for a child born in t_b, with log-weights
    proportional to surviving a years then dying in year t_b + a + 1."""
    if t_b == survey_year:
        # Birth in the survey-year interval: the death folds onto age 0 in
        # that same year, so there is a single candidate.
        return np.array([survey_year]), np.zeros(1)
    span = survey_year - t_b
    a = np.arange(span)
    qa = np.asarray(q(a, t_b + a, cov), dtype=float)
    with np.errstate(divide="ignore"):
        log_die = np.log(qa)
        log_surv_steps = np.log1p(-qa)
    prefix = np.concatenate([[0.0], np.cumsum(log_surv_steps[:-1])])
    return t_b + a + 1, prefix + log_die


def impute_death_years(config: Configuration, woman: SummaryBirthHistory,
                       q: HazardSchedule, rng: np.random.Generator,
                       settings: DaSettings = DaSettings()) -> AugmentedRecord:
    """Complete a configuration by drawing one death year per dying child."""
    death_years = []
    for t_b in config.death_birth_years():
        years, log_w = death_year_log_pmf(t_b, woman.survey_year,
                                          woman.covariates, q, settings)
        idx = int(_categorical(rng, log_w, 1)[0])
        death_years.append(int(years[idx]))
    return AugmentedRecord(config, tuple(death_years))


# ---------------------------------------------------------------------------
# Dataset sweeps

@dataclass
class SweepStats:
    weight_tables_built: int = 0
    mh_proposals: int = 0
    mh_accepted: int = 0
    exact_draws: int = 0

    @property
    def mh_acceptance_rate(self) -> float:
        return self.mh_accepted / self.mh_proposals if self.mh_proposals else float("nan")


@dataclass
class DaSweepResult:
    records: list[AugmentedRecord]
    stats: SweepStats
    counts: Optional["SweepCounts"] = None
    infeasible_ids: list = field(default_factory=list)


@dataclass
class SweepCounts:
    """Augmented-event counts per covariate class, on the year grid.

    ``births[class][m_idx, t_idx]`` counts births by mother age and year;
    ``survivors[class][t_idx]`` counts children alive at the survey by birth
    year; ``deaths[class][tb_idx, td_idx]`` counts (birth year, death year)
    pairs. Index 0 of the year axis is ``year_start``.
    """

    year_start: int
    n_years: int
    age_start: int
    n_ages: int
    classes: list[tuple[CovariateProfile, int]]
    births: list[np.ndarray]
    survivors: list[np.ndarray]
    deaths: list[np.ndarray]


class _Group:
    """All women sharing a WomanGroupKey, plus cached combinatorics."""

    __slots__ = ("key", "rows", "years", "ages", "positions", "died",
                 "exact", "class_index", "mh_positions", "mh_log_target",
                 "mh_log_proposal")

    def __init__(self, key: WomanGroupKey, rows: list[int],
                 years: np.ndarray, ages: np.ndarray, cap: int,
                 matrix_cache: dict):
        self.key = key
        self.rows = np.asarray(rows)
        self.years = years
        self.ages = ages
        count = (math.comb(years.size, key.births)
                 * math.comb(key.births, key.deaths))
        self.exact = count <= cap
        if self.exact:
            mkey = (years.size, key.births, key.deaths)
            if mkey not in matrix_cache:
                matrix_cache[mkey] = _combination_matrices(*mkey)
            self.positions, self.died = matrix_cache[mkey]
        else:
            self.positions = self.died = None
        self.class_index = -1
        self.mh_positions = None     # (n_women, B) ordered, deaths first
        self.mh_log_target = None
        self.mh_log_proposal = None


class DaEngine:
    """Persistent sweep machinery for one SBH dataset.

    Groups, combination matrices, and MH chain states survive across sweeps;
    per-sweep randomness comes from streams spawned off the seed sequence
    passed to :meth:`sweep`, one per group in sorted-key order plus one for
    death-year imputation, so results are independent of execution order.
    """

    def __init__(self, dataset: Sequence[SummaryBirthHistory],
                 settings: DaSettings = DaSettings()):
        self.settings = settings
        self.dataset = list(dataset)
        self.infeasible: list[object] = []
        by_key: dict[WomanGroupKey, list[int]] = {}
        for i, woman in enumerate(self.dataset):
            by_key.setdefault(group_key(woman), []).append(i)
        matrix_cache: dict = {}
        self.groups: list[_Group] = []
        classes: dict[tuple, int] = {}
        self.class_list: list[tuple[CovariateProfile, int]] = []
        year_lo, year_hi, age_hi = [], [], []
        for key in sorted(by_key, key=WomanGroupKey.sort_key):
            rows = by_key[key]
            proto = self.dataset[rows[0]]
            years, ages = candidate_years(proto, settings)
            if key.births > years.size:
                self.infeasible.extend(self.dataset[r].woman_id for r in rows)
                continue
            g = _Group(key, rows, years, ages, settings.enumeration_cap,
                       matrix_cache)
            ckey = (key.covariates, key.survey_year)
            if ckey not in classes:
                classes[ckey] = len(self.class_list)
                self.class_list.append((key.covariates, key.survey_year))
            g.class_index = classes[ckey]
            self.groups.append(g)
            if years.size:
                year_lo.append(int(years[0]))
            year_hi.append(key.survey_year)
            age_hi.append(key.mother_age_at_survey)
        self.year_start = min(year_lo) if year_lo else 0
        self.year_end = max(year_hi) if year_hi else 0
        self.n_years = self.year_end - self.year_start + 1
        self.age_start = settings.ages.min_fertile_age
        self.n_ages = ((max(age_hi) if age_hi else self.age_start)
                       - self.age_start + 1)

    # -- per-sweep shared tables ------------------------------------------

    def _class_tables(self, f: FertilitySchedule, q: HazardSchedule):
        """Per covariate class: child survival/death log-probs by birth year
        and the death-year log-pmf matrix, on the engine's year grid."""
        tables = []
        for cov, survey_year in self.class_list:
            years = np.arange(self.year_start, survey_year + 1)
            log_surv, log_death = _child_log_survival(
                years, survey_year, cov, q,
                self.settings.survey_year_hazard_factor)
            pmf = np.full((years.size, years.size), -np.inf)
            for i, t_b in enumerate(years):
                cand, log_w = death_year_log_pmf(int(t_b), survey_year, cov,
                                                 q, self.settings)
                pmf[i, cand - self.year_start] = log_w
            tables.append((log_surv, log_death, pmf))
        return tables

    def _group_target(self, g: _Group, f: FertilitySchedule,
                      class_tables) -> WomanTarget:
        cov = g.key.covariates
        fert = np.asarray(f(g.ages, g.years, cov), dtype=float).copy()
        if self.settings.allow_survey_year_births:
            fert[g.years == g.key.survey_year] *= \
                self.settings.survey_year_fertility_factor
        with np.errstate(divide="ignore"):
            log_fert = np.log(fert)
            log_no_birth = np.log1p(-fert)
        log_surv_cls, log_death_cls, _ = class_tables[g.class_index]
        idx = g.years - self.year_start
        return WomanTarget(g.key, g.years, g.ages, log_fert, log_no_birth,
                           log_surv_cls[idx], log_death_cls[idx])

    # -- the sweep ---------------------------------------------------------

    def sweep(self, f: FertilitySchedule, q: HazardSchedule,
              seed: np.random.SeedSequence,
              collect_records: bool = True) -> DaSweepResult:
        stats = SweepStats()
        n = len(self.dataset)
        class_tables = self._class_tables(f, q)
        streams = seed.spawn(len(self.groups) + 1)
        # Per-woman outcome of this sweep, as position/death rows per group.
        drawn: list[tuple[_Group, np.ndarray, np.ndarray]] = []
        for g, ss in zip(self.groups, streams[:-1]):
            stream = np.random.default_rng(ss)
            target = self._group_target(g, f, class_tables)
            stats.weight_tables_built += 1
            if g.exact:
                log_w = _enumerated_log_weights(target, g.positions, g.died)
                try:
                    idx = _categorical(stream, log_w, g.rows.size)
                except InfeasibleAugmentation as exc:
                    raise InfeasibleAugmentation(
                        "zero-probability group under current parameters",
                        [self.dataset[r].woman_id for r in g.rows]) from exc
                stats.exact_draws += g.rows.size
                drawn.append((g, g.positions[idx], g.died[idx]))
            else:
                self._mh_sweep(g, target, stream, stats)
                D = g.key.deaths
                died = np.zeros(g.mh_positions.shape, dtype=bool)
                died[:, :D] = True
                drawn.append((g, g.mh_positions.copy(), died))
        death_stream = np.random.default_rng(streams[-1])
        records, counts = self._finalize(drawn, class_tables, death_stream,
                                         collect_records)
        if collect_records and len(records) != n - len(self.infeasible):
            raise AssertionError("sweep lost records")
        return DaSweepResult(records, stats, counts)

    def _mh_sweep(self, g: _Group, target: WomanTarget,
                  stream: np.random.Generator, stats: SweepStats) -> None:
        n_w = g.rows.size
        if g.mh_positions is None:
            for _ in range(100):
                init = _propose_rows(target, stream, n_w)
                if init is not None:
                    break
            else:
                raise InfeasibleAugmentation(
                    "independence proposal starved at initialization",
                    [self.dataset[r].woman_id for r in g.rows])
            g.mh_positions, g.mh_log_proposal = init
            g.mh_log_target = _target_log_weight_rows(target, g.mh_positions)
        else:
            # Parameters moved since the states were stored; refresh the
            # target density at the retained positions.
            g.mh_log_target = _target_log_weight_rows(target, g.mh_positions)
        for _ in range(self.settings.mh_steps_per_sweep):
            proposal = _propose_rows(target, stream, n_w)
            u = stream.random(n_w)
            stats.mh_proposals += n_w
            if proposal is None:
                continue
            pos, log_q = proposal
            log_pi = _target_log_weight_rows(target, pos)
            log_alpha = (log_pi + g.mh_log_proposal
                         - g.mh_log_target - log_q)
            accept = np.log(u) < log_alpha
            g.mh_positions[accept] = pos[accept]
            g.mh_log_target[accept] = log_pi[accept]
            g.mh_log_proposal[accept] = log_q[accept]
            stats.mh_accepted += int(accept.sum())

    def _finalize(self, drawn, class_tables, death_stream,
                  collect_records, ) -> tuple[list[AugmentedRecord], SweepCounts]:
        """Impute death years (grouped by class and birth year so draws are
        order-independent), then build counts and optionally records."""
        n_cls = len(self.class_list)
        shape_t = (self.n_years,)
        births = [np.zeros((self.n_ages, self.n_years), dtype=np.int64)
                  for _ in range(n_cls)]
        survivors = [np.zeros(shape_t, dtype=np.int64) for _ in range(n_cls)]
        deaths = [np.zeros((self.n_years, self.n_years), dtype=np.int64)
                  for _ in range(n_cls)]
        # Gather every dying child as (class, t_b_idx, group_ordinal, row,
        # slot) so the grouped draws land deterministically.
        pending: dict[tuple[int, int], list[tuple[int, int, int]]] = {}
        per_group_years: list[np.ndarray] = []
        for ordinal, (g, pos, died) in enumerate(drawn):
            # Childless women at the minimum fertile age have an empty
            # candidate grid; they contribute nothing to the counts.
            offset = (g.years[0] - self.year_start) if g.years.size else 0
            year_idx = pos + offset
            ci = g.class_index
            age_off = (g.ages[0] - self.age_start) if g.ages.size else 0
            np.add.at(births[ci], (pos + age_off, year_idx), 1)
            surv_idx = year_idx[~died]
            np.add.at(survivors[ci], surv_idx, 1)
            dead_rows, dead_slots = np.nonzero(died)
            for r, s in zip(dead_rows, dead_slots):
                tb = int(year_idx[r, s])
                pending.setdefault((ci, tb), []).append((ordinal, int(r), int(s)))
            per_group_years.append(year_idx)
        death_year_of: dict[tuple[int, int, int], int] = {}
        for (ci, tb) in sorted(pending):
            entries = pending[(ci, tb)]
            log_w = class_tables[ci][2][tb]
            idx = _categorical(death_stream, log_w, len(entries))
            deaths[ci][tb] += np.bincount(idx, minlength=self.n_years)
            for entry, td in zip(entries, idx):
                death_year_of[entry] = int(td)
        records: list[AugmentedRecord] = []
        if collect_records:
            for ordinal, (g, pos, died) in enumerate(drawn):
                year_idx = per_group_years[ordinal]
                for r in range(g.rows.size):
                    order = np.argsort(pos[r], kind="stable")
                    b_years = tuple(int(y) + self.year_start
                                    for y in year_idx[r][order])
                    flags = tuple(int(x) for x in died[r][order])
                    config = Configuration(b_years, flags)
                    # Death years follow the sorted birth-year order of the
                    # death-flagged children.
                    slot_order = [int(s) for s in order if died[r][int(s)]]
                    d_years = tuple(death_year_of[(ordinal, r, s)]
                                    + self.year_start for s in slot_order)
                    records.append(AugmentedRecord(config, d_years))
            records = self._reorder(records, drawn)
        counts = SweepCounts(self.year_start, self.n_years, self.age_start,
                             self.n_ages, self.class_list, births,
                             survivors, deaths)
        return records, counts

    def _reorder(self, records: list[AugmentedRecord], drawn):
        """Records were built group by group; return them in dataset order."""
        order = np.concatenate([g.rows for g, _, _ in drawn]) if drawn else np.array([], dtype=int)
        out: list[Optional[AugmentedRecord]] = [None] * len(order)
        position = {int(row): i for i, row in enumerate(np.sort(order))}
        for rec, row in zip(records, order):
            out[position[int(row)]] = rec
        return out


def run_da_sweep(sbh_dataset: Sequence[SummaryBirthHistory],
                 f: FertilitySchedule, q: HazardSchedule,
                 rng, settings: DaSettings = DaSettings(),
                 collect_records: bool = True) -> DaSweepResult:
    """One augmentation per SBH woman, grouped so that women sharing
    (age, B, D, covariates) reuse a single weight table.

    ``rng`` may be a SeedSequence, an integer seed, or a Generator; the
    first two give the documented per-(sweep, group) stream layout.
    """
    if isinstance(rng, np.random.SeedSequence):
        seed = rng
    elif isinstance(rng, (int, np.integer)):
        seed = np.random.SeedSequence(int(rng))
    else:
        seed = np.random.SeedSequence(rng.integers(2 ** 63))
    engine = DaEngine(sbh_dataset, settings)
    if engine.infeasible:
        import warnings
        warnings.warn(f"excluded {len(engine.infeasible)} infeasible SBH "
                      f"records: {engine.infeasible[:5]}")
    result = engine.sweep(f, q, seed, collect_records=collect_records)
    result.infeasible_ids = list(engine.infeasible)
    return result
