"""Hamiltonian Monte Carlo updates and the outer augmentation-Gibbs loop.

Each MCMC iteration (1) redraws the latent birth histories of every SBH
woman at the current parameters, (2) refills the imputed portion of the
binomial cells, then (3, 4) runs one HMC step each for the fertility and
hazard models. The two models factor given the augmentation, so they are
updated separately; within a model, (beta, phi, eta_kappa) move jointly.

The smoothing log-precision gets an extra univariate slice-sampling move
after every HMC step. Its full conditional involves only the quadratic
form of the field, so the move is nearly free, and without it the chain
can spend thousands of iterations stuck in the high-precision funnel tail
where the field is pinned to its null space.

Step sizes adapt toward a target acceptance rate by a Robbins-Monro
recursion during warmup and are frozen afterwards. The diagonal mass matrix
is refreshed from the posterior curvature a few times during warmup, which
matters here because cell exposures span several orders of magnitude.

Randomness is split into named streams off the root seed (augmentation,
fertility HMC, hazard HMC, initialization), so an FBH-only run consumes
exactly the same HMC streams whether or not any SBH machinery is present.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit, logit

from .augment import DaEngine, DaSettings
from .core import CovariateProfile, FullBirthHistory, SummaryBirthHistory
from .posterior import (
    CellTable,
    ClassGrids,
    CellLayout,
    HivFactors,
    ModelSpec,
    ParameterState,
    TabulationSettings,
    child_trial_grids,
    curvature_diag,
    grids_from_records,
    gradient,
    neg_log_posterior,
    q5_from_state,
    woman_candidate_grid,
)


@dataclass
class HmcConfig:
    step_size: float = 0.1
    leapfrog_steps: int = 25
    mass: Optional[np.ndarray] = None
    warmup_iterations: int = 1000
    target_acceptance: float = 0.8
    chain_length: int = 5000
    thin: int = 5
    seed: int = 0
    adapt_mass: bool = True

    def __post_init__(self):
        if self.step_size <= 0 or self.leapfrog_steps < 1:
            raise ValueError("step_size > 0 and leapfrog_steps >= 1 required")
        if not 0 < self.target_acceptance < 1:
            raise ValueError("target_acceptance must be in (0,1)")
        if self.thin < 1 or self.chain_length < 1:
            raise ValueError("chain_length and thin must be positive")


def leapfrog(state: np.ndarray, momentum: np.ndarray, eps: float, L: int,
             grad_fn: Callable[[np.ndarray], np.ndarray],
             mass: Optional[np.ndarray] = None,
             ) -> Optional[tuple[np.ndarray, np.ndarray]]:
    """L leapfrog steps; returns None if the trajectory went nonfinite."""
    m = np.ones_like(state) if mass is None else mass
    z = state.astype(float).copy()
    r = momentum.astype(float).copy()
    try:
        r -= 0.5 * eps * grad_fn(z)
        for step in range(L):
            z += eps * r / m
            g = grad_fn(z) if step < L - 1 else None
            if g is not None:
                r -= eps * g
        r -= 0.5 * eps * grad_fn(z)
    except FloatingPointError:
        return None
    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(r))):
        return None
    return z, r


@dataclass
class HmcStepResult:
    state: np.ndarray
    accepted: bool
    accept_prob: float
    divergent: bool


def hmc_step(state: np.ndarray, u_fn: Callable, grad_fn: Callable,
             eps: float, L: int, mass: Optional[np.ndarray],
             rng: np.random.Generator) -> HmcStepResult:
    m = np.ones_like(state) if mass is None else mass
    r0 = rng.normal(size=state.size) * np.sqrt(m)
    u_draw = rng.random()
    try:
        h0 = u_fn(state) + 0.5 * np.sum(r0 * r0 / m)
    except FloatingPointError:
        return HmcStepResult(state, False, 0.0, True)
    moved = leapfrog(state, r0, eps, L, grad_fn, m)
    if moved is None:
        return HmcStepResult(state, False, 0.0, True)
    z1, r1 = moved
    try:
        h1 = u_fn(z1) + 0.5 * np.sum(r1 * r1 / m)
    except FloatingPointError:
        return HmcStepResult(state, False, 0.0, True)
    if not np.isfinite(h1) or not np.isfinite(h0):
        return HmcStepResult(state, False, 0.0, True)
    log_alpha = h0 - h1
    accept_prob = float(min(1.0, np.exp(min(log_alpha, 0.0))))
    if np.log(u_draw) < log_alpha:
        return HmcStepResult(z1, True, accept_prob, False)
    return HmcStepResult(state, False, accept_prob, False)


def split_chain_psr(draws: np.ndarray) -> np.ndarray:
    """Potential scale reduction from the two halves of a single chain."""
    n = draws.shape[0] // 2 * 2
    halves = draws[:n].reshape(2, n // 2, -1)
    within = halves.var(axis=1, ddof=1).mean(axis=0)
    between = (n // 2) * halves.mean(axis=1).var(axis=0, ddof=1)
    m = n // 2
    var_plus = (m - 1) / m * within + between / m
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.sqrt(var_plus / within)


# ---------------------------------------------------------------------------
# Chain output

@dataclass
class ModelDraws:
    names: list[str]
    draws: np.ndarray            # (n_draws, n_parameters)
    acceptance_rate: float
    mean_accept_prob: float
    step_size: float
    divergent: bool

    def column(self, name: str) -> np.ndarray:
        return self.draws[:, self.names.index(name)]


@dataclass
class DaSummary:
    sweeps: int = 0
    mean_mh_acceptance: float = float("nan")
    weight_tables_per_sweep: int = 0
    n_groups: int = 0
    infeasible_ids: list = field(default_factory=list)


@dataclass
class ChainOutput:
    fertility: ModelDraws
    hazard: ModelDraws
    da: DaSummary
    seed: int
    warmup: int
    chain_length: int
    thin: int
    leapfrog_steps: int
    max_psr: dict[str, float] = field(default_factory=dict)
    elapsed_seconds: float = 0.0

    def models(self) -> dict[str, ModelDraws]:
        return {"fertility": self.fertility, "hazard": self.hazard}

    def write_csv(self, path) -> None:
        """One row per retained draw per parameter, stable ordering."""
        import csv
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model", "draw", "parameter", "value"])
            for model_name, md in self.models().items():
                for i in range(md.draws.shape[0]):
                    for j, name in enumerate(md.names):
                        w.writerow([model_name, i, name,
                                    repr(float(md.draws[i, j]))])

    def summary(self) -> dict:
        out = {
            "seed": self.seed,
            "warmup": self.warmup,
            "chain_length": self.chain_length,
            "thin": self.thin,
            "leapfrog_steps": self.leapfrog_steps,
            "elapsed_seconds": round(self.elapsed_seconds, 3),
            "da": {
                "sweeps": self.da.sweeps,
                "mean_mh_acceptance": self.da.mean_mh_acceptance,
                "weight_tables_per_sweep": self.da.weight_tables_per_sweep,
                "n_groups": self.da.n_groups,
                "n_infeasible": len(self.da.infeasible_ids),
            },
            "models": {},
            "max_psr": self.max_psr,
        }
        for name, md in self.models().items():
            out["models"][name] = {
                "n_draws": int(md.draws.shape[0]),
                "n_parameters": len(md.names),
                "acceptance_rate": round(md.acceptance_rate, 4),
                "mean_accept_prob": round(md.mean_accept_prob, 4),
                "step_size": md.step_size,
                "divergent": md.divergent,
            }
        return out


# ---------------------------------------------------------------------------
# Schedules backed by a parameter state

class StateFertility:
    """FertilitySchedule view of a fertility-model state (full design)."""

    def __init__(self, spec: ModelSpec, state: ParameterState):
        self.spec = spec
        self.state = state

    def __call__(self, age, year, cov):
        return self.spec.probability(self.state, age, year, cov,
                                     prediction=False)


class StateHazard:
    """HazardSchedule view of a hazard-model state, including any HIV
    reporting factor so augmentation sees the effective trial probability."""

    def __init__(self, spec: ModelSpec, state: ParameterState,
                 hiv: Optional[HivFactors] = None):
        self.spec = spec
        self.state = state
        self.hiv = hiv

    def __call__(self, age, year, cov):
        p = self.spec.probability(self.state, age, year, cov,
                                  prediction=False)
        if self.hiv is None:
            return p
        years = np.atleast_1d(np.asarray(year))
        factors = self.hiv.vector(cov.survey_id, years.ravel()).reshape(
            years.shape)
        return p * factors


# ---------------------------------------------------------------------------
# Cell assembly for the Gibbs loop

class _SbhClassCells:
    """Layouts for one SBH covariate class, refilled from sweep counts."""

    def __init__(self, spec_f: ModelSpec, spec_h: ModelSpec,
                 cov: CovariateProfile, survey_year: int, year_start: int,
                 settings: TabulationSettings, hiv: Optional[HivFactors]):
        self.cov = cov
        self.survey_year = survey_year
        self.year_start = year_start
        self.n_years = survey_year - year_start + 1
        self.layout_f = CellLayout(spec_f, cov, survey_year, year_start,
                                   self.n_years, settings, hiv)
        self.layout_h = CellLayout(spec_h, cov, survey_year, year_start,
                                   self.n_years, settings, hiv)
        self.exposure_f = np.zeros(self.layout_f.shape, dtype=np.int64)
        self.settings = settings

    def add_woman_exposure(self, woman: SummaryBirthHistory) -> None:
        ages, years = woman_candidate_grid(woman.mother_age_at_survey,
                                           woman.survey_year, self.settings)
        cfg = self.settings.ages
        self.exposure_f[ages - cfg.min_fertile_age,
                        years - self.year_start] += 1

    def fill_from_counts(self, births, survivors, deaths):
        n_a, n_t = self.layout_f.shape
        b_grid = np.zeros((n_a, n_t))
        rows = min(n_a, births.shape[0])
        b_grid[:rows] = births[:rows, :n_t]
        y_f, n_f = self.layout_f.fill(b_grid, self.exposure_f)
        grids = ClassGrids(self.cov, self.survey_year, self.year_start,
                           b_grid, self.exposure_f,
                           survivors[:n_t], deaths[:n_t, :n_t])
        exposure, events, folded_n, folded_y = child_trial_grids(grids)
        e_grid = np.zeros(self.layout_h.shape)
        v_grid = np.zeros(self.layout_h.shape)
        r = min(self.layout_h.shape[0], exposure.shape[0])
        e_grid[:r] = exposure[:r, :self.layout_h.shape[1]]
        v_grid[:r] = events[:r, :self.layout_h.shape[1]]
        y_h, n_h = self.layout_h.fill(v_grid, e_grid, folded_n, folded_y)
        return (y_f, n_f), (y_h, n_h)


class _ModelCells:
    """Fixed design with a static (FBH) block and a refillable SBH block."""

    def __init__(self, spec: ModelSpec, static_parts, sbh_parts):
        xs = [p[0] for p in static_parts] + [p[0] for p in sbh_parts]
        ks = [p[1] for p in static_parts] + [p[1] for p in sbh_parts]
        if xs:
            X = np.vstack(xs)
            k = np.concatenate(ks)
        else:
            X = np.zeros((0, spec.n_beta + spec.n_phi))
            k = np.zeros(0)
        self.table = CellTable(X, np.zeros(X.shape[0]), np.zeros(X.shape[0]),
                               k, spec.n_beta)
        self.static_y = np.concatenate(
            [p[2] for p in static_parts]) if static_parts else np.zeros(0)
        self.static_n = np.concatenate(
            [p[3] for p in static_parts]) if static_parts else np.zeros(0)
        self.n_static = self.static_y.size
        self.table.y[:self.n_static] = self.static_y
        self.table.N[:self.n_static] = self.static_n
        self.sbh_slices = []
        offset = self.n_static
        for p in sbh_parts:
            size = p[0].shape[0]
            self.sbh_slices.append(slice(offset, offset + size))
            offset += size

    def refill(self, sbh_fills: Sequence[tuple[np.ndarray, np.ndarray]]):
        for sl, (y, n) in zip(self.sbh_slices, sbh_fills):
            self.table.y[sl] = y
            self.table.N[sl] = n


def _empirical_init(spec: ModelSpec, cells: CellTable) -> ParameterState:
    """Ridge-regularized weighted least squares on cell-level logits."""
    rate = (cells.y + 0.5) / (cells.N + 1.0)
    z = logit(np.clip(rate, 1e-4, 1 - 1e-4))
    w = np.maximum(cells.N, 0.0) + 1e-3
    xtw = cells.X.T * w
    a = xtw @ cells.X + 0.1 * np.eye(cells.X.shape[1])
    theta = np.linalg.solve(a, xtw @ z)
    beta = theta[:spec.n_beta]
    phi = theta[spec.n_beta:]
    eta = 2.0 if spec.has_eta else None
    return ParameterState(beta, phi, eta)


# ---------------------------------------------------------------------------
# The Gibbs loop

class _ModelSampler:
    """HMC state, adaptation bookkeeping, and draw storage for one model."""

    def __init__(self, spec: ModelSpec, cells: _ModelCells, cfg: HmcConfig,
                 rng: np.random.Generator):
        self.spec = spec
        self.cells = cells
        self.cfg = cfg
        self.rng = rng
        state = _empirical_init(spec, cells.table)
        self.z = spec.state_to_vector(state)
        self.log_eps = np.log(cfg.step_size)
        self.mass = (cfg.mass.copy() if cfg.mass is not None
                     else np.ones(self.z.size))
        self.accept_probs: list[float] = []
        self.accepted = 0
        self.steps = 0
        self.post_accepted = 0
        self.post_steps = 0
        self.post_probs: list[float] = []
        self.consecutive_nonfinite = 0
        self.divergent = False
        self.draws: list[np.ndarray] = []

    def state(self) -> ParameterState:
        return self.spec.state_from_vector(self.z)

    def _u(self, vec: np.ndarray) -> float:
        return neg_log_posterior(self.spec.state_from_vector(vec),
                                 self.cells.table, self.spec)

    def _grad(self, vec: np.ndarray) -> np.ndarray:
        d_beta, d_phi, d_eta = gradient(self.spec.state_from_vector(vec),
                                        self.cells.table, self.spec)
        parts = [d_beta, d_phi]
        if d_eta is not None:
            parts.append(np.array([d_eta]))
        return np.concatenate(parts)

    def step(self, iteration: int, warmup: int) -> None:
        eps = float(np.exp(self.log_eps))
        res = hmc_step(self.z, self._u, self._grad, eps,
                       self.cfg.leapfrog_steps, self.mass, self.rng)
        self.z = res.state
        self.steps += 1
        self.accepted += res.accepted
        self.accept_probs.append(res.accept_prob)
        if res.divergent:
            self.consecutive_nonfinite += 1
            if self.consecutive_nonfinite >= 2:
                self.divergent = True
        else:
            self.consecutive_nonfinite = 0
        if iteration < warmup:
            gamma = 0.25 / (iteration + 10.0) ** 0.6
            self.log_eps += gamma * (res.accept_prob
                                     - self.cfg.target_acceptance)
            if self.cfg.adapt_mass and warmup >= 8 and iteration in (
                    warmup // 4, warmup // 2, 3 * warmup // 4):
                self.mass = curvature_diag(self.state(), self.cells.table,
                                           self.spec)
        else:
            self.post_steps += 1
            self.post_accepted += res.accepted
            self.post_probs.append(res.accept_prob)

    def record(self) -> None:
        self.draws.append(self.z.copy())

    def output(self) -> ModelDraws:
        draws = (np.vstack(self.draws) if self.draws
                 else np.zeros((0, self.z.size)))
        rate = self.post_accepted / self.post_steps if self.post_steps else float("nan")
        mean_prob = float(np.mean(self.post_probs)) if self.post_probs else float("nan")
        return ModelDraws(self.spec.parameter_names(), draws, rate,
                          mean_prob, float(np.exp(self.log_eps)),
                          self.divergent)


def run_mcmc(fbh: Sequence[FullBirthHistory],
             sbh: Sequence[SummaryBirthHistory],
             fertility_spec: ModelSpec, hazard_spec: ModelSpec,
             cfg: HmcConfig = HmcConfig(),
             da_settings: DaSettings = DaSettings(),
             hiv: Optional[HivFactors] = None) -> ChainOutput:
    """Alternate augmentation sweeps with HMC parameter updates.

    With an empty SBH list the augmentation step disappears and the run is
    a plain HMC fit to the FBH cells, on the same random streams.
    """
    t0 = time.perf_counter()
    tab = TabulationSettings(
        ages=da_settings.ages,
        allow_survey_year_births=da_settings.allow_survey_year_births,
        survey_year_fertility_factor=da_settings.survey_year_fertility_factor,
        survey_year_hazard_factor=da_settings.survey_year_hazard_factor)

    # Static FBH cells.
    static_f, static_h = [], []
    for grids in grids_from_records(fbh, tab) if fbh else []:
        layout_f = CellLayout(fertility_spec, grids.cov, grids.survey_year,
                              grids.year_start, grids.births.shape[1], tab,
                              hiv)
        y_f, n_f = layout_f.fill(grids.births, grids.exposure_f)
        static_f.append((layout_f.X, layout_f.k, y_f, n_f))
        layout_h = CellLayout(hazard_spec, grids.cov, grids.survey_year,
                              grids.year_start, grids.births.shape[1], tab,
                              hiv)
        exposure, events, folded_n, folded_y = child_trial_grids(grids)
        y_h, n_h = layout_h.fill(events, exposure, folded_n, folded_y)
        static_h.append((layout_h.X, layout_h.k, y_h, n_h))

    # SBH machinery: engine plus per-class refillable layouts.
    engine = DaEngine(sbh, da_settings) if sbh else None
    sbh_classes: list[_SbhClassCells] = []
    if engine is not None and engine.groups:
        for cov, survey_year in engine.class_list:
            cls = _SbhClassCells(fertility_spec, hazard_spec, cov,
                                 survey_year, engine.year_start, tab, hiv)
            sbh_classes.append(cls)
        class_index = {(cov, sy): i
                       for i, (cov, sy) in enumerate(engine.class_list)}
        feasible = set()
        for g in engine.groups:
            feasible.update(int(r) for r in g.rows)
        for i, woman in enumerate(engine.dataset):
            if i in feasible:
                sbh_classes[class_index[(woman.covariates,
                                         woman.survey_year)]].add_woman_exposure(woman)

    cells_f = _ModelCells(fertility_spec, static_f,
                          [(c.layout_f.X, c.layout_f.k) for c in sbh_classes])
    cells_h = _ModelCells(hazard_spec, static_h,
                          [(c.layout_h.X, c.layout_h.k) for c in sbh_classes])

    root = np.random.SeedSequence(cfg.seed)
    da_root, ss_f, ss_h = root.spawn(3)
    rng_f = np.random.default_rng(ss_f)
    rng_h = np.random.default_rng(ss_h)
    total = cfg.warmup_iterations + cfg.chain_length
    da_seeds = da_root.spawn(total) if engine is not None else None

    # Initialize the SBH block from a first sweep at the empirical fit.
    sampler_f = _ModelSampler(fertility_spec, cells_f, cfg, rng_f)
    sampler_h = _ModelSampler(hazard_spec, cells_h, cfg, rng_h)

    da_sweeps = 0
    mh_acc: list[float] = []
    tables_per_sweep = 0

    def do_sweep(seed_seq) -> None:
        nonlocal da_sweeps, tables_per_sweep
        f_sched = StateFertility(fertility_spec, sampler_f.state())
        q_sched = StateHazard(hazard_spec, sampler_h.state(), hiv)
        result = engine.sweep(f_sched, q_sched, seed_seq,
                              collect_records=False)
        counts = result.counts
        fills_f, fills_h = [], []
        for ci, cls in enumerate(sbh_classes):
            (y_f, n_f), (y_h, n_h) = cls.fill_from_counts(
                counts.births[ci], counts.survivors[ci], counts.deaths[ci])
            fills_f.append((y_f, n_f))
            fills_h.append((y_h, n_h))
        cells_f.refill(fills_f)
        cells_h.refill(fills_h)
        da_sweeps += 1
        if np.isfinite(result.stats.mh_acceptance_rate):
            mh_acc.append(result.stats.mh_acceptance_rate)
        tables_per_sweep = result.stats.weight_tables_built

    if engine is not None and engine.groups:
        do_sweep(da_root.spawn(1)[0])
        # Empirical init improves once imputed counts exist.
        sampler_f.z = fertility_spec.state_to_vector(
            _empirical_init(fertility_spec, cells_f.table))
        sampler_h.z = hazard_spec.state_to_vector(
            _empirical_init(hazard_spec, cells_h.table))

    for it in range(total):
        if engine is not None and engine.groups:
            do_sweep(da_seeds[it])
        sampler_f.step(it, cfg.warmup_iterations)
        sampler_h.step(it, cfg.warmup_iterations)
        post = it - cfg.warmup_iterations
        if post >= 0 and (post + 1) % cfg.thin == 0:
            sampler_f.record()
            sampler_h.record()

    out_f = sampler_f.output()
    out_h = sampler_h.output()
    psr = {}
    for name, md in (("fertility", out_f), ("hazard", out_h)):
        if md.draws.shape[0] >= 4:
            psr[name] = float(np.nanmax(split_chain_psr(md.draws)))
    da_summary = DaSummary(
        sweeps=da_sweeps,
        mean_mh_acceptance=float(np.mean(mh_acc)) if mh_acc else float("nan"),
        weight_tables_per_sweep=tables_per_sweep,
        n_groups=len(engine.groups) if engine is not None else 0,
        infeasible_ids=list(engine.infeasible) if engine is not None else [])
    return ChainOutput(out_f, out_h, da_summary, cfg.seed,
                       cfg.warmup_iterations, cfg.chain_length, cfg.thin,
                       cfg.leapfrog_steps, psr,
                       time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# Posterior summaries over draws

def q5_posterior_draws(spec: ModelSpec, md: ModelDraws, years,
                       cov: Optional[CovariateProfile] = None) -> np.ndarray:
    """Per-draw q(5) series, shape (n_draws, n_years)."""
    years = np.atleast_1d(np.asarray(years))
    out = np.empty((md.draws.shape[0], years.size))
    for i in range(md.draws.shape[0]):
        state = spec.state_from_vector(md.draws[i])
        out[i] = q5_from_state(spec, state, years, cov)
    return out


def fertility_posterior_draws(spec: ModelSpec, md: ModelDraws, ages, years,
                              cov: Optional[CovariateProfile] = None
                              ) -> np.ndarray:
    """Per-draw fertility probabilities at (age, year) pairs."""
    ages = np.atleast_1d(np.asarray(ages))
    years = np.atleast_1d(np.asarray(years))
    out = np.empty((md.draws.shape[0], ages.size))
    for i in range(md.draws.shape[0]):
        state = spec.state_from_vector(md.draws[i])
        out[i] = spec.probability(state, ages, years, cov, prediction=True)
    return out
