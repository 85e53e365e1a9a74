"""Binomial-cell posteriors for the fertility and hazard models.

Both models are Bernoulli regressions on a yearly grid, aggregated into
binomial cells: fertility trials are woman-years at risk of a birth, hazard
trials are child-age-years at risk of a death. A cell records (y, N, design
row, k) where k is a known thinning multiplier: Y ~ Binomial(N, k p) with
logit(p) = x'theta. k carries the survey-year calendar corrections (0.5 for
fertility, 0.65 for a survey-year birth's folded age-0 trial) times any HIV
reporting factor; k = 1 everywhere in simulation mode.

The negative log posterior and its analytic gradient follow the closed forms
used by the HMC updates: binomial likelihood with the thinning term, a
N(0, sigma_beta^2) prior on fixed effects, an intrinsic RW2 prior on each
random-walk block with a shared log-precision eta, and a PC prior on the
precision kappa = exp(eta). The RW2 precision is scaled so the generalized
variance (geometric mean of the intrinsic marginal variances) is 1, which
makes the PC-prior calibration P(sigma > u) = alpha portable across block
sizes.

Design rows are sums of one-hot indicator terms, so a ModelSpec is a list of
integer index functions plus an optional random-walk index; everything else
(cell aggregation, vectorized grid evaluation, prediction masking) is
generic. Index functions must broadcast over numpy arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit

from .calendars import (
    DEFAULT_SURVEY_YEAR_HAZARD_FACTOR,
    SURVEY_YEAR_FERTILITY_FACTOR,
)
from .core import AgeGridConfig, CovariateProfile, FullBirthHistory

SIGMA_BETA_SQ_DEFAULT = 100.0


# ---------------------------------------------------------------------------
# Priors

def pc_lambda(alpha: float = 0.01, u: float = 0.5,
              literal_display: bool = False) -> float:
    """Rate of the PC prior on kappa.

    The calibration P(sigma > u) = alpha gives lambda = -log(alpha)/u. The
    source display divides by 2 instead of u; ``literal_display=True``
    reproduces that variant (they coincide only when u = 2).
    """
    if literal_display:
        return -math.log(alpha) / 2.0
    return -math.log(alpha) / u


@dataclass(frozen=True)
class PriorSettings:
    sigma_beta_sq: float = SIGMA_BETA_SQ_DEFAULT
    pc_alpha: float = 0.01
    pc_u: float = 0.5
    pc_literal_display_lambda: bool = False

    @property
    def pc_rate(self) -> float:
        return pc_lambda(self.pc_alpha, self.pc_u,
                         self.pc_literal_display_lambda)


def pc_prior_logdensity(kappa, alpha: float = 0.01, u: float = 0.5,
                        literal_display: bool = False) -> np.ndarray:
    """log pi(kappa) = log{(lambda/2) kappa^(-3/2) exp(-lambda kappa^(-1/2))}.

    This is the type-2 Gumbel density induced on the precision by an
    exponential(lambda) prior on sigma = kappa^(-1/2).
    """
    kappa = np.asarray(kappa, dtype=float)
    if np.any(kappa <= 0):
        raise ValueError("kappa must be positive")
    lam = pc_lambda(alpha, u, literal_display)
    return (np.log(lam / 2.0) - 1.5 * np.log(kappa)
            - lam / np.sqrt(kappa))


# ---------------------------------------------------------------------------
# Scaled RW2 precision

@dataclass(frozen=True)
class ScaledRW2Precision:
    matrix: np.ndarray
    rank: int


def build_rw2_precision(n: int) -> ScaledRW2Precision:
    """Second-difference precision scaled to unit generalized variance.

    The geometric mean of the marginal variances (diagonal of the
    pseudo-inverse) equals 1 after scaling, per the Sorbye-Rue convention,
    so kappa is comparable across block sizes. Null space: constants and
    the linear trend; rank n - 2.
    """
    if n < 3:
        raise ValueError("RW2 needs at least 3 points")
    d2 = np.zeros((n - 2, n))
    for i in range(n - 2):
        d2[i, i:i + 3] = (1.0, -2.0, 1.0)
    raw = d2.T @ d2
    w, v = np.linalg.eigh(raw)
    nonzero = w > 1e-10 * w.max()
    marg = (v[:, nonzero] ** 2 / w[nonzero]).sum(axis=1)
    gv = np.exp(np.mean(np.log(marg)))
    return ScaledRW2Precision(raw * gv, n - 2)


def block_rw2_precision(n_groups: int, n_points: int) -> ScaledRW2Precision:
    """Independent copies of the scaled RW2, one per group, in one matrix."""
    base = build_rw2_precision(n_points)
    return ScaledRW2Precision(np.kron(np.eye(n_groups), base.matrix),
                              n_groups * base.rank)


# ---------------------------------------------------------------------------
# Parameters and model specification

@dataclass(frozen=True)
class ParameterState:
    beta: np.ndarray
    phi: np.ndarray
    eta_kappa: Optional[float]

    def theta(self) -> np.ndarray:
        return np.concatenate([self.beta, self.phi])


@dataclass
class Term:
    """A one-hot fixed-effect block: index_fn maps (ages, years, cov) to a
    column index within the block, or -1 where the term does not apply."""

    name: str
    labels: list[str]
    index_fn: Callable[[np.ndarray, np.ndarray, CovariateProfile], np.ndarray]
    predict: bool = True
    offset: int = 0


@dataclass
class ModelSpec:
    response: str
    beta_terms: list[Term]
    phi_labels: list[str]
    phi_index_fn: Optional[Callable] = None
    K: Optional[ScaledRW2Precision] = None
    priors: PriorSettings = field(default_factory=PriorSettings)
    name: str = ""

    def __post_init__(self):
        offset = 0
        for term in self.beta_terms:
            term.offset = offset
            offset += len(term.labels)
        self.n_beta = offset
        self.n_phi = len(self.phi_labels)
        if (self.n_phi > 0) != (self.K is not None):
            raise ValueError("phi labels and K must come together")
        if self.K is not None and self.K.matrix.shape[0] != self.n_phi:
            raise ValueError("K size does not match phi")

    # -- naming and masks --------------------------------------------------

    @property
    def beta_names(self) -> list[str]:
        return [f"{t.name}[{lab}]" for t in self.beta_terms for lab in t.labels]

    @property
    def phi_names(self) -> list[str]:
        return [f"phi[{lab}]" for lab in self.phi_labels]

    @property
    def has_eta(self) -> bool:
        return self.K is not None

    def prediction_mask(self) -> np.ndarray:
        """True for beta columns used in the prediction-time predictor."""
        mask = np.zeros(self.n_beta, dtype=bool)
        for t in self.beta_terms:
            mask[t.offset:t.offset + len(t.labels)] = t.predict
        return mask

    # -- vector packing for HMC ---------------------------------------------

    @property
    def n_parameters(self) -> int:
        return self.n_beta + self.n_phi + (1 if self.has_eta else 0)

    def state_to_vector(self, state: ParameterState) -> np.ndarray:
        parts = [state.beta, state.phi]
        if self.has_eta:
            parts.append(np.array([state.eta_kappa]))
        return np.concatenate(parts)

    def state_from_vector(self, vec: np.ndarray) -> ParameterState:
        beta = vec[:self.n_beta]
        phi = vec[self.n_beta:self.n_beta + self.n_phi]
        eta = float(vec[-1]) if self.has_eta else None
        return ParameterState(beta, phi, eta)

    def parameter_names(self) -> list[str]:
        names = self.beta_names + self.phi_names
        if self.has_eta:
            names.append("eta_kappa")
        return names

    # -- evaluation ----------------------------------------------------------

    def term_indices(self, ages, years,
                     cov: Optional[CovariateProfile]) -> list[np.ndarray]:
        ages = np.asarray(ages)
        years = np.asarray(years)
        out = []
        for t in self.beta_terms:
            idx = np.broadcast_to(np.asarray(t.index_fn(ages, years, cov)),
                                  np.broadcast_shapes(ages.shape, years.shape))
            out.append(idx.astype(np.int64))
        if self.phi_index_fn is not None:
            idx = np.broadcast_to(np.asarray(self.phi_index_fn(ages, years, cov)),
                                  np.broadcast_shapes(ages.shape, years.shape))
            out.append(idx.astype(np.int64))
        return out

    def linear_predictor(self, state: ParameterState, ages, years,
                         cov: Optional[CovariateProfile] = None,
                         prediction: bool = False) -> np.ndarray:
        """Sum of indicator terms; prediction=True drops bias terms."""
        ages = np.asarray(ages)
        years = np.asarray(years)
        lp = np.zeros(np.broadcast_shapes(ages.shape, years.shape))
        for t in self.beta_terms:
            if prediction and not t.predict:
                continue
            idx = np.asarray(t.index_fn(ages, years, cov))
            take = state.beta[t.offset + np.clip(idx, 0, None)]
            lp = lp + np.where(idx >= 0, take, 0.0)
        if self.phi_index_fn is not None:
            idx = np.asarray(self.phi_index_fn(ages, years, cov))
            lp = lp + np.where(idx >= 0, state.phi[np.clip(idx, 0, None)], 0.0)
        return lp

    def probability(self, state: ParameterState, ages, years,
                    cov: Optional[CovariateProfile] = None,
                    prediction: bool = True) -> np.ndarray:
        return expit(self.linear_predictor(state, ages, years, cov,
                                           prediction=prediction))


# ---------------------------------------------------------------------------
# Named specs

FERTILITY_BAND_EDGES = np.array([20, 25, 30, 35])
FERTILITY_BAND_LABELS = ["15-19", "20-24", "25-29", "30-34", "35-49"]
HAZARD_BAND_LABELS = ["0", "1-4", "5+"]


def _fertility_band(ages):
    return np.searchsorted(FERTILITY_BAND_EDGES, np.asarray(ages), side="right")


def _hazard_band(ages):
    a = np.asarray(ages)
    return np.where(a == 0, 0, np.where(a <= 4, 1, 2))


def simulation_fertility_spec(priors: Optional[PriorSettings] = None) -> ModelSpec:
    """Fertility as one rate per five 5-year mother-age bands, no smoothing."""
    return ModelSpec(
        response="fertility",
        beta_terms=[Term("band", list(FERTILITY_BAND_LABELS),
                         lambda m, t, cov: _fertility_band(m))],
        phi_labels=[],
        priors=priors or PriorSettings(),
        name="simulation-fertility",
    )


def simulation_hazard_spec(period_start: int = 1975, n_periods: int = 7,
                           period_width: int = 5,
                           priors: Optional[PriorSettings] = None) -> ModelSpec:
    """Hazard as an RW2 over calendar periods per age band (0, 1-4, 5+).

    The band levels ride on the free RW2 intercepts, so there are no fixed
    effects at all; everything is identified by the data.
    """
    def phi_index(a, t, cov):
        band = _hazard_band(a)
        period = np.clip((np.asarray(t) - period_start) // period_width,
                         0, n_periods - 1)
        return band * n_periods + period

    labels = [f"{b}:{period_start + p * period_width}-"
              f"{period_start + p * period_width + period_width - 1}"
              for b in HAZARD_BAND_LABELS for p in range(n_periods)]
    return ModelSpec(
        response="hazard",
        beta_terms=[],
        phi_labels=labels,
        phi_index_fn=phi_index,
        K=block_rw2_precision(len(HAZARD_BAND_LABELS), n_periods),
        priors=priors or PriorSettings(),
        name="simulation-hazard",
    )


MALAWI_PERIOD_LABELS = ["1964-69"] + [f"{y}-{(y + 4) % 100:02d}"
                                      for y in range(1970, 2020, 5)]


def _malawi_period(years):
    t = np.asarray(years)
    return np.clip(np.where(t <= 1969, 0, 1 + (t - 1970) // 5), 0,
                   len(MALAWI_PERIOD_LABELS) - 1)


def malawi_fertility_spec(priors: Optional[PriorSettings] = None) -> ModelSpec:
    """Fertility over mother ages 9-48: RW2 over 11 periods per age band,
    plus single-age offsets (9-11 pooled; one reference age dropped per band
    since the band's RW2 already carries a free level)."""
    band_edges = np.array([15, 20, 25, 30, 35])  # bands 9-14,...,35-48
    band_labels = ["9-14", "15-19", "20-24", "25-29", "30-34", "35-48"]
    n_periods = len(MALAWI_PERIOD_LABELS)

    # Single-age levels: "9-11" pooled, then 12..48; references are the
    # first level inside each band.
    age_levels = ["9-11"] + [str(a) for a in range(12, 49)]
    references = {"9-11", "15", "20", "25", "30", "35"}
    kept = [lab for lab in age_levels if lab not in references]
    kept_index = {lab: i for i, lab in enumerate(kept)}

    def age_level(ages):
        a = np.asarray(ages)
        labels = np.where(a <= 11, "9-11", a.astype(str))
        flat = np.asarray(labels, dtype=object).ravel()
        idx = np.array([kept_index.get(lab, -1) for lab in flat])
        return idx.reshape(np.asarray(labels).shape)

    def phi_index(m, t, cov):
        band = np.searchsorted(band_edges, np.asarray(m), side="right")
        return band * n_periods + _malawi_period(t)

    labels = [f"{b}:{p}" for b in band_labels for p in MALAWI_PERIOD_LABELS]
    return ModelSpec(
        response="fertility",
        beta_terms=[Term("age", kept, lambda m, t, cov: age_level(m))],
        phi_labels=labels,
        phi_index_fn=phi_index,
        K=block_rw2_precision(len(band_labels), n_periods),
        priors=priors or PriorSettings(),
        name="malawi-fertility",
    )


def malawi_hazard_spec(districts: Sequence[str], year_start: int = 1964,
                       year_end: int = 2019,
                       priors: Optional[PriorSettings] = None) -> ModelSpec:
    """Hazard over single years per age band, with single-age offsets for
    ages 2-4 (ages 0, 1, and 5+ are band references), district and strata
    fixed effects, and SBH reporting-bias indicators per strata that are
    excluded from prediction."""
    districts = sorted(str(d) for d in districts)
    if not districts:
        raise ValueError("need at least one district")
    d_index = {d: i - 1 for i, d in enumerate(districts)}  # first = reference
    n_years = year_end - year_start + 1

    def age_c(a, t, cov):
        a = np.asarray(a)
        return np.where((a >= 2) & (a <= 4), a - 2, -1)

    def district_idx(a, t, cov):
        if str(cov.district) not in d_index:
            raise KeyError(f"unknown district {cov.district!r}")
        return np.full(np.shape(a), d_index[str(cov.district)], dtype=np.int64)

    def strata_idx(a, t, cov):
        return np.full(np.shape(a), 0 if cov.strata == "rural" else -1,
                       dtype=np.int64)

    def sbh_idx(a, t, cov):
        if not cov.is_sbh:
            return np.full(np.shape(a), -1, dtype=np.int64)
        return np.full(np.shape(a), 0 if cov.strata == "rural" else 1,
                       dtype=np.int64)

    def phi_index(a, t, cov):
        band = _hazard_band(a)
        yr = np.clip(np.asarray(t) - year_start, 0, n_years - 1)
        return band * n_years + yr

    labels = [f"{b}:{year_start + i}" for b in HAZARD_BAND_LABELS
              for i in range(n_years)]
    return ModelSpec(
        response="hazard",
        beta_terms=[
            Term("age", ["2", "3", "4"], age_c),
            Term("district", districts[1:], district_idx),
            Term("strata", ["rural"], strata_idx),
            Term("sbh_bias", ["rural", "urban"], sbh_idx, predict=False),
        ],
        phi_labels=labels,
        phi_index_fn=phi_index,
        K=block_rw2_precision(len(HAZARD_BAND_LABELS), n_years),
        priors=priors or PriorSettings(),
        name="malawi-hazard",
    )


# ---------------------------------------------------------------------------
# Binomial cells

@dataclass(frozen=True)
class BinomialCell:
    y: float
    N: float
    row: np.ndarray
    k: float


@dataclass
class CellTable:
    X: np.ndarray          # (n_cells, n_beta + n_phi)
    y: np.ndarray
    N: np.ndarray
    k: np.ndarray
    n_beta: int

    def __len__(self) -> int:
        return self.X.shape[0]

    def cell(self, i: int) -> BinomialCell:
        return BinomialCell(float(self.y[i]), float(self.N[i]),
                            self.X[i].copy(), float(self.k[i]))


# ---------------------------------------------------------------------------
# Negative log posterior and gradient

def _linear_terms(state: ParameterState, cells: CellTable):
    # Divergent HMC proposals reach here with inf/nan coordinates; the
    # explicit check below turns them into rejections, so the matmul's own
    # warning is redundant noise.
    with np.errstate(invalid="ignore", over="ignore"):
        x = cells.X @ state.theta()
    if not np.all(np.isfinite(x)):
        bad = int(np.flatnonzero(~np.isfinite(x))[0])
        raise FloatingPointError(f"nonfinite linear predictor at cell {bad}")
    return x


def neg_log_posterior(state: ParameterState, cells: CellTable,
                      spec: ModelSpec) -> float:
    """U = -y'x + N'log(1+e^x) - (N-y)'log{1+(1-k)e^x}
        + b'b/(2 s^2) + e^eta phi'K phi / 2 - (rank/2) eta + eta/2
        + lambda e^(-eta/2),   x = X theta."""
    x = _linear_terms(state, cells)
    u = -(cells.y @ x) + cells.N @ np.logaddexp(0.0, x)
    c = 1.0 - cells.k
    pos = c > 0
    if pos.any():
        u -= (cells.N - cells.y)[pos] @ np.logaddexp(
            0.0, np.log(c[pos]) + x[pos])
    neg = c < 0
    if neg.any():
        # k > 1: 1 + (1-k)e^x = (1 - k p)/(1 - p) must stay positive, i.e.
        # the scaled event probability k p below one. States outside that
        # region are rejected as divergences.
        with np.errstate(over="raise"):
            arg = 1.0 + c[neg] * np.exp(x[neg])
        if np.any(arg <= 0):
            raise FloatingPointError("event probability k p reached one")
        u -= (cells.N - cells.y)[neg] @ np.log(arg)
    u += state.beta @ state.beta / (2.0 * spec.priors.sigma_beta_sq)
    if spec.has_eta:
        K, rank = spec.K.matrix, spec.K.rank
        eta = state.eta_kappa
        quad = state.phi @ K @ state.phi
        with np.errstate(over="ignore"):
            u += (np.exp(eta) * quad / 2.0 - 0.5 * rank * eta + 0.5 * eta
                  + spec.priors.pc_rate * np.exp(-eta / 2.0))
    return float(u)


def gradient(state: ParameterState, cells: CellTable,
             spec: ModelSpec) -> tuple[np.ndarray, np.ndarray, Optional[float]]:
    """(dU/dbeta, dU/dphi, dU/deta), matching neg_log_posterior exactly."""
    x = _linear_terms(state, cells)
    g = expit(x)
    c = 1.0 - cells.k
    with np.errstate(divide="ignore"):
        gk = np.where(c > 0, expit(np.log(np.where(c > 0, c, 1.0)) + x), 0.0)
    neg = c < 0
    if neg.any():
        # d/dx of log(1 + c e^x) for c < 0; the target already rejects
        # states where the argument is nonpositive.
        with np.errstate(over="raise"):
            t = c[neg] * np.exp(x[neg])
        arg = 1.0 + t
        if np.any(arg <= 0):
            raise FloatingPointError("event probability k p reached one")
        gk[neg] = t / arg
    resid = -cells.y + cells.N * g - (cells.N - cells.y) * gk
    d_theta = cells.X.T @ resid
    d_beta = d_theta[:cells.n_beta] + state.beta / spec.priors.sigma_beta_sq
    d_phi = d_theta[cells.n_beta:]
    d_eta = None
    if spec.has_eta:
        K, rank = spec.K.matrix, spec.K.rank
        eta = state.eta_kappa
        kphi = K @ state.phi
        with np.errstate(over="ignore"):
            d_phi = d_phi + np.exp(eta) * kphi
            d_eta = float(np.exp(eta) * (state.phi @ kphi) / 2.0
                          - 0.5 * rank + 0.5
                          - spec.priors.pc_rate * np.exp(-eta / 2.0) / 2.0)
    return d_beta, d_phi, d_eta


def curvature_diag(state: ParameterState, cells: CellTable,
                   spec: ModelSpec, floor: float = 1e-3) -> np.ndarray:
    """Approximate diagonal Hessian of U, used as an HMC mass heuristic.

    Uses the k = 1 binomial curvature N g(1-g) for the likelihood part; the
    k < 1 correction is ignored, which only perturbs the metric, not the
    target.
    """
    x = _linear_terms(state, cells)
    g = expit(x)
    w = cells.N * g * (1.0 - g)
    diag_theta = (cells.X ** 2).T @ w
    d_beta = diag_theta[:cells.n_beta] + 1.0 / spec.priors.sigma_beta_sq
    d_phi = diag_theta[cells.n_beta:]
    parts = [d_beta, d_phi]
    if spec.has_eta:
        eta = state.eta_kappa
        with np.errstate(over="ignore"):
            d_phi = d_phi + np.exp(eta) * np.diag(spec.K.matrix)
            quad = state.phi @ spec.K.matrix @ state.phi
            d_eta = float(np.exp(eta) * quad / 2.0
                          + spec.priors.pc_rate * np.exp(-eta / 2.0) / 4.0)
        parts = [d_beta, d_phi, np.array([d_eta])]
    return np.maximum(np.concatenate(parts), floor)


# ---------------------------------------------------------------------------
# Event grids: from records or augmentation counts to (age x year) arrays

@dataclass
class HivFactors:
    """Hazard reporting factors by (survey_id, year); missing entries are 1."""

    table: dict[tuple[str, int], float] = field(default_factory=dict)

    def factor(self, survey_id, year: int) -> float:
        return self.table.get((str(survey_id), int(year)), 1.0)

    def vector(self, survey_id, years: np.ndarray) -> np.ndarray:
        return np.array([self.factor(survey_id, int(t)) for t in years])


@dataclass(frozen=True)
class TabulationSettings:
    ages: AgeGridConfig = field(default_factory=AgeGridConfig)
    allow_survey_year_births: bool = False
    survey_year_fertility_factor: float = SURVEY_YEAR_FERTILITY_FACTOR
    survey_year_hazard_factor: float = DEFAULT_SURVEY_YEAR_HAZARD_FACTOR


@dataclass
class ClassGrids:
    """Raw event counts for one covariate class on the shared year grid."""

    cov: CovariateProfile
    survey_year: int
    year_start: int
    births: np.ndarray        # (n_mother_ages, n_years)
    exposure_f: np.ndarray    # woman-years at risk, same shape
    survivors: np.ndarray     # children alive at survey, by birth year
    deaths: np.ndarray        # (birth year, death year) counts


def woman_candidate_grid(age_at_survey: int, survey_year: int,
                         settings: TabulationSettings):
    cfg = settings.ages
    top = age_at_survey if settings.allow_survey_year_births else age_at_survey - 1
    top = min(top, cfg.max_fertile_age)
    ages = np.arange(cfg.min_fertile_age, top + 1)
    years = survey_year - (age_at_survey - ages)
    return ages, years


def grids_from_records(records: Sequence[FullBirthHistory],
                       settings: TabulationSettings = TabulationSettings(),
                       ) -> list[ClassGrids]:
    """Count births, survivors, and (birth, death) pairs per covariate class.

    A record's exposure enters even if it has no children. Deaths recorded
    in the birth year are only valid for survey-year births (the folded
    partial-interval case); earlier same-interval deaths must arrive as
    death_year = birth_year + 1.
    """
    classes: dict[tuple, list[FullBirthHistory]] = {}
    for rec in records:
        classes.setdefault((rec.covariates, rec.survey_year), []).append(rec)
    out = []
    for (cov, survey_year), group in sorted(
            classes.items(), key=lambda kv: (kv[0][1], str(kv[0][0]))):
        starts = [
            int(years[0]) for r in group
            for years in (woman_candidate_grid(r.mother_age_at_survey,
                                               survey_year, settings)[1],)
            if years.size
        ]
        # Women at the minimum fertile age have empty grids; fall back to a
        # one-year window so the class still round-trips.
        year_start = min(starts) if starts else survey_year
        n_years = survey_year - year_start + 1
        cfg = settings.ages
        n_ages = cfg.max_fertile_age - cfg.min_fertile_age + 1
        births = np.zeros((n_ages, n_years), dtype=np.int64)
        exposure_f = np.zeros((n_ages, n_years), dtype=np.int64)
        survivors = np.zeros(n_years, dtype=np.int64)
        deaths = np.zeros((n_years, n_years), dtype=np.int64)
        for rec in group:
            ages, years = woman_candidate_grid(rec.mother_age_at_survey,
                                               survey_year, settings)
            exposure_f[ages - cfg.min_fertile_age, years - year_start] += 1
            for child in rec.children:
                m = rec.mother_age_at_survey - (survey_year - child.birth_year)
                births[m - cfg.min_fertile_age,
                       child.birth_year - year_start] += 1
                if child.death_year is None:
                    survivors[child.birth_year - year_start] += 1
                else:
                    if (child.death_year == child.birth_year
                            and child.birth_year != survey_year):
                        raise ValueError(
                            "death in the birth year is only representable "
                            "for survey-year births")
                    deaths[child.birth_year - year_start,
                           child.death_year - year_start] += 1
        out.append(ClassGrids(cov, survey_year, year_start, births,
                              exposure_f, survivors, deaths))
    return out


def child_trial_grids(grids: ClassGrids) -> tuple[np.ndarray, np.ndarray,
                                                  int, int]:
    """Expand per-birth-year counts into age-by-year Bernoulli trial grids.

    A survivor born in t_b is at risk at ages 0..span-1 in years
    t_b..survey_year-1; a child dying in t_d is at risk at ages 0..a_d with
    the event at (a_d, t_d - 1), a_d = t_d - t_b - 1. Survey-year births
    fold onto a single age-0 trial reported separately as (folded_n,
    folded_y) since that trial carries the partial-exposure factor.
    """
    n_years = grids.survivors.size
    survey_idx = grids.survey_year - grids.year_start
    max_span = survey_idx  # ages 0 .. max_span-1
    exposure = np.zeros((max(max_span, 1), n_years), dtype=np.int64)
    events = np.zeros_like(exposure)
    folded_n = 0
    folded_y = 0
    for tb_idx in range(n_years):
        span = survey_idx - tb_idx
        if span <= 0:
            folded_y += int(grids.deaths[tb_idx, tb_idx])
            folded_n += int(grids.survivors[tb_idx]
                            + grids.deaths[tb_idx, tb_idx])
            continue
        n_surv = int(grids.survivors[tb_idx])
        a = np.arange(span)
        if n_surv:
            exposure[a, tb_idx + a] += n_surv
        row = grids.deaths[tb_idx]
        if row.any():
            td_idx = np.arange(tb_idx + 1, min(survey_idx, n_years - 1) + 1)
            counts = row[td_idx]
            a_d = td_idx - tb_idx - 1
            events[a_d, td_idx - 1] += counts
            # exposure at age a for every child whose death age is >= a
            suffix = np.cumsum(counts[::-1])[::-1]
            exposure[a_d, tb_idx + a_d] += suffix
    return exposure, events, folded_n, folded_y


# ---------------------------------------------------------------------------
# Cell layouts: fixed mapping from grid coordinates to binomial cells

class CellLayout:
    """Maps one covariate class's trial grids into cells of a ModelSpec.

    The cell universe (design rows and k values) is fixed at construction;
    per-iteration calls only refill y and N, so the expensive unique-row
    work happens once per dataset.
    """

    def __init__(self, spec: ModelSpec, cov: CovariateProfile,
                 survey_year: int, year_start: int, n_years: int,
                 settings: TabulationSettings = TabulationSettings(),
                 hiv: Optional[HivFactors] = None):
        self.spec = spec
        self.cov = cov
        self.survey_year = survey_year
        self.year_start = year_start
        self.n_years = n_years
        self.settings = settings
        years = year_start + np.arange(n_years)
        if spec.response == "fertility":
            cfg = settings.ages
            ages = np.arange(cfg.min_fertile_age, cfg.max_fertile_age + 1)
            age_grid, year_grid = np.meshgrid(ages, years, indexing="ij")
            k_grid = np.ones(age_grid.shape)
            if settings.allow_survey_year_births:
                k_grid[:, year_grid[0] == survey_year] = \
                    settings.survey_year_fertility_factor
            self.shape = age_grid.shape
            self._build(age_grid, year_grid, k_grid)
            self.folded_row = None
        else:
            max_span = max(survey_year - year_start, 1)
            child_ages = np.arange(max_span)
            age_grid, year_grid = np.meshgrid(child_ages, years, indexing="ij")
            hiv_vec = (hiv.vector(cov.survey_id, years) if hiv is not None
                       else np.ones(n_years))
            k_grid = np.broadcast_to(hiv_vec, age_grid.shape).copy()
            self.shape = age_grid.shape
            self._build(age_grid, year_grid, k_grid)
            if settings.allow_survey_year_births:
                k_fold = (settings.survey_year_hazard_factor
                          * (hiv.factor(cov.survey_id, survey_year)
                             if hiv is not None else 1.0))
                self.folded_row = self._add_cell(
                    np.array(0), np.array(survey_year), k_fold)
            else:
                self.folded_row = None

    def _coordinate_keys(self, age_grid, year_grid):
        idx_list = self.spec.term_indices(age_grid.ravel(), year_grid.ravel(),
                                          self.cov)
        if idx_list:
            return np.stack(idx_list, axis=1)
        return np.zeros((age_grid.size, 0), dtype=np.int64)

    def _build(self, age_grid, year_grid, k_grid):
        keys = self._coordinate_keys(age_grid, year_grid)
        k_codes, k_values = _encode(k_grid.ravel())
        full = np.column_stack([keys, k_codes])
        uniq, inverse = np.unique(full, axis=0, return_inverse=True)
        self.cell_of = inverse.reshape(self.shape)
        self._k_values = k_values
        self._unique = uniq
        self.n_cells = uniq.shape[0]
        self.k = k_values[uniq[:, -1]]
        self.X = self._rows_from_keys(uniq[:, :-1])

    def _rows_from_keys(self, key_rows):
        spec = self.spec
        X = np.zeros((key_rows.shape[0], spec.n_beta + spec.n_phi))
        col = 0
        for t in spec.beta_terms:
            idx = key_rows[:, col]
            ok = idx >= 0
            X[np.flatnonzero(ok), t.offset + idx[ok]] = 1.0
            col += 1
        if spec.phi_index_fn is not None:
            idx = key_rows[:, col]
            ok = idx >= 0
            X[np.flatnonzero(ok), spec.n_beta + idx[ok]] = 1.0
        return X

    def _add_cell(self, age, year, k) -> int:
        idx_list = self.spec.term_indices(age, year, self.cov)
        key = np.array([int(i) for i in idx_list], dtype=np.int64)
        row_key = key.reshape(1, -1)
        X_extra = self._rows_from_keys(row_key)
        self.X = np.vstack([self.X, X_extra])
        self.k = np.append(self.k, k)
        self.n_cells += 1
        return self.n_cells - 1

    def fill(self, y_grid: np.ndarray, n_grid: np.ndarray,
             folded_n: int = 0, folded_y: int = 0) -> tuple[np.ndarray, np.ndarray]:
        y = np.bincount(self.cell_of.ravel(), weights=y_grid.ravel(),
                        minlength=self.n_cells)
        n = np.bincount(self.cell_of.ravel(), weights=n_grid.ravel(),
                        minlength=self.n_cells)
        if self.folded_row is not None:
            y[self.folded_row] += folded_y
            n[self.folded_row] += folded_n
        elif folded_n or folded_y:
            raise ValueError("folded trials present but layout has no "
                             "survey-year birth cell")
        return y, n


def _encode(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    uniq, inverse = np.unique(np.round(values, 12), return_inverse=True)
    return inverse, uniq


def build_design(records: Sequence[FullBirthHistory], spec: ModelSpec,
                 settings: TabulationSettings = TabulationSettings(),
                 hiv: Optional[HivFactors] = None) -> CellTable:
    """Aggregate Bernoulli trials from complete records into binomial cells.

    ``records`` should include both observed FBH and any augmented
    histories (converted to FullBirthHistory), each carrying its own
    covariates so SBH-origin rows pick up the bias columns.
    """
    grid_list = grids_from_records(records, settings)
    xs, ys, ns, ks = [], [], [], []
    for grids in grid_list:
        layout = CellLayout(spec, grids.cov, grids.survey_year,
                            grids.year_start, grids.births.shape[1],
                            settings, hiv)
        if spec.response == "fertility":
            y, n = layout.fill(grids.births, grids.exposure_f)
        else:
            exposure, events, folded_n, folded_y = child_trial_grids(grids)
            y, n = layout.fill(events, exposure, folded_n, folded_y)
        keep = (n > 0) | (y > 0)
        xs.append(layout.X[keep])
        ys.append(y[keep])
        ns.append(n[keep])
        ks.append(layout.k[keep])
    if not xs:
        return CellTable(np.zeros((0, spec.n_beta + spec.n_phi)),
                         np.zeros(0), np.zeros(0), np.zeros(0), spec.n_beta)
    return CellTable(np.vstack(xs), np.concatenate(ys), np.concatenate(ns),
                     np.concatenate(ks), spec.n_beta)


# ---------------------------------------------------------------------------
# Prediction helpers

def q5_from_state(spec: ModelSpec, state: ParameterState, years,
                  cov: Optional[CovariateProfile] = None) -> np.ndarray:
    """Under-five mortality per year from a hazard-model state, using the
    prediction design (bias columns excluded)."""
    years = np.atleast_1d(np.asarray(years))
    ages = np.arange(5)
    q = spec.probability(state, ages[:, None], years[None, :], cov,
                         prediction=True)
    return 1.0 - np.prod(1.0 - q, axis=0)
