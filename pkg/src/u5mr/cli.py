"""Batch front end: one subcommand per pipeline stage plus manifest replay.

Every stage writes its artifacts into the output directory together with a
``manifest.json`` recording the fully resolved configuration, input file
hashes, output file hashes, library versions, and wall-clock time. The
``rerun`` subcommand replays a manifest into a fresh directory; all data
artifacts are byte-identical on replay (the manifest itself differs only in
its timing field).

Exit codes: 0 success, 2 schema/configuration error, 3 numerical failure,
4 infeasible-record fraction above threshold.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
import time
import warnings
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit, logit

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .augment import DaSettings
from .brass import (
    IndirectEstimate,
    indirect_estimates,
    load_life_table_ratios,
    load_trussell_coefficients,
)
from .core import CovariateProfile
from .dataio import (
    SchemaError,
    emit_fbh,
    emit_sbh,
    read_fbh,
    read_hiv_factors,
    read_sbh,
)
from .direct import (
    DirectEstimate,
    adjust_direct,
    adjust_indirect,
    direct_estimate,
    fuse,
    make_periods,
    period_label,
)
from .evaluate import (
    EvaluationInput,
    PopulationCounts,
    aggregate_q5,
    metrics_table,
    pare,
    weighted_mse,
)
from .hmc import HmcConfig, fertility_posterior_draws, q5_posterior_draws, run_mcmc
from .posterior import (
    malawi_fertility_spec,
    malawi_hazard_spec,
    simulation_fertility_spec,
    simulation_hazard_spec,
)
from .simulate import SimulationConfig, SimulationTruth, simulate_cohort

EXIT_OK = 0
EXIT_SCHEMA = 2
EXIT_NUMERICAL = 3
EXIT_INFEASIBLE = 4

ESTIMATE_COLUMNS = ("method", "district", "period_start", "period_end",
                    "theta_mean", "theta_var", "q5", "lower", "upper")


class NumericalFailure(RuntimeError):
    pass


class InfeasibleData(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Plumbing

def _fail(kind: str, detail: str) -> None:
    print(json.dumps({"error": kind, "detail": detail}), file=sys.stderr)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _section(config: dict, name: str) -> dict:
    section = config.get(name, {})
    if not isinstance(section, dict):
        raise SchemaError(f"config section [{name}] must be a table")
    return section


def _resolve(defaults: dict, section: dict, overrides: dict) -> dict:
    """defaults <- config file section <- command-line overrides."""
    out = dict(defaults)
    for key, val in section.items():
        if key not in defaults:
            raise SchemaError(f"unknown config key {key!r}")
        out[key] = val
    for key, val in overrides.items():
        if val is not None:
            out[key] = val
    return out


def _write_manifest(outdir: Path, command: str, resolved: dict,
                    inputs: dict[str, str], elapsed: float) -> None:
    import scipy

    outputs = {}
    for path in sorted(outdir.iterdir()):
        if path.name != "manifest.json" and path.is_file():
            outputs[path.name] = _sha256(path)
    manifest = {
        "command": command,
        "config": resolved,
        "inputs": {name: {"path": str(Path(p).resolve()),
                          "sha256": _sha256(Path(p))}
                   for name, p in inputs.items()},
        "outputs": outputs,
        "versions": {
            "package": __version__,
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "elapsed_seconds": round(elapsed, 3),
    }
    with open(outdir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _outdir(resolved: dict) -> Path:
    out = Path(resolved["output"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_rejects(outdir: Path, rejects, n_rows: int,
                   max_fraction: float) -> None:
    if rejects:
        with open(outdir / "rejects.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(("line", "woman_id", "reason"))
            for r in rejects:
                writer.writerow((r.line, r.woman_id, r.reason))
        print(f"{len(rejects)} of {n_rows} rows rejected "
              f"(see rejects.csv)", file=sys.stderr)
    if n_rows and len(rejects) / n_rows > max_fraction:
        raise InfeasibleData(
            f"{len(rejects)}/{n_rows} rows rejected, above the "
            f"{max_fraction:.2%} threshold")


def _fmt(value: float) -> str:
    return repr(float(value))


def _write_estimates(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ESTIMATE_COLUMNS)
        for row in rows:
            writer.writerow([row["method"], row["district"],
                             row["period"][0], row["period"][1],
                             _fmt(row["theta_mean"]), _fmt(row["theta_var"]),
                             _fmt(row["q5"]), _fmt(row["lower"]),
                             _fmt(row["upper"])])


def _read_estimates(path: str) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in ESTIMATE_COLUMNS
                   if c not in (reader.fieldnames or [])]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        out = []
        for row in reader:
            out.append({
                "method": row["method"],
                "district": row["district"],
                "period": (int(row["period_start"]), int(row["period_end"])),
                "theta_mean": float(row["theta_mean"]),
                "theta_var": float(row["theta_var"]),
                "q5": float(row["q5"]),
            })
    return out


def _interval_row(method: str, district: str, period, theta: float,
                  variance: float) -> dict:
    se = math.sqrt(variance)
    return {"method": method, "district": district, "period": tuple(period),
            "theta_mean": theta, "theta_var": variance,
            "q5": float(expit(theta)),
            "lower": float(expit(theta - 1.96 * se)),
            "upper": float(expit(theta + 1.96 * se))}


# ---------------------------------------------------------------------------
# simulate

SIMULATE_DEFAULTS = {
    "n_women": 5000,
    "n_fbh": 1000,
    "survey_year": 2010,
    "seed": 0,
    "output": "run-simulate",
}


def run_simulate(resolved: dict) -> int:
    outdir = _outdir(resolved)
    t0 = time.perf_counter()
    cfg = SimulationConfig(n_women=int(resolved["n_women"]),
                           n_fbh=int(resolved["n_fbh"]),
                           survey_year=int(resolved["survey_year"]),
                           rng_seed=int(resolved["seed"]))
    fbh, sbh, truth = simulate_cohort(cfg)
    emit_fbh(fbh, str(outdir / "fbh.csv"))
    emit_sbh(sbh, str(outdir / "sbh.csv"))
    with open(outdir / "truth.json", "w") as fh:
        json.dump(truth, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(outdir, "simulate", resolved, {},
                    time.perf_counter() - t0)
    print(f"wrote {len(fbh)} FBH and {len(sbh)} SBH records to {outdir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# fit

FIT_DEFAULTS = {
    "fbh": None,
    "sbh": "",
    "hiv": "",
    "preset": "simulation",
    "method": "",
    "allow_survey_year_births": False,
    "warmup": 1000,
    "chain_length": 5000,
    "thin": 5,
    "leapfrog_steps": 25,
    "step_size": 0.1,
    "target_acceptance": 0.8,
    "seed": 0,
    "aggregate_seed": 1,
    "period_start": 1975,
    "period_end": 2009,
    "period_width": 5,
    "max_psr": 0.0,
    "max_reject_fraction": 0.05,
    "output": "run-fit",
}


def _specs_for_preset(preset: str, records):
    if preset == "simulation":
        return simulation_fertility_spec(), simulation_hazard_spec()
    if preset == "malawi":
        districts = sorted({r.covariates.district for r in records})
        return malawi_fertility_spec(), malawi_hazard_spec(districts)
    raise SchemaError(f"unknown preset {preset!r}")


def run_fit(resolved: dict) -> int:
    if not resolved["fbh"]:
        raise SchemaError("fit requires --fbh")
    outdir = _outdir(resolved)
    t0 = time.perf_counter()
    inputs = {"fbh": resolved["fbh"]}
    allow = bool(resolved["allow_survey_year_births"])
    fbh_in = read_fbh(resolved["fbh"], allow_survey_year_births=allow)
    rejects = list(fbh_in.rejects)
    n_rows = fbh_in.n_rows
    sbh_records = []
    if resolved["sbh"]:
        inputs["sbh"] = resolved["sbh"]
        sbh_in = read_sbh(resolved["sbh"],
                          allow_survey_year_births=allow)
        rejects += sbh_in.rejects
        n_rows += sbh_in.n_rows
        sbh_records = sbh_in.records
    _write_rejects(outdir, rejects, n_rows,
                   float(resolved["max_reject_fraction"]))
    hiv = None
    if resolved["hiv"]:
        inputs["hiv"] = resolved["hiv"]
        hiv = read_hiv_factors(resolved["hiv"])

    records = fbh_in.records + sbh_records
    spec_f, spec_h = _specs_for_preset(resolved["preset"], records)
    hmc_cfg = HmcConfig(step_size=float(resolved["step_size"]),
                        leapfrog_steps=int(resolved["leapfrog_steps"]),
                        warmup_iterations=int(resolved["warmup"]),
                        target_acceptance=float(
                            resolved["target_acceptance"]),
                        chain_length=int(resolved["chain_length"]),
                        thin=int(resolved["thin"]),
                        seed=int(resolved["seed"]))
    da = DaSettings(allow_survey_year_births=allow)
    out = run_mcmc(fbh_in.records, sbh_records, spec_f, spec_h, hmc_cfg,
                   da, hiv)

    if sbh_records:
        frac = len(out.da.infeasible_ids) / len(sbh_records)
        if frac > float(resolved["max_reject_fraction"]):
            raise InfeasibleData(
                f"{len(out.da.infeasible_ids)} SBH records infeasible "
                f"({frac:.2%})")
    for md in (out.fertility, out.hazard):
        if not np.all(np.isfinite(md.draws)):
            raise NumericalFailure("nonfinite draws in the chain")
    max_psr = float(resolved["max_psr"])
    if max_psr > 0 and out.max_psr and max(out.max_psr.values()) > max_psr:
        raise NumericalFailure(
            f"potential scale reduction {out.max_psr} above {max_psr}")

    out.write_csv(outdir / "chain.csv")
    summary = out.summary()
    summary.pop("elapsed_seconds", None)  # byte-stable artifacts
    with open(outdir / "fit_summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")

    _write_fit_estimates(resolved, outdir, records, spec_f, spec_h, out)
    _write_manifest(outdir, "fit", resolved, inputs,
                    time.perf_counter() - t0)
    psr = ({k: round(v, 3) for k, v in out.max_psr.items()}
           if out.max_psr else {})
    print(f"fit complete: {out.fertility.draws.shape[0]} retained draws, "
          f"psr {psr}")
    return EXIT_OK


def _write_fit_estimates(resolved, outdir, records, spec_f, spec_h, out):
    """Aggregate posterior draws to period/district rows plus a yearly
    series."""
    survey_year = max(r.survey_year for r in records)
    year_lo = min(int(resolved["period_start"]) + 1,
                  survey_year - 34)
    years = np.arange(year_lo, survey_year)
    classes = sorted({(r.covariates.district, r.covariates.strata)
                      for r in records})
    method = resolved["method"] or (
        "fbh_sbh" if resolved["sbh"] else "fbh_only")

    q5_samples = {}
    fert_samples = {}
    ages = np.arange(15, 50)
    mesh_a, mesh_t = [g.ravel() for g in np.meshgrid(ages, years,
                                                     indexing="ij")]
    for (district, strata) in classes:
        cov = CovariateProfile(district=district, strata=strata,
                               survey_id="", is_sbh=False)
        q5_samples[(district, strata)] = q5_posterior_draws(
            spec_h, out.hazard, years, cov)
        flat = fertility_posterior_draws(spec_f, out.fertility,
                                         mesh_a, mesh_t, cov)
        fert_samples[(district, strata)] = flat.reshape(
            -1, ages.size, years.size)

    pop = PopulationCounts.from_records(records, years)
    for key in classes:
        if key not in pop.cells:
            pop.cells[key] = np.zeros((ages.size, years.size),
                                      dtype=np.int64)
    periods = make_periods(int(resolved["period_start"]),
                           int(resolved["period_end"]),
                           int(resolved["period_width"]))
    agg = aggregate_q5(q5_samples, fert_samples, pop, periods,
                       rng=int(resolved["aggregate_seed"]))

    rows = []
    for (period, district), draws in sorted(agg.items()):
        theta = logit(np.clip(draws, 1e-12, 1 - 1e-12))
        rows.append({"method": method, "district": district,
                     "period": period,
                     "theta_mean": float(np.mean(theta)),
                     "theta_var": float(np.var(theta, ddof=1)),
                     "q5": float(np.median(draws)),
                     "lower": float(np.quantile(draws, 0.025)),
                     "upper": float(np.quantile(draws, 0.975))})
    _write_estimates(outdir / "estimates.csv", rows)

    with open(outdir / "q5_series.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("district", "strata", "year", "q5_median",
                         "q5_lower", "q5_upper"))
        for (district, strata) in classes:
            draws = q5_samples[(district, strata)]
            for i, year in enumerate(years):
                writer.writerow((district, strata, int(year),
                                 _fmt(np.median(draws[:, i])),
                                 _fmt(np.quantile(draws[:, i], 0.025)),
                                 _fmt(np.quantile(draws[:, i], 0.975))))


# ---------------------------------------------------------------------------
# brass

BRASS_DEFAULTS = {
    "sbh": None,
    "family": "North",
    "coefficients": "",
    "life_tables": "",
    "jackknife": True,
    "max_reject_fraction": 0.05,
    "output": "run-brass",
}

INDIRECT_COLUMNS = ("survey_id", "age_group", "x", "q_x", "reference_time",
                    "q5", "logit_q5", "variance", "n_replicates",
                    "discouraged")


def run_brass(resolved: dict) -> int:
    if not resolved["sbh"]:
        raise SchemaError("brass requires --sbh")
    outdir = _outdir(resolved)
    t0 = time.perf_counter()
    inputs = {"sbh": resolved["sbh"]}
    sbh_in = read_sbh(resolved["sbh"])
    _write_rejects(outdir, sbh_in.rejects, sbh_in.n_rows,
                   float(resolved["max_reject_fraction"]))
    coeffs = load_trussell_coefficients(resolved["coefficients"] or None)
    ratios = load_life_table_ratios(resolved["life_tables"] or None)
    if resolved["coefficients"]:
        inputs["coefficients"] = resolved["coefficients"]
    if resolved["life_tables"]:
        inputs["life_tables"] = resolved["life_tables"]

    by_survey: dict[str, list] = {}
    for rec in sbh_in.records:
        by_survey.setdefault(rec.covariates.survey_id, []).append(rec)
    with open(outdir / "indirect.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(INDIRECT_COLUMNS)
        for survey_id in sorted(by_survey):
            ests = indirect_estimates(by_survey[survey_id], coeffs, ratios,
                                      resolved["family"],
                                      jackknife=bool(resolved["jackknife"]))
            for e in ests:
                writer.writerow((survey_id, e.age_group, e.x, _fmt(e.q_x),
                                 _fmt(e.reference_time), _fmt(e.q5),
                                 _fmt(e.logit_q5),
                                 "" if e.variance is None
                                 else _fmt(e.variance),
                                 e.n_replicates, int(e.discouraged)))
    _write_manifest(outdir, "brass", resolved, inputs,
                    time.perf_counter() - t0)
    print(f"wrote indirect estimates for {len(by_survey)} survey(s)")
    return EXIT_OK


def _read_indirect(path: str) -> list[tuple[str, IndirectEstimate]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in INDIRECT_COLUMNS
                   if c not in (reader.fieldnames or [])]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        out = []
        for row in reader:
            variance = row["variance"]
            out.append((row["survey_id"], IndirectEstimate(
                age_group=row["age_group"], x=int(row["x"]),
                q_x=float(row["q_x"]),
                reference_time=float(row["reference_time"]),
                q5=float(row["q5"]), logit_q5=float(row["logit_q5"]),
                variance=None if variance == "" else float(variance),
                n_replicates=int(row["n_replicates"]),
                discouraged=bool(int(row["discouraged"])))))
    return out


# ---------------------------------------------------------------------------
# direct

DIRECT_DEFAULTS = {
    "fbh": None,
    "period_start": 1975,
    "period_end": 2009,
    "period_width": 5,
    "max_reject_fraction": 0.05,
    "output": "run-direct",
}

DIRECT_COLUMNS = ("survey_id", "period_start", "period_end", "theta",
                  "variance", "q5", "lower", "upper", "n_clusters")


def run_direct(resolved: dict) -> int:
    if not resolved["fbh"]:
        raise SchemaError("direct requires --fbh")
    outdir = _outdir(resolved)
    t0 = time.perf_counter()
    fbh_in = read_fbh(resolved["fbh"])
    _write_rejects(outdir, fbh_in.rejects, fbh_in.n_rows,
                   float(resolved["max_reject_fraction"]))
    periods = make_periods(int(resolved["period_start"]),
                           int(resolved["period_end"]),
                           int(resolved["period_width"]))
    by_survey: dict[str, list] = {}
    for rec in fbh_in.records:
        by_survey.setdefault(rec.covariates.survey_id, []).append(rec)
    n_written = 0
    with open(outdir / "direct.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(DIRECT_COLUMNS)
        for survey_id in sorted(by_survey):
            for period in periods:
                est = direct_estimate(by_survey[survey_id], period)
                if est is None:
                    continue
                se = math.sqrt(est.variance)
                writer.writerow((survey_id, period[0], period[1],
                                 _fmt(est.theta), _fmt(est.variance),
                                 _fmt(est.q5),
                                 _fmt(expit(est.theta - 1.96 * se)),
                                 _fmt(expit(est.theta + 1.96 * se)),
                                 est.n_clusters))
                n_written += 1
    _write_manifest(outdir, "direct", resolved, {"fbh": resolved["fbh"]},
                    time.perf_counter() - t0)
    print(f"wrote {n_written} direct estimates")
    return EXIT_OK


def _read_direct(path: str) -> list[DirectEstimate]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in DIRECT_COLUMNS
                   if c not in (reader.fieldnames or [])]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        return [DirectEstimate(row["survey_id"],
                               (int(row["period_start"]),
                                int(row["period_end"])),
                               float(row["theta"]), float(row["variance"]),
                               int(row["n_clusters"]))
                for row in reader]


# ---------------------------------------------------------------------------
# combine

COMBINE_DEFAULTS = {
    "direct": None,
    "indirect": "",
    "hiv": "",
    "hiv_draws": 100_000,
    "hiv_seed": 0,
    "include_discouraged": False,
    "period_start": 1975,
    "period_end": 2009,
    "period_width": 5,
    "method": "direct_brass",
    "output": "run-combine",
}


def run_combine(resolved: dict) -> int:
    if not resolved["direct"]:
        raise SchemaError("combine requires --direct")
    outdir = _outdir(resolved)
    t0 = time.perf_counter()
    inputs = {"direct": resolved["direct"]}
    direct_ests = _read_direct(resolved["direct"])
    indirect_ests = []
    if resolved["indirect"]:
        inputs["indirect"] = resolved["indirect"]
        indirect_ests = _read_indirect(resolved["indirect"])

    if resolved["hiv"]:
        inputs["hiv"] = resolved["hiv"]
        factors = read_hiv_factors(resolved["hiv"])
        rng = np.random.default_rng(int(resolved["hiv_seed"]))
        n_draws = int(resolved["hiv_draws"])
        direct_ests = [
            adjust_direct(est,
                          factors.factor(est.survey_id,
                                         (est.period[0] + est.period[1])
                                         // 2),
                          n_draws, rng)
            for est in direct_ests]
        indirect_ests = [
            (survey_id,
             adjust_indirect(est,
                             factors.factor(survey_id,
                                            math.floor(est.reference_time)),
                             n_draws, rng)
             if est.variance is not None else est)
            for survey_id, est in indirect_ests]

    periods = make_periods(int(resolved["period_start"]),
                           int(resolved["period_end"]),
                           int(resolved["period_width"]))
    rows = []
    fused_rows = []
    for period in periods:
        fz = fuse(direct_ests, [e for _, e in indirect_ests], period,
                  include_discouraged=bool(resolved["include_discouraged"]))
        if fz is None:
            continue
        fused_rows.append(fz)
        rows.append(_interval_row(resolved["method"], "", period, fz.theta,
                                  fz.variance))
    _write_estimates(outdir / "estimates.csv", rows)
    with open(outdir / "fused.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("period_start", "period_end", "theta", "variance",
                         "q5", "sources"))
        for fz in fused_rows:
            writer.writerow((fz.period[0], fz.period[1], _fmt(fz.theta),
                             _fmt(fz.variance), _fmt(fz.q5),
                             "|".join(fz.sources)))
    _write_manifest(outdir, "combine", resolved, inputs,
                    time.perf_counter() - t0)
    print(f"wrote {len(fused_rows)} fused estimates")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate

EVALUATE_DEFAULTS = {
    "estimates": None,         # comma-separated list of estimate CSVs
    "holdout_fbh": None,
    "literal_ninth": False,
    "period_start": 1975,
    "period_end": 2009,
    "period_width": 5,
    "max_reject_fraction": 0.05,
    "output": "run-evaluate",
}


def run_evaluate(resolved: dict) -> int:
    if not resolved["estimates"] or not resolved["holdout_fbh"]:
        raise SchemaError("evaluate requires --estimates and --holdout-fbh")
    outdir = _outdir(resolved)
    t0 = time.perf_counter()
    est_paths = [p for p in str(resolved["estimates"]).split(",") if p]
    inputs = {f"estimates_{i}": p for i, p in enumerate(est_paths)}
    inputs["holdout_fbh"] = resolved["holdout_fbh"]

    holdout_in = read_fbh(resolved["holdout_fbh"])
    _write_rejects(outdir, holdout_in.rejects, holdout_in.n_rows,
                   float(resolved["max_reject_fraction"]))
    periods = make_periods(int(resolved["period_start"]),
                           int(resolved["period_end"]),
                           int(resolved["period_width"]))

    by_district: dict[str, list] = {}
    for rec in holdout_in.records:
        by_district.setdefault(rec.covariates.district, []).append(rec)
    holdout: dict[tuple[str, tuple], tuple[float, float]] = {}
    holdout_q5: dict[tuple[str, tuple], float] = {}
    holdout_var: dict[tuple[str, tuple], float] = {}
    for district in sorted(by_district):
        for period in periods:
            est = direct_estimate(by_district[district], period)
            if est is None:
                continue
            key = (district, tuple(period))
            holdout[key] = (est.theta, est.variance)
            holdout_q5[key] = est.q5
            holdout_var[key] = est.variance

    mse_by_model: dict[str, dict] = {}
    pare_by_model: dict[str, dict] = {}
    for path in est_paths:
        for row in _read_estimates(path):
            method = row["method"]
            key = (row["district"], row["period"])
            mse_by_model.setdefault(method, {})[key] = (
                row["theta_mean"], row["theta_var"])
            pare_by_model.setdefault(method, {})[key] = row["q5"]

    mse_table: dict[str, dict] = {}
    pare_table: dict[str, dict] = {}
    for method in sorted(mse_by_model):
        ev = EvaluationInput(model=mse_by_model[method], holdout=holdout)
        mse_table[method] = {}
        pare_table[method] = {}
        for period in periods:
            res = weighted_mse(ev, period)
            if res is not None:
                mse_table[method][tuple(period)] = res.total
            pr = pare(pare_by_model[method], holdout_q5, holdout_var,
                      period, literal_ninth=bool(resolved["literal_ninth"]))
            if pr is not None:
                pare_table[method][tuple(period)] = pr

    used_periods = [p for p in periods
                    if any(tuple(p) in mse_table[m] or tuple(p)
                           in pare_table[m] for m in mse_table)]
    for name, table, scale in (("mse.csv", mse_table, 100.0),
                               ("pare.csv", pare_table, 1.0)):
        with open(outdir / name, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            for row in metrics_table(table, used_periods, scale=scale):
                writer.writerow(row)
    _write_manifest(outdir, "evaluate", resolved, inputs,
                    time.perf_counter() - t0)
    print(f"evaluated {len(mse_table)} model(s) over "
          f"{len(used_periods)} period(s)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# report

REPORT_DEFAULTS = {"run": None, "output": "run-report"}


def run_report(resolved: dict) -> int:
    if not resolved["run"]:
        raise SchemaError("report requires --run")
    rundir = Path(resolved["run"])
    manifest_path = rundir / "manifest.json"
    if not manifest_path.exists():
        raise SchemaError(f"no manifest.json under {rundir}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    print(f"command: {manifest['command']}")
    print(f"package: {manifest['versions']['package']}  "
          f"elapsed: {manifest['elapsed_seconds']}s")
    for name in sorted(manifest["outputs"]):
        print(f"  output {name} sha256 {manifest['outputs'][name][:12]}...")
    for name in ("fit_summary.json",):
        path = rundir / name
        if path.exists():
            with open(path) as fh:
                print(json.dumps(json.load(fh), indent=2, sort_keys=True))
    for name in ("mse.csv", "pare.csv", "fused.csv", "estimates.csv"):
        path = rundir / name
        if path.exists():
            print(f"--- {name} ---")
            print(path.read_text().rstrip())
    return EXIT_OK


# ---------------------------------------------------------------------------
# rerun

COMMANDS = {
    "simulate": (SIMULATE_DEFAULTS, run_simulate),
    "fit": (FIT_DEFAULTS, run_fit),
    "brass": (BRASS_DEFAULTS, run_brass),
    "direct": (DIRECT_DEFAULTS, run_direct),
    "combine": (COMBINE_DEFAULTS, run_combine),
    "evaluate": (EVALUATE_DEFAULTS, run_evaluate),
    "report": (REPORT_DEFAULTS, run_report),
}


def run_rerun(resolved: dict) -> int:
    with open(resolved["manifest"]) as fh:
        manifest = json.load(fh)
    command = manifest["command"]
    if command not in COMMANDS or command == "report":
        raise SchemaError(f"cannot rerun command {command!r}")
    for name, info in manifest.get("inputs", {}).items():
        path = Path(info["path"])
        if not path.exists():
            raise SchemaError(f"input {name} missing: {path}")
        if _sha256(path) != info["sha256"]:
            raise SchemaError(f"input {name} changed since the recorded "
                              f"run: {path}")
    config = dict(manifest["config"])
    if resolved.get("output"):
        config["output"] = resolved["output"]
    return COMMANDS[command][1](config)


# ---------------------------------------------------------------------------
# argument parsing

def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="TOML configuration file")
    sub.add_argument("--seed", type=int, help="override the stage seed")
    sub.add_argument("--threads", type=int, default=1,
                     help="worker cap (stages currently run serially)")
    sub.add_argument("--output", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="u5mr",
        description="Under-five mortality estimation from full and summary "
                    "birth histories")
    subs = parser.add_subparsers(dest="command", required=True)

    sp = subs.add_parser("simulate", help="generate a synthetic cohort")
    _add_common(sp)
    sp.add_argument("--n-women", type=int, dest="n_women")
    sp.add_argument("--n-fbh", type=int, dest="n_fbh")

    sp = subs.add_parser("fit", help="Bayesian fit by MCMC with "
                                     "augmentation of SBH records")
    _add_common(sp)
    sp.add_argument("--fbh")
    sp.add_argument("--sbh")
    sp.add_argument("--hiv")
    sp.add_argument("--preset", choices=("simulation", "malawi"))
    sp.add_argument("--method", help="label for the estimates output")
    sp.add_argument("--warmup", type=int)
    sp.add_argument("--chain-length", type=int, dest="chain_length")
    sp.add_argument("--thin", type=int)

    sp = subs.add_parser("brass", help="indirect estimates from SBH data")
    _add_common(sp)
    sp.add_argument("--sbh")
    sp.add_argument("--family", choices=("North", "West", "South", "East"))
    sp.add_argument("--coefficients")
    sp.add_argument("--life-tables", dest="life_tables")

    sp = subs.add_parser("direct", help="design-based estimates from FBH "
                                        "data")
    _add_common(sp)
    sp.add_argument("--fbh")

    sp = subs.add_parser("combine", help="HIV-adjust and fuse direct and "
                                         "indirect estimates")
    _add_common(sp)
    sp.add_argument("--direct")
    sp.add_argument("--indirect")
    sp.add_argument("--hiv")

    sp = subs.add_parser("evaluate", help="holdout accuracy metrics")
    _add_common(sp)
    sp.add_argument("--estimates",
                    help="comma-separated estimate series CSVs")
    sp.add_argument("--holdout-fbh", dest="holdout_fbh")
    sp.add_argument("--literal-ninth", action="store_true", default=None,
                    dest="literal_ninth")

    sp = subs.add_parser("report", help="print a run's key artifacts")
    _add_common(sp)
    sp.add_argument("--run")

    sp = subs.add_parser("rerun", help="replay a recorded manifest")
    _add_common(sp)
    sp.add_argument("--manifest", required=True)
    return parser


def _overrides(args: argparse.Namespace, defaults: dict) -> dict:
    out = {}
    for key in defaults:
        if hasattr(args, key):
            out[key] = getattr(args, key)
    if getattr(args, "seed", None) is not None and "seed" in defaults:
        out["seed"] = args.seed
    if getattr(args, "output", None) is not None:
        out["output"] = args.output
    return out


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "rerun":
            return run_rerun({"manifest": args.manifest,
                              "output": args.output})
        defaults, handler = COMMANDS[args.command]
        config = _load_config(args.config)
        resolved = _resolve(defaults, _section(config, args.command),
                            _overrides(args, defaults))
        missing = [k for k, v in resolved.items() if v is None]
        if missing:
            raise SchemaError(f"missing required settings: {missing}")
        return handler(resolved)
    except SchemaError as exc:
        _fail("schema", str(exc))
        return EXIT_SCHEMA
    except InfeasibleData as exc:
        _fail("infeasible", str(exc))
        return EXIT_INFEASIBLE
    except NumericalFailure as exc:
        _fail("numerical", str(exc))
        return EXIT_NUMERICAL
    except FileNotFoundError as exc:
        _fail("schema", str(exc))
        return EXIT_SCHEMA
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        _fail("schema", str(exc))
        return EXIT_SCHEMA


if __name__ == "__main__":
    sys.exit(main())
